"""Encoder with a shared block, an expert-banked MLE block and an LID router.

All forward functions are batched: features are ``[B, T, F]`` with per-utterance
``lengths``; frames at or past an utterance's length are padding and never
influence valid frames (keys are masked, pooling is length-aware).

Expert banks are stored with a leading expert axis and gathered per utterance,
so a single backward pass touches only the rows that were routed to.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .errors import RoutingError, ShapeError
from .numerics import Tensor

_ATTN_MODULES = ("k", "q", "v", "o")


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    banked: bool = False
    group: str = "backbone"


def _conv2d4_out(feature_dim: int) -> int:
    return ((feature_dim - 1) // 2 - 1) // 2


def param_specs(cfg: ModelConfig) -> dict[str, ParamSpec]:
    """Name -> shape for every parameter; banked shapes carry the expert axis first."""
    d, E = cfg.d_model, cfg.num_experts
    specs: dict[str, ParamSpec] = {}
    if cfg.frontend == "linear":
        specs["frontend.w"] = ParamSpec((cfg.feature_dim, d))
        specs["frontend.b"] = ParamSpec((d,))
    else:
        f_out = _conv2d4_out(cfg.feature_dim)
        if f_out < 1:
            raise ShapeError(f"feature_dim {cfg.feature_dim} too small for conv2d4 frontend")
        specs["frontend.conv1.w"] = ParamSpec((d, 1, 3, 3))
        specs["frontend.conv1.b"] = ParamSpec((d,))
        specs["frontend.conv2.w"] = ParamSpec((d, d, 3, 3))
        specs["frontend.conv2.b"] = ParamSpec((d,))
        specs["frontend.out.w"] = ParamSpec((d * f_out, d))
        specs["frontend.out.b"] = ParamSpec((d,))

    for layer in range(cfg.num_layers):
        mle = layer >= cfg.num_shared
        p = f"layers.{layer}."

        def add(name, shape, module):
            banked = mle and module in cfg.moe_modules
            specs[p + name] = ParamSpec((E, *shape) if banked else shape, banked)

        specs[p + "ln1.g"] = ParamSpec((d,))
        specs[p + "ln1.b"] = ParamSpec((d,))
        for m in _ATTN_MODULES:
            add(f"attn.w{m}", (d, d), m)
        specs[p + "ln2.g"] = ParamSpec((d,))
        specs[p + "ln2.b"] = ParamSpec((d,))
        add("ffn.w1", (d, cfg.d_ffn), "f")
        add("ffn.b1", (cfg.d_ffn,), "f")
        add("ffn.w2", (cfg.d_ffn, d), "f")
        add("ffn.b2", (d,), "f")
    specs["final_ln.g"] = ParamSpec((d,))
    specs["final_ln.b"] = ParamSpec((d,))
    specs["output.w"] = ParamSpec((d, cfg.vocab_size))
    specs["output.b"] = ParamSpec((cfg.vocab_size,))

    if not cfg.is_vanilla:
        if cfg.router_kind == "linear":
            specs["router.w"] = ParamSpec((d, E), group="router")
            specs["router.b"] = ParamSpec((E,), group="router")
        else:
            C, cin = cfg.tdnn_channels, d
            for j, _ in enumerate(cfg.tdnn_dilations):
                specs[f"router.tdnn.{j}.w"] = ParamSpec((cfg.tdnn_width, cin, C), group="router")
                specs[f"router.tdnn.{j}.b"] = ParamSpec((C,), group="router")
                cin = C
            specs["router.ffn.w1"] = ParamSpec((2 * C, C), group="router")
            specs["router.ffn.b1"] = ParamSpec((C,), group="router")
            specs["router.ffn.w2"] = ParamSpec((C, E), group="router")
            specs["router.ffn.b2"] = ParamSpec((E,), group="router")
    return specs


def param_count(cfg: ModelConfig, mode: str = "train") -> int:
    """Parameter total; ``infer`` keeps a single expert per banked tensor."""
    if mode not in ("train", "infer"):
        raise ValueError("mode must be 'train' or 'infer'")
    total = 0
    for spec in param_specs(cfg).values():
        n = math.prod(spec.shape)
        if spec.banked and mode == "infer":
            n //= cfg.num_experts
        total += n
    return total


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    specs = param_specs(cfg)
    router = sum(math.prod(s.shape) for s in specs.values() if s.group == "router")
    banked = sum(math.prod(s.shape) for s in specs.values() if s.banked)
    return {
        "train": param_count(cfg, "train"),
        "infer": param_count(cfg, "infer"),
        "router": router,
        "expert_banks": banked,
        "per_expert": banked // cfg.num_experts if banked else 0,
    }


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    def is_banked(self, name: str) -> bool:
        return param_specs_cache(self.config)[name].banked

    def names(self, group: str | None = None) -> list[str]:
        specs = param_specs_cache(self.config)
        return [n for n in self.params if group is None or specs[n].group == group]

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})


_SPEC_CACHE: dict[ModelConfig, dict[str, ParamSpec]] = {}


def param_specs_cache(cfg: ModelConfig) -> dict[str, ParamSpec]:
    if cfg not in _SPEC_CACHE:
        _SPEC_CACHE[cfg] = param_specs(cfg)
    return _SPEC_CACHE[cfg]


def init_model(cfg: ModelConfig, seed: int = 0, identical_experts: bool = False,
               zero_residual: bool = False) -> Model:
    """Random initialisation.

    ``identical_experts`` copies expert 0 into every bank slot; ``zero_residual``
    zeroes the attention output and second FFN projection so every layer is an
    identity map.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, spec in param_specs(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        shape = spec.shape[1:] if spec.banked else spec.shape
        count = cfg.num_experts if spec.banked else 1
        slots = []
        for _ in range(1 if identical_experts else count):
            if leaf == "g":
                arr = np.ones(shape)
            elif leaf.startswith("b") or name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                if ".conv" in name:
                    fan_in = math.prod(shape[1:])
                else:
                    fan_in = math.prod(shape[:-1]) if len(shape) > 1 else shape[0]
                arr = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
                if zero_residual and (name.endswith("attn.wo") or name.endswith("ffn.w2")):
                    arr = np.zeros(shape)
            slots.append(arr)
        if spec.banked:
            data = np.stack(slots * count if identical_experts else slots)
        else:
            data = slots[0]
        params[name] = Tensor(data, name=name)
    return Model(cfg, params)


# --- forward ---------------------------------------------------------------

def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)[:, : d // 2]
    return pe


def frame_mask(lengths: Sequence[int], T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def _expert_index(model: Model, experts) -> np.ndarray:
    idx = np.asarray(experts, dtype=np.intp).reshape(-1)
    n = model.config.num_experts
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise RoutingError(f"expert index out of range [0, {n}): {idx.tolist()}")
    return idx


def _weight(model: Model, name: str, experts: np.ndarray | None, vector: bool = False) -> Tensor:
    """Parameter as used by the batch: banked tensors are gathered per utterance."""
    p = model.params[name]
    if not param_specs_cache(model.config)[name].banked:
        return p
    if experts is None:
        raise RoutingError(f"{name} is expert-banked but no routing was supplied")
    w = nx.take(p, experts)
    if vector:
        w = nx.reshape(w, (w.shape[0], 1, w.shape[1]))
    return w


def frontend_forward(model: Model, feats: Tensor, lengths: Sequence[int]) -> tuple[Tensor, np.ndarray]:
    cfg = model.config
    P = model.params
    lengths = np.asarray(lengths, dtype=np.intp)
    if feats.ndim != 3 or feats.shape[-1] != cfg.feature_dim:
        raise ShapeError(f"features must be [B, T, {cfg.feature_dim}], got {feats.shape}")
    if cfg.frontend == "linear":
        x = feats @ P["frontend.w"] + P["frontend.b"]
    else:
        B, T, F = feats.shape
        h = nx.reshape(feats, (B, 1, T, F))
        h = nx.relu(nx.conv2d(h, P["frontend.conv1.w"], 2, P["frontend.conv1.b"]))
        h = nx.relu(nx.conv2d(h, P["frontend.conv2.w"], 2, P["frontend.conv2.b"]))
        _, C, T2, F2 = h.shape
        h = nx.reshape(nx.transpose(h, (0, 2, 1, 3)), (B, T2, C * F2))
        x = h @ P["frontend.out.w"] + P["frontend.out.b"]
        lengths = np.maximum(((lengths - 1) // 2 - 1) // 2, 1)
    x = x + sinusoidal_positions(x.shape[1], cfg.d_model)
    return x, lengths


def attention_forward(model: Model, prefix: str, h: Tensor, key_mask: np.ndarray,
                      experts: np.ndarray | None) -> Tensor:
    """Multi-head self-attention whose k/q/v/o projections may be expert-gathered."""
    cfg = model.config
    B, T, d = h.shape
    H, dk = cfg.num_heads, cfg.d_head

    def heads(x):
        return nx.transpose(nx.reshape(x, (B, T, H, dk)), (0, 2, 1, 3))

    q = heads(h @ _weight(model, prefix + "attn.wq", experts))
    k = heads(h @ _weight(model, prefix + "attn.wk", experts))
    v = heads(h @ _weight(model, prefix + "attn.wv", experts))
    scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    scores = nx.masked_fill(scores, ~key_mask[:, None, None, :], -np.inf)
    a = nx.softmax(scores, axis=-1) @ v
    a = nx.reshape(nx.transpose(a, (0, 2, 1, 3)), (B, T, d))
    return a @ _weight(model, prefix + "attn.wo", experts)


def ffn_forward(model: Model, prefix: str, h: Tensor, experts: np.ndarray | None) -> Tensor:
    w1 = _weight(model, prefix + "ffn.w1", experts)
    b1 = _weight(model, prefix + "ffn.b1", experts, vector=True)
    w2 = _weight(model, prefix + "ffn.w2", experts)
    b2 = _weight(model, prefix + "ffn.b2", experts, vector=True)
    return nx.relu(h @ w1 + b1) @ w2 + b2


def layer_forward(model: Model, layer: int, x: Tensor, key_mask: np.ndarray,
                  experts: np.ndarray | None = None, dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual block; one expert index per utterance drives both sub-modules."""
    p = f"layers.{layer}."
    P = model.params
    h = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
    x = x + nx.dropout(attention_forward(model, p, h, key_mask, experts), dropout, rng)
    h = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
    return x + nx.dropout(ffn_forward(model, p, h, experts), dropout, rng)


def shared_block_forward(model: Model, feats: Tensor, lengths: Sequence[int],
                         dropout: float = 0.0, rng: np.random.Generator | None = None
                         ) -> tuple[Tensor, np.ndarray]:
    x, lengths = frontend_forward(model, feats, lengths)
    x = nx.dropout(x, dropout, rng)
    key_mask = frame_mask(lengths, x.shape[1])
    for layer in range(model.config.num_shared):
        x = layer_forward(model, layer, x, key_mask, None, dropout, rng)
    return x, lengths


def mle_block_forward(model: Model, x: Tensor, lengths: Sequence[int], experts,
                      dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Upper layers plus output projection; returns un-normalised vocab logits."""
    cfg = model.config
    experts = None if cfg.is_vanilla else _expert_index(model, experts)
    if experts is not None and experts.size != x.shape[0]:
        raise RoutingError(f"{experts.size} routing decisions for a batch of {x.shape[0]}")
    key_mask = frame_mask(lengths, x.shape[1])
    for layer in range(cfg.num_shared, cfg.num_layers):
        x = layer_forward(model, layer, x, key_mask, experts, dropout, rng)
    P = model.params
    x = nx.layer_norm(x, P["final_ln.g"], P["final_ln.b"])
    return x @ P["output.w"] + P["output.b"]


def _masked_stats(x: Tensor, mask: np.ndarray, lengths: np.ndarray, with_std: bool) -> Tensor:
    m = mask[:, :, None].astype(float)
    inv_len = (1.0 / lengths)[:, None]
    mu = nx.sum(x * m, axis=1) * inv_len
    if not with_std:
        return mu
    centred = (x - nx.reshape(mu, (mu.shape[0], 1, mu.shape[1]))) * m
    var = nx.sum(centred * centred, axis=1) * inv_len
    return nx.concat([mu, nx.sqrt(var + 1e-5)], axis=-1)


def router_forward(model: Model, shared_out: Tensor, lengths: Sequence[int]) -> Tensor:
    """Utterance-level language logits ``[B, n]`` from the shared-block output."""
    cfg = model.config
    if cfg.is_vanilla:
        raise RoutingError("a model without expert modules has no router")
    P = model.params
    lengths = np.asarray(lengths)
    mask = frame_mask(lengths, shared_out.shape[1])
    if cfg.router_kind == "linear":
        pooled = _masked_stats(shared_out, mask, lengths, with_std=False)
        return pooled @ P["router.w"] + P["router.b"]
    m = mask[:, :, None].astype(float)
    h = shared_out * m
    for j, dil in enumerate(cfg.tdnn_dilations):
        h = nx.relu(nx.conv1d(h, P[f"router.tdnn.{j}.w"], dil, P[f"router.tdnn.{j}.b"])) * m
    stats = _masked_stats(h, mask, lengths, with_std=True)
    hidden = nx.relu(stats @ P["router.ffn.w1"] + P["router.ffn.b1"])
    return hidden @ P["router.ffn.w2"] + P["router.ffn.b2"]


@dataclass
class EncoderOutput:
    logits: Tensor
    lid_logits: Tensor | None
    lengths: np.ndarray
    shared: Tensor


def encoder_forward(model: Model, feats: Tensor, lengths: Sequence[int], routing,
                    dropout: float = 0.0, rng: np.random.Generator | None = None) -> EncoderOutput:
    """Shared block, router, then the MLE block under ``routing``.

    ``routing`` is a sequence of expert indices (one per utterance), a sequence of
    :class:`~blrmoe.router.RoutingDecision`, or a callable that receives the LID
    logits and returns either of those.
    """
    shared, lengths = shared_block_forward(model, feats, lengths, dropout, rng)
    lid = None if model.config.is_vanilla else router_forward(model, shared, lengths)
    if callable(routing):
        routing = routing(lid)
    experts = None
    if not model.config.is_vanilla:
        experts = [getattr(r, "expert", r) for r in routing]
    logits = mle_block_forward(model, shared, lengths, experts, dropout, rng)
    return EncoderOutput(logits, lid, np.asarray(lengths), shared)


def encode_utterance(model: Model, features, expert: int | None = None) -> Tensor:
    """Single utterance ``[T, F]`` -> logits ``[T, vocab]``."""
    feats = nx.as_tensor(features)
    T = feats.shape[0]
    batched = nx.reshape(feats, (1, T, feats.shape[1]))
    out = encoder_forward(model, batched, [T], [expert if expert is not None else 0])
    return nx.reshape(out.logits, out.logits.shape[1:])
