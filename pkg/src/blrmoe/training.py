"""Joint CTC + LID training, router-only fine-tuning and evaluation."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .ctc import ctc_greedy_decode_batch, ctc_loss_batch
from .errors import ConfigurationError, InvariantViolation, TrainingError
from .metrics import MetricsReport, token_error_rate
from .model import Model, encoder_forward, router_forward, shared_block_forward
from .numerics import AdamState, NoamSchedule, Tape, Tensor
from .router import ARGMAX, TEACHER, ExpertMask, decide_batch, lid_loss
from .synthlang import Corpus, PaddedBatch, batches

log = logging.getLogger(__name__)

ROUTER_PREFIX = "router."


def joint_loss(model: Model, batch: PaddedBatch, lambda_lid: float = 0.3,
               dropout: float = 0.0, rng: np.random.Generator | None = None
               ) -> tuple[Tensor, Tensor, Tensor]:
    """``ctc + lambda_lid * lid`` under teacher-forced routing, batch-averaged."""
    out = encoder_forward(model, Tensor(batch.features), batch.lengths, batch.languages,
                          dropout=dropout, rng=rng)
    log_probs = nx.log_softmax(out.logits, axis=-1)
    ctc = nx.mean(ctc_loss_batch(log_probs, batch.targets, out.lengths))
    if out.lid_logits is None:
        lid = Tensor(0.0)
    else:
        lid = lid_loss(out.lid_logits, batch.languages)
    total = ctc + lid * lambda_lid if lambda_lid else ctc + 0.0
    return total, ctc, lid


def param_hash(model: Model, exclude_prefix: str | None = None) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        if exclude_prefix and name.startswith(exclude_prefix):
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


def check_expert_sparsity(model: Model, routed: Sequence[int]) -> None:
    """Raise if any expert outside ``routed`` carries a non-zero gradient."""
    used = set(int(e) for e in routed)
    for name, p in model.params.items():
        if not model.is_banked(name) or p.grad is None:
            continue
        for e in range(model.config.num_experts):
            if e not in used and np.any(p.grad[e] != 0.0):
                raise InvariantViolation(f"expert {e} of {name} has a gradient but was not routed")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    ter: dict[str, float]
    ter_micro: float
    router_acc: float

    def row(self, languages: Sequence[str]) -> list[str]:
        return [str(self.epoch), f"{self.loss:.6f}",
                *(f"{self.ter.get(l, math.nan):.6f}" for l in languages),
                f"{self.ter_micro:.6f}", f"{self.router_acc:.6f}"]


def metrics_header(languages: Sequence[str]) -> list[str]:
    return ["epoch", "loss", *(f"ter_{l}" for l in languages), "ter_avg", "router_acc"]


def format_metrics_log(history: Sequence[EpochMetrics], languages: Sequence[str]) -> str:
    lines = ["\t".join(metrics_header(languages))]
    lines += ["\t".join(m.row(languages)) for m in history]
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    model: Model
    history: list[EpochMetrics] = field(default_factory=list)
    steps: int = 0


def epoch_order(corpus: Corpus, batch_size: int, seed: int, epoch: int) -> list[int]:
    """Seeded shuffle, then length-sorted within windows of 8 batches to cut padding."""
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(corpus))
    window = 8 * batch_size
    frames = [corpus.utterances[i].num_frames for i in order]
    chunks = []
    for i in range(0, len(order), window):
        idx = sorted(range(i, min(i + window, len(order))), key=lambda k: (frames[k], k))
        block = [int(order[k]) for k in idx]
        chunks += [block[j:j + batch_size] for j in range(0, len(block), batch_size)]
    return [i for c in (chunks[j] for j in rng.permutation(len(chunks))) for i in c]


def _trainable(model: Model, freeze: Sequence[str]) -> list[str]:
    return [n for n in model.params if not any(n.startswith(f) for f in freeze)]


def _apply_update(model: Model, names: Sequence[str], state: AdamState, step: int,
                  schedule: NoamSchedule, clip: float) -> None:
    grads = {}
    for n in names:
        g = model.params[n].grad
        grads[n] = np.zeros_like(model.params[n].data) if g is None else g
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {n!r} at step {step}", param=n, step=step)
    if clip > 0:
        nx.clip_grad_norm(grads, clip)
    nx.adam_step(model.params, grads, state, step, schedule)


def train(model: Model, corpus: Corpus, cfg: TrainConfig, eval_corpus: Corpus | None = None,
          check_sparsity: bool = False,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    """Shuffled mini-batch Adam with teacher-forced routing.

    The input model is left untouched; the returned one carries the update.
    """
    if len(corpus) == 0:
        raise ConfigurationError("training corpus is empty")
    model = model.copy()
    names = _trainable(model, cfg.freeze)
    for n, p in model.params.items():
        p.requires_grad = n in names
    schedule = NoamSchedule(model.config.d_model, cfg.warmup_steps, cfg.lr_scale)
    state = AdamState()
    result = TrainResult(model)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_order(corpus, cfg.batch_size, cfg.seed, epoch)
        total, count = 0.0, 0
        for batch in batches(corpus, cfg.batch_size, order):
            step += 1
            rng = np.random.default_rng([cfg.seed, epoch, step, 1])
            for p in model.params.values():
                p.grad = None
            with Tape() as tape:
                loss, _, _ = joint_loss(model, batch, cfg.lambda_lid, cfg.dropout_rate, rng)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            tape.backward(loss)
            if check_sparsity:
                check_expert_sparsity(model, batch.languages)
            _apply_update(model, names, state, step, schedule, cfg.grad_clip)
            total += loss.item() * len(batch)
            count += len(batch)
        metrics = EpochMetrics(epoch, total / count, {}, math.nan, math.nan)
        if eval_corpus is not None and len(eval_corpus):
            rep = evaluate(model, eval_corpus).report
            metrics.ter, metrics.ter_micro, metrics.router_acc = rep.ter, rep.ter_micro, rep.router_acc_avg
        log.info("epoch %d loss %.4f ter %.4f", epoch, metrics.loss, metrics.ter_micro)
        result.history.append(metrics)
        if on_epoch:
            on_epoch(metrics)
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    result.steps = step
    return result


def finetune_router(model: Model, lid_corpus: Corpus, cfg: TrainConfig) -> TrainResult:
    """Update only router weights on (features, language) pairs with the LID loss.

    The backbone is frozen and evaluated without dropout, so its output is
    computed once per utterance and reused every epoch.
    """
    if model.config.is_vanilla:
        raise ConfigurationError("model has no router to fine-tune")
    if tuple(lid_corpus.languages) != tuple(model.config.languages):
        raise ConfigurationError(
            f"LID corpus languages {list(lid_corpus.languages)} do not match the model's "
            f"{list(model.config.languages)}")
    before = param_hash(model, ROUTER_PREFIX)
    model = model.copy()
    names = model.names("router")
    for n, p in model.params.items():
        p.requires_grad = n in names

    cache = []
    for batch in batches(lid_corpus, 1):
        shared, lengths = shared_block_forward(model, Tensor(batch.features), batch.lengths)
        cache.append((shared.data[0, :lengths[0]], int(batch.languages[0])))

    schedule = NoamSchedule(model.config.d_model, cfg.warmup_steps, cfg.lr_scale)
    state = AdamState()
    result = TrainResult(model)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch, 3]).permutation(len(cache))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [cache[j] for j in order[i:i + cfg.batch_size]]
            T = max(c[0].shape[0] for c in chunk)
            feats = np.zeros((len(chunk), T, chunk[0][0].shape[1]))
            for k, (h, _) in enumerate(chunk):
                feats[k, :h.shape[0]] = h
            lengths = np.array([c[0].shape[0] for c in chunk])
            labels = np.array([c[1] for c in chunk])
            step += 1
            for p in model.params.values():
                p.grad = None
            with Tape() as tape:
                loss = lid_loss(router_forward(model, Tensor(feats), lengths), labels)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite router loss at step {step}", step=step)
            tape.backward(loss)
            _apply_update(model, names, state, step, schedule, cfg.grad_clip)
            total += loss.item() * len(chunk)
        result.history.append(EpochMetrics(epoch, total / max(len(cache), 1), {}, math.nan, math.nan))
    for p in model.params.values():
        p.requires_grad = False
        p.grad = None
    if param_hash(model, ROUTER_PREFIX) != before:
        raise InvariantViolation("router fine-tuning modified non-router parameters")
    result.steps = step
    return result


@dataclass
class Evaluation:
    report: MetricsReport
    hyps: list[list[int]]
    decisions: list
    ids: list[str]


def evaluate(model: Model, corpus: Corpus, mask: ExpertMask | None = None,
             routing: str = ARGMAX, batch_size: int = 32) -> Evaluation:
    """Greedy-decode ``corpus``; utterances whose language is pruned are skipped and counted."""
    cfg = model.config
    if tuple(corpus.languages) != tuple(cfg.languages):
        raise ConfigurationError(f"corpus languages {list(corpus.languages)} != model {list(cfg.languages)}")
    mask = ExpertMask.full(cfg.num_experts) if mask is None else mask
    excluded = {l: 0 for l in cfg.languages}
    kept = []
    for u in corpus:
        if cfg.is_vanilla or mask.active[u.language]:
            kept.append(u)
        else:
            excluded[cfg.languages[u.language]] += 1
    pairs, routed, hyps, decisions, ids = [], [], [], [], []
    sub = corpus.subset(kept)
    for batch in batches(sub, batch_size):
        holder = {}

        def route(lid, batch=batch):
            ds = decide_batch(lid, mask, routing, batch.languages if routing == TEACHER else None)
            holder["d"] = ds
            return ds

        out = encoder_forward(model, Tensor(batch.features), batch.lengths,
                              route if not cfg.is_vanilla else [0] * len(batch))
        decoded = ctc_greedy_decode_batch(out.logits, out.lengths)
        for k, hyp in enumerate(decoded):
            lang = int(batch.languages[k])
            pairs.append((hyp, batch.targets[k], cfg.languages[lang]))
            if "d" in holder:
                routed.append((holder["d"][k].expert, lang))
                decisions.append(holder["d"][k])
        hyps.extend(decoded)
        ids.extend(batch.ids)
    report = token_error_rate(pairs, cfg.languages, routed if routing == ARGMAX else None, excluded)
    return Evaluation(report, hyps, decisions, ids)
