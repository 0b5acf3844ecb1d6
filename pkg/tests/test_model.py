from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blrmoe import config as cfgmod
from blrmoe.config import ModelConfig
from blrmoe.errors import ConfigurationError, RoutingError, ShapeError
from blrmoe.model import (
    encode_utterance,
    encoder_forward,
    init_model,
    param_breakdown,
    param_count,
    param_specs,
)
from blrmoe.numerics import Tensor
from blrmoe.verify import random_batch, vanilla_twin

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = ModelConfig(num_layers=3, num_shared=1, d_model=8, num_heads=2, d_ffn=12,
                   languages=("zh", "en", "ja"), vocab_size=7, feature_dim=5, tdnn_channels=6)


def full(name):
    return cfgmod.load(CONFIGS / f"full_{name}.cfg").model


# --- parameter accounting -----------------------------------------------------

def test_vanilla_train_equals_infer():
    cfg = full("vanilla")
    assert param_count(cfg, "train") == param_count(cfg, "infer")


def test_ffn_vs_ovf_bank_difference_is_closed_form():
    f, ovf = full("lr_moe"), full("blr_moe_ffn_router")
    n, L, N, d = f.num_experts, f.num_layers, f.num_shared, f.d_model
    assert param_count(ovf) - param_count(f) == (n - 1) * (L - N) * 2 * d * d


@pytest.mark.parametrize("moe", [("f",), ("o",), ("o", "v", "f"), ("k", "q", "v", "o", "f")])
@pytest.mark.parametrize("n", [1, 2, 4, 6])
def test_train_minus_infer_is_extra_expert_copies(moe, n):
    cfg = replace(TINY, moe_modules=moe, languages=tuple(f"l{i}" for i in range(n)))
    per_layer = {"k": 8 * 8, "q": 8 * 8, "v": 8 * 8, "o": 8 * 8, "f": 8 * 12 + 12 + 12 * 8 + 8}
    bank = (cfg.num_layers - cfg.num_shared) * sum(per_layer[m] for m in moe)
    assert param_count(cfg, "train") - param_count(cfg, "infer") == (n - 1) * bank
    assert param_breakdown(cfg)["per_expert"] == bank


@pytest.mark.parametrize("name, train_m, infer_m", [
    ("lr_moe", 93.7, 55.9), ("blr_moe_ffn_router", 103.1, 55.9), ("blr_moe", 104.7, 56.7)])
def test_full_scale_counts_within_five_percent(name, train_m, infer_m):
    cfg = full(name)
    assert abs(param_count(cfg, "train") / 1e6 - train_m) / train_m < 0.05
    assert abs(param_count(cfg, "infer") / 1e6 - infer_m) / infer_m < 0.05


@pytest.mark.parametrize("kind", ["linear", "tdnn"])
def test_infer_count_depends_on_expert_count_only_through_router_output(kind):
    base = replace(TINY, router_kind=kind)
    counts = []
    for n in (1, 2, 3, 5):
        cfg = replace(base, languages=tuple(f"l{i}" for i in range(n)))
        out_rows = (cfg.d_model if kind == "linear" else cfg.tdnn_channels) + 1
        counts.append(param_count(cfg, "infer") - n * out_rows)
    assert len(set(counts)) == 1


def test_param_specs_router_group():
    specs = param_specs(replace(TINY, router_kind="tdnn"))
    assert {s.group for n, s in specs.items() if n.startswith("router.")} == {"router"}
    assert not any(n.startswith("router.") for n in param_specs(replace(TINY, moe_modules=())))


# --- forward ------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["linear", "tdnn"])
def test_single_expert_equals_vanilla(kind):
    cfg = replace(TINY, languages=("xx",), router_kind=kind, moe_modules=("k", "q", "v", "o", "f"))
    model = init_model(cfg, 1)
    twin = vanilla_twin(model)
    for seed in range(10):
        b = random_batch(cfg, np.random.default_rng(seed))
        a = encoder_forward(model, Tensor(b.features), b.lengths, [0] * len(b)).logits.data
        v = encoder_forward(twin, Tensor(b.features), b.lengths, None).logits.data
        for i, n in enumerate(b.lengths):
            assert np.abs(a[i, :n] - v[i, :n]).max() <= 1e-12


def test_identical_banks_make_routing_irrelevant():
    model = init_model(replace(TINY, moe_modules=("q", "v", "f")), 2, identical_experts=True)
    x = np.random.default_rng(0).normal(size=(6, 5))
    outs = [encode_utterance(model, x, e).data for e in range(3)]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_zero_residual_layers_are_identity():
    model = init_model(TINY, 0, zero_residual=True)
    b = random_batch(TINY, np.random.default_rng(0))
    out = encoder_forward(model, Tensor(b.features), b.lengths, [0, 1, 2])
    from blrmoe.model import frontend_forward
    x, _ = frontend_forward(model, Tensor(b.features), b.lengths)
    np.testing.assert_array_equal(out.shared.data, x.data)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["linear", "tdnn"]))
def test_padding_never_changes_valid_frames(seed, kind):
    cfg = replace(TINY, router_kind=kind)
    model = init_model(cfg, 3)
    rng = np.random.default_rng(seed)
    T = int(rng.integers(3, 8))
    x = rng.normal(size=(T, cfg.feature_dim))
    alone = encoder_forward(model, Tensor(x[None]), [T], [1])
    padded = np.concatenate([x, rng.normal(size=(4, cfg.feature_dim)) * 50])[None]
    with_pad = encoder_forward(model, Tensor(padded), [T], [1])
    np.testing.assert_allclose(with_pad.logits.data[0, :T], alone.logits.data[0], atol=1e-12)
    np.testing.assert_allclose(with_pad.lid_logits.data, alone.lid_logits.data, atol=1e-12)


def test_batched_matches_per_utterance():
    model = init_model(replace(TINY, router_kind="tdnn"), 4)
    b = random_batch(model.config, np.random.default_rng(1), batch=4)
    out = encoder_forward(model, Tensor(b.features), b.lengths, b.languages)
    for i, n in enumerate(b.lengths):
        single = encode_utterance(model, b.features[i, :n], int(b.languages[i])).data
        np.testing.assert_allclose(out.logits.data[i, :n], single, atol=1e-12)


def test_routing_errors():
    model = init_model(TINY, 0)
    x = np.zeros((1, 4, 5))
    with pytest.raises(RoutingError):
        encoder_forward(model, Tensor(x), [4], [3])
    with pytest.raises(RoutingError):
        encoder_forward(model, Tensor(x), [4], [0, 1])
    with pytest.raises(ShapeError):
        encoder_forward(model, Tensor(np.zeros((1, 4, 6))), [4], [0])


def test_conv2d4_frontend_subsamples_by_four():
    cfg = replace(TINY, frontend="conv2d4", feature_dim=20)
    model = init_model(cfg, 0)
    b = random_batch(cfg, np.random.default_rng(0), batch=2, max_frames=21)
    out = encoder_forward(model, Tensor(b.features), b.lengths, [0, 1])
    assert out.logits.shape[1] == ((21 - 1) // 2 - 1) // 2
    assert list(out.lengths) == [max(((n - 1) // 2 - 1) // 2, 1) for n in b.lengths]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        replace(TINY, num_shared=3)
    with pytest.raises(ConfigurationError):
        replace(TINY, num_heads=3)
    with pytest.raises(ConfigurationError):
        replace(TINY, moe_modules=("x",))
    assert replace(TINY, moe_modules=("f", "o", "v")).moe_modules == ("v", "o", "f")
    # no shared layers is allowed: the router then reads the frontend output
    assert replace(TINY, num_shared=0).num_shared == 0
