from dataclasses import replace

import numpy as np
import pytest

from blrmoe import checkpoint as ckpt
from blrmoe import numerics as nx
from blrmoe.config import CorpusConfig, ModelConfig, TrainConfig
from blrmoe.errors import ConfigurationError, TrainingError
from blrmoe.model import init_model
from blrmoe.router import ExpertMask
from blrmoe.synthlang import build_bundle, collate
from blrmoe.training import (
    ROUTER_PREFIX,
    evaluate,
    finetune_router,
    format_metrics_log,
    joint_loss,
    param_hash,
    train,
)

LANGS = ("zh", "en", "ja", "ar")
CORPUS = CorpusConfig(utterances_per_lang=12, lid_utterances_per_lang=4)
MODEL = ModelConfig(num_layers=2, num_shared=1, d_model=8, num_heads=2, d_ffn=12,
                    vocab_size=CORPUS.vocab_size(4), feature_dim=6, router_kind="tdnn", tdnn_channels=6)
TRAIN = TrainConfig(epochs=2, batch_size=8, warmup_steps=4)


@pytest.fixture(scope="module")
def bundle():
    return build_bundle(LANGS, CORPUS, MODEL.feature_dim)


def test_joint_loss_combines_ctc_and_lid(bundle):
    model = init_model(MODEL, 0)
    batch = collate(bundle.train.utterances[:5])
    total, ctc, lid = joint_loss(model, batch, lambda_lid=0.3)
    assert total.item() == pytest.approx(ctc.item() + 0.3 * lid.item(), rel=1e-14)
    total0, ctc0, _ = joint_loss(model, batch, lambda_lid=0.0)
    assert total0.item() == ctc0.item() == ctc.item()


def test_training_is_deterministic(bundle):
    a = train(init_model(MODEL, 1), bundle.train, TRAIN, eval_corpus=bundle.test)
    b = train(init_model(MODEL, 1), bundle.train, TRAIN, eval_corpus=bundle.test)
    assert format_metrics_log(a.history, LANGS) == format_metrics_log(b.history, LANGS)
    assert ckpt.to_bytes(a.model) == ckpt.to_bytes(b.model)
    assert a.history[-1].loss < a.history[0].loss or TRAIN.epochs == 1


def test_train_does_not_touch_input_model(bundle):
    model = init_model(MODEL, 1)
    before = param_hash(model)
    train(model, bundle.train, replace(TRAIN, epochs=1))
    assert param_hash(model) == before


def test_unrouted_experts_never_move(bundle):
    only_two = bundle.train.subset([u for u in bundle.train if u.language in (0, 1)])
    model = init_model(MODEL, 2)
    out = train(model, only_two, replace(TRAIN, epochs=1), check_sparsity=True).model
    for name in model.names():
        if model.is_banked(name):
            for e in (2, 3):
                assert out.params[name].data[e].tobytes() == model.params[name].data[e].tobytes()
            assert out.params[name].data[0].tobytes() != model.params[name].data[0].tobytes()


def test_freeze_prefix(bundle):
    model = init_model(MODEL, 3)
    out = train(model, bundle.train, replace(TRAIN, epochs=1, freeze=("layers.0.",))).model
    for name in model.names():
        same = out.params[name].data.tobytes() == model.params[name].data.tobytes()
        assert same == name.startswith("layers.0.")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_training_error(bundle):
    model = init_model(MODEL, 0)
    model.params["output.b"].data[1] = np.nan
    with pytest.raises(TrainingError, match="step 1"):
        train(model, bundle.train, replace(TRAIN, epochs=1))


def test_finetune_touches_only_the_router(bundle):
    model = train(init_model(MODEL, 4), bundle.train, replace(TRAIN, epochs=1)).model
    tuned = finetune_router(model, bundle.lid_shifted, replace(TRAIN, epochs=2)).model
    assert param_hash(tuned, ROUTER_PREFIX) == param_hash(model, ROUTER_PREFIX)
    assert param_hash(tuned) != param_hash(model)


def test_finetune_zero_epochs_is_identity(bundle):
    model = init_model(MODEL, 4)
    tuned = finetune_router(model, bundle.lid_shifted, replace(TRAIN, epochs=0)).model
    assert ckpt.to_bytes(tuned) == ckpt.to_bytes(model)


def test_finetune_validation(bundle):
    with pytest.raises(ConfigurationError):
        finetune_router(init_model(replace(MODEL, moe_modules=()), 0), bundle.lid_shifted, TRAIN)
    three = replace(MODEL, languages=("zh", "en", "ja"))
    with pytest.raises(ConfigurationError):
        finetune_router(init_model(three, 0), bundle.lid_shifted, TRAIN)


def test_evaluate_excludes_pruned_languages(bundle):
    model = init_model(MODEL, 5)
    full = evaluate(model, bundle.test).report
    assert sum(full.excluded.values()) == 0
    ev = evaluate(model, bundle.test, mask=ExpertMask.keep(4, [0, 2]))
    rep = ev.report
    assert rep.excluded["en"] == len(bundle.test.by_language(1))
    assert np.isnan(rep.ter["en"]) and not np.isnan(rep.ter["zh"])
    assert all(d.expert in (0, 2) for d in ev.decisions)
    teacher = evaluate(model, bundle.test, routing="teacher").report
    assert np.isnan(teacher.router_acc_avg)


def test_pruning_never_selected_expert_is_no_op(bundle):
    model = init_model(MODEL, 6)
    ev = evaluate(model, bundle.test)
    chosen = {uid: d.expert for uid, d in zip(ev.ids, ev.decisions)}
    # utterances that neither belong to nor were routed to expert 3
    sub = bundle.test.subset([u for u in bundle.test if u.language != 3 and chosen[u.utterance_id] != 3])
    base = evaluate(model, sub)
    masked = evaluate(model, sub, mask=ExpertMask.keep(4, [0, 1, 2]))
    assert base.hyps == masked.hyps
    assert base.report.to_json() == masked.report.to_json()


def test_sparsity_bit_level_after_backward(bundle):
    model = init_model(MODEL, 7)
    for p in model.params.values():
        p.requires_grad = True
    batch = collate([u for u in bundle.train if u.language == 3][:4])
    with nx.Tape() as tape:
        loss, _, _ = joint_loss(model, batch)
    tape.backward(loss)
    for name in model.names():
        if model.is_banked(name):
            g = model.params[name].grad
            assert not g[:3].view(np.uint64).any()
            assert g[3].any()
