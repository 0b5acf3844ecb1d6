"""Self-check suite: gradients, CTC oracle, routing and pruning invariants.

Every check is deterministic and reports a worst-case number next to its
tolerance, so two runs print identical summaries.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .ctc import ctc_loss, greedy_path_collapse, min_frames
from .errors import InvariantViolation
from .model import Model, encoder_forward, init_model, param_specs
from .numerics import Tensor
from .router import ExpertMask, decide, router_accuracy
from .synthlang import PaddedBatch
from .training import check_expert_sparsity, joint_loss

GRAD_TOL = 1e-4
CTC_TOL = 1e-10
EQUIV_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.detail}"


def _quad(t: Tensor, w: np.ndarray) -> Tensor:
    return nx.sum(t * w)


# name -> builder(rng) returning (input arrays, scalar function of the input tensors)
OP_CASES: dict[str, Callable] = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], lambda a, b: nx.sum((a + b) * (a + b))),
    "sub": lambda r: ([r.normal(size=(3, 1)), r.normal(size=(3, 4))], lambda a, b: nx.sum((a - b) * (a - b))),
    "mul": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 3))], lambda a, b: nx.sum(a * b * a)),
    "div": lambda r: ([r.normal(size=(2, 3)), r.uniform(1, 2, size=(3,))], lambda a, b: nx.sum(a / b)),
    "exp_log_sqrt": lambda r: ([r.uniform(0.5, 2, size=(5,))],
                               lambda a: nx.sum(nx.log(a) * nx.exp(a) + nx.sqrt(a))),
    "relu": lambda r: ([r.normal(size=(4, 3)) + 0.05], lambda a: nx.sum(nx.relu(a) * a)),
    "matmul": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))],
                         lambda a, b: nx.sum((a @ b) * (a @ b))),
    "batched_matmul": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))],
                                 lambda a, b: nx.sum((a @ b) * (a @ b))),
    "softmax": lambda r: ([r.normal(size=(3, 5))], lambda a, w=r.normal(size=(3, 5)): _quad(nx.softmax(a), w)),
    "log_softmax": lambda r: ([r.normal(size=(3, 5))],
                              lambda a, w=r.normal(size=(3, 5)): _quad(nx.log_softmax(a), w)),
    "layer_norm": lambda r: ([r.normal(size=(3, 6)), r.normal(size=(6,)), r.normal(size=(6,))],
                             lambda x, g, b, w=r.normal(size=(3, 6)): _quad(nx.layer_norm(x, g, b), w)),
    "reshape_transpose": lambda r: ([r.normal(size=(2, 6))],
                                    lambda a, w=r.normal(size=(3, 2, 2)): _quad(
                                        nx.transpose(nx.reshape(a, (2, 3, 2)), (1, 0, 2)), w)),
    "concat_mean": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(2, 2))],
                              lambda a, b: nx.sum(nx.mean(nx.concat([a, b], -1) * nx.concat([a, b], -1), axis=0))),
    "take": lambda r: ([r.normal(size=(4, 3, 2))],
                       lambda a, w=r.normal(size=(3, 3, 2)): _quad(nx.take(a, [2, 0, 2]), w)),
    "masked_fill": lambda r: ([r.normal(size=(3, 4))],
                              lambda a, m=r.random((3, 4)) < 0.3: nx.sum(
                                  nx.softmax(nx.masked_fill(a, m & (np.arange(4) > 0), -np.inf)) * a)),
    "conv1d": lambda r: ([r.normal(size=(2, 7, 3)), r.normal(size=(3, 3, 4)), r.normal(size=(4,))],
                         lambda x, k, b, w=r.normal(size=(2, 7, 4)): _quad(nx.conv1d(x, k, 2, b), w)),
    "conv2d": lambda r: ([r.normal(size=(2, 2, 7, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))],
                         lambda x, k, b, w=r.normal(size=(2, 3, 3, 2)): _quad(nx.conv2d(x, k, 2, b), w)),
    "ctc": lambda r: ([r.normal(size=(5, 4))], lambda x: ctc_loss(nx.log_softmax(x), [1, 3, 3])),
}


def _tiny_config(router_kind: str, frontend: str = "linear") -> ModelConfig:
    return ModelConfig(num_layers=2, num_shared=1, d_model=8, num_heads=2, d_ffn=12,
                       languages=("zh", "en", "ja"), moe_modules=("k", "q", "v", "o", "f"),
                       router_kind=router_kind, vocab_size=6, feature_dim=9,
                       frontend=frontend, tdnn_channels=6)


def random_batch(cfg: ModelConfig, rng: np.random.Generator, batch: int = 3,
                 max_frames: int = 9) -> PaddedBatch:
    lengths = rng.integers(max_frames // 2 + 2, max_frames + 1, size=batch)
    lengths[0] = max_frames
    feats = rng.normal(size=(batch, max_frames, cfg.feature_dim))
    for b, n in enumerate(lengths):
        feats[b, n:] = 0.0
    sub = 4 if cfg.frontend == "conv2d4" else 1
    targets = [tuple(int(t) for t in rng.integers(1, cfg.vocab_size, size=max(1, (n // sub) // 3)))
               for n in lengths]
    langs = rng.integers(0, cfg.num_experts, size=batch)
    return PaddedBatch(feats, lengths, targets, langs, [f"r{b}" for b in range(batch)])


def encoder_gradcheck(model: Model, batch: PaddedBatch, rng: np.random.Generator,
                      samples: int = 24, eps: float = 1e-6) -> float:
    """Tape gradient of the joint loss vs finite differences on sampled coordinates."""
    for p in model.params.values():
        p.requires_grad, p.grad = True, None
    with nx.Tape() as tape:
        loss, _, _ = joint_loss(model, batch, lambda_lid=0.5)
    tape.backward(loss)

    def f():
        return joint_loss(model, batch, lambda_lid=0.5)[0].item()

    names = model.names()
    analytic, numeric = [], []
    for _ in range(samples):
        p = model.params[names[int(rng.integers(len(names)))]]
        i = int(rng.integers(p.data.size))
        if model.is_banked(p.name):
            # only routed experts see gradient; sample one of them to keep the check informative
            e = int(rng.choice(batch.languages))
            i = e * (p.data.size // p.data.shape[0]) + i % (p.data.size // p.data.shape[0])
        orig = p.data.flat[i]
        p.data.flat[i] = orig + eps
        fp = f()
        p.data.flat[i] = orig - eps
        fm = f()
        p.data.flat[i] = orig
        analytic.append(0.0 if p.grad is None else p.grad.flat[i])
        numeric.append((fp - fm) / (2 * eps))
    for p in model.params.values():
        p.requires_grad, p.grad = False, None
    return nx.relative_error(np.array(analytic), np.array(numeric))


def check_gradients(seeds: int = 20) -> CheckResult:
    worst, where = 0.0, ""
    for name, build in OP_CASES.items():
        for seed in range(seeds):
            arrays, fn = build(np.random.default_rng(seed))
            err = nx.gradcheck(fn, [Tensor(a) for a in arrays])
            if not err <= worst:
                worst, where = err, f"{name}/seed{seed}"
    for kind, frontend in (("linear", "linear"), ("tdnn", "linear"), ("tdnn", "conv2d4")):
        cfg = _tiny_config(kind, frontend)
        for seed in range(seeds):
            rng = np.random.default_rng(1000 + seed)
            max_frames = 17 if frontend == "conv2d4" else 9
            err = encoder_gradcheck(init_model(cfg, seed), random_batch(cfg, rng, max_frames=max_frames), rng)
            if not err <= worst:
                worst, where = err, f"encoder[{kind},{frontend}]/seed{seed}"
    return CheckResult("gradients", worst < GRAD_TOL,
                       f"max rel err {worst:.3e} (tol {GRAD_TOL:g}, {len(OP_CASES)} ops + 3 encoders x {seeds} seeds)"
                       + (f" worst at {where}" if where else ""))


def _enumerate_nll(lp: np.ndarray, target) -> float:
    T, V = lp.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if greedy_path_collapse(path) == list(target):
            total += math.exp(lp[np.arange(T), list(path)].sum())
    return -math.log(total) if total > 0 else math.inf


def check_ctc_oracle() -> CheckResult:
    worst_nll, worst_total, cases = 0.0, 0.0, 0
    for T in range(1, 5):
        for V in (2, 3):
            lp = nx.log_softmax(Tensor(np.random.default_rng(10 * T + V).normal(size=(T, V)))).data
            total = 0.0
            for L in range(0, 3):
                for target in itertools.product(range(1, V), repeat=L):
                    oracle = _enumerate_nll(lp, target)
                    if math.isinf(oracle):
                        continue
                    got = ctc_loss(Tensor(lp), target).item()
                    worst_nll = max(worst_nll, abs(got - oracle))
                    cases += 1
            # total probability over every feasible label sequence of any length
            for L in range(T + 1):
                for target in itertools.product(range(1, V), repeat=L):
                    if min_frames(target) <= T:
                        total += math.exp(-ctc_loss(Tensor(lp), target).item())
            worst_total = max(worst_total, abs(total - 1.0))
    ok = worst_nll < CTC_TOL and worst_total < 1e-8
    return CheckResult("ctc_oracle", ok,
                       f"{cases} cases, max |nll - enum| {worst_nll:.1e} (tol {CTC_TOL:g}), "
                       f"max |sum p - 1| {worst_total:.1e} (tol 1e-08)")


def vanilla_twin(model: Model) -> Model:
    """The same network with every single-expert bank unwrapped and no router."""
    cfg = model.config
    if cfg.num_experts != 1:
        raise ValueError("vanilla_twin needs a single-expert model")
    vcfg = replace(cfg, moe_modules=())
    params = {}
    for name in param_specs(vcfg):
        data = model.params[name].data
        params[name] = Tensor(data[0] if model.is_banked(name) else data, name=name)
    return Model(vcfg, params)


def check_single_expert(trials: int = 100) -> CheckResult:
    worst = 0.0
    for kind in ("linear", "tdnn"):
        cfg = replace(_tiny_config(kind), languages=("xx",))
        model = init_model(cfg, seed=7)
        twin = vanilla_twin(model)
        for t in range(trials // 2):
            batch = random_batch(cfg, np.random.default_rng(t))
            a = encoder_forward(model, Tensor(batch.features), batch.lengths, [0] * len(batch)).logits.data
            b = encoder_forward(twin, Tensor(batch.features), batch.lengths, None).logits.data
            for i, n in enumerate(batch.lengths):
                worst = max(worst, float(np.abs(a[i, :n] - b[i, :n]).max()))
    return CheckResult("single_expert", worst <= EQUIV_TOL,
                       f"{trials} inputs, max |moe - vanilla| {worst:.1e} (tol {EQUIV_TOL:g})")


def check_routing_sparsity(steps: int = 6) -> CheckResult:
    cfg = _tiny_config("tdnn")
    model = init_model(cfg, seed=3)
    for p in model.params.values():
        p.requires_grad = True
    checked = 0
    try:
        for step in range(steps):
            rng = np.random.default_rng(step)
            batch = random_batch(cfg, rng)
            # route the whole batch to a strict subset of the experts
            batch.languages[:] = rng.integers(0, cfg.num_experts - 1, size=len(batch)) + (step % 2)
            for p in model.params.values():
                p.grad = None
            with nx.Tape() as tape:
                loss, _, _ = joint_loss(model, batch)
            tape.backward(loss)
            check_expert_sparsity(model, batch.languages)
            unused = set(range(cfg.num_experts)) - set(batch.languages.tolist())
            for name in model.names():
                if model.is_banked(name) and model.params[name].grad is not None:
                    for e in unused:
                        if model.params[name].grad[e].view(np.uint64).any():
                            raise InvariantViolation(f"{name}[{e}] gradient bits set")
                        checked += 1
    except InvariantViolation as exc:
        return CheckResult("routing_sparsity", False, str(exc))
    finally:
        for p in model.params.values():
            p.requires_grad, p.grad = False, None
    return CheckResult("routing_sparsity", True, f"{checked} unrouted expert slices bit-exactly zero")


def check_pruning(utterances: int = 40) -> CheckResult:
    cfg = _tiny_config("tdnn")
    model = init_model(cfg, seed=11)
    rng = np.random.default_rng(5)
    batch = random_batch(cfg, rng, batch=utterances)
    full = ExpertMask.full(cfg.num_experts)
    out = encoder_forward(model, Tensor(batch.features), batch.lengths,
                          lambda lid: [decide(row, full) for row in lid.data])
    decisions = [decide(row, full) for row in out.lid_logits.data]
    problems = []
    # dropping every expert but the chosen one must not move a single bit
    for e in range(cfg.num_experts):
        for keep in itertools.chain.from_iterable(
                itertools.combinations(range(cfg.num_experts), k) for k in range(1, cfg.num_experts + 1)):
            if e not in keep:
                continue
            mask = ExpertMask.keep(cfg.num_experts, keep)
            idx = [i for i, d in enumerate(decisions) if d.expert == e]
            if not idx:
                continue
            pruned = encoder_forward(model, Tensor(batch.features[idx]), batch.lengths[idx],
                                     lambda lid, m=mask: [decide(row, m) for row in lid.data])
            if pruned.logits.data.tobytes() != out.logits.data[idx].tobytes():
                problems.append(f"expert {e} keep {keep}")
    # shrinking masks that keep the true language never hurt router accuracy
    lids = out.lid_logits.data
    for true in range(cfg.num_experts):
        sel = batch.languages == true
        if not sel.any():
            continue
        others = [i for i in range(cfg.num_experts) if i != true]
        accs = [router_accuracy([decide(r, ExpertMask.keep(cfg.num_experts, [true, *others[:k]]))
                                 for r in lids[sel]], batch.languages[sel])
                for k in range(len(others), -1, -1)]
        if any(b < a for a, b in zip(accs, accs[1:])):
            problems.append(f"accuracy not monotone for language {true}: {accs}")
        if accs[-1] != 1.0:
            problems.append(f"singleton mask accuracy {accs[-1]} for language {true}")
    return CheckResult("pruning", not problems,
                       "; ".join(problems) if problems else
                       "non-argmax pruning bit-identical, accuracy monotone, singleton 100%")


CHECKS = {
    "gradients": check_gradients,
    "ctc_oracle": check_ctc_oracle,
    "single_expert": check_single_expert,
    "routing_sparsity": check_routing_sparsity,
    "pruning": check_pruning,
}


def run_all(only: list[str] | None = None, fault: str | None = None) -> list[CheckResult]:
    """Run the suite; ``fault`` names an op whose gradients get their sign flipped."""
    names = only or list(CHECKS)
    results = []
    for name in names:
        if fault:
            with nx.inject_fault(fault):
                results.append(CHECKS[name]())
        else:
            results.append(CHECKS[name]())
    return results


def summary(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
