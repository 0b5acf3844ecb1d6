"""Experiment drivers: system comparison, module ablation and expert pruning.

The numbers these produce are desk-scale and synthetic. They are meant to
show which way each design choice pushes the error rate, not to match the
absolute values of a 10k-hour system.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Sequence

from .config import CorpusConfig, ExperimentConfig, ModelConfig, TrainConfig
from .model import Model, init_model, param_count
from .router import ExpertMask
from .synthlang import CorpusBundle, build_bundle
from .training import ROUTER_PREFIX, evaluate, finetune_router, param_hash, train

# module sets of the attention-MoE ablation, in table order
ABLATION_MODULES: tuple[tuple[str, ...], ...] = (
    ("f",), ("o",), ("o", "f"), ("o", "v", "f"), ("v", "k", "q", "f"), ("o", "v", "k", "q", "f"))

# pruned-language sets of the pruning table ("/" = nothing pruned)
PRUNING_GRID: tuple[tuple[str, ...], ...] = (
    (), ("zh",), ("en",), ("ja",), ("ar",), ("zh", "en"), ("zh", "en", "ja"))

# the nested chain used for the monotonicity check: the test language stays, the rest go one by one
PRUNING_CHAIN: tuple[tuple[str, ...], ...] = ((), ("zh",), ("zh", "en"), ("zh", "en", "ja"))

SYSTEMS = {
    "vanilla": ((), "linear"),
    "lr_moe": (("f",), "linear"),
    "blr_moe": (("o", "v", "f"), "tdnn"),
}


def desk_experiment(seed: int = 0) -> ExperimentConfig:
    """The configuration the directional checks run at: ~2k utterances, minutes of CPU.

    The FFN is kept narrow so that a dense model shared by four languages is
    short of capacity, which is the regime where per-language experts pay off.
    """
    return ExperimentConfig(
        model=ModelConfig(d_ffn=16, tdnn_channels=64),
        train=TrainConfig(epochs=10, batch_size=16, seed=seed),
        corpus=CorpusConfig(seed=seed),
    )


def finetune_config(train_cfg: TrainConfig) -> TrainConfig:
    """Router fine-tuning recipe: short, with a gentler learning-rate peak."""
    return replace(train_cfg, epochs=10, lr_scale=0.3, warmup_steps=50)


def system_config(base: ModelConfig, system: str) -> ModelConfig:
    modules, router = SYSTEMS[system]
    return replace(base, moe_modules=modules, router_kind=router)


def keep_set(languages: Sequence[str], pruned: Sequence[str]) -> ExpertMask:
    return ExpertMask(tuple(l not in pruned for l in languages))


@dataclass
class SeedResult:
    seed: int
    in_domain: dict[str, float]
    shifted: dict[str, float]
    shifted_router_acc: dict[str, float]
    finetuned_ter: float
    finetuned_router_acc: float
    frozen_hash_equal: bool
    pruning_language: str
    pruning_ter: list[float]

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class DirectionalReport:
    seeds: list[SeedResult]
    medians: dict[str, float] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seeds": [s.to_dict() for s in self.seeds], "medians": self.medians, "checks": self.checks}


def run_systems(bundle: CorpusBundle, exp: ExperimentConfig, pruning_language: str = "ar") -> SeedResult:
    """Train the three systems on one corpus draw and score them in and out of domain."""
    seed = exp.train.seed
    in_domain, shifted, acc = {}, {}, {}
    models: dict[str, Model] = {}
    for system in SYSTEMS:
        cfg = system_config(exp.model, system)
        model = train(init_model(cfg, seed), bundle.train, exp.train).model
        models[system] = model
        in_domain[system] = evaluate(model, bundle.test).report.ter_micro
        rep = evaluate(model, bundle.test_shifted).report
        shifted[system], acc[system] = rep.ter_micro, rep.router_acc_avg
    blr = models["blr_moe"]
    tuned = finetune_router(blr, bundle.lid_shifted, finetune_config(exp.train)).model
    rep = evaluate(tuned, bundle.test_shifted).report
    frozen_equal = param_hash(tuned, ROUTER_PREFIX) == param_hash(blr, ROUTER_PREFIX)

    lang = blr.config.language_index(pruning_language)
    subset = bundle.test_shifted.subset([u for u in bundle.test_shifted if u.language == lang])
    pruning = [evaluate(tuned, subset, mask=keep_set(blr.config.languages, pruned)).report.ter[pruning_language]
               for pruned in PRUNING_CHAIN]
    return SeedResult(seed, in_domain, shifted, acc, rep.ter_micro, rep.router_acc_avg,
                      frozen_equal, pruning_language, pruning)


def directional_reproduction(seeds: Sequence[int] = (0, 1, 2), base: ExperimentConfig | None = None,
                             pruning_language: str = "ar", progress=None) -> DirectionalReport:
    results = []
    for seed in seeds:
        exp = base or desk_experiment(seed)
        exp = replace(exp, train=replace(exp.train, seed=seed), corpus=replace(exp.corpus, seed=seed))
        bundle = build_bundle(exp.model.languages, exp.corpus, exp.model.feature_dim)
        results.append(run_systems(bundle, exp, pruning_language))
        if progress:
            progress(results[-1])
    med = statistics.median
    m = {}
    for system in SYSTEMS:
        m[f"in_domain.{system}"] = med(r.in_domain[system] for r in results)
        m[f"shifted.{system}"] = med(r.shifted[system] for r in results)
    m["shifted_router_acc.blr_moe"] = med(r.shifted_router_acc["blr_moe"] for r in results)
    m["finetuned.ter"] = med(r.finetuned_ter for r in results)
    m["finetuned.router_acc"] = med(r.finetuned_router_acc for r in results)
    for i, pruned in enumerate(PRUNING_CHAIN):
        m[f"pruning.{'+'.join(pruned) or 'none'}"] = med(r.pruning_ter[i] for r in results)
    chain = [m[f"pruning.{'+'.join(p) or 'none'}"] for p in PRUNING_CHAIN]
    checks = {
        "lr_beats_vanilla_in_domain": m["in_domain.lr_moe"] < m["in_domain.vanilla"],
        "blr_beats_lr_shifted": m["shifted.blr_moe"] < m["shifted.lr_moe"],
        "finetune_improves_router_acc": m["finetuned.router_acc"] > m["shifted_router_acc.blr_moe"],
        "finetune_improves_ter": m["finetuned.ter"] < m["shifted.blr_moe"],
        "finetune_frozen_hash_equal": all(r.frozen_hash_equal for r in results),
        "pruning_monotone": all(b <= a for a, b in zip(chain, chain[1:])),
    }
    return DirectionalReport(results, m, checks)


# --- ablation and pruning tables ---------------------------------------------

@dataclass
class TableRow:
    label: str
    modules: str
    params: str
    ter: dict[str, float]
    acc: dict[str, float]
    avg_ter: float = math.nan
    avg_acc: float = math.nan


def ablation_table(bundle: CorpusBundle, exp: ExperimentConfig,
                   module_sets: Sequence[tuple[str, ...]] = ABLATION_MODULES,
                   full_scale: ModelConfig | None = None, test: str = "test_shifted") -> list[TableRow]:
    """Train one model per module set and score it; params come from ``full_scale`` if given."""
    rows = []
    for modules in module_sets:
        cfg = replace(exp.model, moe_modules=modules)
        model = train(init_model(cfg, exp.train.seed), getattr(bundle, "train"), exp.train).model
        rep = evaluate(model, getattr(bundle, test)).report
        count_cfg = replace(full_scale, moe_modules=modules, router_kind=cfg.router_kind) if full_scale else cfg
        n = param_count(count_cfg, "train")
        params = f"{n / 1e6:.1f}M" if full_scale else f"{n / 1e3:.1f}k"
        label = "LR-MoE" if modules == ("f",) else "BLR-MoE"
        rows.append(TableRow(label, ",".join(modules), params, rep.ter, rep.router_acc,
                             rep.ter_micro, rep.router_acc_avg))
    return rows


def pruning_table(model: Model, corpus, grid: Sequence[tuple[str, ...]] = PRUNING_GRID) -> list[TableRow]:
    rows = []
    for pruned in grid:
        rep = evaluate(model, corpus, mask=keep_set(model.config.languages, pruned)).report
        rows.append(TableRow("BLR-MoE", ",".join(model.config.moe_modules),
                             ",".join(p.upper() for p in pruned) or "/", rep.ter, rep.router_acc,
                             rep.ter_micro, rep.router_acc_avg))
    return rows


def format_table(rows: Sequence[TableRow], languages: Sequence[str], third: str = "Para.",
                 with_avg: bool = True) -> str:
    """Table grid: each cell is ``TER (router acc)`` in percent, ``-`` when not evaluated."""
    def cell(t, a):
        if math.isnan(t):
            return "-"
        return f"{100 * t:.2f} ({100 * a:.2f})" if not math.isnan(a) else f"{100 * t:.2f}"

    head = ["ID", "Model", "MoE Modules", third, *(l.upper() for l in languages)]
    if with_avg:
        head.append("Avg")
    body = []
    for i, r in enumerate(rows):
        line = [str(i), r.label, r.modules, r.params, *(cell(r.ter[l], r.acc[l]) for l in languages)]
        if with_avg:
            line.append(cell(r.avg_ter, r.avg_acc))
        body.append(line)
    widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
    fmt = lambda cols: " | ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head), sep, *map(fmt, body)]) + "\n"


def rows_to_tsv(rows: Sequence[TableRow], languages: Sequence[str], third: str = "params") -> str:
    head = ["id", "model", "moe_modules", third, *(f"ter_{l}" for l in languages),
            *(f"acc_{l}" for l in languages), "ter_avg", "acc_avg"]
    lines = ["\t".join(head)]
    for i, r in enumerate(rows):
        lines.append("\t".join([str(i), r.label, r.modules or "-", r.params,
                                *(f"{r.ter[l]:.6f}" for l in languages),
                                *(f"{r.acc[l]:.6f}" for l in languages),
                                f"{r.avg_ter:.6f}", f"{r.avg_acc:.6f}"]))
    return "\n".join(lines) + "\n"
