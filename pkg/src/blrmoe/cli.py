"""Command-line interface.

Exit status: 0 on success, 1 for invalid input (config, checkpoint, corpus,
flags), 2 when training diverges or a verification check fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from . import config as cfgmod
from . import experiments, plotting, verify
from .errors import BlrMoeError, ConfigurationError, InvariantViolation, TrainingError
from .model import init_model, param_breakdown
from .router import ARGMAX, TEACHER, ExpertMask
from .synthlang import build_bundle, load_corpus, save_corpus
from .training import (
    ROUTER_PREFIX,
    evaluate,
    finetune_router,
    format_metrics_log,
    param_hash,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

log = logging.getLogger("blrmoe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _outdir(args, exp: cfgmod.ExperimentConfig | None = None) -> Path:
    out = Path(args.out if getattr(args, "out", None) else (exp.output_dir if exp else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bundle(exp: cfgmod.ExperimentConfig):
    if exp.corpus.vocab_size(exp.model.num_experts) != exp.model.vocab_size:
        raise ConfigurationError(
            f"model.vocab_size {exp.model.vocab_size} does not match the corpus alphabet "
            f"({exp.corpus.vocab_size(exp.model.num_experts)} = 1 + n*(alphabet_size-overlap) + overlap)")
    return build_bundle(exp.model.languages, exp.corpus, exp.model.feature_dim)


# --- commands ------------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    exp = cfgmod.load(args.config)
    out = _outdir(args, exp)
    bundle = _bundle(exp)
    for name in ("train", "test", "test_shifted", "lid_shifted"):
        save_corpus(getattr(bundle, name), out / name)
        print(f"{name}\t{len(getattr(bundle, name))} utterances\t{out / name}")
    cfgmod.save(exp, out / "config.cfg")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = cfgmod.load(args.config)
    if args.epochs is not None:
        exp = replace(exp, train=replace(exp.train, epochs=args.epochs))
    out = _outdir(args, exp)
    cfgmod.save(exp, out / "config.cfg")
    bundle = _bundle(exp)
    model = init_model(exp.model, exp.train.seed)

    def report(m):
        print(f"epoch {m.epoch}\tloss {m.loss:.4f}\tter {m.ter_micro:.4f}\trouter_acc {m.router_acc:.4f}",
              flush=True)

    try:
        result = train(model, bundle.train, exp.train, eval_corpus=bundle.test, on_epoch=report)
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
    (out / "metrics.tsv").write_text(format_metrics_log(result.history, exp.model.languages))
    meta = {"command": "train", "seed": exp.train.seed, "epochs": exp.train.epochs, "steps": result.steps}
    ckpt.save(out / "model.ckpt", result.model, meta)
    if result.history:
        plotting.plot_training_curve(result.history, exp.model.languages, out / "training_curve.png")
    print(f"checkpoint\t{out / 'model.ckpt'}\tsha256 {ckpt.file_digest(out / 'model.ckpt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = ckpt.load(args.checkpoint).model
    corpus = load_corpus(args.corpus)
    mask = ExpertMask.from_languages(model.config.languages, args.prune_keep)
    ev = evaluate(model, corpus, mask=mask, routing=args.routing)
    rep = ev.report
    print(rep.table(), end="")
    if args.out:
        out = _outdir(args)
        (out / "report.json").write_text(rep.to_json())
        lines = ["utt_id\texpert\thyp"]
        experts = [d.expert for d in ev.decisions] or ["-"] * len(ev.ids)
        lines += [f"{i}\t{e}\t{' '.join(map(str, h))}" for i, e, h in zip(ev.ids, experts, ev.hyps)]
        (out / "hypotheses.tsv").write_text("\n".join(lines) + "\n")
        plotting.plot_report_bars(rep, out / "report.png", f"keep={args.prune_keep} routing={args.routing}")
    return EXIT_OK


def cmd_finetune_router(args) -> int:
    loaded = ckpt.load(args.checkpoint)
    exp = cfgmod.load(args.config)
    lid = load_corpus(args.lid_corpus)
    tc = experiments.finetune_config(exp.train) if args.epochs is None else replace(
        experiments.finetune_config(exp.train), epochs=args.epochs)
    frozen = param_hash(loaded.model, ROUTER_PREFIX)
    result = finetune_router(loaded.model, lid, tc)
    out = _outdir(args, exp)
    cfgmod.save(replace(exp, train=tc), out / "config.cfg")
    meta = {"command": "finetune-router", "parent": loaded.metadata, "seed": tc.seed,
            "epochs": tc.epochs, "steps": result.steps}
    ckpt.save(out / "model.ckpt", result.model, meta)
    print(f"frozen parameter hash\t{frozen}")
    print(f"after fine-tuning\t{param_hash(result.model, ROUTER_PREFIX)}")
    print(f"checkpoint\t{out / 'model.ckpt'}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    rows = [("config", "train", "infer", "train (M)", "infer (M)", "router", "expert banks")]
    for path in args.config:
        exp = cfgmod.load(path)
        b = param_breakdown(exp.model)
        rows.append((Path(path).name, str(b["train"]), str(b["infer"]), f"{b['train'] / 1e6:.2f}",
                     f"{b['infer'] / 1e6:.2f}", str(b["router"]), str(b["expert_banks"])))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("\t".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return EXIT_OK


def cmd_verify(args) -> int:
    only = args.only.split(",") if args.only else None
    if only:
        unknown = set(only) - set(verify.CHECKS)
        if unknown:
            raise ConfigurationError(f"unknown checks {sorted(unknown)}; choose from {list(verify.CHECKS)}")
    results = verify.run_all(only, fault=args.inject_fault)
    text = verify.summary(results)
    print(text, end="")
    if args.out:
        (_outdir(args) / "verify.txt").write_text(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_ablate(args) -> int:
    exp = cfgmod.load(args.config)
    out = _outdir(args, exp)
    cfgmod.save(exp, out / "config.cfg")
    bundle = _bundle(exp)
    langs = exp.model.languages
    full = cfgmod.load(args.full_config).model if args.full_config else None
    rows = experiments.ablation_table(bundle, exp, full_scale=full)
    text = "Attention-MoE modules, shifted test, TER % (router acc %)\n"
    text += experiments.format_table(rows, langs)
    (out / "ablation.tsv").write_text(experiments.rows_to_tsv(rows, langs))
    plotting.plot_table_rows(rows, langs, out / "ablation.png", "TER by MoE modules")

    base = replace(exp.model, moe_modules=("o", "v", "f"))
    model = train(init_model(base, exp.train.seed), bundle.train, exp.train).model
    prows = experiments.pruning_table(model, bundle.test_shifted)
    text += "\nExpert pruning, shifted test, TER % (router acc %)\n"
    text += experiments.format_table(prows, langs, third="Experts Pruning", with_avg=False)
    (out / "pruning.tsv").write_text(experiments.rows_to_tsv(prows, langs, third="pruned"))
    plotting.plot_table_rows(prows, langs, out / "pruning.png", "TER by pruned experts")
    (out / "tables.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    exp = cfgmod.load(args.config)
    out = _outdir(args, exp)
    cfgmod.save(exp, out / "config.cfg")
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(r):
        print(f"seed {r.seed}\tin-domain {json.dumps(r.in_domain)}\tshifted {json.dumps(r.shifted)}", flush=True)

    rep = experiments.directional_reproduction(seeds, exp, args.language, progress)
    lines = ["quantity\tmedian"] + [f"{k}\t{v:.6f}" for k, v in rep.medians.items()]
    lines += [f"check.{k}\t{'pass' if v else 'fail'}" for k, v in rep.checks.items()]
    (out / "directional.tsv").write_text("\n".join(lines) + "\n")
    (out / "directional.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    plotting.plot_directional(rep, out / "directional.png")
    print("\n".join(lines))
    return EXIT_OK if all(rep.checks.values()) else EXIT_FAILED


# --- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blrmoe", description="Desk-scale multilingual MoE CTC encoder experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-corpus", help="write the synthetic train/test/shifted/LID corpora")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="decode a corpus and report TER and router accuracy")
    s.add_argument("checkpoint")
    s.add_argument("corpus")
    s.add_argument("--prune-keep", default="all", help="comma separated languages to keep, or 'all'")
    s.add_argument("--routing", choices=(ARGMAX, TEACHER), default=ARGMAX)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("finetune-router", help="re-train only the router on LID pairs")
    s.add_argument("checkpoint")
    s.add_argument("lid_corpus")
    s.add_argument("--config", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_finetune_router)

    s = sub.add_parser("param-count", help="train/infer parameter counts")
    s.add_argument("--config", required=True, action="append")
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("verify", help="run the invariant and gradient check suite")
    s.add_argument("--inject-fault", metavar="OP", help="flip the gradient sign of OP (debug)")
    s.add_argument("--only", help="comma separated subset of " + ",".join(verify.CHECKS))
    s.add_argument("--out")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("ablate", help="MoE-module ablation and expert-pruning tables")
    s.add_argument("--config", required=True)
    s.add_argument("--full-config", help="count parameters at this model size instead")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="three-system comparison over several seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--language", default="ar", help="test language for the pruning chain")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, InvariantViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (BlrMoeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
