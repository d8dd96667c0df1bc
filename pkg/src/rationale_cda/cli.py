"""Command-line entry point: ``rationale-cda <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cf_predictor import CFPConfig, CounterfactualPredictor, OracleInfiller
from .evaluation import write_aggregate_csv, write_results_csv
from .info_core import BinaryScenario, benefit_family, write_curves_csv
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    augment,
    corpus_curves,
    evaluate_model,
    fit_infiller,
    read_corpus_dir,
    run_pipeline,
    train_selected,
    write_corpus_dir,
)
from .rationale_model import RationaleModel, Vocabulary
from .synth_corpus import CorpusConfig, default_config, write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

logger = logging.getLogger("rationale_cda")


def parse_range(text: str) -> np.ndarray:
    """``start:end:step`` (end inclusive, up to rounding) or a comma list."""
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, end, step = parts
            if step <= 0 or end < start:
                raise ValueError
            n = int(np.floor((end - start) / step + 1e-9)) + 1
            return np.round(start + step * np.arange(n), 12)
        return np.array([float(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad range {text!r}; use start:end:step or a,b,c") from None


def parse_floats(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _write_run_info(out: Path, **info):
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps({**info, "version": __version__}, indent=2, sort_keys=True) + "\n")


# --- commands --------------------------------------------------------------


def cmd_gen_corpus(args):
    if args.config:
        try:
            cfg = CorpusConfig.from_dict({**_load_json(args.config), "seed": args.seed})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    else:
        cfg = default_config(args.regime, n_docs=args.n_docs, seed=args.seed)
    train, dev, ann = write_corpus_dir(Path(args.out), cfg, args.splits, args.seed)
    print(f"wrote {len(train)}/{len(dev)}/{len(ann)} docs to {args.out}")


def cmd_train(args):
    (train, dev, _), cfg = read_corpus_dir(args.corpus)
    aspect = args.aspect or cfg.target_aspect
    if args.method != "mmi" and not any(d.provenance == args.method for d in train):
        raise ConfigError(f"{args.corpus} holds no {args.method} documents; run augment first")
    model_params = _load_json(args.model_config) if args.model_config else {}
    init = RationaleModel.load(args.init_selector) if args.init_selector else None
    out = Path(args.out)
    train_selected(
        train, dev, aspect, Vocabulary(cfg.vocabulary()), args.lambda_r, model_params, args.seed,
        refine=args.refine, init_selector=init, out=out,
    )
    _write_run_info(out, method=args.method.upper(), corpus=str(Path(args.corpus).resolve()), aspect=aspect, seed=args.seed)
    print(f"saved {out / 'model.json'}")


def cmd_augment(args):
    (train, dev, ann), cfg = read_corpus_dir(args.corpus)
    aspect = args.aspect or cfg.target_aspect
    selector = RationaleModel.load(args.model)
    out = Path(args.out)
    infiller = None
    if args.method in ("cda", "fda"):
        if args.oracle:
            infiller = OracleInfiller(cfg, args.seed)
        elif args.infiller:
            infiller = CounterfactualPredictor.load(args.infiller)
        else:
            cfp = CFPConfig(**{**(_load_json(args.cfp_config) if args.cfp_config else {}), "seed": args.seed})
            infiller = fit_infiller(train, selector, aspect, cfp, out)
    aug = augment(args.method, train, selector, aspect, cfg, infiller)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(aug, out / "train.jsonl")
    write_jsonl(dev, out / "dev.jsonl")
    write_jsonl(ann, out / "annotated.jsonl")
    cfg.to_json(out / "corpus_config.json")
    print(f"wrote {len(aug)} docs to {out / 'train.jsonl'}")


def cmd_evaluate(args):
    runs = sorted(Path(args.runs).rglob("run.json"))
    if not runs:
        raise ConfigError(f"no run.json under {args.runs}")
    records = []
    for info_path in runs:
        info = json.loads(info_path.read_text())
        (_, dev, ann), cfg = read_corpus_dir(info["corpus"])
        model = RationaleModel.load(info_path.parent / "model.json")
        regime = info.get("regime") or args.regime
        records.append(evaluate_model(model, info["method"], regime, info["aspect"], info["seed"], dev, ann))
    out = Path(args.out or args.runs)
    write_results_csv(records, out / "results.csv")
    rows = write_aggregate_csv(records, out / "aggregate.csv")
    for r in rows:
        print(f"{r['method']:4s} {r['regime']:12s} {r['subset']:15s} n={r['n']} prec={r['rat_prec_mean']:.1f}±{r['rat_prec_std']:.1f}")


def cmd_theory_curves(args):
    try:
        base = BinaryScenario(
            p_y1=args.p_y1, p_x1=args.p_x1, p_x2=args.p_x2,
            p_y1_given_x1=args.p_y1_given_x1, p_y1_given_x2=args.p_y1_given_x2,
        )
        curves = benefit_family(base, args.c, args.alphas)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_curves_csv(curves, args.out)
    print(f"wrote {len(curves)} curves to {args.out}")
    if args.corpus_out:
        seeds = list(range(args.corpus_seeds))
        curves, budgets = corpus_curves(seeds, args.alphas, n_docs=args.n_docs)
        with open(args.corpus_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha", "regime", "seed", "benefit_bits"])
            for curve, b in zip(curves, budgets):
                for a, _, v in curve.rows():
                    w.writerow([repr(float(a)), b["regime"], b["seed"], repr(float(v))])
        budget_path = Path(args.corpus_out).with_suffix(".budgets.csv")
        with open(budget_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["regime", "seed", "error_budget"], lineterminator="\n")
            w.writeheader()
            w.writerows(budgets)
        print(f"wrote corpus curves to {args.corpus_out} and budgets to {budget_path}")


def cmd_pipeline(args):
    d = _load_json(args.config) if args.config else {}
    if args.rounds is not None:
        d["rounds"] = args.rounds
    if args.out:
        d["out_dir"] = args.out
    if args.seeds:
        d["seeds"] = args.seeds
    cfg = PipelineConfig.from_dict(d)
    records = run_pipeline(cfg)
    for r in records:
        print(f"{r.method:4s} seed={r.seed} prec={r.rat_prec:.1f} f1={r.rat_f1:.1f} dev_acc={r.dev_acc:.1f}{' degenerate' if r.degenerate else ''}")


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rationale-cda", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic multi-aspect corpus")
    g.add_argument("--config", help="CorpusConfig JSON (default: built-in config for --regime)")
    g.add_argument("--regime", choices=("correlated", "decorrelated"), default="correlated")
    g.add_argument("--n-docs", type=int, default=4000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", type=parse_floats, default=[0.8, 0.1, 0.1])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a rationale model on a corpus directory")
    t.add_argument("--method", choices=("mmi", "cda", "fda", "ant"), default="mmi")
    t.add_argument("--corpus", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--aspect")
    t.add_argument("--lambda-r", type=parse_range, default=np.array([0.0]))
    t.add_argument("--refine", action="store_true", help="search a second grid around the winner")
    t.add_argument("--model-config", help="JSON of RationaleModel parameters")
    t.add_argument("--init-selector", help="model.json whose selector seeds training")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("augment", help="build a CDA/FDA/ANT corpus from a trained selector")
    a.add_argument("--method", choices=("cda", "fda", "ant"), required=True)
    a.add_argument("--model", required=True, help="selector model.json")
    a.add_argument("--corpus", required=True)
    a.add_argument("--aspect")
    a.add_argument("--seed", type=int, default=0)
    src = a.add_mutually_exclusive_group()
    src.add_argument("--infiller", help="trained infiller JSON")
    src.add_argument("--oracle", action="store_true", help="use the generator's true pools")
    a.add_argument("--cfp-config", help="JSON of CFPConfig fields when training an infiller")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    e = sub.add_parser("evaluate", help="score every run directory below --runs")
    e.add_argument("--runs", required=True)
    e.add_argument("--regime", default="correlated")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("theory-curves", help="benefit versus error rate")
    c.add_argument("--alphas", type=parse_range, default=parse_range("0:1:0.01"))
    c.add_argument("--c", type=parse_floats, default=[-0.125, 0.0, 0.125])
    c.add_argument("--p-y1", type=float, default=0.5)
    c.add_argument("--p-x1", type=float, default=0.5)
    c.add_argument("--p-x2", type=float, default=0.5)
    c.add_argument("--p-y1-given-x1", type=float, default=0.75)
    c.add_argument("--p-y1-given-x2", type=float, default=0.75)
    c.add_argument("--out", required=True)
    c.add_argument("--corpus-out", help="also write bigram curves from correlated and decorrelated corpora")
    c.add_argument("--corpus-seeds", type=int, default=5)
    c.add_argument("--n-docs", type=int, default=4000)
    c.set_defaults(func=cmd_theory_curves)

    pl = sub.add_parser("pipeline", help="generate, train, augment, retrain and evaluate")
    pl.add_argument("--config", help="PipelineConfig JSON")
    pl.add_argument("--rounds", type=int)
    pl.add_argument("--seeds", type=lambda s: [int(v) for v in parse_floats(s)])
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_pipeline)
    return p


_NUMERIC_LIST_FLAGS = ("--c", "--alphas", "--lambda-r")


def _attach_values(argv):
    """Join numeric-list flags to their value so ``--c -0.125,0`` is not read as an option."""
    out, it = [], iter(argv)
    for arg in it:
        if arg in _NUMERIC_LIST_FLAGS:
            nxt = next(it, None)
            out.append(arg if nxt is None else f"{arg}={nxt}")
        else:
            out.append(arg)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _attach_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
