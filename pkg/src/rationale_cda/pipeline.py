"""End-to-end experiment runner and the corpus-driven benefit curves."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .augmenter import make_ant, make_cda, make_fda
from .cf_predictor import CFPConfig, OracleInfiller, train_infillers, write_metric_log
from .evaluation import (
    METHODS,
    REGIMES,
    ExperimentRecord,
    detect_degenerate,
    dev_accuracy,
    random_mask_precision,
    rationale_metrics,
    write_aggregate_csv,
    write_results_csv,
)
from .info_core import BenefitCurve, benefit_curve, bigram_feature, error_budget, estimate_binary_joint
from .rationale_model import (
    RationaleModel,
    Vocabulary,
    finetune_classifier,
    labels_for,
    model_select,
    refine_grid,
    write_training_log,
)
from .synth_corpus import (
    CorpusConfig,
    antonym_map,
    default_config,
    generate_corpus,
    read_jsonl,
    sentiment_tokens,
    split_corpus,
    write_jsonl,
)

logger = logging.getLogger(__name__)

STAGE_FILE = "STAGE.json"

# noisier tokens and half-covered antonym pools: the setting the end-to-end comparison runs in
BENCHMARK_CORPUS = {"n_docs": 4000, "noise_rate": 0.15, "antonym_pairs": 4}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    out_dir: str = "runs"
    regime: str = "correlated"
    aspect: str | None = None
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0,)
    corpus: dict = field(default_factory=lambda: dict(BENCHMARK_CORPUS))
    corpus_config: str | None = None
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    lambda_r: tuple[float, ...] = (0.0,)
    refine: bool = False
    model: dict = field(default_factory=dict)
    cfp: dict = field(default_factory=dict)
    oracle_infiller: bool = False
    rounds: int = 1

    def __post_init__(self):
        self.methods = tuple(m.upper() for m in self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.lambda_r = tuple(float(v) for v in self.lambda_r)
        self.splits = tuple(float(f) for f in self.splits)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if not self.methods:
            raise ConfigError("methods is empty")
        if not self.seeds:
            raise ConfigError("seeds is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds repeat")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not self.lambda_r or min(self.lambda_r) < 0:
            raise ConfigError("lambda_r needs at least one nonnegative value")
        try:
            self.cfp_config(0)
            RationaleModel(**self.model)._validate_hyperparams()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def corpus_for(self, seed: int) -> CorpusConfig:
        try:
            if self.corpus_config:
                base = CorpusConfig.from_json(self.corpus_config)
                d = base.to_dict()
                d.update(self.corpus, seed=seed)
                return CorpusConfig.from_dict(d)
            kw = dict(self.corpus)
            if self.aspect is not None:
                kw.setdefault("target_aspect", self.aspect)
            return default_config(self.regime, seed=seed, **kw)
        except (TypeError, ValueError, OSError) as exc:
            raise ConfigError(f"corpus config: {exc}") from exc

    def cfp_config(self, seed: int) -> CFPConfig:
        return CFPConfig(**{**self.cfp, "seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("pipeline config must be a JSON object")
        return cls.from_dict(d)


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class _Stages:
    """Writes the current stage to ``STAGE.json`` so partial runs explain themselves."""

    def __init__(self, root: Path):
        self.root = root
        self.done: list[str] = []

    def run(self, name: str, fn, *args, **kwargs):
        _dump({"stage": name, "status": "running", "completed": self.done}, self.root / STAGE_FILE)
        try:
            out = fn(*args, **kwargs)
        except Exception as exc:
            _dump({"stage": name, "status": "failed", "error": repr(exc), "completed": self.done}, self.root / STAGE_FILE)
            raise StageError(name, exc) from exc
        self.done.append(name)
        return out

    def finish(self):
        _dump({"stage": "done", "status": "ok", "completed": self.done}, self.root / STAGE_FILE)


# --- single stages ---------------------------------------------------------


def write_corpus_dir(out: Path, config: CorpusConfig, splits, split_seed: int):
    """Generate and split a corpus; returns ``(train, dev, annotated)``."""
    out.mkdir(parents=True, exist_ok=True)
    docs = generate_corpus(config)
    parts = split_corpus(docs, splits, seed=split_seed)
    for name, part in zip(("train", "dev", "annotated"), parts):
        write_jsonl(part, out / f"{name}.jsonl")
    config.to_json(out / "corpus_config.json")
    return parts


def read_corpus_dir(path: Path):
    path = Path(path)
    return tuple(read_jsonl(path / f"{n}.jsonl") for n in ("train", "dev", "annotated")), CorpusConfig.from_json(
        path / "corpus_config.json"
    )


def train_selected(train, dev, aspect, vocab, lambdas, model_params, seed, refine=False, init_selector=None, out=None):
    """Grid-search ``lambda_r`` on dev, keep the winner, fine-tune its classifier on ``train`` originals."""
    y, y_dev = labels_for(train, aspect), labels_for(dev, aspect)
    fitted, rows = {}, []

    def run(lams):
        for lam in lams:
            if lam in fitted:
                continue
            m = RationaleModel(**{**model_params, "coherency": lam, "random_state": seed})
            m.fit(train, y, dev, y_dev, vocabulary=vocab, init_selector=init_selector)
            c = m.costs(dev, y_dev)
            fitted[lam] = m
            rows.append({"lambda_r": lam, **c})

    run(lambdas)
    best = model_select([(r["lambda_r"], r["L_c"], r["L_y"]) for r in rows])
    if refine:
        run(refine_grid(best))
        best = model_select([(r["lambda_r"], r["L_c"], r["L_y"]) for r in rows])
    model = fitted[best]
    originals = [d for d in train if d.provenance == "original"]
    tuned = finetune_classifier(model, originals, labels_for(originals, aspect), dev, y_dev)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        tuned.save(out / "model.json")
        write_training_log(model.log_, out / "training_log.csv")
        write_training_log(tuned.finetune_log_ if hasattr(tuned, "finetune_log_") else [], out / "finetune_log.csv")
        _dump({"selected_lambda_r": best, "grid": rows}, out / "grid.json")
    return tuned


def augment(method: str, train, selector, aspect, corpus_config, infiller=None):
    method = method.upper()
    if method == "CDA":
        return make_cda(train, selector, infiller, aspect)
    if method == "FDA":
        return make_fda(train, selector, infiller, aspect)
    if method == "ANT":
        return make_ant(train, selector, antonym_map(corpus_config), aspect)
    raise ConfigError(f"{method} is not an augmentation method")


def fit_infiller(train, frozen, aspect, cfp: CFPConfig, out: Path | None = None):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = train_infillers(train, frozen, aspect, cfp)
    for w in caught:
        logger.warning("%s", w.message)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        res.predictor.save(out / "infiller.json")
        write_metric_log(res.log, out / "metric_log.csv")
        _dump({"selected": {str(k): v for k, v in res.selected.items()}, "warnings": [str(w.message) for w in caught]}, out / "infiller_selection.json")
    return res.predictor


def evaluate_model(model, method, regime, aspect, seed, dev, annotated) -> ExperimentRecord:
    gold = [d.mask(aspect) for d in annotated]
    p, r, f = rationale_metrics(model.masks(annotated), gold)
    rec = ExperimentRecord(method, regime, aspect, seed, p, r, f, dev_accuracy(model, dev, aspect))
    rec.degenerate = detect_degenerate(rec, random_mask_precision(gold))
    return rec


# --- full run --------------------------------------------------------------


def run_seed(config: PipelineConfig, seed: int, root: Path, stages: _Stages) -> list[ExperimentRecord]:
    cc = config.corpus_for(seed)
    aspect = config.aspect or cc.target_aspect
    if aspect not in cc.aspect_names:
        raise ConfigError(f"aspect {aspect!r} not in corpus aspects {cc.aspect_names}")
    sd = root / f"seed_{seed}"
    train, dev, annotated = stages.run(f"seed{seed}:generate", write_corpus_dir, sd / "corpus", cc, config.splits, seed)
    vocab = Vocabulary(cc.vocabulary())
    mmi = stages.run(
        f"seed{seed}:train_mmi", train_selected, train, dev, aspect, vocab, config.lambda_r, config.model, seed,
        refine=config.refine, out=sd / "MMI",
    )
    records = []
    if "MMI" in config.methods:
        records.append(evaluate_model(mmi, "MMI", config.regime, aspect, seed, dev, annotated))
    for method in (m for m in config.methods if m != "MMI"):
        current = mmi
        for rnd in range(1, config.rounds + 1):
            tag = f"seed{seed}:{method}:round{rnd}"
            rd = sd / method / f"round_{rnd}"
            infiller = None
            if method in ("CDA", "FDA"):
                if config.oracle_infiller:
                    infiller = OracleInfiller(cc, seed)
                else:
                    infiller = stages.run(f"{tag}:infiller", fit_infiller, train, current, aspect, config.cfp_config(seed), rd)
            aug = stages.run(f"{tag}:augment", augment, method, train, current, aspect, cc, infiller)
            rd.mkdir(parents=True, exist_ok=True)
            write_jsonl(aug, rd / "augmented.jsonl")
            current = stages.run(
                f"{tag}:retrain", train_selected, aug, dev, aspect, vocab, config.lambda_r, config.model, seed,
                refine=config.refine, init_selector=current if rnd > 1 else None, out=rd,
            )
        records.append(evaluate_model(current, method, config.regime, aspect, seed, dev, annotated))
    write_results_csv(records, sd / "results.csv")
    return records


def run_pipeline(config: PipelineConfig) -> list[ExperimentRecord]:
    """Run every seed and write ``results.csv`` and ``aggregate.csv`` under ``config.out_dir``.

    Raises :class:`StageError` on failure; ``STAGE.json`` then names the
    stage that broke and everything written so far is left in place.
    """
    root = Path(config.out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {root}: {exc}") from exc
    _dump({**config.to_dict(), "version": __version__}, root / "resolved_config.json")
    stages = _Stages(root)
    records = []
    for seed in config.seeds:
        records += run_seed(config, seed, root, stages)
    write_results_csv(records, root / "results.csv")
    write_aggregate_csv(records, root / "aggregate.csv")
    stages.finish()
    return records


# --- corpus-driven benefit curves -----------------------------------------


def bigram_joint(docs, config: CorpusConfig, aspect: str, spurious: str, smoothing: float = 1.0):
    """Joint of (positive-bigram in ``aspect``, positive-bigram in ``spurious``, label)."""
    x1 = bigram_feature(sentiment_tokens(config, aspect, 1))
    x2 = bigram_feature(sentiment_tokens(config, spurious, 1))
    return estimate_binary_joint(docs, x1, x2, aspect, smoothing=smoothing)


def corpus_curves(
    seeds: Sequence[int], alphas=None, regimes: Sequence[str] = REGIMES, spurious: str = "smell", **corpus_kw
) -> tuple[list[BenefitCurve], list[dict]]:
    """Benefit curves and error budgets from empirical bigram joints, one per (regime, seed)."""
    curves, budgets = [], []
    for regime in regimes:
        for seed in seeds:
            cfg = default_config(regime, seed=seed, **corpus_kw)
            joint = bigram_joint(generate_corpus(cfg), cfg, cfg.target_aspect, spurious)
            curves.append(benefit_curve(joint, alphas))
            budgets.append({"regime": regime, "seed": seed, "error_budget": error_budget(joint)})
    return curves, budgets
