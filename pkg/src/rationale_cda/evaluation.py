"""Rationale quality, accuracy and mutual-information audits."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .info_core import estimate_binary_joint, information_measures
from .rationale_model import labels_for

METHODS = ("MMI", "FDA", "ANT", "CDA")
REGIMES = ("correlated", "decorrelated")
METRICS = ("rat_prec", "rat_rec", "rat_f1", "dev_acc")


def rationale_metrics(predicted, gold) -> tuple[float, float, float]:
    """Macro-averaged token precision, recall and F1 in percent.

    Documents whose gold mask is empty are skipped.  An empty prediction
    scores zero precision.
    """
    predicted, gold = list(predicted), list(gold)
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted masks for {len(gold)} gold masks")
    prec, rec, f1 = [], [], []
    for i, (p, g) in enumerate(zip(predicted, gold)):
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        if p.shape != g.shape:
            raise ValueError(f"document {i}: mask lengths {p.size} and {g.size} differ")
        if not g.any():
            continue
        tp = float(np.sum(p & g))
        pr = tp / p.sum() if p.any() else 0.0
        rc = tp / g.sum()
        prec.append(pr)
        rec.append(rc)
        f1.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    if not prec:
        raise ValueError("no documents with a nonempty gold mask")
    return 100 * float(np.mean(prec)), 100 * float(np.mean(rec)), 100 * float(np.mean(f1))


def dev_accuracy(model, docs, aspect: str) -> float:
    y = labels_for(docs, aspect)
    if not len(y):
        raise ValueError("empty dev set")
    return 100 * float(np.mean(model.predict(docs) == y))


def random_mask_precision(gold) -> float:
    """Expected precision (percent) of a uniformly random mask: the mean gold fraction."""
    fracs = [np.mean(g) for g in map(np.asarray, gold) if g.any()]
    if not fracs:
        raise ValueError("no documents with a nonempty gold mask")
    return 100 * float(np.mean(fracs))


def measure_feature_mi(corpus, features: dict[str, Callable], aspect: str, smoothing: float = 1.0):
    """``(name, I(feature; label))`` pairs in bits, largest first."""
    corpus = list(corpus)
    out = []
    for name, feat in features.items():
        # the second feature is a placeholder; only the (x1, y1) pair is read
        joint = estimate_binary_joint(corpus, feat, feat, aspect, smoothing=smoothing)
        out.append((name, information_measures(joint, "y1", "x1").mutual_information))
    return sorted(out, key=lambda kv: kv[1], reverse=True)


@dataclass
class ExperimentRecord:
    method: str
    regime: str
    aspect: str
    seed: int
    rat_prec: float
    rat_rec: float
    rat_f1: float
    dev_acc: float
    degenerate: bool = False

    def __post_init__(self):
        for name in METRICS:
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        self.degenerate = bool(self.degenerate)


def detect_degenerate(
    record: ExperimentRecord, baseline: float, margin: float = 2.0, min_accuracy: float = 55.0
) -> bool:
    """A run with no selector skill: precision near the random baseline, or chance-level accuracy."""
    return record.rat_prec <= baseline + margin or record.dev_acc <= min_accuracy


def write_results_csv(records: Iterable[ExperimentRecord], path) -> None:
    cols = [f.name for f in fields(ExperimentRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in records:
            row = asdict(r)
            row["degenerate"] = int(row["degenerate"])
            w.writerow(row)


def read_results_csv(path) -> list[ExperimentRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        ExperimentRecord(
            r["method"], r["regime"], r["aspect"], int(r["seed"]),
            *(float(r[m]) for m in METRICS), degenerate=r["degenerate"] in ("1", "True", "true"),
        )
        for r in rows
    ]


def aggregate(records: Sequence[ExperimentRecord]) -> list[dict]:
    """Mean and sample std per (method, regime, aspect), over all runs and over non-degenerate runs."""
    groups: dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.method, r.regime, r.aspect), []).append(r)
    out = []
    for key in sorted(groups):
        for subset in ("all", "non_degenerate"):
            rs = [r for r in groups[key] if subset == "all" or not r.degenerate]
            row = dict(zip(("method", "regime", "aspect"), key), subset=subset, n=len(rs))
            for m in METRICS:
                vals = np.array([getattr(r, m) for r in rs])
                row[f"{m}_mean"] = float(vals.mean()) if len(vals) else float("nan")
                row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0 if len(vals) else float("nan")
            out.append(row)
    return out


def write_aggregate_csv(records: Sequence[ExperimentRecord], path) -> list[dict]:
    rows = aggregate(records)
    cols = ["method", "regime", "aspect", "subset", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def format_mean_std(row: dict, metric: str) -> str:
    return f"{row[f'{metric}_mean']:.1f} ± {row[f'{metric}_std']:.1f}"
