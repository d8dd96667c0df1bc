"""Exact discrete information measures and the CDA benefit analysis.

Everything here works on small probability tables over ``(x1, x2, y1)``
and reports quantities in bits.  The benefit functions quantify how much
counterfactual augmentation lowers the information carried by a spurious
feature relative to the information lost from the target feature, when
the initial selector picks the wrong text at rate ``alpha``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

VARIABLES = ("x1", "x2", "y1")
_AXIS = {name: i for i, name in enumerate(VARIABLES)}
_MASS_TOL = 1e-12


class DegenerateConditionalError(ValueError):
    """Raised when a conditional is requested on a zero-probability event."""


def _axis(var) -> int:
    if isinstance(var, (int, np.integer)):
        if var not in (0, 1, 2):
            raise ValueError(f"unknown variable index {var}")
        return int(var)
    try:
        return _AXIS[var]
    except KeyError:
        raise ValueError(f"unknown variable {var!r}; expected one of {VARIABLES}") from None


def _plogp(p: np.ndarray) -> np.ndarray:
    # 0 log 0 := 0
    out = np.zeros_like(p, dtype=float)
    nz = p > 0
    out[nz] = p[nz] * np.log2(p[nz])
    return out


def entropy_bits(p) -> float:
    """Shannon entropy (bits) of a probability vector or table."""
    return float(-_plogp(np.asarray(p, dtype=float)).sum())


@dataclass(frozen=True)
class JointDistribution:
    """Probability table ``p(x1, x2, y1)``.

    The table is copied and made read-only on construction.
    """

    table: np.ndarray

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 3:
            raise ValueError(f"joint table must be 3-dimensional, got shape {t.shape}")
        if min(t.shape) < 1:
            raise ValueError("support sizes must be positive")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValueError("joint table entries must be finite and nonnegative")
        total = t.sum()
        if abs(total - 1.0) > _MASS_TOL:
            raise ValueError(f"joint table mass is {total!r}, expected 1")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def from_counts(cls, counts, smoothing: float = 0.0) -> "JointDistribution":
        c = np.asarray(counts, dtype=float) + smoothing
        total = c.sum()
        if total <= 0:
            raise DegenerateConditionalError("no mass in count table")
        return cls(c / total)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.table.shape

    def marginal(self, *variables) -> np.ndarray:
        """Marginal table over ``variables`` (kept in their canonical order)."""
        keep = sorted({_axis(v) for v in variables})
        drop = tuple(i for i in range(3) if i not in keep)
        return self.table.sum(axis=drop)

    def pair(self, a, b) -> np.ndarray:
        """2-D table ``p(a, b)`` with rows indexed by ``a``."""
        ia, ib = _axis(a), _axis(b)
        if ia == ib:
            raise ValueError("pair() needs two distinct variables")
        m = self.marginal(ia, ib)
        return m if ia < ib else m.T

    def conditional(self, target, condition) -> np.ndarray:
        """Table ``p(target | condition)`` with rows indexed by the condition value."""
        pc = self.pair(condition, target)
        row = pc.sum(axis=1, keepdims=True)
        if np.any(row <= 0):
            bad = np.flatnonzero(row[:, 0] <= 0).tolist()
            raise DegenerateConditionalError(
                f"p({VARIABLES[_axis(condition)]}={bad}) is zero; conditional undefined"
            )
        return pc / row

    def to_cells(self) -> list[dict]:
        return [
            {"x1": int(i), "x2": int(j), "y1": int(k), "p": float(self.table[i, j, k])}
            for i, j, k in np.ndindex(*self.shape)
        ]

    def to_json(self) -> str:
        return json.dumps(self.to_cells())

    @classmethod
    def from_cells(cls, cells: Iterable[dict]) -> "JointDistribution":
        cells = list(cells)
        shape = tuple(max(int(c[v]) for c in cells) + 1 for v in VARIABLES)
        t = np.zeros(shape)
        for c in cells:
            t[int(c["x1"]), int(c["x2"]), int(c["y1"])] += float(c["p"])
        return cls(t)

    @classmethod
    def from_json(cls, text: str) -> "JointDistribution":
        return cls.from_cells(json.loads(text))


@dataclass(frozen=True)
class InformationMeasures:
    entropy: float
    conditional_entropy: float
    mutual_information: float


def information_measures(joint: JointDistribution, target="y1", condition="x1") -> InformationMeasures:
    """``H(target)``, ``H(target | condition)`` and their difference, in bits."""
    if not isinstance(joint, JointDistribution):
        joint = JointDistribution(joint)
    it, ic = _axis(target), _axis(condition)
    if it == ic:
        raise ValueError("target and condition must differ")
    pct = joint.pair(ic, it)
    h_target = entropy_bits(pct.sum(axis=0))
    # H(T | C) = H(C, T) - H(C)
    h_cond = entropy_bits(pct) - entropy_bits(pct.sum(axis=1))
    h_cond = max(h_cond, 0.0)
    return InformationMeasures(h_target, h_cond, h_target - h_cond)


def mutual_information(joint: JointDistribution, a="x1", b="y1") -> float:
    return information_measures(joint, target=b, condition=a).mutual_information


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 <= alpha <= 1.0) or not np.isfinite(alpha):
        raise ValueError(f"error rate alpha must lie in [0, 1], got {alpha}")
    return alpha


def _mixed_pair(pxy: np.ndarray, weight_on_conditional: float) -> np.ndarray:
    """Pair table with ``p(y | x)`` pulled toward ``p(y)``; ``p(x)`` kept."""
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(px > 0, pxy / np.where(px > 0, px, 1.0), 0.0)
    mixed = (1.0 - weight_on_conditional) * py + weight_on_conditional * cond
    return px * mixed


def cda_mix_conditionals(joint: JointDistribution, alpha: float) -> JointDistribution:
    """Joint of the augmented dataset for selector error rate ``alpha``.

    ``p(y | x1)`` is shrunk to the label marginal with weight ``alpha`` and
    ``p(y | x2)`` with weight ``1 - alpha``; the marginals of ``x1``, ``x2``
    and ``y1`` are unchanged.  The two pairwise tables are glued together
    with ``x1`` and ``x2`` conditionally independent given ``y1``; the
    benefit only ever reads the pairwise tables.
    """
    alpha = _check_alpha(alpha)
    p1 = _mixed_pair(joint.pair("x1", "y1"), 1.0 - alpha)
    p2 = _mixed_pair(joint.pair("x2", "y1"), alpha)
    py = p1.sum(axis=0)
    safe = np.where(py > 0, py, 1.0)
    # p(x1, x2, y) = p(x1, y) p(x2, y) / p(y)
    t = p1[:, None, :] * p2[None, :, :] / safe[None, None, :]
    t[:, :, py <= 0] = 0.0
    return JointDistribution(t / t.sum())


def _cond_entropy(pxy: np.ndarray) -> float:
    return max(entropy_bits(pxy) - entropy_bits(pxy.sum(axis=1)), 0.0)


def cda_benefit(joint: JointDistribution, alpha: float) -> float:
    """``dI(x2, y1) - dI(x1, y1)`` in bits; positive means augmentation helps."""
    aug = cda_mix_conditionals(joint, alpha)
    h2 = _cond_entropy(joint.pair("x2", "y1"))
    h2a = _cond_entropy(aug.pair("x2", "y1"))
    h1 = _cond_entropy(joint.pair("x1", "y1"))
    h1a = _cond_entropy(aug.pair("x1", "y1"))
    return -h2 + h2a + h1 - h1a


def error_budget(joint: JointDistribution, xtol: float = 1e-13) -> float:
    """Largest error rate at which the benefit is still positive.

    Returns 0.0 if augmentation never helps and 1.0 if it always does.
    """
    f = lambda a: cda_benefit(joint, a)
    lo, hi = f(0.0), f(1.0)
    if lo <= 0.0:
        return 0.0
    if hi > 0.0:
        return 1.0
    return float(brentq(f, 0.0, 1.0, xtol=xtol, rtol=4 * np.finfo(float).eps))


@dataclass(frozen=True)
class BinaryScenario:
    """Binary ``(x1, x2, y1)`` model given by marginals and the two positive conditionals."""

    p_y1: float = 0.5
    p_x1: float = 0.5
    p_x2: float = 0.5
    p_y1_given_x1: float = 0.75
    p_y1_given_x2: float = 0.75

    def __post_init__(self):
        for name in ("p_y1", "p_x1", "p_x2", "p_y1_given_x1", "p_y1_given_x2"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} is not a probability")
        for px, pyx, label in ((self.p_x1, self.p_y1_given_x1, "x1"), (self.p_x2, self.p_y1_given_x2, "x2")):
            if not (0.0 < px < 1.0):
                raise ValueError(f"p({label}=1) must lie strictly inside (0, 1)")
            rest = (self.p_y1 - px * pyx) / (1.0 - px)
            if rest < -1e-12 or rest > 1 + 1e-12:
                raise ValueError(
                    f"infeasible scenario: implied p(y1=1 | {label}=0) = {rest:.6g} outside [0, 1]"
                )

    def _pair(self, px: float, pyx: float) -> np.ndarray:
        rest = min(max((self.p_y1 - px * pyx) / (1.0 - px), 0.0), 1.0)
        # rows x in {0, 1}, columns y in {0, 1}
        return np.array(
            [[(1 - px) * (1 - rest), (1 - px) * rest], [px * (1 - pyx), px * pyx]]
        )

    def joint(self) -> JointDistribution:
        """Full joint with ``x1`` and ``x2`` conditionally independent given ``y1``."""
        p1 = self._pair(self.p_x1, self.p_y1_given_x1)
        p2 = self._pair(self.p_x2, self.p_y1_given_x2)
        py = np.array([1.0 - self.p_y1, self.p_y1])
        safe = np.where(py > 0, py, 1.0)
        t = p1[:, None, :] * p2[None, :, :] / safe[None, None, :]
        return JointDistribution(t / t.sum())

    def shifted(self, c: float) -> "BinaryScenario":
        """Same scenario with ``p(y1 | x2) = p(y1 | x1) + c``."""
        return BinaryScenario(self.p_y1, self.p_x1, self.p_x2, self.p_y1_given_x1, self.p_y1_given_x1 + c)


@dataclass(frozen=True)
class BenefitCurve:
    alphas: tuple[float, ...]
    benefits: tuple[float, ...]
    c: float | None = None
    units: str = field(default="bits")

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=float)
        b = np.asarray(self.benefits, dtype=float)
        if a.shape != b.shape:
            raise ValueError("alphas and benefits must have equal length")
        if a.size > 1 and np.any(np.diff(a) <= 0):
            raise ValueError("alphas must be strictly increasing")
        if not np.all(np.isfinite(b)):
            raise ValueError("benefit values must be finite")

    def zero_crossing(self) -> float | None:
        """Linear-interpolated first sign change from positive to nonpositive."""
        a, b = np.asarray(self.alphas), np.asarray(self.benefits)
        for i in range(len(b)):
            if b[i] == 0.0:
                return float(a[i])
            if i and b[i - 1] > 0 > b[i]:
                return float(a[i - 1] + (a[i] - a[i - 1]) * b[i - 1] / (b[i - 1] - b[i]))
        return None

    def rows(self):
        for a, b in zip(self.alphas, self.benefits):
            yield a, self.c, b


def default_alpha_grid(step: float = 0.01) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.linspace(0.0, 1.0, n + 1)


def benefit_curve(scenario: BinaryScenario | JointDistribution, alphas: Sequence[float] | None = None, c: float | None = None) -> BenefitCurve:
    joint = scenario.joint() if isinstance(scenario, BinaryScenario) else scenario
    grid = default_alpha_grid() if alphas is None else np.asarray(alphas, dtype=float)
    if np.any(grid < 0) or np.any(grid > 1):
        raise ValueError("alpha grid must lie within [0, 1]")
    values = [cda_benefit(joint, a) for a in grid]
    return BenefitCurve(tuple(float(a) for a in grid), tuple(values), c=c)


def benefit_family(base: BinaryScenario, cs: Sequence[float], alphas: Sequence[float] | None = None) -> list[BenefitCurve]:
    """One curve per offset ``c`` with ``p(y1 | x2) = p(y1 | x1) + c``."""
    return [benefit_curve(base.shifted(c), alphas, c=float(c)) for c in cs]


def write_curves_csv(curves: Iterable[BenefitCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "c", "benefit_bits"])
        for curve in curves:
            for a, c, b in curve.rows():
                w.writerow([repr(float(a)), "" if c is None else repr(float(c)), repr(float(b))])


# --- empirical joints ------------------------------------------------------

Predicate = Callable[[Sequence[str]], bool]


def token_feature(tokens: Iterable[str]) -> Predicate:
    """Fires when any of ``tokens`` occurs in the document."""
    vocab = frozenset(tokens)

    def fires(seq: Sequence[str]) -> bool:
        return any(t in vocab for t in seq)

    fires.__name__ = f"any_of_{len(vocab)}"
    return fires


def bigram_feature(first: Iterable[str], second: Iterable[str] | None = None) -> Predicate:
    """Fires when an adjacent pair ``(a, b)`` with ``a in first`` and ``b in second`` occurs."""
    a_set = frozenset(first)
    b_set = a_set if second is None else frozenset(second)

    def fires(seq: Sequence[str]) -> bool:
        return any(a in a_set and b in b_set for a, b in zip(seq, seq[1:]))

    fires.__name__ = f"bigram_{len(a_set)}x{len(b_set)}"
    return fires


def _as_predicate(feature) -> Predicate:
    if callable(feature):
        return feature
    return token_feature(feature)


def binary_counts(corpus, feature_a, feature_b, aspect: str) -> np.ndarray:
    """2x2x2 occurrence counts ``n[a, b, y]``."""
    fa, fb = _as_predicate(feature_a), _as_predicate(feature_b)
    counts = np.zeros((2, 2, 2))
    for doc in corpus:
        tokens = doc.tokens
        counts[int(bool(fa(tokens))), int(bool(fb(tokens))), int(doc.labels[aspect])] += 1
    return counts


def estimate_binary_joint(corpus, feature_a, feature_b, aspect: str, smoothing: float = 1.0) -> JointDistribution:
    """Empirical joint of two binary document features and an aspect label.

    ``feature_a`` plays the role of ``x1`` and ``feature_b`` of ``x2``.  A
    feature may be a predicate over the token sequence or a collection of
    tokens (fires when any is present).  ``smoothing`` is added to each of
    the eight cells.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    counts = binary_counts(corpus, feature_a, feature_b, aspect)
    if smoothing == 0:
        for axis, name in ((0, "feature_a"), (1, "feature_b")):
            fired = counts.sum(axis=tuple(i for i in range(3) if i != axis))
            if np.any(fired == 0):
                raise DegenerateConditionalError(
                    f"{name} {'never' if fired[1] == 0 else 'always'} fires and smoothing is disabled"
                )
    return JointDistribution.from_counts(counts, smoothing)
