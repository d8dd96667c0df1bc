"""Synthetic multi-aspect review corpora with known rationales.

Each document consists of one sentiment segment per aspect, shuffled and
separated by neutral filler.  Aspect scores come from a Gaussian copula
with a configurable correlation matrix, so cross-aspect label correlation
(the source of spurious signal) is under direct control.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import binom

PROVENANCES = ("original", "cda", "fda", "ant")


@dataclass(frozen=True)
class AspectSpec:
    name: str
    positive: tuple[str, ...]
    negative: tuple[str, ...]
    segment_length: tuple[int, int] = (3, 5)
    # number of leading (positive[i], negative[i]) pairs known as antonyms;
    # None means every pair
    antonym_pairs: int | None = None
    # neutral words that may open the segment ("aroma", "colour", ...); never masked
    cue: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "positive", tuple(self.positive))
        object.__setattr__(self, "negative", tuple(self.negative))
        object.__setattr__(self, "segment_length", tuple(self.segment_length))
        object.__setattr__(self, "cue", tuple(self.cue))
        if set(self.cue) & set(self.positive + self.negative):
            raise ValueError(f"aspect {self.name!r}: cue words overlap the sentiment pools")
        if not self.positive or not self.negative:
            raise ValueError(f"aspect {self.name!r}: sentiment pools must be nonempty")
        if set(self.positive) & set(self.negative):
            raise ValueError(f"aspect {self.name!r}: positive and negative pools overlap")
        lo, hi = self.segment_length
        if not 1 <= lo <= hi:
            raise ValueError(f"aspect {self.name!r}: bad segment length range {self.segment_length}")

    def pool(self, label: int) -> tuple[str, ...]:
        return self.positive if label == 1 else self.negative


@dataclass(frozen=True)
class CorpusConfig:
    aspects: tuple[AspectSpec, ...]
    filler: tuple[str, ...]
    target_aspect: str
    n_docs: int = 1000
    correlation: tuple[tuple[float, ...], ...] | None = None
    # latent N(0,1) cut points mapping to raw scores 1..5
    score_cuts: tuple[float, float, float, float] = tuple(ndtri([0.2, 0.5, 0.7, 0.85]).tolist())
    hi: int = 3
    lo: int = 2
    noise_rate: float = 0.05
    filler_length: tuple[int, int] = (2, 6)
    max_len: int = 256
    seed: int = 0

    def __post_init__(self):
        aspects = tuple(a if isinstance(a, AspectSpec) else AspectSpec(**a) for a in self.aspects)
        object.__setattr__(self, "aspects", aspects)
        object.__setattr__(self, "filler", tuple(self.filler))
        object.__setattr__(self, "filler_length", tuple(self.filler_length))
        object.__setattr__(self, "score_cuts", tuple(float(c) for c in self.score_cuts))
        names = [a.name for a in aspects]
        if not aspects or len(set(names)) != len(names):
            raise ValueError("aspect names must be unique and nonempty")
        if self.target_aspect not in names:
            raise ValueError(f"target aspect {self.target_aspect!r} not among {names}")
        if not self.filler:
            raise ValueError("filler pool must be nonempty")
        seen: dict[str, str] = {t: "filler" for t in self.filler}
        for a in aspects:
            for t in a.positive + a.negative + a.cue:
                if t in seen:
                    raise ValueError(f"token {t!r} appears in both {seen[t]} and aspect {a.name!r}")
                seen[t] = a.name
        k = len(aspects)
        corr = np.eye(k) if self.correlation is None else np.asarray(self.correlation, dtype=float)
        if corr.shape != (k, k):
            raise ValueError(f"correlation matrix must be {k}x{k}")
        if not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
            raise ValueError("correlation matrix must be symmetric with unit diagonal")
        if np.any(np.abs(corr) > 1):
            raise ValueError("correlations must lie in [-1, 1]")
        if np.linalg.eigvalsh(corr).min() < -1e-10:
            raise ValueError("correlation matrix is not positive semidefinite")
        object.__setattr__(self, "correlation", tuple(tuple(float(v) for v in row) for row in corr))
        if not self.hi > self.lo:
            raise ValueError("binarization needs hi > lo")
        if not 0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must lie in [0, 0.5)")
        if self.n_docs < 1:
            raise ValueError("n_docs must be positive")
        if len(self.score_cuts) != 4 or any(np.diff(self.score_cuts) <= 0):
            raise ValueError("score_cuts must be 4 increasing values")
        flo, fhi = self.filler_length
        if not 0 <= flo <= fhi:
            raise ValueError("bad filler length range")
        longest = sum(a.segment_length[1] + bool(a.cue) for a in aspects) + (k + 1) * fhi
        if longest > self.max_len:
            raise ValueError(f"documents can reach {longest} tokens, above max_len={self.max_len}")

    @property
    def aspect_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.aspects)

    def aspect(self, name: str) -> AspectSpec:
        for a in self.aspects:
            if a.name == name:
                return a
        raise KeyError(name)

    def vocabulary(self) -> tuple[str, ...]:
        toks = list(self.filler)
        for a in self.aspects:
            toks += list(a.cue) + list(a.positive) + list(a.negative)
        return tuple(toks)

    def token_owner(self) -> dict[str, str]:
        """Sentiment token -> aspect name."""
        return {t: a.name for a in self.aspects for t in a.positive + a.negative}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspects"] = [asdict(a) for a in self.aspects]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        d["aspects"] = tuple(AspectSpec(**a) for a in d["aspects"])
        return cls(**d)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path) -> "CorpusConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Document:
    id: str
    tokens: tuple[str, ...]
    labels: dict[str, int]
    masks: dict[str, tuple[int, ...]]
    provenance: str = "original"
    source_id: str | None = None

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        self.masks = {k: tuple(int(v) for v in m) for k, m in self.masks.items()}
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        for name, m in self.masks.items():
            if len(m) != len(self.tokens):
                raise ValueError(f"doc {self.id}: mask {name!r} has length {len(m)} for {len(self.tokens)} tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def mask(self, aspect: str) -> np.ndarray:
        return np.asarray(self.masks[aspect], dtype=np.int8)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "tokens": list(self.tokens),
            "labels": dict(self.labels),
            "masks": {k: list(v) for k, v in self.masks.items()},
            "provenance": self.provenance,
        }
        if self.source_id is not None:
            d["source_id"] = self.source_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Document":
        return cls(
            id=str(d["id"]),
            tokens=tuple(d["tokens"]),
            labels={k: int(v) for k, v in d["labels"].items()},
            masks={k: tuple(v) for k, v in d.get("masks", {}).items()},
            provenance=d.get("provenance", "original"),
            source_id=d.get("source_id"),
        )


def write_jsonl(docs: Iterable[Document], path) -> None:
    with open(path, "w") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_dict(), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[Document]:
    with open(path) as fh:
        return [Document.from_dict(json.loads(line)) for line in fh if line.strip()]


def binarize(scores, hi: int = 3, lo: int = 2) -> np.ndarray:
    """Class 1 at ``score >= hi``, class 0 at ``score <= lo``, -1 in between."""
    s = np.asarray(scores)
    return np.where(s >= hi, 1, np.where(s <= lo, 0, -1))


def _latent_scores(config: CorpusConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    k = len(config.aspects)
    z = rng.multivariate_normal(np.zeros(k), np.asarray(config.correlation), size=n, method="eigh")
    return 1 + np.searchsorted(np.asarray(config.score_cuts), z)


def _render(config: CorpusConfig, labels: dict[str, int], rng: np.random.Generator):
    flo, fhi = config.filler_length
    k = len(config.aspects)
    order = rng.permutation(k)
    gaps = rng.integers(flo, fhi + 1, size=k + 1)
    seg_lo = np.array([config.aspects[i].segment_length[0] for i in order])
    seg_hi = np.array([config.aspects[i].segment_length[1] for i in order])
    seg = rng.integers(seg_lo, seg_hi + 1)
    n_sent = int(seg.sum())
    flips = rng.random(n_sent) < config.noise_rate
    picks = rng.random(n_sent)
    cue_picks = rng.random(k)
    fill = rng.integers(len(config.filler), size=int(gaps.sum()))
    tokens: list[str] = []
    owner: list[str | None] = []
    f = s = 0
    for j in range(k + 1):
        for _ in range(int(gaps[j])):
            tokens.append(config.filler[fill[f]])
            owner.append(None)
            f += 1
        if j == k:
            break
        spec = config.aspects[int(order[j])]
        y = labels[spec.name]
        if spec.cue:
            tokens.append(spec.cue[int(cue_picks[j] * len(spec.cue))])
            owner.append(None)
        for _ in range(int(seg[j])):
            pool = spec.pool(1 - y if flips[s] else y)
            tokens.append(pool[int(picks[s] * len(pool))])
            owner.append(spec.name)
            s += 1
    masks = {a: tuple(int(o == a) for o in owner) for a in config.aspect_names}
    return tuple(tokens), masks


def generate_corpus(config: CorpusConfig, seed: int | None = None) -> list[Document]:
    """Balanced corpus of ``config.n_docs`` documents for ``config.target_aspect``.

    Latent aspect scores are drawn in batches; documents are accepted in
    draw order until both target classes reach their quota.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    names = config.aspect_names
    t_idx = names.index(config.target_aspect)
    quota = {0: config.n_docs // 2, 1: config.n_docs - config.n_docs // 2}
    taken = {0: 0, 1: 0}
    accepted: list[dict[str, int]] = []
    batch = max(64, config.n_docs)
    while taken[0] < quota[0] or taken[1] < quota[1]:
        scores = _latent_scores(config, rng, batch)
        target = binarize(scores[:, t_idx], config.hi, config.lo)
        for row, y in zip(scores, target):
            if y < 0 or taken[int(y)] >= quota[int(y)]:
                continue
            taken[int(y)] += 1
            accepted.append({a: int(s >= config.hi) for a, s in zip(names, row)} | {config.target_aspect: int(y)})
    docs = []
    for i, labels in enumerate(accepted):
        tokens, masks = _render(config, labels, rng)
        docs.append(Document(id=f"d{i}", tokens=tokens, labels=labels, masks=masks))
    return docs


def antonym_map(config: CorpusConfig) -> dict[str, str]:
    """Involution pairing the i-th positive and i-th negative token of each aspect.

    Only the first ``antonym_pairs`` pairs of an aspect are included; filler
    tokens never appear.
    """
    out: dict[str, str] = {}
    for a in config.aspects:
        n = min(len(a.positive), len(a.negative))
        if a.antonym_pairs is not None:
            n = min(n, a.antonym_pairs)
        for p, q in zip(a.positive[:n], a.negative[:n]):
            out[p] = q
            out[q] = p
    return out


def split_corpus(corpus: Sequence[Document], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and cut into ``(train, dev, annotated)``."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_dev = min(int(round(fr[1] * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_dev])
    return tuple([corpus[int(i)] for i in part] for part in parts)


def bayes_accuracy(config: CorpusConfig) -> float:
    """Accuracy of a majority vote over the target segment's sentiment tokens.

    With uniform pools and equal priors the vote is Bayes optimal; an even
    split is a coin toss.
    """
    lo, hi = config.aspect(config.target_aspect).segment_length
    q = config.noise_rate
    acc = 0.0
    for L in range(lo, hi + 1):
        wrong = np.arange(L + 1)
        pm = binom.pmf(wrong, L, q)
        acc += pm[wrong * 2 < L].sum() + 0.5 * pm[wrong * 2 == L].sum()
    return float(acc / (hi - lo + 1))


# --- ready-made configurations -------------------------------------------

_POOLS = {
    "appearance": (
        ("clear", "bright", "golden", "foamy", "brilliant", "sparkling", "glowing", "lacy"),
        ("murky", "dull", "muddy", "flat", "drab", "cloudy", "faded", "bare"),
    ),
    "smell": (
        ("great", "fragrant", "aromatic", "fresh", "floral", "pleasant", "inviting", "perfumed"),
        ("awful", "rank", "stale", "musty", "sour", "foul", "acrid", "skunky"),
    ),
    "palate": (
        ("smooth", "silky", "crisp", "lively", "velvety", "balanced", "supple", "bubbly"),
        ("harsh", "gritty", "sticky", "lifeless", "rough", "cloying", "chalky", "limp"),
    ),
    "taste": (
        ("terrific", "delicious", "tasty", "flavorful", "juicy", "luscious", "savory", "rich"),
        ("dreadful", "bland", "insipid", "watery", "metallic", "burnt", "papery", "thin"),
    ),
}

_CUES = {
    "appearance": ("look", "colour", "appearance"),
    "smell": ("aroma", "smell", "nose"),
    "palate": ("mouthfeel", "body", "palate"),
    "taste": ("taste", "flavour", "palate-wise"),
}

FILLER = (
    "the", "beer", "pours", "with", "a", "and", "it", "is", "this", "of", "glass", "overall",
    "has", "bottle", "from", "into", "but", "very", "i", "at", "on", "was", "head", "quite",
)

REGIME_CORRELATION = {"correlated": 0.9, "decorrelated": 0.05}


def default_config(
    regime: str = "correlated",
    target_aspect: str = "appearance",
    n_docs: int = 4000,
    noise_rate: float = 0.05,
    antonym_pairs: int | None = None,
    cues: bool = True,
    seed: int = 0,
    rho: float | None = None,
    **overrides,
) -> CorpusConfig:
    """Four-aspect beer-review analog; ``regime`` sets the off-diagonal correlation."""
    if regime not in REGIME_CORRELATION:
        raise ValueError(f"unknown regime {regime!r}")
    if rho is None:
        rho = REGIME_CORRELATION[regime]
    aspects = tuple(
        AspectSpec(n, pos, neg, antonym_pairs=antonym_pairs, cue=_CUES[n] if cues else ())
        for n, (pos, neg) in _POOLS.items()
    )
    k = len(aspects)
    corr = np.full((k, k), rho)
    np.fill_diagonal(corr, 1.0)
    return CorpusConfig(
        aspects=aspects,
        filler=FILLER,
        target_aspect=target_aspect,
        n_docs=n_docs,
        correlation=tuple(map(tuple, corr)),
        noise_rate=noise_rate,
        seed=seed,
        **overrides,
    )


def sentiment_tokens(config: CorpusConfig, aspect: str, label: int | None = None) -> frozenset[str]:
    spec = config.aspect(aspect)
    if label is None:
        return frozenset(spec.positive + spec.negative)
    return frozenset(spec.pool(label))

