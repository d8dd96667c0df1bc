"""Class-conditioned counterfactual infillers.

An :class:`InfillModel` is a linear-softmax token model over three feature
groups: the target class, the ``window`` tokens to the left of the slot,
and the normalised bag of tokens kept outside the rationale.  One model is
trained per target class against a frozen rationale model (to flip its
prediction) and a bag-of-words discriminator (to stay realistic).
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from ._optim import Adam, sigmoid, warmup_linear
from .rationale_model import (
    RationaleModel,
    Vocabulary,
    as_token_lists,
    classification_loss,
    classifier_backward,
    classifier_forward,
    labels_for,
    selector_scores,
    batch_topk,
)

logger = logging.getLogger(__name__)

N_SPECIAL = 3  # pad, unk, mask never emitted
MASK_ID = 2
DEFAULT_GRID = (1, 5, 10, 15, 20, 25)


def checkpoint_score(a: float, t: float) -> float:
    """Checkpoint metric ``4.5 a + t`` (flip rate, infilled-token entropy in bits)."""
    return 4.5 * a + t


def lambda_grid(values: Sequence[float] = DEFAULT_GRID) -> list[tuple[float, float]]:
    """All ``(lambda_rl, lambda_a)`` pairs with ``lambda_rl <= lambda_a``."""
    return [(rl, a) for rl, a in product(values, values) if rl <= a]


@dataclass
class CFPConfig:
    lambda_rl: float = 1.0
    lambda_a: float = 5.0
    peak_lr: float = 0.01
    warmup_steps: int = 100
    epochs: int = 7
    batch_size: int = 50
    eval_interval: int = 50
    metric_samples: int = 500
    disc_lr: float = 0.5
    window: int = 2
    warm_start_epochs: int = 6
    warm_start_lr: float = 0.05
    grid: tuple[tuple[float, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.lambda_rl < 0 or self.lambda_a <= 0:
            raise ValueError("lambda_rl must be >= 0 and lambda_a > 0")
        self.grid = tuple(tuple(p) for p in self.grid)
        for rl, a in self.grid:
            if rl > a:
                raise ValueError(f"grid pair ({rl}, {a}) violates lambda_rl <= lambda_a")
            if a <= 0 or rl < 0:
                raise ValueError("grid weights must be positive")
        if self.window < 0:
            raise ValueError("window must be nonnegative")
        if self.warm_start_epochs < 0:
            raise ValueError("warm_start_epochs must be nonnegative")

    def with_lambdas(self, rl: float, a: float) -> "CFPConfig":
        d = asdict(self)
        d.update(lambda_rl=rl, lambda_a=a)
        return CFPConfig(**d)


# --- models ----------------------------------------------------------------


class InfillModel:
    """Linear-softmax conditional token model for one target class."""

    def __init__(self, vocab: Vocabulary, target_class: int, window: int = 2, rng=None, scale: float = 0.01):
        if target_class not in (0, 1):
            raise ValueError("target_class must be 0 or 1")
        self.vocab = vocab
        self.target_class = target_class
        self.window = window
        rng = np.random.default_rng(0) if rng is None else rng
        v = len(vocab)
        self.params = {
            "cls": np.zeros((2, v)),
            "ctx": rng.normal(0, scale, (window, v, v)),
            "bag": rng.normal(0, scale, (v, v)),
        }
        self.step = 0

    # features

    def kept_bag(self, ids: np.ndarray, lengths: np.ndarray, M: np.ndarray) -> np.ndarray:
        v = len(self.vocab)
        n, t = ids.shape
        valid = np.arange(t)[None, :] < lengths[:, None]
        keep = valid & ~M.astype(bool)
        bag = np.zeros((n, v))
        rows = np.repeat(np.arange(n), t)[keep.ravel()]
        np.add.at(bag, (rows, ids.ravel()[keep.ravel()]), 1.0)
        return bag / lengths[:, None]

    def _context_ids(self, ids: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Left-context ids ``(n_slots, window)``; position -1 before the start reads as pad."""
        out = np.zeros((len(rows), self.window), dtype=np.int64)
        for j in range(self.window):
            c = cols - (j + 1)
            ok = c >= 0
            out[ok, j] = ids[rows[ok], c[ok]]
        return out

    def logits(self, ctx_ids: np.ndarray, bag_rows: np.ndarray) -> np.ndarray:
        p = self.params
        z = p["cls"][self.target_class] + bag_rows @ p["bag"]
        for j in range(self.window):
            z = z + p["ctx"][j][ctx_ids[:, j]]
        z[:, :N_SPECIAL] = -np.inf
        return z

    def distribution(self, ctx_ids, bag_rows) -> np.ndarray:
        z = self.logits(ctx_ids, bag_rows)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def one_step(self, ids, lengths, M):
        """Fill every masked slot at once; left context sees ``<mask>`` at masked slots."""
        masked_ids = np.where(M.astype(bool), MASK_ID, ids)
        rows, cols = np.nonzero(M)
        bag = self.kept_bag(ids, lengths, M)
        ctx = self._context_ids(masked_ids, rows, cols)
        probs = self.distribution(ctx, bag[rows])
        choice = probs.argmax(axis=1)
        out = masked_ids.copy()
        out[rows, cols] = choice
        return out, (rows, cols, ctx, bag, probs, choice)

    def decode(self, tokens: Sequence[str], mask) -> tuple[str, ...]:
        """Greedy left-to-right infill of the masked positions."""
        mask = np.asarray(mask)
        if len(mask) != len(tokens):
            raise ValueError(f"mask length {len(mask)} != document length {len(tokens)}")
        if not mask.any():
            return tuple(tokens)
        ids, lengths = self.vocab.encode([tokens])
        M = mask[None, :].astype(np.int8)
        bag = self.kept_bag(ids, lengths, M)
        cur = np.where(M.astype(bool), MASK_ID, ids)
        for t in np.flatnonzero(mask):
            ctx = self._context_ids(cur, np.array([0]), np.array([t]))
            cur[0, t] = int(self.distribution(ctx, bag)[0].argmax())
        out = list(tokens)
        for t in np.flatnonzero(mask):
            out[t] = self.vocab.itos[cur[0, t]]
        return tuple(out)

    def to_dict(self) -> dict:
        return {
            "kind": "infill_model",
            "target_class": self.target_class,
            "window": self.window,
            "step": self.step,
            "vocabulary": self.vocab.itos,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InfillModel":
        vocab = Vocabulary(d["vocabulary"][N_SPECIAL:])
        m = cls(vocab, d["target_class"], d["window"])
        m.params = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        m.step = d.get("step", 0)
        return m


class Discriminator:
    """Logistic scorer over normalised bag-of-token counts; outputs p(real)."""

    def __init__(self, vocab_size: int):
        self.w = np.zeros(vocab_size)
        self.b = 0.0

    def prob(self, bags: np.ndarray) -> np.ndarray:
        return sigmoid(bags @ self.w + self.b)

    def loss_and_grad(self, real_bags, fake_bags, scale: float = 1.0):
        """Mean real/fake cross-entropy times ``scale``, with its gradient."""
        bags = np.vstack([real_bags, fake_bags])
        target = np.concatenate([np.ones(len(real_bags)), np.zeros(len(fake_bags))])
        z = bags @ self.w + self.b
        loss = (np.logaddexp(0.0, z) - target * z).mean()
        dz = (sigmoid(z) - target) / len(target)
        return scale * loss, scale * (bags.T @ dz), scale * dz.sum()

    def sgd_step(self, real_bags, fake_bags, lr: float, scale: float = 1.0) -> float:
        loss, gw, gb = self.loss_and_grad(real_bags, fake_bags, scale)
        self.w -= lr * gw
        self.b -= lr * gb
        return loss

    def accuracy(self, real_bags, fake_bags) -> float:
        pr, pf = self.prob(real_bags), self.prob(fake_bags)
        return float(np.concatenate([pr > 0.5, pf <= 0.5]).mean())

    def to_dict(self) -> dict:
        return {"kind": "discriminator", "w": self.w.tolist(), "b": self.b}


def full_bag(ids, lengths, vocab_size) -> np.ndarray:
    n, t = ids.shape
    valid = np.arange(t)[None, :] < lengths[:, None]
    bag = np.zeros((n, vocab_size))
    rows = np.repeat(np.arange(n), t)[valid.ravel()]
    np.add.at(bag, (rows, ids.ravel()[valid.ravel()]), 1.0)
    return bag / lengths[:, None]


def _frozen_predict(model: RationaleModel, ids, lengths):
    scores = selector_scores(model.params_, ids, lengths)
    M = batch_topk(scores, lengths, model.rationale_frac)
    logits, cache = classifier_forward(model.params_, ids, M)
    return logits, cache


# --- the counterfactual predictor ------------------------------------------


class CounterfactualPredictor:
    """Pair of class-specific infillers behind one ``infill`` call."""

    def __init__(self, models: dict[int, InfillModel]):
        self.models = models

    def infill(self, tokens, mask, target_class: int) -> tuple[str, ...]:
        return decode_counterfactual(tokens, mask, target_class, self.models[target_class])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"kind": "cf_predictor", "models": {str(k): m.to_dict() for k, m in self.models.items()}}))

    @classmethod
    def load(cls, path) -> "CounterfactualPredictor":
        d = json.loads(Path(path).read_text())
        return cls({int(k): InfillModel.from_dict(v) for k, v in d["models"].items()})


def decode_counterfactual(doc, mask, target_class: int, model: InfillModel) -> tuple[str, ...]:
    """Replace the rationale left to right; every other token is copied."""
    tokens = doc.tokens if hasattr(doc, "tokens") else tuple(doc)
    if model.target_class != target_class:
        raise ValueError(f"model generates class {model.target_class}, asked for {target_class}")
    return model.decode(tokens, mask)


def checkpoint_metric(docs, model: InfillModel, frozen: RationaleModel, n: int = 500) -> dict:
    """Flip rate ``a`` and infilled-token entropy ``t`` on the first ``n`` docs, one-step infill."""
    if n <= 0:
        raise ValueError("checkpoint metric needs n > 0")
    sample = as_token_lists(docs[:n])
    if not sample:
        raise ValueError("no documents to score")
    ids, lengths = frozen.vocabulary_.encode(sample)
    M = _frozen_masks(frozen, ids, lengths)
    cf, (_, _, _, _, _, choice) = model.one_step(ids, lengths, M)
    logits, _ = _frozen_predict(frozen, cf, lengths)
    a = float(((logits > 0).astype(int) == model.target_class).mean())
    counts = np.bincount(choice, minlength=len(model.vocab)).astype(float)
    p = counts[counts > 0] / counts.sum() if counts.sum() else np.array([1.0])
    t = float(-(p * np.log2(p)).sum())
    return {"a": a, "t": t, "score": checkpoint_score(a, t)}


def _frozen_masks(frozen: RationaleModel, ids, lengths):
    return batch_topk(selector_scores(frozen.params_, ids, lengths), lengths, frozen.rationale_frac)


def warm_start(model: InfillModel, ids, lengths, M, config: CFPConfig, rng) -> list[float]:
    """Teach ``model`` to reconstruct masked tokens of its own class.

    Left context is teacher-forced with the true tokens, which matches what
    left-to-right decoding sees once earlier slots are filled.  The bag
    weights are left alone: kept text of same-class documents would teach
    them to copy the source class, the opposite of what a counterfactual needs.
    """
    opt = Adam({k: model.params[k] for k in ("cls", "ctx")}, lr=config.warm_start_lr)
    losses = []
    n = len(ids)
    for _ in range(config.warm_start_epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            b = order[s : s + config.batch_size]
            width = int(lengths[b].max())
            bi, bl, bm = ids[b, :width], lengths[b], M[b, :width]
            rows, cols = np.nonzero(bm)
            if not len(rows):
                continue
            ctx = model._context_ids(bi, rows, cols)
            kept = model.kept_bag(bi, bl, bm)
            probs = model.distribution(ctx, kept[rows])
            gold = bi[rows, cols]
            total += float(-np.log(np.maximum(probs[np.arange(len(rows)), gold], 1e-300)).sum())
            dz = probs.copy()
            dz[np.arange(len(rows)), gold] -= 1.0
            dz /= len(rows)
            dz[:, :N_SPECIAL] = 0.0
            grads = {"cls": np.zeros_like(model.params["cls"]), "ctx": np.zeros_like(model.params["ctx"])}
            grads["cls"][model.target_class] = dz.sum(axis=0)
            for j in range(model.window):
                np.add.at(grads["ctx"][j], ctx[:, j], dz)
            opt.step(model.params, grads)
        losses.append(total / max(1, int(M.sum())))
    return losses


@dataclass
class InfillTrainResult:
    model: InfillModel
    discriminator: Discriminator
    log: list = field(default_factory=list)
    best: dict = field(default_factory=dict)


def train_class_infiller(
    sources,
    reals,
    frozen: RationaleModel,
    target_class: int,
    config: CFPConfig,
) -> InfillTrainResult:
    """Train the class-``target_class`` infiller.

    ``sources`` are documents of the opposite class (their rationales are
    replaced); ``reals`` are originals of the target class shown to the
    discriminator.  The checkpoint with the best ``4.5 a + t`` on the
    first ``metric_samples`` sources is returned.
    """
    vocab = frozen.vocabulary_
    rng = np.random.default_rng([config.seed, target_class])
    model = InfillModel(vocab, target_class, config.window, rng)
    disc = Discriminator(len(vocab))
    src_ids, src_len = vocab.encode(as_token_lists(sources))
    real_ids, real_len = vocab.encode(as_token_lists(reals))
    src_M = _frozen_masks(frozen, src_ids, src_len)
    real_bags = full_bag(real_ids, real_len, len(vocab))
    fp = frozen.params_
    if config.warm_start_epochs:
        warm_start(model, real_ids, real_len, _frozen_masks(frozen, real_ids, real_len), config, rng)
    opt = Adam(model.params, lr=config.peak_lr)
    n = len(src_ids)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    total = steps_per_epoch * config.epochs
    log = []
    best = {"score": -np.inf}
    best_params = copy.deepcopy(model.params)
    step = 0
    y_target = float(target_class)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_acc = []
        for s in range(0, n, config.batch_size):
            b = order[s : s + config.batch_size]
            ids, lengths, M = src_ids[b], src_len[b], src_M[b]
            width = int(lengths.max())
            ids, M = ids[:, :width], M[:, :width]
            cf, (rows, cols, ctx, kept, probs, choice) = model.one_step(ids, lengths, M)
            # L_RL through the frozen rationale model
            logits, cache = _frozen_predict(frozen, cf, lengths)
            l_rl = classification_loss(logits, y_target).mean()
            dlogits = (sigmoid(logits) - y_target) / len(b)
            _, dpooled = classifier_backward(fp, cf, cache, dlogits)
            demb = np.zeros((len(b), width, dpooled.shape[1]))
            r_, c_ = np.nonzero(cache.argmax >= 0)
            np.add.at(demb, (r_, cache.argmax[r_, c_], c_), dpooled[r_, c_])
            g_choice = config.lambda_rl * (demb[rows, cols] @ fp["clf_emb"].T)
            # adversarial term: generator ascends the discriminator's fake loss
            fake_bags = full_bag(cf, lengths, len(vocab))
            rb = real_bags[rng.integers(len(real_bags), size=len(b))]
            l_a, _, _ = disc.loss_and_grad(rb, fake_bags)
            d_fake = disc.prob(fake_bags)
            # d(mean CE)/d(fake bag) for fake label 0, over 2B examples
            dbag = (d_fake / (2 * len(b)))[:, None] * disc.w[None, :]
            g_choice -= config.lambda_a * dbag[rows] / lengths[rows, None]
            # straight-through: one-hot forward, softmax backward
            dz = probs * (g_choice - (probs * g_choice).sum(axis=1, keepdims=True))
            dz[:, :N_SPECIAL] = 0.0
            grads = {"cls": np.zeros_like(model.params["cls"]), "ctx": np.zeros_like(model.params["ctx"])}
            grads["cls"][target_class] = dz.sum(axis=0)
            for j in range(model.window):
                np.add.at(grads["ctx"][j], ctx[:, j], dz)
            slot_doc = np.zeros((len(b), dz.shape[1]))
            np.add.at(slot_doc, rows, dz)
            grads["bag"] = kept.T @ slot_doc
            if not (np.isfinite(l_rl) and np.isfinite(l_a)):
                raise FloatingPointError(f"non-finite infiller loss at step {step}")
            opt.step(model.params, grads, lr=warmup_linear(step, config.peak_lr, config.warmup_steps, total))
            disc.sgd_step(rb, fake_bags, config.disc_lr, scale=1.0 / config.lambda_a)
            epoch_acc.append(disc.accuracy(rb, fake_bags))
            step += 1
            model.step = step
            if step % config.eval_interval == 0 or step == total:
                m = checkpoint_metric(sources, model, frozen, config.metric_samples)
                row = {"step": step, "a": m["a"], "t": m["t"], "score": m["score"], "L_RL": float(l_rl), "L_A": float(l_a)}
                log.append(row)
                if m["score"] > best["score"]:
                    best, best_params = dict(row), copy.deepcopy(model.params)
        if epoch_acc and min(epoch_acc) >= 1.0:
            warnings.warn(f"class-{target_class} discriminator accuracy pinned at 1.0 for epoch {epoch}: possible mode collapse")
    if not log:
        m = checkpoint_metric(sources, model, frozen, config.metric_samples)
        best = {"step": step, **m}
        best_params = copy.deepcopy(model.params)
    model.params = best_params
    model.step = best.get("step", step)
    return InfillTrainResult(model, disc, log, best)


@dataclass
class CFPResult:
    predictor: CounterfactualPredictor
    discriminators: dict
    log: list
    selected: dict


def train_infillers(train_docs, frozen: RationaleModel, aspect: str, config: CFPConfig) -> CFPResult:
    """Train both class infillers, grid-searching ``(lambda_rl, lambda_a)`` per class."""
    train_docs = list(train_docs)
    y = labels_for(train_docs, aspect)
    by_class = {c: [d for d, yy in zip(train_docs, y) if yy == c] for c in (0, 1)}
    grid = config.grid or ((config.lambda_rl, config.lambda_a),)
    models, discs, selected, log = {}, {}, {}, []
    for c in (0, 1):
        best = None
        for rl, la in grid:
            res = train_class_infiller(by_class[1 - c], by_class[c], frozen, c, config.with_lambdas(rl, la))
            for row in res.log:
                log.append({"class": c, "lambda_rl": rl, "lambda_a": la, **row})
            if best is None or res.best["score"] > best[0].best["score"]:
                best = (res, rl, la)
        res, rl, la = best
        models[c], discs[c] = res.model, res.discriminator
        selected[c] = {"lambda_rl": rl, "lambda_a": la, **res.best}
    return CFPResult(CounterfactualPredictor(models), discs, log, selected)


def write_metric_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "a", "t", "score"])
        for row in log:
            w.writerow([row["step"], row["a"], row["t"], row["score"]])


# --- oracle ----------------------------------------------------------------


class OracleInfiller:
    """Fills masked slots from the generator's true class-conditional pools.

    A slot holding a sentiment token is refilled from that token's aspect;
    a filler slot is refilled from the filler pool.  Sampling follows the
    generator, token noise included, and is seeded by the document text.
    """

    def __init__(self, config, seed: int = 0, noise_rate: float | None = None):
        self.config = config
        self.seed = seed
        self.noise_rate = config.noise_rate if noise_rate is None else noise_rate
        self.owner = config.token_owner()

    def infill(self, tokens, mask, target_class: int) -> tuple[str, ...]:
        tokens = tuple(tokens)
        mask = np.asarray(mask)
        if len(mask) != len(tokens):
            raise ValueError(f"mask length {len(mask)} != document length {len(tokens)}")
        rng = np.random.default_rng([self.seed, zlib.crc32(" ".join(tokens).encode())])
        out = list(tokens)
        for t in np.flatnonzero(mask):
            aspect = self.owner.get(tokens[t])
            if aspect is None:
                pool = self.config.filler
            else:
                spec = self.config.aspect(aspect)
                flip = rng.random() < self.noise_rate
                pool = spec.pool(1 - target_class if flip else target_class)
            out[t] = pool[int(rng.integers(len(pool)))]
        return tuple(out)


def oracle_infill(doc, mask, target_class: int, generator, seed: int = 0) -> tuple[str, ...]:
    tokens = doc.tokens if hasattr(doc, "tokens") else tuple(doc)
    return OracleInfiller(generator, seed).infill(tokens, mask, target_class)
