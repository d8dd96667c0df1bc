"""Selector/classifier rationale model trained under the MMI objective.

The selector scores every token from its own embedding and those of its
two neighbours and keeps the top ``ceil(rationale_frac * T)`` tokens.  The
classifier max-pools its own embeddings over the kept tokens and applies a
logistic output layer, so it never sees anything outside the rationale.

Gradients reach the selector through a straight-through rule: the hard
mask is used in the forward pass, and the loss derivative with respect to
``m_t`` is passed to the score ``s_t`` unchanged.  Because max pooling has
no derivative with respect to tokens outside the rationale, ``dL/dm_t`` is
taken as the loss gradient dotted with the change in pooled features when
``m_t`` is toggled (the discrete derivative ``h(m_t=1) - h(m_t=0)``).
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ._optim import Adam, sigmoid

logger = logging.getLogger(__name__)

PAD, UNK, MASK = "<pad>", "<unk>", "<mask>"
SELECTOR_KEYS = ("sel_emb", "sel_w", "sel_b")
CLASSIFIER_KEYS = ("clf_emb", "clf_w", "clf_b")


class TrainingDivergedError(RuntimeError):
    pass


# --- vocabulary and batching ---------------------------------------------


class Vocabulary:
    """Token <-> id map; ids 0, 1, 2 are padding, unknown and mask."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [PAD, UNK, MASK]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, 1)

    @classmethod
    def build(cls, sequences) -> "Vocabulary":
        v = cls()
        for seq in sequences:
            for t in seq:
                v.add(t)
        return v

    def encode(self, sequences) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and lengths."""
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        ids = np.zeros((len(sequences), max(int(lengths.max(initial=0)), 1)), dtype=np.int64)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = [self.stoi.get(t, 1) for t in s]
        return ids, lengths


def as_token_lists(X) -> list[tuple[str, ...]]:
    return [tuple(x.tokens) if hasattr(x, "tokens") else tuple(x) for x in X]


def labels_for(docs, aspect: str) -> np.ndarray:
    return np.array([d.labels[aspect] for d in docs], dtype=np.int64)


def rationale_length(n_tokens: int, fraction: float) -> int:
    """``ceil(fraction * n_tokens)``, at least one."""
    return max(1, math.ceil(fraction * n_tokens - 1e-9))


# --- masks and the coherency penalty -------------------------------------


def select_topk(scores, k: int) -> np.ndarray:
    """Binary mask over the ``k`` largest scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1:
        raise ValueError("scores must be a vector")
    if not 1 <= k <= len(s):
        raise ValueError(f"k={k} out of range for {len(s)} scores")
    order = np.argsort(-s, kind="stable")
    m = np.zeros(len(s), dtype=np.int8)
    m[order[:k]] = 1
    return m


def batch_topk(scores: np.ndarray, lengths: np.ndarray, fraction: float) -> np.ndarray:
    """Row-wise :func:`select_topk` on padded scores with ``k = ceil(fraction * T)``."""
    n, t = scores.shape
    valid = np.arange(t)[None, :] < lengths[:, None]
    s = np.where(valid, scores, -np.inf)
    order = np.argsort(-s, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(t), (n, t)), axis=1)
    k = np.array([rationale_length(int(L), fraction) for L in lengths])
    return ((ranks < k[:, None]) & valid).astype(np.int8)


def transitions(mask) -> int:
    m = np.asarray(mask, dtype=np.int64)
    return int(np.abs(np.diff(m)).sum())


def coherency_penalty(mask, weight: float) -> float:
    """``weight / T`` times the number of adjacent 0/1 transitions."""
    m = np.asarray(mask)
    if m.size == 0:
        return 0.0
    return weight * transitions(m) / m.size


def _batch_transitions(M: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    t = M.shape[1]
    valid_pair = np.arange(1, t)[None, :] < lengths[:, None]
    return (np.abs(np.diff(M.astype(np.int64), axis=1)) * valid_pair).sum(axis=1)


# --- forward / backward --------------------------------------------------


def init_params(vocab_size: int, dim: int, rng: np.random.Generator, scale: float = 0.1) -> dict:
    p = {
        "sel_emb": rng.normal(0, scale, (vocab_size, dim)),
        "sel_w": rng.normal(0, scale, 3 * dim),
        "sel_b": np.zeros(1),
        "clf_emb": rng.normal(0, scale, (vocab_size, dim)),
        "clf_w": rng.normal(0, scale, dim),
        "clf_b": np.zeros(1),
    }
    p["sel_emb"][0] = 0.0
    p["clf_emb"][0] = 0.0
    return p


def _context(params, ids, lengths):
    n, t = ids.shape
    d = params["sel_emb"].shape[1]
    valid = (np.arange(t)[None, :] < lengths[:, None])
    e = params["sel_emb"][ids] * valid[..., None]
    ctx = np.zeros((n, t, 3 * d))
    ctx[:, 1:, :d] = e[:, :-1]
    ctx[:, :, d : 2 * d] = e
    ctx[:, :-1, 2 * d :] = e[:, 1:]
    return ctx, valid


def selector_scores(params, ids, lengths) -> np.ndarray:
    ctx, valid = _context(params, ids, lengths)
    s = ctx @ params["sel_w"] + params["sel_b"][0]
    return np.where(valid, s, -np.inf)


def selector_backward(params, ids, lengths, dscores) -> dict:
    """Gradients of ``sum(dscores * scores)`` with respect to selector parameters."""
    ctx, valid = _context(params, ids, lengths)
    g = np.where(valid, dscores, 0.0)
    d = params["sel_emb"].shape[1]
    w = params["sel_w"]
    grads = {"sel_w": np.einsum("nt,ntk->k", g, ctx), "sel_b": np.array([g.sum()])}
    demb = np.zeros_like(params["sel_emb"])
    n, t = ids.shape
    # token at position u feeds score u (centre), u+1 (as prev) and u-1 (as next)
    contrib = g[..., None] * w[None, None, d : 2 * d]
    contrib[:, :-1] += g[:, 1:, None] * w[None, None, :d]
    contrib[:, 1:] += g[:, :-1, None] * w[None, None, 2 * d :]
    contrib *= valid[..., None]
    np.add.at(demb, ids.ravel(), contrib.reshape(n * t, d))
    demb[0] = 0.0
    grads["sel_emb"] = demb
    return grads


@dataclass
class _ClfCache:
    emb: np.ndarray  # (N, T, d) classifier embeddings
    pooled: np.ndarray  # (N, d)
    argmax: np.ndarray  # (N, d) position of the max, -1 if empty
    second: np.ndarray  # (N, d) runner-up value (0 when fewer than two selected)
    logits: np.ndarray


def classifier_forward(params, ids, M) -> tuple[np.ndarray, _ClfCache]:
    emb = params["clf_emb"][ids]
    sel = M.astype(bool)
    masked = np.where(sel[..., None], emb, -np.inf)
    n_sel = sel.sum(axis=1)
    if masked.shape[1] >= 2:
        top2 = -np.partition(-masked, 1, axis=1)[:, :2]
        second = np.where(n_sel[:, None] >= 2, top2[:, 1], 0.0)
    else:
        second = np.zeros((masked.shape[0], masked.shape[2]))
    argmax = np.argmax(masked, axis=1)
    empty = n_sel == 0
    pooled = np.where(empty[:, None], 0.0, masked.max(axis=1, initial=-np.inf))
    argmax = np.where(empty[:, None], -1, argmax)
    logits = pooled @ params["clf_w"] + params["clf_b"][0]
    return logits, _ClfCache(emb, pooled, argmax, second, logits)


def classification_loss(logits, y) -> np.ndarray:
    """Per-document binary cross-entropy computed from logits."""
    return np.logaddexp(0.0, logits) - y * logits


def classifier_backward(params, ids, cache: _ClfCache, dlogits) -> tuple[dict, np.ndarray]:
    """Gradients for classifier parameters and ``dL/dpooled``."""
    w = params["clf_w"]
    grads = {"clf_w": cache.pooled.T @ dlogits, "clf_b": np.array([dlogits.sum()])}
    dpooled = dlogits[:, None] * w[None, :]
    demb = np.zeros_like(params["clf_emb"])
    n, d = cache.pooled.shape
    rows, cols = np.nonzero(cache.argmax >= 0)
    tok = ids[rows, cache.argmax[rows, cols]]
    np.add.at(demb, (tok, cols), dpooled[rows, cols])
    demb[0] = 0.0
    grads["clf_emb"] = demb
    return grads, dpooled


def mask_gradient(cache: _ClfCache, M, lengths, dpooled, coherency: float) -> np.ndarray:
    """Straight-through ``dL/dm_t`` for the classification and coherency terms.

    ``dpooled`` must already carry any batch averaging; the coherency part
    is scaled by ``coherency / T`` and left per-document.
    """
    emb, pooled = cache.emb, cache.pooled
    n, t, d = emb.shape
    sel = M.astype(bool)
    valid = np.arange(t)[None, :] < lengths[:, None]
    # toggling an unselected token on raises the pool to max(e, h)
    gain = np.maximum(emb - pooled[:, None, :], 0.0)
    # toggling the arg-max token off drops the pool to the runner-up
    is_arg = cache.argmax[:, None, :] == np.arange(t)[None, :, None]
    loss_on_removal = np.where(is_arg, (pooled - cache.second)[:, None, :], 0.0)
    delta = np.where(sel[..., None], loss_on_removal, gain)
    g = np.einsum("ntd,nd->nt", delta, dpooled)
    if coherency:
        m = M.astype(float)
        nb = np.zeros_like(m)
        left = np.zeros_like(m)
        right = np.zeros_like(m)
        left[:, 1:] = 1 - 2 * m[:, :-1]
        right[:, :-1] = (1 - 2 * m[:, 1:]) * (np.arange(1, t)[None, :] < lengths[:, None])
        nb = left + right
        g = g + coherency * nb / lengths[:, None]
    return np.where(valid, g, 0.0)


# --- estimator -----------------------------------------------------------


class RationaleModel(ClassifierMixin, BaseEstimator):
    """Jointly trained top-K selector and max-pool classifier.

    Parameters
    ----------
    rationale_frac : float
        Fraction of tokens kept in every rationale.
    coherency : float
        Weight of the transition penalty on the mask.
    embed_dim : int
        Width of both embedding tables.
    learning_rate, epochs, batch_size, patience :
        Adam step size, maximum epochs, minibatch size and early-stopping
        patience (in epochs, on dev selector cost).
    random_state : int or None
        Seeds initialisation and minibatch order.
    """

    def __init__(
        self,
        rationale_frac: float = 0.10,
        coherency: float = 0.0,
        embed_dim: int = 16,
        learning_rate: float = 1e-3,
        epochs: int = 21,
        batch_size: int = 50,
        patience: int = 5,
        init_scale: float = 0.1,
        random_state: int | None = None,
    ):
        self.rationale_frac = rationale_frac
        self.coherency = coherency
        self.embed_dim = embed_dim
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.init_scale = init_scale
        self.random_state = random_state

    # -- helpers

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("RationaleModel is not fitted yet")

    def _validate_hyperparams(self):
        if not 0 < self.rationale_frac <= 1:
            raise ValueError("rationale_frac must lie in (0, 1]")
        if self.coherency < 0:
            raise ValueError("coherency weight must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def _encode(self, X):
        seqs = as_token_lists(X)
        if not seqs:
            raise ValueError("no documents given")
        if any(len(s) == 0 for s in seqs):
            raise ValueError("empty documents are not supported")
        return self.vocabulary_.encode(seqs)

    def _forward(self, ids, lengths, y=None):
        scores = selector_scores(self.params_, ids, lengths)
        M = batch_topk(scores, lengths, self.rationale_frac)
        logits, cache = classifier_forward(self.params_, ids, M)
        return M, logits, cache

    def _costs(self, ids, lengths, y, batch=2000):
        ly = lc = acc = 0.0
        n = len(y)
        for s in range(0, n, batch):
            sl = slice(s, s + batch)
            M, logits, _ = self._forward(ids[sl], lengths[sl])
            ly += classification_loss(logits, y[sl]).sum()
            lc += (_batch_transitions(M, lengths[sl]) / lengths[sl]).sum()
            acc += ((logits > 0).astype(int) == y[sl]).sum()
        ly, lc = ly / n, lc / n
        return {"L_y": ly, "L_c": lc, "L_r": self.coherency * lc, "L_s": ly + self.coherency * lc, "acc": acc / n}

    def _train(self, X, y, X_dev, y_dev, epochs, update_selector=True, objective="L_s"):
        ids, lengths = self._encode(X)
        y = np.asarray(y, dtype=np.int64)
        if len(y) != len(ids):
            raise ValueError("X and y lengths differ")
        if X_dev is not None:
            dev_ids, dev_len = self._encode(X_dev)
            y_dev = np.asarray(y_dev, dtype=np.int64)
        else:
            dev_ids, dev_len, y_dev = ids, lengths, y
        keys = (SELECTOR_KEYS if update_selector else ()) + CLASSIFIER_KEYS
        params = self.params_
        opt = Adam({k: params[k] for k in keys}, lr=self.learning_rate)
        rng = self._rng
        log = []
        best = self._costs(dev_ids, dev_len, y_dev)[objective]
        best_params = copy.deepcopy(params)
        stale = 0
        n = len(y)
        for epoch in range(1, epochs + 1):
            order = rng.permutation(n)
            sums = np.zeros(3)
            for s in range(0, n, self.batch_size):
                b = order[s : s + self.batch_size]
                bi, bl, by = ids[b], lengths[b], y[b]
                bi = bi[:, : int(bl.max())]
                M, logits, cache = self._forward(bi, bl)
                ly = classification_loss(logits, by)
                lr_ = self.coherency * _batch_transitions(M, bl) / bl
                if not np.all(np.isfinite(ly)):
                    raise TrainingDivergedError(f"non-finite classification loss at epoch {epoch}")
                sums += [ly.sum(), lr_.sum(), len(b)]
                dlogits = (sigmoid(logits) - by) / len(b)
                grads, dpooled = classifier_backward(params, bi, cache, dlogits)
                if update_selector:
                    dm = mask_gradient(cache, M, bl, dpooled, self.coherency / len(b))
                    grads.update(selector_backward(params, bi, bl, dm))
                opt.step(params, {k: grads[k] for k in keys})
                if not all(np.all(np.isfinite(params[k])) for k in keys):
                    raise TrainingDivergedError(f"non-finite parameters at epoch {epoch}")
            dev = self._costs(dev_ids, dev_len, y_dev)
            row = {
                "epoch": epoch,
                "L_y": sums[0] / sums[2],
                "L_r": sums[1] / sums[2],
                "L_s": (sums[0] + sums[1]) / sums[2],
                "dev_acc": 100.0 * dev["acc"],
            }
            log.append(row)
            logger.debug("epoch %d %s dev %s", epoch, row, dev)
            if dev[objective] < best - 1e-9:
                best, best_params, stale = dev[objective], copy.deepcopy(params), 0
            else:
                stale += 1
                if stale >= self.patience:
                    break
        self.params_ = best_params
        return log

    # -- public API

    def fit(self, X, y, X_dev=None, y_dev=None, vocabulary: Vocabulary | None = None, init_selector=None):
        """Train selector and classifier jointly.

        ``init_selector`` (a fitted model sharing the vocabulary and embedding
        size) seeds the selector weights; the classifier always starts fresh.
        """
        self._validate_hyperparams()
        self._rng = np.random.default_rng(self.random_state)
        seqs = as_token_lists(X)
        if init_selector is not None:
            init_selector._check_fitted()
            vocabulary = init_selector.vocabulary_ if vocabulary is None else vocabulary
            if vocabulary != init_selector.vocabulary_ or init_selector.embed_dim != self.embed_dim:
                raise ValueError("init_selector must share the vocabulary and embed_dim")
        if vocabulary is None:
            vocabulary = Vocabulary.build(seqs + (as_token_lists(X_dev) if X_dev is not None else []))
        self.vocabulary_ = vocabulary
        self.classes_ = np.array([0, 1])
        self.params_ = init_params(len(vocabulary), self.embed_dim, self._rng, self.init_scale)
        if init_selector is not None:
            for k in SELECTOR_KEYS:
                self.params_[k] = init_selector.params_[k].copy()
        self.log_ = self._train(seqs, y, X_dev, y_dev, self.epochs)
        return self

    def masks(self, X) -> list[np.ndarray]:
        """Rationale mask of every document, unpadded."""
        self._check_fitted()
        ids, lengths = self._encode(X)
        scores = selector_scores(self.params_, ids, lengths)
        M = batch_topk(scores, lengths, self.rationale_frac)
        return [M[i, : lengths[i]].copy() for i in range(len(lengths))]

    transform = masks

    def select(self, tokens) -> np.ndarray:
        return self.masks([tokens])[0]

    def predict_proba(self, X, masks=None):
        """Class probabilities; ``masks`` overrides the selector when given."""
        self._check_fitted()
        ids, lengths = self._encode(X)
        if masks is None:
            _, logits, _ = self._forward(ids, lengths)
        else:
            M = np.zeros_like(ids, dtype=np.int8)
            for i, m in enumerate(masks):
                m = np.asarray(m)
                if len(m) != lengths[i]:
                    raise ValueError(f"mask {i} has length {len(m)} for {lengths[i]} tokens")
                M[i, : len(m)] = m
            logits, _ = classifier_forward(self.params_, ids, M)
        p = sigmoid(logits)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int64)

    def costs(self, X, y) -> dict:
        """Mean ``L_y``, unweighted coherency ``L_c``, ``L_r``, ``L_s`` and accuracy."""
        self._check_fitted()
        ids, lengths = self._encode(X)
        return self._costs(ids, lengths, np.asarray(y, dtype=np.int64))

    def selector_fingerprint(self) -> str:
        self._check_fitted()
        h = hashlib.sha256()
        for k in SELECTOR_KEYS:
            h.update(np.ascontiguousarray(self.params_[k]).tobytes())
        return h.hexdigest()

    # -- persistence

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "kind": "rationale_model",
            "hyperparams": self.get_params(),
            "vocabulary": self.vocabulary_.itos,
            "params": {k: v.tolist() for k, v in self.params_.items()},
            "log": getattr(self, "log_", []),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RationaleModel":
        model = cls(**d["hyperparams"])
        vocab = Vocabulary()
        for t in d["vocabulary"][3:]:
            vocab.add(t)
        model.vocabulary_ = vocab
        model.classes_ = np.array([0, 1])
        model.params_ = {k: np.asarray(v, dtype=float) for k, v in d["params"].items()}
        model.log_ = d.get("log", [])
        model._rng = np.random.default_rng(model.random_state)
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RationaleModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_training_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "L_y", "L_r", "L_s", "dev_acc"], lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: row[k] for k in w.fieldnames})


def finetune_classifier(model: RationaleModel, X, y, X_dev=None, y_dev=None, epochs: int | None = None, seed: int | None = None) -> RationaleModel:
    """Copy of ``model`` whose classifier is retrained with the selector frozen.

    Early stopping uses dev ``L_y``.  ``X`` should be the original,
    unaugmented training set.
    """
    model._check_fitted()
    out = copy.deepcopy(model)
    out._rng = np.random.default_rng(model.random_state if seed is None else seed)
    n_epochs = model.epochs if epochs is None else epochs
    if n_epochs == 0:
        return out
    out.finetune_log_ = out._train(as_token_lists(X), y, X_dev, y_dev, n_epochs, update_selector=False, objective="L_y")
    return out


# --- grid selection ------------------------------------------------------


def model_select(grid_results):
    """Pick the candidate minimising ``L_c / mean(L_c) + L_y / mean(L_y)``.

    ``grid_results`` holds ``(hyperparams, L_c, L_y)`` triples.  Returns the
    winning hyperparams; ties go to the earliest candidate.
    """
    results = list(grid_results)
    if not results:
        raise ValueError("empty grid")
    lc = np.array([r[1] for r in results], dtype=float)
    ly = np.array([r[2] for r in results], dtype=float)
    wc = 1.0 / lc.mean() if lc.mean() > 0 else 0.0
    wy = 1.0 / ly.mean() if ly.mean() > 0 else 0.0
    scores = wc * lc + wy * ly
    return results[int(np.argmin(scores))][0]


def refine_grid(best: float, offsets=(-2, -1, 1, 2), minimum: float = 0.0) -> list[float]:
    """Second-stage grid around the best first-stage coherency weight."""
    return [best + o for o in offsets if best + o >= minimum]
