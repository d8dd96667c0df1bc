"""Build augmented corpora: counterfactual (CDA), factual (FDA) and antonym (ANT)."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .synth_corpus import Document


class GroundTruthSelector:
    """Selector stand-in that returns gold masks.

    With ``error_rate > 0`` a random ``round(error_rate * n)`` of the
    documents get ``wrong_aspect``'s mask instead, simulating a selector
    that picks the spurious text.
    """

    def __init__(self, aspect: str, wrong_aspect: str | None = None, error_rate: float = 0.0, seed: int = 0):
        if not 0.0 <= error_rate <= 1.0:
            raise ValueError("error_rate must lie in [0, 1]")
        if error_rate > 0 and wrong_aspect is None:
            raise ValueError("error_rate > 0 needs a wrong_aspect")
        self.aspect = aspect
        self.wrong_aspect = wrong_aspect
        self.error_rate = error_rate
        self.seed = seed

    def masks(self, docs) -> list[np.ndarray]:
        docs = list(docs)
        n_err = int(round(self.error_rate * len(docs)))
        wrong = np.zeros(len(docs), dtype=bool)
        if n_err:
            wrong[np.random.default_rng(self.seed).choice(len(docs), n_err, replace=False)] = True
        return [d.mask(self.wrong_aspect if w else self.aspect) for d, w in zip(docs, wrong)]

    transform = masks


def _masks_for(selector, corpus) -> list[np.ndarray]:
    if hasattr(selector, "masks"):
        return selector.masks(corpus)
    if callable(selector):
        return [np.asarray(selector(d)) for d in corpus]
    masks = list(selector)
    if len(masks) != len(corpus):
        raise ValueError("one mask per document required")
    return [np.asarray(m) for m in masks]


def _generated(src: Document, tokens, mask, aspect: str, label: int, method: str) -> Document:
    mask = np.asarray(mask, dtype=np.int8)
    masks = {}
    for name, m in src.masks.items():
        m = np.asarray(m, dtype=np.int8)
        masks[name] = np.maximum(m, mask) if name == aspect else m * (1 - mask)
    labels = dict(src.labels)
    labels[aspect] = int(label)
    return Document(
        id=f"{src.id}:{method}",
        tokens=tuple(tokens),
        labels=labels,
        masks=masks,
        provenance=method,
        source_id=src.id,
    )


def _augment(corpus, selector, aspect, method, fill: Callable, flip: bool) -> list[Document]:
    corpus = list(corpus)
    generated = []
    for doc, mask in zip(corpus, _masks_for(selector, corpus)):
        if len(mask) != len(doc):
            raise ValueError(f"mask/document length mismatch for {doc.id}")
        y = int(doc.labels[aspect])
        target = 1 - y if flip else y
        tokens = fill(doc.tokens, mask, target)
        generated.append(_generated(doc, tokens, mask, aspect, target, method))
    return concat_augmented(corpus, generated)


def make_cda(corpus, selector, infiller, aspect: str) -> list[Document]:
    """Originals followed by one label-flipped counterfactual each."""
    return _augment(corpus, selector, aspect, "cda", infiller.infill, flip=True)


def make_fda(corpus, selector, infiller, aspect: str) -> list[Document]:
    """Originals followed by one same-label regeneration each."""
    return _augment(corpus, selector, aspect, "fda", infiller.infill, flip=False)


def antonym_substitute(tokens: Sequence[str], mask, antonyms: Mapping[str, str]) -> tuple[str, ...]:
    return tuple(antonyms.get(t, t) if m else t for t, m in zip(tokens, mask))


def make_ant(corpus, selector, antonyms: Mapping[str, str], aspect: str) -> list[Document]:
    """Rationale tokens swapped for their antonyms (when known), label flipped."""
    return _augment(corpus, selector, aspect, "ant", lambda toks, m, _: antonym_substitute(toks, m, antonyms), flip=True)


def concat_augmented(original: Sequence[Document], generated: Sequence[Document]) -> list[Document]:
    """Originals then generated documents; ids must be unique and back-references resolvable."""
    out = list(original) + list(generated)
    ids = [d.id for d in out]
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for i in ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise ValueError(f"id collision in augmented corpus: {dup!r}")
    known = set(ids)
    for d in generated:
        if d.source_id is not None and d.source_id not in known:
            raise ValueError(f"generated doc {d.id} refers to unknown source {d.source_id!r}")
    return out
