import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from rationale_cda.rationale_model import (
    RationaleModel,
    Vocabulary,
    batch_topk,
    classification_loss,
    classifier_backward,
    classifier_forward,
    coherency_penalty,
    finetune_classifier,
    init_params,
    labels_for,
    mask_gradient,
    model_select,
    rationale_length,
    refine_grid,
    select_topk,
    selector_backward,
    selector_scores,
    transitions,
)
from rationale_cda.synth_corpus import default_config, generate_corpus, split_corpus


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@pytest.fixture(scope="module")
def data():
    cfg = default_config(n_docs=400, seed=1)
    docs = generate_corpus(cfg)
    tr, dv, an = split_corpus(docs, (0.7, 0.15, 0.15), seed=1)
    return cfg, tr, dv, an


@pytest.fixture(scope="module")
def fitted(data):
    cfg, tr, dv, _ = data
    a = cfg.target_aspect
    m = RationaleModel(epochs=3, random_state=0)
    return m.fit(tr, labels_for(tr, a), dv, labels_for(dv, a), vocabulary=Vocabulary(cfg.vocabulary()))


class TestTopK:
    def test_example(self):
        assert select_topk([0.1, 0.9, 0.3, 0.7], 2).tolist() == [0, 1, 0, 1]

    def test_ties_lower_index(self):
        assert select_topk([1.0, 1.0, 1.0], 1).tolist() == [1, 0, 0]

    @pytest.mark.parametrize("k", [0, 5])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            select_topk([1.0, 2.0, 3.0, 4.0], k)

    @pytest.mark.parametrize("n,k", [(1, 1), (10, 1), (11, 2), (30, 3), (31, 4), (100, 10)])
    def test_length(self, n, k):
        assert rationale_length(n, 0.10) == k

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(0, 1000))
    def test_batch_cardinality(self, lengths, seed):
        lengths = np.array(lengths)
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=(len(lengths), lengths.max()))
        M = batch_topk(scores, lengths, 0.1)
        for row, L in zip(M, lengths):
            assert row.sum() == int(np.ceil(0.1 * L - 1e-9)) or (row.sum() == 1 and L < 10)
            assert row[L:].sum() == 0


class TestCoherency:
    def test_example(self):
        assert transitions([1, 0, 1, 1, 0]) == 3
        assert coherency_penalty([0, 1, 1, 0, 0], 1.0) == pytest.approx(2 / 5)

    def test_contiguous_has_two_or_fewer(self):
        assert transitions([0, 0, 1, 1, 1, 0]) == 2
        assert transitions([1, 1, 0]) == 1


class TestClassifier:
    def test_occlusion(self):
        """Tokens outside the mask cannot change the prediction."""
        rng = np.random.default_rng(0)
        p = init_params(12, 4, rng)
        ids = rng.integers(3, 12, size=(1, 8))
        M = np.zeros((1, 8), dtype=np.int8)
        M[0, [1, 4]] = 1
        base, _ = classifier_forward(p, ids, M)
        for t in np.flatnonzero(M[0] == 0):
            other = ids.copy()
            other[0, t] = (other[0, t] + 1 - 3) % 9 + 3
            assert classifier_forward(p, other, M)[0] == base

    def test_empty_mask_gives_bias(self):
        rng = np.random.default_rng(1)
        p = init_params(6, 3, rng)
        p["clf_b"][0] = 0.3
        z, _ = classifier_forward(p, np.array([[3, 4, 5]]), np.zeros((1, 3), dtype=np.int8))
        assert z[0] == pytest.approx(0.3)

    def test_maxpool_idempotent(self):
        """Repeating a selected token does not change the pooled feature."""
        rng = np.random.default_rng(2)
        p = init_params(8, 4, rng)
        z1, _ = classifier_forward(p, np.array([[3, 5, 6]]), np.array([[1, 1, 0]]))
        z2, _ = classifier_forward(p, np.array([[3, 5, 5, 6]]), np.array([[1, 1, 1, 0]]))
        assert z1[0] == pytest.approx(z2[0], abs=0)


def _clf_loss(p, ids, M, y):
    z, _ = classifier_forward(p, ids, M)
    return classification_loss(z, y).mean()


def test_classifier_gradients_finite_difference():
    rng = np.random.default_rng(3)
    checked = 0
    for trial in range(10):
        p = init_params(15, 5, rng, scale=0.5)
        ids = rng.integers(3, 15, size=(4, 12))
        M = batch_topk(rng.normal(size=(4, 12)), np.full(4, 12), 0.25)
        y = rng.integers(0, 2, 4).astype(float)
        z, cache = classifier_forward(p, ids, M)
        dlogits = (0.5 * (1 + np.tanh(0.5 * z)) - y) / 4
        grads, _ = classifier_backward(p, ids, cache, dlogits)
        for key in ("clf_w", "clf_b", "clf_emb"):
            flat = p[key].reshape(-1)
            idx = rng.choice(flat.size, min(4, flat.size), replace=False)
            if key == "clf_emb":
                # only rows that can be an arg-max carry gradient; include them
                used = np.unique(ids[M.astype(bool)])
                idx = np.concatenate([idx, used[:2] * p[key].shape[1]])
            for i in idx:
                old = flat[i]
                flat[i] = old + 1e-6
                up = _clf_loss(p, ids, M, y)
                flat[i] = old - 1e-6
                dn = _clf_loss(p, ids, M, y)
                flat[i] = old
                fd = (up - dn) / 2e-6
                an = grads[key].reshape(-1)[i]
                assert rel_err(an, fd) < 1e-4 or abs(an - fd) < 1e-9
                checked += 1
    assert checked >= 100


def test_selector_surrogate_gradients_finite_difference():
    rng = np.random.default_rng(4)
    checked = 0
    for trial in range(10):
        p = init_params(15, 4, rng, scale=0.5)
        lengths = rng.integers(5, 12, size=3)
        ids = rng.integers(3, 15, size=(3, 12))
        ids[np.arange(12)[None, :] >= lengths[:, None]] = 0
        c = rng.normal(size=(3, 12))
        f = lambda: float(np.where(np.isfinite(s := selector_scores(p, ids, lengths)), c * s, 0.0).sum())
        grads = selector_backward(p, ids, lengths, c)
        for key in ("sel_w", "sel_b", "sel_emb"):
            flat = p[key].reshape(-1)
            idx = rng.choice(flat.size, min(5, flat.size), replace=False)
            if key == "sel_emb":
                idx = np.concatenate([idx[:2], ids[0, :3] * p[key].shape[1] + 1])
            for i in idx:
                old = flat[i]
                flat[i] = old + 1e-6
                up = f()
                flat[i] = old - 1e-6
                dn = f()
                flat[i] = old
                fd = (up - dn) / 2e-6
                an = grads[key].reshape(-1)[i]
                assert rel_err(an, fd) < 1e-4 or abs(an - fd) < 1e-9
                checked += 1
    assert checked >= 100


def test_mask_gradient_is_exact_toggle_effect():
    """With dL/dlogit = 1 the straight-through term equals the logit change from toggling one token."""
    rng = np.random.default_rng(5)
    p = init_params(10, 3, rng, scale=0.5)
    ids = rng.integers(3, 10, size=(2, 9))
    lengths = np.array([9, 9])
    M = batch_topk(rng.normal(size=(2, 9)), lengths, 0.3)
    z, cache = classifier_forward(p, ids, M)
    _, dpooled = classifier_backward(p, ids, cache, np.ones(2))
    g = mask_gradient(cache, M, lengths, dpooled, coherency=0.0)
    for n in range(2):
        for t in range(9):
            M2 = M.copy()
            M2[n, t] ^= 1
            z2, _ = classifier_forward(p, ids, M2)
            sign = 1 if M[n, t] == 0 else -1
            assert sign * (z2[n] - z[n]) == pytest.approx(g[n, t], abs=1e-12)


def test_coherency_gradient_matches_penalty_difference():
    M = np.array([[0, 1, 1, 0, 0, 1]], dtype=np.int8)
    lengths = np.array([6])
    zeros = np.zeros((1, 6, 1))
    from rationale_cda.rationale_model import _ClfCache

    cache = _ClfCache(zeros, np.zeros((1, 1)), -np.ones((1, 1), dtype=int), np.zeros((1, 1)), np.zeros(1))
    g = mask_gradient(cache, M, lengths, np.zeros((1, 1)), coherency=1.0)
    for t in range(6):
        on, off = M[0].copy(), M[0].copy()
        on[t], off[t] = 1, 0
        assert g[0, t] == pytest.approx(coherency_penalty(on, 1.0) - coherency_penalty(off, 1.0))


class TestEstimator:
    def test_sklearn_params(self):
        m = RationaleModel(coherency=2.0, epochs=4)
        assert clone(m).get_params()["coherency"] == 2.0
        assert m.set_params(epochs=5).epochs == 5

    def test_bad_hyperparams(self, data):
        cfg, tr, *_ = data
        with pytest.raises(ValueError):
            RationaleModel(rationale_frac=0.0).fit(tr, labels_for(tr, cfg.target_aspect))

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            RationaleModel().predict([("a", "b")])

    def test_determinism(self, data, fitted):
        cfg, tr, dv, _ = data
        a = cfg.target_aspect
        again = RationaleModel(epochs=3, random_state=0).fit(
            tr, labels_for(tr, a), dv, labels_for(dv, a), vocabulary=Vocabulary(cfg.vocabulary())
        )
        assert again.selector_fingerprint() == fitted.selector_fingerprint()
        assert again.log_ == fitted.log_

    def test_mask_cardinality(self, data, fitted):
        _, _, _, an = data
        for d, m in zip(an, fitted.masks(an)):
            assert m.sum() == rationale_length(len(d), 0.10)

    def test_log_columns(self, fitted):
        assert set(fitted.log_[0]) >= {"epoch", "L_y", "L_r", "L_s", "dev_acc"}

    def test_save_load(self, fitted, data, tmp_path):
        fitted.save(tmp_path / "m.json")
        back = RationaleModel.load(tmp_path / "m.json")
        an = data[3]
        assert back.selector_fingerprint() == fitted.selector_fingerprint()
        np.testing.assert_array_equal(back.predict_proba(an), fitted.predict_proba(an))

    def test_finetune_freezes_selector(self, data, fitted):
        cfg, tr, dv, _ = data
        a = cfg.target_aspect
        before = {k: v.copy() for k, v in fitted.params_.items()}
        tuned = finetune_classifier(fitted, tr, labels_for(tr, a), dv, labels_for(dv, a), epochs=2)
        for k in ("sel_emb", "sel_w", "sel_b"):
            assert tuned.params_[k].tobytes() == before[k].tobytes()
        assert tuned.selector_fingerprint() == fitted.selector_fingerprint()
        assert not np.array_equal(tuned.params_["clf_w"], before["clf_w"])
        # the source model is untouched
        assert all(np.array_equal(fitted.params_[k], before[k]) for k in before)

    def test_finetune_zero_epochs(self, data, fitted):
        cfg, tr, *_ = data
        tuned = finetune_classifier(fitted, tr, labels_for(tr, cfg.target_aspect), epochs=0)
        assert all(np.array_equal(tuned.params_[k], fitted.params_[k]) for k in fitted.params_)

    def test_init_selector(self, data, fitted):
        cfg, tr, *_ = data
        m = RationaleModel(epochs=0, random_state=3).fit(
            tr, labels_for(tr, cfg.target_aspect), init_selector=fitted
        )
        assert m.selector_fingerprint() == fitted.selector_fingerprint()

    def test_costs(self, data, fitted):
        cfg, _, dv, _ = data
        c = fitted.costs(dv, labels_for(dv, cfg.target_aspect))
        assert c["L_s"] == pytest.approx(c["L_y"] + fitted.coherency * c["L_c"])


class TestSelection:
    def test_example(self):
        # L_c = [2, 4], L_y = [1, 3]: weights 1/3 and 1/2
        assert model_select([("first", 2.0, 1.0), ("second", 4.0, 3.0)]) == "first"

    def test_single(self):
        assert model_select([("only", 5.0, 5.0)]) == "only"

    def test_lower_coherency_cost_wins(self):
        assert model_select([("a", 3.0, 1.0), ("b", 2.0, 1.0)]) == "b"

    def test_tie_first(self):
        assert model_select([("a", 2.0, 4.0), ("b", 2.0, 4.0)]) == "a"

    def test_inverse_mean_weights(self):
        # L_c dominates in scale, but is normalised away
        assert model_select([("a", 100.0, 0.2), ("b", 110.0, 0.1)]) == "b"

    def test_refine(self):
        assert refine_grid(5) == [3, 4, 6, 7]
        assert refine_grid(1) == [0, 2, 3]

    def test_empty(self):
        with pytest.raises(ValueError):
            model_select([])
