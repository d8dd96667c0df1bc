import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rationale_cda.info_core import (
    BenefitCurve,
    BinaryScenario,
    DegenerateConditionalError,
    JointDistribution,
    benefit_curve,
    benefit_family,
    cda_benefit,
    cda_mix_conditionals,
    error_budget,
    estimate_binary_joint,
    information_measures,
    write_curves_csv,
)
from rationale_cda.synth_corpus import Document

# 1 - H_b(3/4), from the closed form of the binary entropy
I_THREE_QUARTERS = 0.18872187554086717


def brute_force_mi(table, a, b):
    """Sum p(a,b) log2 p(a,b) / (p(a) p(b)) cell by cell."""
    t = np.asarray(table, dtype=float)
    shape = t.shape
    pab = {}
    for idx in np.ndindex(*shape):
        key = (idx[a], idx[b])
        pab[key] = pab.get(key, 0.0) + t[idx]
    pa, pb = {}, {}
    for (i, j), p in pab.items():
        pa[i] = pa.get(i, 0.0) + p
        pb[j] = pb.get(j, 0.0) + p
    total = 0.0
    for (i, j), p in pab.items():
        if p > 0:
            total += p * (math.log2(p) - math.log2(pa[i]) - math.log2(pb[j]))
    return total


def brute_force_cond_entropy(table, target, cond):
    t = np.asarray(table, dtype=float)
    pct, pc = {}, {}
    for idx in np.ndindex(*t.shape):
        pct[(idx[cond], idx[target])] = pct.get((idx[cond], idx[target]), 0.0) + t[idx]
        pc[idx[cond]] = pc.get(idx[cond], 0.0) + t[idx]
    return -sum(p * (math.log2(p) - math.log2(pc[c])) for (c, _), p in pct.items() if p > 0)


def _joint(cells):
    return JointDistribution(np.asarray(cells, dtype=float).reshape(2, 2, 2))


class TestJointDistribution:
    def test_rejects_negative(self):
        t = np.full((2, 2, 2), 1 / 8)
        t[0, 0, 0] = -0.1
        t[1, 1, 1] += 0.1
        with pytest.raises(ValueError):
            JointDistribution(t)

    def test_rejects_bad_mass(self):
        with pytest.raises(ValueError):
            JointDistribution(np.full((2, 2, 2), 0.1))

    def test_table_is_read_only(self):
        j = JointDistribution(np.full((2, 2, 2), 1 / 8))
        with pytest.raises(ValueError):
            j.table[0, 0, 0] = 1.0

    def test_zero_mass_conditional_is_error(self):
        t = np.zeros((2, 2, 2))
        t[0, :, :] = 0.25
        j = JointDistribution(t)
        with pytest.raises(DegenerateConditionalError):
            j.conditional("y1", "x1")

    def test_json_round_trip(self):
        rng = np.random.default_rng(0)
        t = rng.random((3, 2, 2))
        j = JointDistribution(t / t.sum())
        cells = json.loads(j.to_json())
        assert set(cells[0]) == {"x1", "x2", "y1", "p"}
        assert np.allclose(JointDistribution.from_json(j.to_json()).table, j.table, atol=0)


class TestInformationMeasures:
    def test_independent_fair_coins(self):
        j = JointDistribution(np.full((2, 2, 2), 1 / 8))
        m = information_measures(j, "y1", "x1")
        assert m.mutual_information == 0.0
        assert m.entropy == pytest.approx(1.0)

    def test_identity_is_one_bit(self):
        t = np.zeros((2, 2, 2))
        t[0, :, 0] = 0.25
        t[1, :, 1] = 0.25
        m = information_measures(JointDistribution(t), "y1", "x1")
        assert m.mutual_information == pytest.approx(1.0, abs=1e-15)
        assert m.conditional_entropy == pytest.approx(0.0, abs=1e-15)

    def test_three_quarters(self):
        j = BinaryScenario(p_y1_given_x2=0.75).joint()
        m = information_measures(j, "y1", "x2")
        assert m.mutual_information == pytest.approx(I_THREE_QUARTERS, abs=1e-12)
        assert m.mutual_information == pytest.approx(brute_force_mi(j.table, 1, 2), abs=1e-12)

    def test_same_variable_rejected(self):
        with pytest.raises(ValueError):
            information_measures(JointDistribution(np.full((2, 2, 2), 1 / 8)), "y1", "y1")

    @settings(max_examples=300, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 2)),
            elements=st.one_of(st.just(0.0), st.floats(1e-6, 1.0)),
        ),
        st.sampled_from([(2, 0), (2, 1), (0, 1), (1, 0), (0, 2)]),
    )
    def test_matches_enumeration(self, raw, pair):
        if raw.sum() <= 0:
            raw = raw + 1.0
        table = raw / raw.sum()
        j = JointDistribution(table)
        target, cond = pair
        m = information_measures(j, target, cond)
        assert abs(m.mutual_information - brute_force_mi(j.table, cond, target)) < 1e-12
        assert abs(m.conditional_entropy - brute_force_cond_entropy(j.table, target, cond)) < 1e-12
        assert m.mutual_information >= -1e-15

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, (3,), elements=st.floats(1e-3, 1.0)),
        arrays(np.float64, (2,), elements=st.floats(1e-3, 1.0)),
        arrays(np.float64, (2,), elements=st.floats(1e-3, 1.0)),
    )
    def test_zero_for_product_tables(self, a, b, c):
        t = np.einsum("i,j,k->ijk", a / a.sum(), b / b.sum(), c / c.sum())
        j = JointDistribution(t / t.sum())
        assert abs(information_measures(j, "y1", "x1").mutual_information) < 1e-12


class TestMixing:
    base = BinaryScenario()

    def test_alpha_zero_is_identity_on_conditionals(self):
        j = self.base.joint()
        aug = cda_mix_conditionals(j, 0.0)
        np.testing.assert_allclose(aug.conditional("y1", "x1"), j.conditional("y1", "x1"), atol=1e-15)
        np.testing.assert_allclose(aug.conditional("y1", "x2"), np.full((2, 2), 0.5), atol=1e-15)

    def test_alpha_one_collapses_x1(self):
        j = self.base.joint()
        aug = cda_mix_conditionals(j, 1.0)
        np.testing.assert_allclose(aug.conditional("y1", "x1"), np.full((2, 2), 0.5), atol=1e-15)
        np.testing.assert_allclose(aug.conditional("y1", "x2"), j.conditional("y1", "x2"), atol=1e-15)

    def test_half(self):
        aug = cda_mix_conditionals(self.base.joint(), 0.5)
        assert aug.conditional("y1", "x1")[1, 1] == pytest.approx(0.625, abs=1e-15)

    def test_marginals_preserved(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            t = rng.random((3, 4, 2))
            j = JointDistribution(t / t.sum())
            aug = cda_mix_conditionals(j, rng.random())
            for v in ("x1", "x2", "y1"):
                np.testing.assert_allclose(aug.marginal(v), j.marginal(v), atol=1e-14)

    @pytest.mark.parametrize("alpha", [-0.01, 1.01, float("nan")])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ValueError):
            cda_mix_conditionals(self.base.joint(), alpha)


class TestBenefit:
    j = BinaryScenario().joint()

    def test_crossover(self):
        assert cda_benefit(self.j, 0.5) == 0.0

    def test_endpoints(self):
        assert cda_benefit(self.j, 0.0) == pytest.approx(I_THREE_QUARTERS, abs=1e-12)
        assert cda_benefit(self.j, 1.0) == pytest.approx(-I_THREE_QUARTERS, abs=1e-12)

    def test_matches_direct_mi_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            t = rng.random((2, 3, 2))
            j = JointDistribution(t / t.sum())
            a = rng.random()
            aug = cda_mix_conditionals(j, a)
            d2 = brute_force_mi(j.table, 1, 2) - brute_force_mi(aug.table, 1, 2)
            d1 = brute_force_mi(j.table, 0, 2) - brute_force_mi(aug.table, 0, 2)
            assert cda_benefit(j, a) == pytest.approx(d2 - d1, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_antisymmetric_for_symmetric_scenario(self, a):
        assert cda_benefit(self.j, a) == pytest.approx(-cda_benefit(self.j, 1 - a), abs=1e-12)

    def test_continuity(self):
        grid = np.linspace(0, 1, 2001)
        vals = np.array([cda_benefit(self.j, a) for a in grid])
        assert np.max(np.abs(np.diff(vals))) < 1e-3

    def test_error_budget_symmetric(self):
        assert abs(error_budget(self.j) - 0.5) < 1e-9


class TestBenefitCurve:
    def test_infeasible_scenario(self):
        with pytest.raises(ValueError):
            BinaryScenario(p_y1=0.5, p_x1=0.8, p_y1_given_x1=0.3)
        with pytest.raises(ValueError):
            BinaryScenario().shifted(0.3)

    def test_single_sign_change_at_half(self):
        curve = benefit_curve(BinaryScenario())
        b = np.array(curve.benefits)
        signs = np.sign(b[b != 0])
        assert np.count_nonzero(np.diff(signs)) == 1
        assert abs(curve.zero_crossing() - 0.5) < 1e-9

    @pytest.mark.parametrize("c", [0.05, 0.125, 0.2])
    def test_more_informative_spurious_raises_budget(self, c):
        up = BinaryScenario().shifted(c).joint()
        down = BinaryScenario().shifted(-c).joint()
        assert error_budget(up) > 0.5
        assert error_budget(down) < 0.5

    def test_family_ordered(self):
        fam = benefit_family(BinaryScenario(), [-0.125, 0.0, 0.1, 0.125])
        arr = np.array([c.benefits for c in fam])
        assert np.all(np.diff(arr, axis=0) >= -1e-15)
        assert np.all(np.diff(arr[:, :-1], axis=0) > 0)

    def test_curve_invariants(self):
        with pytest.raises(ValueError):
            BenefitCurve((0.0, 0.0), (1.0, 1.0))
        with pytest.raises(ValueError):
            BenefitCurve((0.0, 1.0), (1.0, float("inf")))

    def test_csv(self, tmp_path):
        path = tmp_path / "curves.csv"
        write_curves_csv(benefit_family(BinaryScenario(), [0.0], [0.0, 0.5, 1.0]), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "alpha,c,benefit_bits"
        assert len(lines) == 4
        assert float(lines[2].split(",")[2]) == 0.0


def _doc(i, tokens, y):
    return Document(id=str(i), tokens=tuple(tokens), labels={"a": y}, masks={})


class TestEstimateBinaryJoint:
    def test_count_arithmetic(self):
        # (n111, n110, n101, n100, n011, n010, n001, n000)
        counts = dict(zip([(1, 1, 1), (1, 1, 0), (1, 0, 1), (1, 0, 0), (0, 1, 1), (0, 1, 0), (0, 0, 1), (0, 0, 0)],
                          (4, 1, 1, 4, 1, 4, 4, 1)))
        docs = []
        for (a, b, y), n in counts.items():
            toks = (["A"] if a else []) + (["B"] if b else []) + ["f"]
            docs += [_doc(len(docs), toks, y) for _ in range(n)]
        j = estimate_binary_joint(docs, {"A"}, {"B"}, "a", smoothing=0)
        for (a, b, y), n in counts.items():
            assert j.table[a, b, y] == n / 20

    def test_deterministic_feature(self):
        docs = [_doc(i, ["good", "x"] if i % 2 else ["bad", "x"], i % 2) for i in range(10)]
        j = estimate_binary_joint(docs, {"good"}, {"bad"}, "a", smoothing=0)
        assert j.conditional("y1", "x1")[1, 1] == 1.0

    def test_never_firing_without_smoothing(self):
        docs = [_doc(i, ["x"], i % 2) for i in range(4)]
        with pytest.raises(DegenerateConditionalError):
            estimate_binary_joint(docs, {"zzz"}, {"x"}, "a", smoothing=0)
        j = estimate_binary_joint(docs, {"zzz"}, {"x"}, "a")
        assert j.table.sum() == pytest.approx(1.0)

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            estimate_binary_joint([], {"a"}, {"b"}, "a")
