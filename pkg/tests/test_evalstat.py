import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from age_kit.evalstat import (RunResult, aggregate_runs, betainc, build_report, confusion_matrix,
                              macro_f1, majority_baseline_f1, read_results_csv, t_two_sided_p,
                              unpaired_ttest, write_results_csv)

# Frozen before implementation with scipy.stats.ttest_ind (scipy 1.15.3);
# the pooled p-value was cross-checked with mpmath.betainc at 50 digits.
A = [0.56, 0.57, 0.55, 0.56, 0.56]
B = [0.59, 0.60, 0.58, 0.59, 0.59]
REF = {
    ("ab", "pooled"): (-6.708203932499362, 8.0, 0.000151420478576503),
    ("ab", "welch"): (-6.708203932499362, 7.999999999999999, 0.00015142047857650306),
    ("a2b2", "pooled"): (-3.3839776934959267, 9.0, 0.008075858698768385),
    ("a2b2", "welch"): (-3.251927339416854, 6.727077781721374, 0.014821411172035743),
}
A2 = [0.5594, 0.53, 0.58, 0.571, 0.55]
B2 = [0.591, 0.60, 0.575, 0.61, 0.58, 0.59]


def brute_force_f1(cm):
    """Per-class F1 by explicit precision/recall over the count matrix."""
    k = len(cm)
    out = []
    for c in range(k):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(k) if r != c)
        fn = sum(cm[c][p] for p in range(k) if p != c)
        if tp == 0:
            out.append(0.0)
            continue
        prec, rec = tp / (tp + fp), tp / (tp + fn)
        out.append(2 * prec * rec / (prec + rec))
    return out


class TestMacroF1:
    def test_perfect(self):
        assert macro_f1(np.diag([20, 380, 3060, 540]))[1] == 1.0

    def test_all_predict_c_on_test_counts(self):
        counts = [20, 380, 3060, 540]
        cm = np.zeros((4, 4), int)
        cm[:, 2] = counts
        per, macro = macro_f1(cm)
        assert per[2] == pytest.approx(2 * 0.765 / 1.765, abs=1e-4)
        assert per[[0, 1, 3]].tolist() == [0, 0, 0]
        assert macro == pytest.approx(0.2167, abs=1e-4)

    def test_two_class(self):
        per, macro = macro_f1([[3, 1], [2, 4]])
        np.testing.assert_allclose(per, [2 / 3, 8 / 11])
        assert macro == pytest.approx(0.6970, abs=1e-4)

    def test_absent_class_counts_as_zero(self):
        cm = np.diag([5, 5, 5, 0])
        assert macro_f1(cm)[1] == pytest.approx(0.75)

    @pytest.mark.parametrize("bad", [np.full((4, 4), -1), np.zeros((4, 4)), np.zeros((3, 4))])
    def test_errors(self, bad):
        with pytest.raises(ValueError):
            macro_f1(bad)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            cm = rng.integers(0, 50, size=(4, 4))
            cm[rng.random((4, 4)) < 0.2] = 0
            if cm.sum() == 0:
                continue
            np.testing.assert_allclose(macro_f1(cm)[0], brute_force_f1(cm.tolist()), rtol=0, atol=1e-12)

    @given(st.lists(st.integers(0, 30), min_size=16, max_size=16).filter(lambda v: sum(v) > 0),
           st.permutations(range(4)))
    def test_relabel_invariance(self, flat, perm):
        cm = np.array(flat).reshape(4, 4)
        perm = list(perm)
        assert macro_f1(cm[np.ix_(perm, perm)])[1] == pytest.approx(macro_f1(cm)[1], abs=1e-12)

    def test_confusion_matrix_counts(self):
        cm = confusion_matrix([0, 0, 1, 3], [0, 1, 1, 2])
        assert cm.tolist() == [[1, 1, 0, 0], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0]]

    def test_majority_baseline(self):
        labels = [2] * 8 + [0, 1]
        # F1 of C = 2*8/(16+2) ; others 0
        assert majority_baseline_f1(labels) == pytest.approx((16 / 18) / 4)


class TestAggregate:
    def test_constant(self):
        assert aggregate_runs([0.59] * 5) == (pytest.approx(0.59), 0.0)

    def test_hand_values(self):
        mean, std = aggregate_runs([0.57, 0.58, 0.59, 0.60, 0.61])
        assert mean == pytest.approx(0.59)
        assert std == pytest.approx(math.sqrt(0.001 / 4), abs=1e-12)
        assert std == pytest.approx(0.0158, abs=1e-4)

    def test_order_invariant(self):
        xs = [0.57, 0.61, 0.58, 0.60, 0.59]
        for perm in itertools.permutations(xs):
            assert aggregate_runs(perm) == pytest.approx(aggregate_runs(xs), abs=1e-15)

    def test_needs_two(self):
        with pytest.raises(ValueError):
            aggregate_runs([0.5])


class TestTTest:
    @pytest.mark.parametrize("variant", ["pooled", "welch"])
    @pytest.mark.parametrize("name,a,b", [("ab", A, B), ("a2b2", A2, B2)])
    def test_reference_values(self, name, a, b, variant):
        t, df, p = REF[(name, variant)]
        res = unpaired_ttest(a, b, variant)
        assert res.t_statistic == pytest.approx(t, abs=1e-9)
        assert res.degrees_of_freedom == pytest.approx(df, abs=1e-9)
        assert res.p_value == pytest.approx(p, abs=1e-9)

    def test_identical(self):
        res = unpaired_ttest(A, A)
        assert res.t_statistic == 0.0 and res.p_value == 1.0

    def test_constant_equal(self):
        res = unpaired_ttest([0.5, 0.5], [0.5, 0.5, 0.5])
        assert (res.t_statistic, res.p_value, res.degenerate) == (0.0, 1.0, True)

    def test_constant_different(self):
        res = unpaired_ttest([0.5, 0.5], [0.6, 0.6])
        assert res.p_value == 0.0 and res.degenerate and res.t_statistic == -math.inf

    @pytest.mark.parametrize("variant", ["pooled", "welch"])
    def test_swap(self, variant):
        ab, ba = unpaired_ttest(A2, B2, variant), unpaired_ttest(B2, A2, variant)
        assert ba.t_statistic == pytest.approx(-ab.t_statistic)
        assert ba.p_value == pytest.approx(ab.p_value, abs=1e-15)

    @pytest.mark.parametrize("variant", ["pooled", "welch"])
    @pytest.mark.parametrize("k", [0.01, 3.0, 1000.0])
    def test_scale_invariance(self, variant, k):
        base = unpaired_ttest(A2, B2, variant)
        scaled = unpaired_ttest(np.multiply(A2, k), np.multiply(B2, k), variant)
        assert scaled.t_statistic == pytest.approx(base.t_statistic, rel=1e-9)

    def test_p_monotone_in_mean_gap(self):
        rng = np.random.default_rng(1)
        noise_a, noise_b = rng.normal(size=5), rng.normal(size=5)
        ps = [unpaired_ttest(noise_a, noise_b + gap).p_value for gap in np.linspace(0, 5, 40)]
        signed = [unpaired_ttest(noise_a, noise_b + gap).t_statistic for gap in np.linspace(0, 5, 40)]
        # monotone once the gap dominates the sign of the raw difference
        start = next(i for i, t in enumerate(signed) if t < 0)
        assert all(x >= y for x, y in zip(ps[start:], ps[start + 1:]))

    def test_too_small(self):
        with pytest.raises(ValueError):
            unpaired_ttest([1.0], [1.0, 2.0])

    def test_betainc_edges(self):
        assert betainc(2.0, 3.0, 0.0) == 0.0
        assert betainc(2.0, 3.0, 1.0) == 1.0
        # I_x(1, 1) = x ; I_x(a, 1) = x^a
        assert betainc(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-14)
        assert betainc(2.5, 1.0, 0.4) == pytest.approx(0.4 ** 2.5, abs=1e-14)

    def test_t_tail_cauchy(self):
        # df = 1 is the Cauchy distribution: P(|T| > t) = 1 - 2 atan(t) / pi
        for t in (0.1, 1.0, 7.0):
            assert t_two_sided_p(t, 1.0) == pytest.approx(1 - 2 * math.atan(t) / math.pi, abs=1e-13)


class TestReport:
    def _runs(self):
        rng = np.random.default_rng(3)
        runs = {"none": list(0.56 + 0.01 * rng.normal(size=5))}
        for m, off in (("RE", 0.005), ("AGE", 0.03)):
            for p in (0.2, 0.4, 0.6, 0.8):
                runs[f"{m}@{p:g}"] = list(0.56 + off + 0.01 * rng.normal(size=5))
        return runs

    def test_table_shape(self):
        report = build_report(self._runs(), [("AGE@0.6", "none")])
        text = report.to_text()
        grid = [line for line in text.splitlines() if line[:3] in ("0.2", "0.4", "0.6", "0.8")]
        assert len(grid) == 4
        assert all(len(line.split(")")) == 3 for line in grid)  # two "mean (std)" cells
        assert "No erasing" in text
        assert report.probabilities == [0.2, 0.4, 0.6, 0.8]
        assert text.count("*") == 2  # legend + best cell

    def test_comparison_present(self):
        report = build_report(self._runs(), [("AGE@0.6", "none")])
        assert [(c["a"], c["b"]) for c in report.comparisons] == [("AGE@0.6", "none")]
        assert 0.0 <= report.comparisons[0]["p"] <= 1.0

    def test_single_method(self):
        report = build_report({"none": [0.5, 0.6]}, comparisons=[])
        assert list(report.summary) == ["none"] and report.comparisons == []

    def test_unequal_counts(self):
        with pytest.raises(ValueError):
            build_report({"none": [0.5, 0.6], "AGE@0.6": [0.5, 0.6, 0.7]})

    def test_results_csv_roundtrip(self, tmp_path):
        cm = np.array([[1, 0, 0, 0], [0, 2, 1, 0], [0, 0, 5, 0], [0, 0, 1, 1]])
        results = [RunResult("AGE", 0.6, 0, cm), RunResult("none", 0.0, 1, cm)]
        write_results_csv(tmp_path / "r.csv", results)
        rows = read_results_csv(tmp_path / "r.csv")
        assert [r["method"] for r in rows] == ["AGE", "none"]
        assert float(rows[0]["macro_f1"]) == pytest.approx(results[0].macro_f1, abs=1e-10)
        assert RunResult.from_json(results[0].to_json()).macro_f1 == results[0].macro_f1
