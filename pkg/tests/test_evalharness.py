import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialign import encoders, evalharness as ev
from trialign.geometry import ConfigError


def oracle_ranks(S):
    """Position of the diagonal candidate after sorting by (-score, index)."""
    out = []
    for i, row in enumerate(S):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order.index(i) + 1)
    return np.array(out)


def oracle_metrics(S):
    r = oracle_ranks(S)
    return {
        "r1": sum(x <= 1 for x in r) / len(r),
        "r5": sum(x <= 5 for x in r) / len(r),
        "r10": sum(x <= 10 for x in r) / len(r),
        "ndcg10": sum(1 / math.log2(x + 1) if x <= 10 else 0.0 for x in r) / len(r),
        "rr10": sum(1 / x if x <= 10 else 0.0 for x in r) / len(r),
    }


def matrix_with_rank(rank, n=12):
    """Single query whose relevant candidate (index 0) sits at ``rank``."""
    s = np.zeros((1, n))
    s[0, 1:rank] = 2.0
    s[0, 0] = 1.0
    return s


class TestMetrics:
    def test_identity(self):
        assert ev.recall_at_k(np.eye(5), 1) == 1.0

    def test_anti_diagonal_worst_case(self):
        S = np.full((6, 6), 1.0)
        np.fill_diagonal(S, 0.0)
        assert ev.recall_at_k(S, 5) == 0.0
        assert ev.relevant_ranks(S).tolist() == [6] * 6

    @pytest.mark.parametrize("rank,ndcg", [(1, 1.0), (3, 0.5), (4, 0.430677), (10, 1 / math.log2(11)), (11, 0.0)])
    def test_ndcg_closed_form(self, rank, ndcg):
        assert ev.ndcg_at_10(matrix_with_rank(rank)) == pytest.approx(ndcg, abs=1e-6)

    @pytest.mark.parametrize("rank,rr", [(1, 1.0), (2, 0.5), (11, 0.0)])
    def test_rr_closed_form(self, rank, rr):
        assert ev.rr_at_10(matrix_with_rank(rank)) == rr

    def test_brute_force_oracle_100_matrices(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            # half the matrices use small integers so ties are common
            S = rng.integers(0, 4, (20, 20)).astype(float) if trial % 2 else rng.standard_normal((20, 20))
            ref = oracle_metrics(S)
            np.testing.assert_array_equal(ev.relevant_ranks(S), oracle_ranks(S))
            assert ev.recall_at_k(S, 1) == ref["r1"]
            assert ev.recall_at_k(S, 5) == ref["r5"]
            assert ev.recall_at_k(S, 10) == ref["r10"]
            assert ev.ndcg_at_10(S) == pytest.approx(ref["ndcg10"], abs=1e-15)
            assert ev.rr_at_10(S) == pytest.approx(ref["rr10"], abs=1e-15)

    def test_ties_go_to_lower_index(self):
        S = np.zeros((3, 3))
        assert ev.relevant_ranks(S).tolist() == [1, 2, 3]

    @settings(max_examples=40)
    @given(st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-5, 5))
    def test_monotone_transform_invariance(self, seed, scale, shift):
        S = np.random.default_rng(seed).standard_normal((15, 15))
        base = ev.relevant_ranks(S)
        np.testing.assert_array_equal(ev.relevant_ranks(scale * S + shift), base)
        np.testing.assert_array_equal(ev.relevant_ranks(np.exp(S)), base)

    def test_recall_monotone_in_k(self):
        S = np.random.default_rng(1).standard_normal((30, 30))
        r = [ev.recall_at_k(S, k) for k in range(1, 31)]
        assert all(x <= y for x, y in zip(r, r[1:])) and r[-1] == 1.0

    def test_bounds_and_perfect(self):
        for seed in range(10):
            S = np.random.default_rng(seed).standard_normal((12, 12))
            for v in (ev.ndcg_at_10(S), ev.rr_at_10(S)):
                assert 0.0 <= v <= 1.0
        assert ev.ndcg_at_10(np.eye(4)) == ev.rr_at_10(np.eye(4)) == 1.0

    def test_k_out_of_range(self):
        with pytest.raises(ConfigError):
            ev.recall_at_k(np.eye(3), 4)
        with pytest.raises(ConfigError):
            ev.recall_at_k(np.eye(3), 0)

    def test_single_query(self):
        assert ev.relevant_ranks(np.array([[0.3]])).tolist() == [1]


class TestPermutation:
    def test_all_positive_n10(self):
        assert ev.paired_permutation_test(np.ones(10), np.zeros(10)) == 2 / 1024

    def test_identical_systems(self):
        a = np.random.default_rng(0).random(30)
        assert ev.paired_permutation_test(a, a) == 1.0
        assert ev.paired_permutation_test(a[:10], a[:10]) == 1.0

    def test_balanced_signs(self):
        d = np.array([1.0] * 5 + [-1.0] * 5)
        assert ev.paired_permutation_test(d, np.zeros(10)) == 1.0

    def test_exact_against_enumeration_oracle(self):
        rng = np.random.default_rng(1)
        d = rng.normal(0.3, 1, 9)
        obs = abs(d.mean())
        count = 0
        for code in range(2**9):
            signs = np.array([-1.0 if code >> k & 1 else 1.0 for k in range(9)])
            count += abs((signs * d).mean()) >= obs - 1e-12
        assert ev.paired_permutation_test(d, np.zeros(9)) == count / 512

    def test_resample_agrees_with_exact_n12(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(0.4, 1, 12), rng.normal(0, 1, 12)
        exact = ev.paired_permutation_test(a, b, method="exact")
        R = 20000
        approx = ev.paired_permutation_test(a, b, resamples=R, seed=5, method="resample")
        se = math.sqrt(exact * (1 - exact) / R)
        assert abs(approx - exact) <= 3 * se + 1 / R

    def test_one_sided(self):
        a, b = np.ones(10), np.zeros(10)
        assert ev.paired_permutation_test(a, b, alternative="greater") == 1 / 1024
        assert ev.paired_permutation_test(a, b, alternative="less") == 1.0

    def test_resample_never_zero_and_seeded(self):
        a, b = np.ones(40), np.zeros(40)
        p = ev.paired_permutation_test(a, b, resamples=500, seed=1)
        assert p == 1 / 501
        c = np.random.default_rng(3).random(40)
        assert ev.paired_permutation_test(c, b, resamples=500, seed=9) == ev.paired_permutation_test(c, b, resamples=500, seed=9)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=30))
    def test_p_in_unit_interval(self, xs):
        p = ev.paired_permutation_test(np.array(xs), np.zeros(len(xs)), resamples=200)
        assert 0.0 < p <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ev.paired_permutation_test(np.ones(3), np.ones(4))


def identity_params(d):
    enc = lambda: encoders.MlpEncoder([(np.eye(d), np.zeros(d))])
    return encoders.ModelParams(enc(), enc(), enc())


class TestReports:
    def test_perfect_matrix_report(self):
        rep = ev.build_report({"T2V": ev.ScoreMatrix(np.eye(5), "T2V")})
        assert rep.directions["T2V"].metrics() == {"r1": 1.0, "r10": 1.0, "ndcg10": 1.0, "rr10": 1.0}
        assert rep.p_values == {}

    def test_self_baseline(self):
        S = np.random.default_rng(0).standard_normal((40, 40))
        m = {"T2AV": ev.ScoreMatrix(S, "T2AV")}
        rep = ev.build_report(m, baseline=m, resamples=300)
        assert all(p == 1.0 for p in rep.p_values["T2AV"].values())

    def test_cosine_self_similarity(self):
        X = np.eye(6)[:4]
        out = ev.score_all(identity_params(6), X, X, X, scoring="cosine", reg_pair="text-video")
        np.testing.assert_allclose(np.diag(out["T2V"].scores), 1.0)
        assert ev.recall_at_k(out["T2V"], 1) == 1.0 and set(out) == {"T2V", "V2T"}

    def test_triangle_both_directions(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((7, 5))
        out = ev.score_all(identity_params(5), X, X + 0.01 * rng.standard_normal((7, 5)), X, scoring="triangle")
        np.testing.assert_array_equal(out["AV2T"].scores, out["T2AV"].scores.T)

    def test_single_item(self):
        X = np.ones((1, 3))
        out = ev.score_all(identity_params(3), X, X, X)
        assert out["T2AV"].scores.shape == (1, 1) and ev.relevant_ranks(out["T2AV"]).tolist() == [1]

    def test_fusion_needs_layer(self):
        X = np.eye(3)
        with pytest.raises(ConfigError):
            ev.score_all(identity_params(3), X, X, X, scoring="fusion")

    def test_schema_and_files(self, tmp_path):
        S = np.random.default_rng(2).standard_normal((25, 25))
        m = {"T2AV": ev.ScoreMatrix(S, "T2AV"), "AV2T": ev.ScoreMatrix(S.T, "AV2T")}
        rep = ev.build_report(m, baseline={"T2AV": ev.relevant_ranks(S.T)}, resamples=200)
        path, ranks = ev.write_report(rep, tmp_path / "r.json")
        doc = json.loads(path.read_text())
        jsonschema.validate(doc, ev.REPORT_SCHEMA)
        assert "pVsBaseline" in doc["T2AV"] and "pVsBaseline" not in doc["AV2T"]
        assert ev.read_ranks(ranks)["T2AV"] == ev.relevant_ranks(S).tolist()

    def test_schema_rejects_bad_metric(self):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate({"T2AV": {"r1": 1.5, "r10": 1, "ndcg10": 1, "rr10": 1, "n": 3}}, ev.REPORT_SCHEMA)

    def test_baseline_size_mismatch(self):
        m = {"T2V": ev.ScoreMatrix(np.eye(4), "T2V")}
        with pytest.raises(ConfigError):
            ev.build_report(m, baseline={"T2V": [1, 1, 1]})

    def test_deltas(self):
        a = ev.build_report({"T2V": ev.ScoreMatrix(np.eye(4), "T2V")})
        b = ev.build_report({"T2V": ev.ScoreMatrix(np.zeros((4, 4)), "T2V")})
        d = ev.metric_deltas(a, b)["T2V"]
        assert d["r1"] == 0.75 and d["r10"] == 0.0
