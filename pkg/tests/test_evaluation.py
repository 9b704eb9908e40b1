import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blobrec.evaluation import (
    bootstrap_ci,
    dcg_at_k,
    dumps_json,
    evaluate_next_item,
    format_table,
    ips_estimate,
    recall_at_k,
    top_k,
    wilson_ci,
)
from blobrec.exceptions import MissingPropensity

score_vectors = st.lists(st.integers(-1000, 1000).map(float), min_size=2, max_size=30)


class TestRanking:
    def test_recall_examples(self):
        s = np.array([0.1, 0.9, 0.3, 0.2, 0.5, 0.4])
        assert recall_at_k(s, 1, k=1) == 1
        assert recall_at_k(s, 2, k=3) == 0  # rank 4
        assert recall_at_k(np.zeros(10), 7, k=5) == 0
        assert recall_at_k(np.zeros(10), 4, k=5) == 1

    def test_dcg_examples(self):
        s = np.array([5.0, 4.0, 3.0, 2.0, 1.0, 0.0])
        assert dcg_at_k(s, 0) == 1.0
        assert dcg_at_k(s, 2) == 0.5
        assert dcg_at_k(s, 5) == 0.0

    def test_top_k_ties(self):
        np.testing.assert_array_equal(top_k(np.zeros(10), 5), [0, 1, 2, 3, 4])
        np.testing.assert_array_equal(top_k([1.0, 3.0, 3.0, 2.0], 2), [1, 2])

    @given(score_vectors, st.data())
    def test_monotone_in_k(self, scores, data):
        t = data.draw(st.integers(0, len(scores) - 1))
        rc = [recall_at_k(scores, t, k) for k in range(1, len(scores) + 1)]
        assert all(a <= b for a, b in zip(rc, rc[1:]))
        assert 0.0 <= dcg_at_k(scores, t, 5) <= 1.0

    @given(score_vectors, st.data())
    def test_invariant_to_monotone_transform(self, scores, data):
        t = data.draw(st.integers(0, len(scores) - 1))
        s = np.asarray(scores)
        for g in (np.arctan, lambda x: 3 * x - 7):
            assert recall_at_k(g(s), t) == recall_at_k(s, t)
            assert dcg_at_k(g(s), t) == dcg_at_k(s, t)


class TestEvaluateNextItem:
    def test_oracle(self):
        sessions = [[1, 2, 3], [4, 0], [2, 2, 2, 5]]

        def oracle(prefixes):
            out = np.zeros((len(prefixes), 6))
            for i, s in enumerate(sessions):
                out[i, s[-1]] = 1
            return out

        m = evaluate_next_item(oracle, sessions)
        assert m.rc_at_k == 1.0
        assert m.dcg_at_k == 1.0

    def test_random_scorer(self):
        gen = np.random.default_rng(0)
        sessions = [gen.integers(0, 100, size=5) for _ in range(2000)]
        m = evaluate_next_item(lambda p: gen.random((len(p), 100)), sessions, bootstrap=500)
        lo, hi = m.rc_ci95
        assert lo <= 0.05 <= hi

    def test_skips_short_sessions(self):
        m = evaluate_next_item(lambda p: np.zeros((len(p), 3)), [[0], [1, 2], [], [0, 0]])
        assert m.n_skipped == 2
        assert m.n_sessions == 2

    def test_shift_invariant(self):
        gen = np.random.default_rng(1)
        sessions = [gen.integers(0, 20, size=4) for _ in range(100)]
        W = gen.normal(size=(20, 20))

        def f(p):
            return np.stack([W[s[-1]] for s in p])

        a = evaluate_next_item(f, sessions)
        b = evaluate_next_item(lambda p: f(p) + 5.0, sessions)
        assert a == b

    def test_bootstrap_ci_brackets_mean(self):
        v = np.random.default_rng(2).random(300)
        lo, hi = bootstrap_ci(v, rng=3)
        assert lo < v.mean() < hi


class TestIPS:
    def test_self_policy(self):
        gen = np.random.default_rng(0)
        clicks = gen.integers(0, 2, size=500)
        p = gen.uniform(0.05, 1.0, size=500)
        assert ips_estimate(clicks, p, p).ctr == clicks.mean()

    def test_never_matching(self):
        r = ips_estimate([1, 0, 1], [0.5, 0.5, 0.5], [0.0, 0.0, 0.0])
        assert r.ctr == 0.0

    def test_duplication_invariant(self):
        gen = np.random.default_rng(1)
        c, p, t = gen.integers(0, 2, 100), gen.uniform(0.1, 1, 100), gen.uniform(0, 1, 100)
        a = ips_estimate(c, p, t).ctr
        b = ips_estimate(np.tile(c, 2), np.tile(p, 2), np.tile(t, 2)).ctr
        assert a == pytest.approx(b, rel=1e-14)

    def test_ci_brackets(self):
        r = ips_estimate([1, 0, 0, 1], [0.2, 0.5, 0.5, 0.4], [0.3, 0.1, 0.9, 0.2])
        assert r.ci95[0] <= r.ctr <= r.ci95[1]
        assert r.n_displays == 4

    def test_missing_propensity(self):
        with pytest.raises(MissingPropensity):
            ips_estimate([1, 0], [0.5, np.nan], [1, 1])
        with pytest.raises(MissingPropensity):
            ips_estimate([1, 0], [0.5], [1, 1])


class TestWilson:
    def test_zero(self):
        assert wilson_ci(0, 100)[0] == 0.0

    def test_symmetric(self):
        lo, hi = wilson_ci(50, 100)
        assert 0.5 - lo == pytest.approx(hi - 0.5)

    def test_value(self):
        lo, hi = wilson_ci(20, 2000)
        # closed form evaluated independently
        z, n, ph = 1.959963984540054, 2000, 0.01
        c = (ph + z * z / (2 * n)) / (1 + z * z / n)
        h = z * np.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / (1 + z * z / n)
        assert lo == pytest.approx(c - h, rel=1e-12)
        assert hi == pytest.approx(c + h, rel=1e-12)
        assert (round(lo, 4), round(hi, 4)) == (0.0065, 0.0154)

    @settings(max_examples=100)
    @given(st.integers(1, 10_000), st.data())
    def test_brackets(self, n, data):
        k = data.draw(st.integers(0, n))
        lo, hi = wilson_ci(k, n)
        assert 0.0 <= lo <= k / n <= hi <= 1.0


class TestFormatting:
    def test_missing_cells(self):
        t = format_table([{"a": "x", "b": 1.5}, {"a": "y"}], ["a", "b"])
        assert t.splitlines()[-1].split() == ["y", "-"]

    def test_json_sorted(self):
        assert dumps_json({"b": 1, "a": 2}).index('"a"') < dumps_json({"b": 1, "a": 2}).index('"b"')
