import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from tunessta import statmath as sm
from tunessta.statmath import CanonicalRV


def const(x):
    return CanonicalRV(x)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
small = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@st.composite
def rvs(draw, dims=3):
    mean = draw(finite)
    sens = [draw(small) for _ in range(dims)]
    indep = draw(st.floats(0, 3, allow_nan=False))
    return CanonicalRV(mean, sens, indep)


# --- examples ----------------------------------------------------------------


def test_add_examples():
    assert (const(3) + const(4)).same(const(7))
    x = CanonicalRV(1.5, [0.3, -0.2], 0.4)
    assert (x + const(0)).same(x)
    s = sm.add(CanonicalRV(1, [0.5], 0.2), CanonicalRV(2, [0.5], 0.0))
    assert s.mean == 3
    assert np.allclose(s.global_sens, [1.0])
    assert s.indep_sigma == pytest.approx(0.2)
    assert s.variance == pytest.approx(1.04)


def test_add_variance_by_sampling():
    rng = np.random.default_rng(5)
    z = rng.standard_normal(10 ** 6)
    r1, r2 = rng.standard_normal((2, 10 ** 6))
    x = 1 + 0.5 * z + 0.2 * r1 + 2 + 0.5 * z + 0.0 * r2
    assert np.var(x) == pytest.approx(1.04, rel=0.01)


def test_scale_examples():
    assert sm.scale(const(9), 0.5).same(const(4.5))
    x = CanonicalRV(2.0, [1.0, -1.0], 0.5)
    assert sm.scale(x, 1).same(x)
    y = sm.scale(CanonicalRV(6, indep_sigma=2), 0.5)
    assert y.same(CanonicalRV(3, indep_sigma=1))


def test_scale_rejects_nonfinite():
    with pytest.raises(ValueError):
        sm.scale(const(1), math.inf)


def test_stat_max_examples():
    x = CanonicalRV(1.0, [0.3], 0.7)
    assert sm.stat_max(x, x) is x
    assert sm.stat_max(const(5), const(3)).same(const(5))
    m = sm.stat_max(CanonicalRV(0, indep_sigma=1), CanonicalRV(0, indep_sigma=1))
    assert m.mean == pytest.approx(1 / math.sqrt(math.pi), abs=1e-12)
    rng = np.random.default_rng(0)
    mc = np.maximum(rng.standard_normal(10 ** 6), rng.standard_normal(10 ** 6)).mean()
    assert m.mean == pytest.approx(mc, abs=3e-3)


def test_stat_min_examples():
    assert sm.stat_min(const(5), const(3)).same(const(3))
    x = CanonicalRV(-2.0, [0.1, 0.2], 0.3)
    assert sm.stat_min(x, x).same(x)
    m = sm.stat_min(CanonicalRV(0, indep_sigma=1), CanonicalRV(0, indep_sigma=1))
    assert m.mean == pytest.approx(-1 / math.sqrt(math.pi), abs=1e-12)


def test_prob_leq_examples():
    assert sm.prob_leq(CanonicalRV(10, indep_sigma=2), 10) == pytest.approx(0.5)
    assert sm.prob_leq(const(4), 3) == 0.0
    assert sm.prob_leq(CanonicalRV(0, indep_sigma=1), 1.96) == pytest.approx(0.975, abs=1e-3)
    assert sm.prob_leq(const(3), 3) == 1.0
    assert sm.prob_lt(const(3), 3) == 0.0


def test_sample_examples():
    assert sm.sample(const(7), [0.3, -1.0], 2.0) == 7
    assert sm.sample(CanonicalRV(1, [2]), [0.5], 0) == 2.0
    assert sm.sample(CanonicalRV(0, indep_sigma=3), [], 1.0) == 3.0


def test_sample_missing_component():
    with pytest.raises(ValueError):
        sm.sample(CanonicalRV(0, [0.0, 1.0]), [0.5], 0.0)


def test_negative_indep_rejected():
    with pytest.raises(ValueError):
        CanonicalRV(0.0, indep_sigma=-1.0)


def test_zero_theta_tie_returns_first():
    a = CanonicalRV(2.0, [1.0])
    b = CanonicalRV(2.0, [1.0])
    assert sm.stat_max(a, b) is a
    hi = CanonicalRV(3.0, [1.0])
    assert sm.stat_max(a, hi) is hi
    assert sm.stat_max(hi, a) is hi


def test_padding_is_transparent():
    a = CanonicalRV(1.0, [0.5])
    b = CanonicalRV(1.0, [0.5, 0.0, 0.0])
    assert a.same(b)
    assert sm.covariance(a, CanonicalRV(0.0, [1.0, 2.0])) == pytest.approx(0.5)


def test_prob_both_leq_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(30):
        a = CanonicalRV(rng.normal(), rng.normal(size=3), abs(rng.normal()))
        b = CanonicalRV(rng.normal(), rng.normal(size=3), abs(rng.normal()))
        cov = [[a.variance, sm.covariance(a, b)], [sm.covariance(a, b), b.variance]]
        ref = multivariate_normal(mean=[a.mean, b.mean], cov=cov).cdf([0.0, 0.0])
        assert sm.prob_both_leq(a, b) == pytest.approx(ref, abs=1e-6)


def test_prob_both_leq_degenerate():
    a = CanonicalRV(-1.0, [1.0])
    assert sm.prob_both_leq(a, a) == pytest.approx(sm.prob_leq(a, 0))
    assert sm.prob_both_leq(a, -a) == pytest.approx(0.0, abs=1e-12)
    assert sm.prob_both_leq(const(-1), a) == pytest.approx(sm.prob_leq(a, 0))
    assert sm.prob_both_leq(const(1), a) == 0.0


def test_stack_max_matches_scalar():
    rng = np.random.default_rng(11)
    n, p = 200, 5
    xs = [CanonicalRV(rng.normal(), rng.normal(size=p), abs(rng.normal())) for _ in range(n)]
    ys = [CanonicalRV(rng.normal(), rng.normal(size=p), abs(rng.normal())) for _ in range(n)]
    ys[0] = xs[0]
    ys[1] = CanonicalRV(xs[1].mean + 1.0, xs[1].global_sens, xs[1].indep_sigma)

    def stack(vals):
        return sm.Stack(
            np.array([v.mean for v in vals]),
            np.array([v.global_sens for v in vals]),
            np.array([v.indep_sigma for v in vals]),
        )

    a, b = stack(xs), stack(ys)
    a.mu[5] = np.nan
    b.mu[5] = np.nan
    b.mu[6] = np.nan
    out = a.maxed(b)
    assert np.isnan(out.mu[5])
    assert out.row(6).same(xs[6])
    for r in range(n):
        if r in (5, 6):
            continue
        ref = sm.stat_max(xs[r], ys[r])
        got = out.row(r)
        assert got.mean == pytest.approx(ref.mean, abs=1e-12)
        assert got.indep_sigma == pytest.approx(ref.indep_sigma, abs=1e-9)
        assert np.allclose(got.global_sens, ref.global_sens, atol=1e-12)


# --- properties ---------------------------------------------------------------


@given(rvs(), rvs(), rvs())
def test_add_commutative_associative(a, b, c):
    ab, ba = a + b, b + a
    assert ab.mean == pytest.approx(ba.mean, rel=1e-12, abs=1e-12)
    assert np.allclose(ab.global_sens, ba.global_sens, rtol=1e-12, atol=1e-12)
    left, right = (a + b) + c, a + (b + c)
    assert left.mean == pytest.approx(right.mean, rel=1e-12, abs=1e-12)
    assert np.allclose(left.global_sens, right.global_sens, rtol=1e-12, atol=1e-12)
    assert left.indep_sigma == pytest.approx(right.indep_sigma, rel=1e-12, abs=1e-12)


@given(rvs(), rvs())
def test_stat_max_mean_dominance(a, b):
    m = sm.stat_max(a, b)
    assert m.mean >= max(a.mean, b.mean) - 1e-12 * (1 + abs(a.mean) + abs(b.mean))
    assert m.indep_sigma >= 0


@given(rvs(), rvs())
def test_stat_max_symmetric(a, b):
    assert sm.stat_max(a, b).same(sm.stat_max(b, a))
    assert sm.stat_min(a, b).same(sm.stat_min(b, a))


@given(rvs())
def test_stat_max_idempotent(a):
    assert sm.stat_max(a, a).same(a)


@given(rvs(), finite, finite)
def test_prob_leq_monotone(a, c1, c2):
    lo, hi = sorted((c1, c2))
    assert sm.prob_leq(a, lo) <= sm.prob_leq(a, hi)
    assert sm.prob_leq(a + 1.0, lo) <= sm.prob_leq(a, lo)
    assert 0.0 <= sm.prob_leq(a, lo) <= 1.0


@given(finite, finite, st.floats(-4, 4, allow_nan=False))
def test_deterministic_reduces_to_scalars(x, y, c):
    a, b = const(x), const(y)
    assert (a + b).mean == x + y and (a + b).variance == 0
    assert (a - b).mean == x - y
    assert sm.scale(a, c).mean == x * c
    assert sm.stat_max(a, b).same(const(max(x, y)))
    assert sm.stat_min(a, b).same(const(min(x, y)))
    assert sm.prob_leq(a, y) == (1.0 if x <= y else 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_clark_moment_fidelity(seed):
    rng = np.random.default_rng(seed)
    p = 3
    a = CanonicalRV(rng.normal(0, 1), rng.normal(0, 1, p), abs(rng.normal(0, 1)))
    b = CanonicalRV(rng.normal(0, 1), rng.normal(0, 1, p), abs(rng.normal(0, 1)))
    m = sm.stat_max(a, b)
    n = 10 ** 6
    z = rng.standard_normal((n, p))
    xa = a.mean + z @ a.global_sens + a.indep_sigma * rng.standard_normal(n)
    xb = b.mean + z @ b.global_sens + b.indep_sigma * rng.standard_normal(n)
    mx = np.maximum(xa, xb)
    scale = max(abs(mx.mean()), mx.std())  # guards a mean near zero
    assert abs(m.mean - mx.mean()) <= 0.02 * scale
    assert m.std == pytest.approx(mx.std(), rel=0.02)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.tuples(rvs(), st.integers(0, 3)), min_size=1, max_size=5), min_size=1, max_size=4))
def test_fold_runs_matches_sequential_max(runs):
    # tag 0 repeats the previous object, 1 a copy of it, 2 a constant, 3 fresh
    seqs = []
    for run in runs:
        seq = []
        for x, tag in run:
            if seq and tag == 0:
                x = seq[-1]
            elif seq and tag == 1:
                x = CanonicalRV(seq[-1].mean, seq[-1].global_sens, seq[-1].indep_sigma)
            elif tag == 2:
                x = const(round(x.mean))
            seq.append(x)
        seqs.append(seq)
    flat = [x for seq in seqs for x in seq]
    mu = np.array([x.mean for x in flat])
    s = np.array([sm.pad(x.global_sens, 3) for x in flat])
    i = np.array([x.indep_sigma for x in flat])
    m, sens, ind, src = sm.fold_max_runs(mu, s, i, [len(q) for q in seqs], np.array([id(x) for x in flat]))
    for n, seq in enumerate(seqs):
        want = sm.stat_max_all(seq)
        assert m[n] == pytest.approx(want.mean, abs=1e-9)
        assert sens[n] == pytest.approx(sm.pad(want.global_sens, 3), abs=1e-9)
        assert ind[n] == pytest.approx(want.indep_sigma, abs=1e-7)
        if any(want is x for x in seq):
            assert flat[src[n]] is want
        else:
            assert src[n] == -1
