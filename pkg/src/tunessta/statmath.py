"""First-order canonical Gaussian arithmetic.

A delay is ``mean + sum(global_sens[i] * Z_i) + indep_sigma * R`` where the
``Z_i`` are unit normals shared across the whole circuit and ``R`` is a unit
normal private to the variable.  All operations return new values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_DOMINANT = 8.5  # norm_cdf rounds to 1 beyond this
_EMPTY = np.zeros(0)
_EMPTY.setflags(write=False)


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_pdf(x: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * x * x)


def _as_vec(values) -> np.ndarray:
    if values is None:
        return _EMPTY
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError("global_sens must be one-dimensional")
    arr.setflags(write=False)
    return arr


def _aligned(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.shape[0] == b.shape[0]:
        return a, b
    n = max(a.shape[0], b.shape[0])
    if a.shape[0] < n:
        a = np.concatenate([a, np.zeros(n - a.shape[0])])
    else:
        b = np.concatenate([b, np.zeros(n - b.shape[0])])
    return a, b


@dataclass(frozen=True, eq=False)
class CanonicalRV:
    """Gaussian in canonical first-order form.

    Sensitivity vectors of different length are treated as zero-padded, so
    deterministic constants can carry an empty vector.
    """

    mean: float
    global_sens: np.ndarray = field(default=_EMPTY)
    indep_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "global_sens", _as_vec(self.global_sens))
        if self.indep_sigma < 0:
            raise ValueError("indep_sigma must be nonnegative")
        object.__setattr__(self, "indep_sigma", float(self.indep_sigma))

    @classmethod
    def const(cls, value: float) -> "CanonicalRV":
        return cls(value)

    @property
    def variance(self) -> float:
        s = self.global_sens
        return float(s @ s) + self.indep_sigma ** 2

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @property
    def is_deterministic(self) -> bool:
        return self.indep_sigma == 0.0 and not np.any(self.global_sens)

    def same(self, other: "CanonicalRV") -> bool:
        """Field-wise equality (zero padding ignored)."""
        if self is other:
            return True
        if self.mean != other.mean or self.indep_sigma != other.indep_sigma:
            return False
        a, b = _aligned(self.global_sens, other.global_sens)
        return bool(np.array_equal(a, b))

    def __add__(self, other):
        if isinstance(other, CanonicalRV):
            return add(self, other)
        return _make(self.mean + other, self.global_sens, self.indep_sigma)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, CanonicalRV):
            return add(self, -other)
        return _make(self.mean - other, self.global_sens, self.indep_sigma)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, c: float):
        return scale(self, c)

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)

    def __repr__(self):
        return f"CanonicalRV(mean={self.mean:.6g}, std={self.std:.6g})"


ZERO = CanonicalRV(0.0)


def _make(mean: float, sens: np.ndarray, indep: float) -> CanonicalRV:
    """Internal constructor for already-valid fields (sens is owned)."""
    x = object.__new__(CanonicalRV)
    sens.setflags(write=False)
    object.__setattr__(x, "mean", float(mean))
    object.__setattr__(x, "global_sens", sens)
    object.__setattr__(x, "indep_sigma", float(indep))
    return x


def add(a: CanonicalRV, b: CanonicalRV) -> CanonicalRV:
    sa, sb = _aligned(a.global_sens, b.global_sens)
    return _make(a.mean + b.mean, sa + sb, math.hypot(a.indep_sigma, b.indep_sigma))


def sub(a: CanonicalRV, b: CanonicalRV) -> CanonicalRV:
    return add(a, scale(b, -1.0))


def scale(a: CanonicalRV, c: float) -> CanonicalRV:
    if not math.isfinite(c):
        raise ValueError("scale factor must be finite")
    return _make(a.mean * c, a.global_sens * c, a.indep_sigma * abs(c))


def _one_variable(a: CanonicalRV, b: CanonicalRV) -> bool:
    """True when a and b are certainly the same random variable.

    Private terms of two distinct objects are independent, so field-equal
    copies only coincide when they have no private part.
    """
    return a is b or (a.indep_sigma == 0.0 and a.same(b))


def covariance(a: CanonicalRV, b: CanonicalRV) -> float:
    if _one_variable(a, b):
        return a.variance
    sa, sb = _aligned(a.global_sens, b.global_sens)
    return float(sa @ sb)


def _first(a: CanonicalRV, b: CanonicalRV) -> bool:
    """Fixed total order used to make stat_max exactly symmetric."""
    if a.mean != b.mean:
        return a.mean > b.mean
    if a.indep_sigma != b.indep_sigma:
        return a.indep_sigma > b.indep_sigma
    sa, sb = _aligned(a.global_sens, b.global_sens)
    diff = np.flatnonzero(sa != sb)
    return True if diff.size == 0 else bool(sa[diff[0]] > sb[diff[0]])


def stat_max(a: CanonicalRV, b: CanonicalRV) -> CanonicalRV:
    """Clark's max projected back onto the canonical form.

    The arguments are put in a fixed order first so the result is exactly
    symmetric.  A zero tightness spread returns the larger-mean argument.
    """
    if _one_variable(a, b):
        return a
    if not _first(a, b):
        a, b = b, a
    sa, sb = _aligned(a.global_sens, b.global_sens)
    diff = sa - sb
    theta2 = float(diff @ diff) + a.indep_sigma ** 2 + b.indep_sigma ** 2
    if theta2 <= 0.0:
        return a
    theta = math.sqrt(theta2)
    alpha = (a.mean - b.mean) / theta
    if alpha > _DOMINANT:
        # b never matters at double precision
        return a
    t = norm_cdf(alpha)
    phi = norm_pdf(alpha)
    # shift to the midpoint so the second moment does not cancel badly
    c = 0.5 * (a.mean + b.mean)
    ma, mb = a.mean - c, b.mean - c
    var_a = float(sa @ sa) + a.indep_sigma ** 2
    var_b = float(sb @ sb) + b.indep_sigma ** 2
    m1 = ma * t + mb * (1.0 - t) + theta * phi
    m2 = (ma * ma + var_a) * t + (mb * mb + var_b) * (1.0 - t) + (ma + mb) * theta * phi
    var = max(m2 - m1 * m1, 0.0)
    sens = t * sa + (1.0 - t) * sb
    resid = var - float(sens @ sens)
    return _make(m1 + c, sens, math.sqrt(resid) if resid > 0.0 else 0.0)


def stat_min(a: CanonicalRV, b: CanonicalRV) -> CanonicalRV:
    if _one_variable(a, b):
        return a
    return scale(stat_max(scale(a, -1.0), scale(b, -1.0)), -1.0)


def stat_max_all(values: Sequence[CanonicalRV]) -> CanonicalRV:
    it = iter(values)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("stat_max_all of an empty sequence") from None
    for v in it:
        acc = stat_max(acc, v)
    return acc


def tightness(a: CanonicalRV, b: CanonicalRV) -> float:
    """P{a >= b} under the joint Gaussian model."""
    return 1.0 if _one_variable(a, b) else prob_leq(sub(b, a), 0.0)


def prob_leq(a: CanonicalRV, c: float) -> float:
    sigma = a.std
    if sigma == 0.0:
        return 1.0 if a.mean <= c else 0.0
    return norm_cdf((c - a.mean) / sigma)


def prob_lt(a: CanonicalRV, c: float) -> float:
    """Like :func:`prob_leq` but a deterministic tie counts as false."""
    sigma = a.std
    if sigma == 0.0:
        return 1.0 if a.mean < c else 0.0
    return norm_cdf((c - a.mean) / sigma)


def prob_both_leq(a: CanonicalRV, b: CanonicalRV) -> float:
    """P{a <= 0 and b <= 0} for jointly Gaussian a, b (Owen's T form)."""
    from scipy.special import owens_t

    sa, sb = a.std, b.std
    if sa == 0.0:
        return prob_leq(b, 0.0) if a.mean <= 0.0 else 0.0
    if sb == 0.0:
        return prob_leq(a, 0.0) if b.mean <= 0.0 else 0.0
    h = -a.mean / sa
    k = -b.mean / sb
    rho = max(-1.0, min(1.0, covariance(a, b) / (sa * sb)))
    ph, pk = norm_cdf(h), norm_cdf(k)
    if rho > 1.0 - 1e-12:
        return min(ph, pk)
    if rho < -1.0 + 1e-12:
        return max(0.0, ph + pk - 1.0)
    # the formula divides by h and k; a tiny nudge off zero is harmless
    h = h if abs(h) > 1e-10 else 1e-10
    k = k if abs(k) > 1e-10 else 1e-10
    r = math.sqrt(1.0 - rho * rho)
    beta = 0.0 if h * k > 0 else 0.5
    p = 0.5 * ph + 0.5 * pk - owens_t(h, (k - rho * h) / (h * r)) - owens_t(k, (h - rho * k) / (k * r)) - beta
    return min(max(p, 0.0), min(ph, pk))


def sample(a: CanonicalRV, pc_draws, private_draw: float) -> float:
    draws = np.asarray(pc_draws, dtype=float)
    s = a.global_sens
    n = s.shape[0]
    if n and draws.shape[0] < n:
        used = np.nonzero(s)[0]
        if used.size and used[-1] >= draws.shape[0]:
            raise ValueError(
                f"missing draw for principal component {int(used[-1])}"
            )
        s = s[: draws.shape[0]]
        n = s.shape[0]
    return a.mean + float(s @ draws[:n]) + a.indep_sigma * private_draw


# --- vectorised helpers over stacks of canonical forms ---------------------
#
# A stack is (mean[n], sens[n, p], indep[n]); rows with mean = nan are absent.


def _rowdot(x, y):
    return np.einsum("ij,ij->i", x, y)


def stack_max(mu_a, s_a, i_a, mu_b, s_b, i_b):
    """Row-wise Clark max of two stacks; nan rows act as -inf.

    Rows where the difference has no spread take the larger argument (the
    first on a tie), as :func:`stat_max` does.  Field-equal rows are taken
    to be the same variable: stacks hold derived copies, not fresh draws.
    """
    from scipy.special import ndtr

    absent_a = np.isnan(mu_a)
    absent_b = np.isnan(mu_b)
    ma = np.where(absent_a, 0.0, mu_a)
    mb = np.where(absent_b, 0.0, mu_b)
    d = s_a - s_b
    theta2 = _rowdot(d, d) + i_a * i_a + i_b * i_b
    same = (ma == mb) & (i_a == i_b) & ~np.any(d, axis=1)
    live = (theta2 > 0.0) & ~same & ~absent_a & ~absent_b
    theta = np.sqrt(np.where(live, theta2, 1.0))
    alpha = np.where(live, (ma - mb) / theta, 0.0)
    a_wins = absent_b | (~absent_a & (ma >= mb))
    t = np.where(live, ndtr(alpha), np.where(a_wins, 1.0, 0.0))
    u = 1.0 - t
    phi = np.where(live, np.exp(-0.5 * alpha * alpha) * _INV_SQRT_2PI, 0.0)
    # moments about the midpoint to avoid cancellation
    c = 0.5 * (ma + mb)
    xa, xb = ma - c, mb - c
    va = _rowdot(s_a, s_a) + i_a * i_a
    vb = _rowdot(s_b, s_b) + i_b * i_b
    e1 = xa * t + xb * u + theta * phi
    e2 = (xa * xa + va) * t + (xb * xb + vb) * u + (xa + xb) * theta * phi
    sens = t[:, None] * s_a + u[:, None] * s_b
    resid = np.maximum(e2 - e1 * e1, 0.0) - _rowdot(sens, sens)
    indep = np.where(live, np.sqrt(np.maximum(resid, 0.0)), t * i_a + u * i_b)
    mean = np.where(live, e1 + c, np.where(a_wins, mu_a, mu_b))
    return mean, sens, indep


def stack_add(mu, s, i, rv: CanonicalRV):
    sens = pad(rv.global_sens, s.shape[1])
    return mu + rv.mean, s + sens[None, :], np.hypot(i, rv.indep_sigma)


def stack_row(mu, s, i, row: int) -> CanonicalRV | None:
    if np.isnan(mu[row]):
        return None
    return _make(mu[row], s[row].copy(), i[row])


def fold_max_runs(mu, s, i, lengths, obj):
    """``stat_max_all`` over consecutive runs of rows, all runs at once.

    Rows are (mean, sens, indep); ``lengths`` splits them into runs and
    ``obj[r]`` identifies the object behind row r (distinct values for
    distinct objects).  Returns per-run (mean, sens, indep, src) where src is
    the row whose object is the result unchanged, or -1 for a new form.
    """
    from scipy.special import ndtr

    lengths = np.asarray(lengths)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    am, asn, ai = mu[starts].copy(), s[starts].copy(), i[starts].copy()
    src = starts.copy()
    for j in range(1, int(lengths.max(initial=1))):
        live = np.flatnonzero(lengths > j)
        rows = starts[live] + j
        xm, xs, xi, xsrc = am[live], asn[live], ai[live], src[live]
        ym, ys, yi = mu[rows], s[rows], i[rows]
        # the same object, or a field-equal copy with no private term
        d = xs - ys
        eq = (xm == ym) & (xi == yi) & ~np.any(d, axis=1)
        same = ((xsrc >= 0) & (obj[np.maximum(xsrc, 0)] == obj[rows])) | (eq & (xi == 0.0))
        # canonical order: mean, then private sigma, then first differing sensitivity
        nz = d != 0
        if d.shape[1]:
            lex = ~nz.any(axis=1) | (d[np.arange(len(rows)), np.argmax(nz, axis=1)] > 0)
        else:
            lex = np.ones(len(rows), dtype=bool)
        first = (xm > ym) | ((xm == ym) & ((xi > yi) | ((xi == yi) & lex)))
        sw = ~first & ~same
        am_ = np.where(sw, ym, xm)
        bm_ = np.where(sw, xm, ym)
        as_ = np.where(sw[:, None], ys, xs)
        bs_ = np.where(sw[:, None], xs, ys)
        ai_ = np.where(sw, yi, xi)
        bi_ = np.where(sw, xi, yi)
        asrc = np.where(sw, rows, xsrc)
        diff = as_ - bs_
        theta2 = _rowdot(diff, diff) + ai_ * ai_ + bi_ * bi_
        theta = np.sqrt(np.where(theta2 > 0.0, theta2, 1.0))
        alpha = (am_ - bm_) / theta
        clark = ~same & (theta2 > 0.0) & (alpha <= _DOMINANT)
        t = ndtr(alpha)
        phi = np.exp(-0.5 * alpha * alpha) * _INV_SQRT_2PI
        c = 0.5 * (am_ + bm_)
        ma, mb = am_ - c, bm_ - c
        va = _rowdot(as_, as_) + ai_ * ai_
        vb = _rowdot(bs_, bs_) + bi_ * bi_
        m1 = ma * t + mb * (1.0 - t) + theta * phi
        m2 = (ma * ma + va) * t + (mb * mb + vb) * (1.0 - t) + (ma + mb) * theta * phi
        var = np.maximum(m2 - m1 * m1, 0.0)
        sens = t[:, None] * as_ + (1.0 - t)[:, None] * bs_
        resid = var - _rowdot(sens, sens)
        ind = np.sqrt(np.maximum(resid, 0.0))
        am[live] = np.where(clark, m1 + c, am_)
        asn[live] = np.where(clark[:, None], sens, as_)
        ai[live] = np.where(clark, ind, ai_)
        src[live] = np.where(clark, -1, asrc)
    return am, asn, ai, src


def pad(sens: np.ndarray, dims: int) -> np.ndarray:
    if sens.shape[0] == dims:
        return sens
    if sens.shape[0] > dims:
        raise ValueError(f"sensitivity vector longer than {dims}")
    return np.concatenate([sens, np.zeros(dims - sens.shape[0])])


class Stack:
    """Rows of canonical forms sharing one sensitivity width; nan mean = absent."""

    __slots__ = ("mu", "s", "i")

    def __init__(self, mu, s, i):
        self.mu, self.s, self.i = mu, s, i

    @classmethod
    def empty(cls, rows: int, dims: int) -> "Stack":
        return cls(np.full(rows, np.nan), np.zeros((rows, dims)), np.zeros(rows))

    @classmethod
    def filled(cls, rv: CanonicalRV, rows: int, dims: int) -> "Stack":
        """``rows`` copies of ``rv``; the arrays are read-only broadcast views."""
        sens = pad(rv.global_sens, dims)
        return cls(
            np.broadcast_to(np.float64(rv.mean), (rows,)),
            np.broadcast_to(sens, (rows, dims)),
            np.broadcast_to(np.float64(rv.indep_sigma), (rows,)),
        )

    def __len__(self):
        return self.mu.shape[0]

    @property
    def dims(self) -> int:
        return self.s.shape[1]

    def copy(self) -> "Stack":
        return Stack(self.mu.copy(), self.s.copy(), self.i.copy())

    def take(self, idx) -> "Stack":
        return Stack(self.mu[idx], self.s[idx], self.i[idx])

    def put(self, idx, other: "Stack"):
        self.mu[idx] = other.mu
        self.s[idx] = other.s
        self.i[idx] = other.i

    def put_rv(self, idx, rv: CanonicalRV):
        self.mu[idx] = rv.mean
        self.s[idx] = pad(rv.global_sens, self.dims)
        self.i[idx] = rv.indep_sigma

    def negated(self) -> "Stack":
        return Stack(-self.mu, -self.s, self.i)

    def scaled(self, c: float) -> "Stack":
        return Stack(self.mu * c, self.s * c, self.i * abs(c))

    def maxed(self, other: "Stack") -> "Stack":
        return Stack(*stack_max(self.mu, self.s, self.i, other.mu, other.s, other.i))

    def plus(self, rv: CanonicalRV) -> "Stack":
        return Stack(*stack_add(self.mu, self.s, self.i, rv))

    def plus_stack(self, other: "Stack") -> "Stack":
        return Stack(self.mu + other.mu, self.s + other.s, np.hypot(self.i, other.i))

    def std(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.s, self.s) + self.i * self.i)

    def row(self, r: int) -> CanonicalRV | None:
        return stack_row(self.mu, self.s, self.i, r)
