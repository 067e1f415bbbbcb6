"""Iterated integral operators with piecewise-constant exponents and weights.

The one-fold operator is

    ω_T^{(k,l)} = ∫_0^T l_u exp(∫_0^u k_z dz) du,

and the n-fold operator nests it, listed outermost first:

    ω_T^{(k_n,l_n),...,(k_1,l_1)} = ∫_0^T l_n(u) e^{∫_0^u k_n} ω_u^{(k_{n-1},l_{n-1}),...,(k_1,l_1)} du.

With piecewise-constant curves each ω can be advanced from one grid time to
the next in closed form using the helper families

    e_t^{(k_n,...,k_1)} = exp(∫_0^t Σ_j k_j),
    φ_{T_i,t}^{(k,p)}   = ∫_{T_i}^t γ_i(u)^p e^{k_i (u - T_i)} du,   γ_i(u) = (u - T_i)/ΔT_i,

and the n-fold φ that nests the latter.  :class:`OperatorState` caches ω at
grid times so that a calibration that moves forward one interval at a time
never recomputes earlier intervals.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.integrate import solve_ivp

from .core import MaturityGrid, PiecewiseCurve, cumulative_integral, integrate_curve
from .errors import StateError, UnsupportedError

MAX_DEPTH = 5
K_ZERO = 1e-12          # |k| at or below this takes the k = 0 branch
SERIES_CUT = 1.0        # |k ΔT γ| below this expands e^{kΔγ} as a power series
SPECTRAL_CUT = 60.0     # collocation replaces nested series while every |k ΔT γ| stays below this
_SERIES_MAX_TERMS = 200


class AccuracyWarning(UserWarning):
    """A reference quadrature did not reach its target tolerance."""


def _curve_label(c: PiecewiseCurve) -> str:
    if c.name is not None:
        return c.name
    digest = hashlib.blake2b(np.ascontiguousarray(c.values).tobytes(), digest_size=6).hexdigest()
    return f"#{digest}"


@dataclass(frozen=True, eq=False)
class OperatorKey:
    """Levels ``(k, l)`` of an n-fold operator, outermost first."""

    pairs: tuple[tuple[PiecewiseCurve, PiecewiseCurve], ...]

    def __post_init__(self):
        pairs = tuple((k, l) for k, l in self.pairs)
        if not 1 <= len(pairs) <= MAX_DEPTH:
            raise UnsupportedError(f"operator depth must be between 1 and {MAX_DEPTH}, got {len(pairs)}")
        grid = pairs[0][0].grid
        for k, l in pairs:
            if k.grid != grid or l.grid != grid:
                raise ValueError("all curves of an operator key must share one grid")
        object.__setattr__(self, "pairs", pairs)
        label = ",".join(f"({_curve_label(k)},{_curve_label(l)})" for k, l in pairs)
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "_suffixes", {len(pairs): self})

    @classmethod
    def of(cls, *pairs) -> "OperatorKey":
        return cls(tuple(pairs))

    @property
    def depth(self) -> int:
        return len(self.pairs)

    @property
    def grid(self) -> MaturityGrid:
        return self.pairs[0][0].grid

    def suffix(self, depth: int) -> "OperatorKey":
        """The inner ``depth`` levels."""
        hit = self._suffixes.get(depth)
        if hit is None:
            hit = self._suffixes[depth] = OperatorKey(self.pairs[self.depth - depth:])
        return hit

    def level_values(self) -> np.ndarray:
        """Array of shape (2n, N): k and l values per level and interval."""
        return np.array([c.values for pair in self.pairs for c in pair])

    def __eq__(self, other):
        return isinstance(other, OperatorKey) and self.label == other.label and np.array_equal(
            self.level_values(), other.level_values()
        )

    def __hash__(self):
        return hash(self.label)

    def __repr__(self):
        return f"OperatorKey[{self.label}]"


# ----------------------------------------------------------------------------
# φ on a single interval
# ----------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _cheb_cumint(n: int):
    """Nodes on [-1, 1] and the matrix mapping samples to samples of ∫_{-1}^x."""
    x = np.cos(np.pi * np.arange(n) / (n - 1))[::-1]
    Vinv = np.linalg.inv(C.chebvander(x, n - 1))
    full = np.zeros((n + 1, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        full[:, j] = C.chebint(e, lbnd=-1)
    Vx = C.chebvander(x, n)
    return x, Vx @ full @ Vinv


def phi_spectral(ks: Sequence[float], ps: Sequence[int], delta: float, gamma: float = 1.0,
                 nodes: int = 129) -> float:
    """n-fold φ by Chebyshev collocation on ``[0, γ]`` (levels outermost first)."""
    if gamma == 0.0:
        return 0.0
    x, Q = _cheb_cumint(nodes)
    s = 0.5 * gamma * (x + 1.0)
    scale = 0.5 * gamma * delta
    F = np.ones_like(s)
    for k, p in zip(reversed(ks), reversed(ps)):
        w = s**p * np.exp(k * delta * s) * F
        F = scale * (Q @ w)
    return float(F[-1])


class _PhiEvaluator:
    """Closed-form recursion for n-fold φ on one interval, memoized per call.

    Each value carries a running bound on its relative rounding error.  A
    branch whose subtraction would lose more than ``ERR_MAX`` is replaced by
    the power series in k (small ``|kΔ|``) or by Chebyshev collocation.
    Nested levels with a small outer exponent go straight to collocation.
    """

    ERR_MAX = 1e-13
    _EPS = 2.3e-16

    def __init__(self, delta: float, gamma: float = 1.0):
        self.delta = float(delta)
        self.gamma = float(gamma)
        self.memo: dict = {}
        self.fallbacks = 0

    def __call__(self, ks: tuple[float, ...], ps: tuple[int, ...]) -> float:
        return self.value(ks, ps)[0]

    def value(self, ks, ps) -> tuple[float, float]:
        key = (ks, ps)
        hit = self.memo.get(key)
        if hit is None:
            hit = self.memo[key] = self._eval(ks, ps)
        return hit

    def _combine(self, terms, scale) -> tuple[float, float]:
        """Sum of (value, relerr) terms times ``scale`` with its error bound."""
        total = math.fsum(v for v, _ in terms)
        if total == 0.0:
            return 0.0, math.inf
        bound = sum(abs(v) * (e + self._EPS) for v, e in terms)
        return total * scale, bound / abs(total) + self._EPS

    def _eval(self, ks, ps) -> tuple[float, float]:
        D, g = self.delta, self.gamma
        k, p = ks[0], ps[0]
        a = k * D * g
        n = len(ks)
        if abs(k) <= K_ZERO:
            if n == 1:
                return D * g ** (p + 1) / (p + 1), self._EPS
            rv, re = self.value(ks[1:], ps[1:])
            mv, me = self.value((ks[1],) + ks[2:], (p + ps[1] + 1,) + ps[2:])
            out = self._combine([(g ** (p + 1) * rv, re), (-mv, me)], D / (p + 1))
        elif abs(a) < SERIES_CUT:
            if n > 1 and max(abs(kk) for kk in ks) * D * g < SPECTRAL_CUT:
                # nested series recurse through every inner level; collocation is far cheaper
                return phi_spectral(ks, ps, D, g), 1e-14
            out = self._series(ks, ps)
        elif n == 1 and p == 0:
            return math.expm1(a) / k, 2 * self._EPS
        else:
            ek = math.exp(a)
            if n == 1:
                rv, re = 1.0, 0.0
                terms = []
            else:
                rv, re = self.value(ks[1:], ps[1:])
                mv, me = self.value((k + ks[1],) + ks[2:], (p + ps[1],) + ps[2:])
                terms = [(-mv, me)]
            terms.append((g**p * ek * rv, re + self._EPS))
            if p >= 1:
                lv, le = self.value(ks, (p - 1,) + ps[1:])
                terms.append((-p / D * lv, le))
            out = self._combine(terms, 1.0 / k)
        if out[1] > self.ERR_MAX:
            self.fallbacks += 1
            return phi_spectral(ks, ps, D, g), 1e-14
        return out

    def _series(self, ks, ps) -> tuple[float, float]:
        """φ^{(k,p),rest} = Σ_m (kΔ)^m / m! φ^{(0,p+m),rest}."""
        kD = ks[0] * self.delta
        zero = (0.0,) + ks[1:]
        terms, coef, total = [], 1.0, 0.0
        for m in range(_SERIES_MAX_TERMS):
            v, e = self.value(zero, (ps[0] + m,) + ps[1:])
            terms.append((coef * v, e))
            total += coef * v
            if m > abs(kD) * self.gamma and abs(coef * v) <= 1e-17 * abs(total):
                break
            coef *= kD / (m + 1)
        return self._combine(terms, 1.0)


def phi_values(ks: Sequence[float], ps: Sequence[int], delta: float, gamma: float = 1.0) -> float:
    """n-fold φ from per-interval exponents ``ks`` and powers ``ps`` (outermost first)."""
    ks = tuple(float(k) for k in ks)
    ps = tuple(int(p) for p in ps)
    if len(ks) != len(ps) or not 1 <= len(ks) <= MAX_DEPTH:
        raise UnsupportedError(f"φ needs between 1 and {MAX_DEPTH} levels")
    if any(p < 0 for p in ps):
        raise UnsupportedError("φ powers must be nonnegative")
    if not 0.0 <= gamma <= 1.0 + 1e-14:
        raise ValueError("γ must lie in [0, 1]")
    return _PhiEvaluator(delta, min(gamma, 1.0))(ks, ps)


# ----------------------------------------------------------------------------
# cached operator values
# ----------------------------------------------------------------------------

class OperatorState:
    """ω values at grid times, with commit/rollback for forward calibration.

    Values up to grid index ``committed`` are frozen.  Values beyond it are
    pending; they are recomputed automatically when the curves of a key
    change on a pending interval, and discarded by :meth:`rollback`.
    """

    def __init__(self, grid: MaturityGrid):
        self.grid = grid
        self.committed = 0
        self._omega: dict[str, list[float]] = {}
        self._levels: dict[str, np.ndarray] = {}
        self.advance_counts = np.zeros(grid.n_intervals, dtype=int)

    # -- bookkeeping ---------------------------------------------------------
    def _series_for(self, key: OperatorKey) -> list[float]:
        if key.grid != self.grid:
            raise StateError("operator key lives on a different grid than the state")
        vals = self._levels.get(key.label)
        new = key.level_values()
        lst = self._omega.get(key.label)
        if lst is None:
            lst = self._omega[key.label] = [0.0]
            self._levels[key.label] = new
            return lst
        if vals.shape != new.shape:
            raise StateError(f"label {key.label} reused for a key of a different shape")
        known = len(lst) - 1
        diff = np.nonzero(np.any(vals[:, :known] != new[:, :known], axis=0))[0]
        if diff.size:
            first = int(diff[0])
            if first < self.committed:
                raise StateError(
                    f"curves of {key.label} changed on committed interval {first}; roll back first"
                )
            del lst[first + 1:]
        self._levels[key.label] = new
        return lst

    def commit(self, j: int | None = None):
        """Freeze cached values up to grid index ``j`` (default: the horizon)."""
        j = self.grid.n_intervals if j is None else int(j)
        if not 0 <= j <= self.grid.n_intervals:
            raise StateError("commit index outside the grid")
        if j < self.committed:
            raise StateError("cannot commit behind the last commit; use rollback")
        self.committed = j

    def rollback(self, j: int | None = None):
        """Discard values beyond grid index ``j`` (default: the last commit)."""
        j = self.committed if j is None else int(j)
        if j < self.committed:
            raise StateError(f"cannot roll back past the last commit at index {self.committed}")
        for lst in self._omega.values():
            del lst[j + 1:]

    def cached_index(self, key: OperatorKey) -> int:
        lst = self._omega.get(key.label)
        return -1 if lst is None else len(lst) - 1

    # -- evaluation ----------------------------------------------------------
    def e_factor(self, t: float, ks: Iterable[PiecewiseCurve]) -> float:
        return e_factor(t, ks)

    def _e_at(self, i: int, ks) -> float:
        total = 0.0
        for k in ks:
            total += float(np.dot(k.values[:i], self.grid.dt[:i]))
        return math.exp(total)

    def omega_advance(self, key: OperatorKey, i: int) -> float:
        """ω at ``T_{i+1}`` from cached values at ``T_i`` of the key and its suffixes."""
        n = key.depth
        lists = [self._series_for(key.suffix(d)) for d in range(1, n + 1)]
        for d, lst in enumerate(lists, start=1):
            if len(lst) <= i:
                raise StateError(f"ω of depth-{d} suffix of {key.label} not cached at T_{i}")
        own = lists[-1]
        if len(own) > i + 1:
            return own[i + 1]
        delta = self.grid.times[i + 1] - self.grid.times[i]
        phi = _PhiEvaluator(delta)
        ks_i = [k.values[i] for k, _ in key.pairs]
        ls_i = [l.values[i] for _, l in key.pairs]
        kcurves = [k for k, _ in key.pairs]
        terms = [own[i]]
        lprod = 1.0
        for m in range(2, n + 2):
            lprod *= ls_i[m - 2]
            if lprod == 0.0:
                break
            outer = m - 1
            inner = 1.0 if outer == n else lists[n - outer - 1][i]
            if inner == 0.0:
                continue
            e = self._e_at(i, kcurves[:outer])
            f = phi(tuple(ks_i[:outer]), (0,) * outer)
            terms.append(inner * lprod * e * f)
        val = math.fsum(terms)
        own.append(val)
        self.advance_counts[i] += 1
        return val

    def omega_at(self, key: OperatorKey, j) -> float:
        """ω at grid time ``T_j`` (index or time), advancing from the cache."""
        j = self._grid_index(j)
        lists = [self._series_for(key.suffix(d)) for d in range(1, key.depth + 1)]
        start = min(len(lst) - 1 for lst in lists)
        for i in range(start, j):
            for d in range(1, key.depth + 1):
                if len(lists[d - 1]) == i + 1:
                    self.omega_advance(key.suffix(d), i)
        return lists[-1][j]

    def _grid_index(self, j) -> int:
        if isinstance(j, (int, np.integer)):
            idx = int(j)
        else:
            idx = self.grid.index_of_time(float(j))
            if idx is None:
                raise ValueError(f"{j} is not a grid time")
        if not 0 <= idx <= self.grid.n_intervals:
            raise ValueError("grid index out of range")
        return idx

    # -- checkpoints ---------------------------------------------------------
    def to_json(self) -> str:
        c = self.committed
        return json.dumps({
            "grid": list(self.grid.times),
            "committed": c,
            "omega": {lab: lst[: c + 1] for lab, lst in self._omega.items() if len(lst) > c},
            "levels": {lab: self._levels[lab][:, :c].tolist() for lab, lst in self._omega.items() if len(lst) > c},
        })

    @classmethod
    def from_json(cls, text: str, grid: MaturityGrid | None = None) -> "OperatorState":
        data = json.loads(text)
        g = MaturityGrid(tuple(data["grid"])) if grid is None else grid
        if tuple(data["grid"]) != g.times:
            raise StateError("checkpoint grid does not match")
        st = cls(g)
        st.committed = int(data["committed"])
        N = g.n_intervals
        for lab, vals in data["omega"].items():
            st._omega[lab] = [float(v) for v in vals]
            lv = np.array(data["levels"][lab], dtype=float).reshape(-1, st.committed)
            full = np.full((lv.shape[0], N), np.nan)
            full[:, : st.committed] = lv
            st._levels[lab] = full
        return st


def e_factor(t: float, ks: Iterable[PiecewiseCurve]) -> float:
    """exp(∫_0^t Σ_j k_j)."""
    return math.exp(math.fsum(integrate_curve(k, 0.0, t) for k in ks))


def phi(state: OperatorState, i: int, t: float, specs: Sequence[tuple[PiecewiseCurve, int]]) -> float:
    """n-fold φ_{T_i,t} for curve/power specs listed outermost first."""
    g = state.grid
    if not 0 <= i < g.n_intervals:
        raise ValueError("interval index out of range")
    lo, hi = g.times[i], g.times[i + 1]
    if not lo <= t <= hi * (1 + 1e-14):
        raise ValueError(f"t={t} outside interval [{lo}, {hi}]")
    delta = hi - lo
    return phi_values([k.values[i] for k, _ in specs], [p for _, p in specs], delta, (t - lo) / delta)


def omega_advance(state: OperatorState, key: OperatorKey, i: int) -> float:
    return state.omega_advance(key, i)


def omega_at(state: OperatorState, key: OperatorKey, j) -> float:
    return state.omega_at(key, j)


def omega(key: OperatorKey, T: float | None = None) -> float:
    """One-shot ω at time ``T`` (default: the horizon of the key's grid)."""
    grid = key.grid
    if T is None or grid.index_of_time(T) == grid.n_intervals:
        return OperatorState(grid).omega_at(key, grid.n_intervals)
    from .core import restrict_curve

    sub = OperatorKey(tuple((restrict_curve(k, T), restrict_curve(l, T)) for k, l in key.pairs))
    return OperatorState(sub.grid).omega_at(sub, sub.grid.n_intervals)


# ----------------------------------------------------------------------------
# reference quadrature
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureResult:
    value: float
    converged: bool
    message: str = ""

    def __float__(self):
        return self.value


def quadrature_reference(key: OperatorKey, T: float, rtol: float = 1e-11) -> QuadratureResult:
    """ω_T by adaptive integration of the equivalent nested ODE system.

    W_1' = l_1 e^{∫k_1},  W_j' = l_j e^{∫k_j} W_{j-1},  W_j(0) = 0, with the
    integration restarted at every breakpoint of the curves.  Used as an
    oracle for the closed-form recursion.
    """
    grid = key.grid
    if not 0 <= T <= grid.horizon * (1 + 1e-14):
        raise ValueError("T outside the key's grid")
    inner_first = list(reversed(key.pairs))
    cum = [cumulative_integral(k) for k, _ in inner_first]

    def sweep(atol):
        W = np.zeros(len(inner_first))
        peak = np.zeros_like(W)
        ok, msg = True, ""
        times = grid.times
        for i in range(grid.n_intervals):
            a, b = times[i], min(times[i + 1], T)
            if b <= a:
                break
            kv = np.array([k.values[i] for k, _ in inner_first])
            lv = np.array([l.values[i] for _, l in inner_first])
            base = np.array([c[i] for c in cum])

            def rhs(t, w, kv=kv, lv=lv, base=base, a=a):
                ex = lv * np.exp(base + kv * (t - a))
                out = np.empty_like(w)
                out[0] = ex[0]
                out[1:] = ex[1:] * w[:-1]
                return out

            sol = solve_ivp(rhs, (a, b), W, method="DOP853", rtol=max(rtol * 1e-2, 2.5e-14), atol=atol)
            if not sol.success:
                ok, msg = False, sol.message
            peak = np.maximum(peak, np.max(np.abs(sol.y), axis=1))
            W = sol.y[:, -1]
        return W, peak, ok, msg

    # a coarse pass fixes the magnitude of each level for the absolute tolerance
    _, peak, _, _ = sweep(1e-8)
    W, _, ok, msg = sweep(np.maximum(peak, 1e-300) * rtol * 1e-3)
    value = float(W[-1])
    if not ok:
        warnings.warn(f"reference quadrature did not converge: {msg}", AccuracyWarning, stacklevel=2)
    return QuadratureResult(value, ok, msg)
