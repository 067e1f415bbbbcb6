"""Moments of the CIR and inverse-Gamma (IGa) variance processes.

Both laws have the mean-reverting drift κ(θ - V); the diffusion is
λ sqrt(V) for CIR and λ V for IGa.  Raw moments satisfy

    d/dt E V^n = c_n E V^{n-1} + b_n E V^n,

with c_n = nκθ + n(n-1)λ²/2, b_n = -nκ for CIR and c_n = nκθ,
b_n = n(n-1)λ²/2 - nκ for IGa.  Unrolling the recursion writes every
moment as a polynomial in v0 whose coefficients are iterated integral
operators, which is the fast path used here.  A matrix-exponential
propagator of the same linear system and an ODE solver give two
independent routes for checks and for orders beyond the operator depth.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .core import (
    MaturityGrid,
    Model,
    ModelParams,
    PiecewiseCurve,
    cumulative_integral,
    integrate_curve,
    window_curve,
)
from .errors import DomainError, UnsupportedError
from .operators import MAX_DEPTH, OperatorKey, OperatorState

MAX_MOMENT = 6


class Family(str, enum.Enum):
    CIR = "cir"
    IGA = "iga"


class ModelWarning(UserWarning):
    """Parameters are valid for the formulas but outside the usual regime."""


@dataclass(frozen=True, eq=False)
class VarianceLaw:
    """A CIR or IGa variance process with piecewise-constant parameters.

    ``kappa_theta`` overrides the product κθ; it keeps the drift level exact
    when κ is shifted (possibly through zero) by a change of measure.
    """

    family: Family
    v0: float
    kappa: PiecewiseCurve
    theta: PiecewiseCurve
    lam: PiecewiseCurve
    kappa_theta: PiecewiseCurve | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.v0 <= 0:
            raise ValueError("v0 must be positive")
        g = self.kappa.grid
        if self.theta.grid != g or self.lam.grid != g:
            raise ValueError("law curves must share one grid")
        if np.any(self.lam.values < 0):
            raise ValueError("lambda must be nonnegative")
        if self.kappa_theta is None:
            object.__setattr__(self, "kappa_theta", self.kappa * self.theta)
        elif self.kappa_theta.grid != g:
            raise ValueError("kappa_theta must share the law's grid")

    @classmethod
    def from_params(cls, params: ModelParams) -> "VarianceLaw":
        fam = Family.CIR if params.model is Model.HESTON else Family.IGA
        return cls(fam, params.v0, params.kappa, params.theta, params.lam)

    @property
    def grid(self) -> MaturityGrid:
        return self.kappa.grid

    @cached_property
    def lam2(self) -> PiecewiseCurve:
        return self.lam * self.lam

    def feller(self) -> np.ndarray:
        """Per-interval flag 2κθ > λ² (reported, never enforced)."""
        return 2 * self.kappa_theta.values > self.lam2.values

    def window(self, s: float, t: float) -> "VarianceLaw":
        """The law's parameters on ``[s, t]`` re-based to start at 0 (v0 kept)."""
        return VarianceLaw(
            self.family,
            self.v0,
            window_curve(self.kappa, s, t),
            window_curve(self.theta, s, t),
            window_curve(self.lam, s, t),
            window_curve(self.kappa_theta, s, t),
        )

    def restricted(self, t: float) -> "VarianceLaw":
        if self.grid.index_of_time(t) == self.grid.n_intervals:
            return self
        return self.window(0.0, t)

    # coefficients of the raw-moment hierarchy
    def b(self, n: int) -> PiecewiseCurve:
        if self.family is Family.CIR:
            return -n * self.kappa
        return (0.5 * n * (n - 1)) * self.lam2 - n * self.kappa

    def c(self, n: int) -> PiecewiseCurve:
        if self.family is Family.CIR:
            return n * self.kappa_theta + (0.5 * n * (n - 1)) * self.lam2
        return n * self.kappa_theta

    def level(self, m: int) -> tuple[PiecewiseCurve, PiecewiseCurve]:
        """Operator level ``(b_{m-1} - b_m, c_m)`` contributed by moment order m."""
        if self.family is Family.CIR:
            return self.kappa, self.c(m)
        return self.kappa - (m - 1) * self.lam2, self.c(m)


# ----------------------------------------------------------------------------
# fast path: operator keys
# ----------------------------------------------------------------------------

def moment_coefficients(law: VarianceLaw, n: int, state: OperatorState | None = None) -> np.ndarray:
    """``a_j`` with E V_T^n = e^{∫_0^T b_n} Σ_j a_j v0^j at the law's horizon.

    ``a_n = 1`` and ``a_j`` is the (n-j)-fold operator with levels
    ``level(n), level(n-1), ..., level(j+1)`` (outermost first).
    """
    if n > MAX_DEPTH:
        raise UnsupportedError(f"operator path supports moments up to order {MAX_DEPTH}")
    st = state or OperatorState(law.grid)
    N = law.grid.n_intervals
    a = np.zeros(n + 1)
    a[n] = 1.0
    for j in range(n):
        key = OperatorKey(tuple(law.level(m) for m in range(n, j, -1)))
        a[j] = st.omega_at(key, N)
    return a


def _check_n(n: int):
    if not 1 <= n <= MAX_MOMENT:
        raise UnsupportedError(f"moment order must be between 1 and {MAX_MOMENT}, got {n}")


def _check_t(law: VarianceLaw, t: float):
    if not 0 <= t <= law.grid.horizon * (1 + 1e-14):
        raise DomainError(f"t={t} outside [0, {law.grid.horizon}]")


def mean(law: VarianceLaw, t: float) -> float:
    """E V_t = e^{-∫κ}(v0 + ω_t^{(κ,κθ)})."""
    _check_t(law, t)
    if t == 0:
        return law.v0
    sub = law.restricted(t)
    w = OperatorState(sub.grid).omega_at(OperatorKey.of((sub.kappa, sub.kappa_theta)), sub.grid.n_intervals)
    return math.exp(-integrate_curve(sub.kappa, 0.0, t)) * (law.v0 + w)


def moment_n(law: VarianceLaw, t: float, n: int, method: str = "operators") -> float:
    """E V_t^n.

    ``method`` is "operators" (closed form, n ≤ 5), "expm" (exact propagator
    of the moment ODE) or "quadrature" (adaptive ODE solve).  Order 6
    exceeds the operator depth and falls back to "expm".
    """
    _check_n(n)
    _check_t(law, t)
    if t == 0:
        return law.v0**n
    if method == "operators" and n > MAX_DEPTH:
        method = "expm"
    if method == "operators":
        sub = law.restricted(t)
        a = moment_coefficients(sub, n)
        poly = math.fsum(a[j] * law.v0**j for j in range(n + 1))
        return math.exp(integrate_curve(sub.b(n), 0.0, t)) * poly
    if method == "expm":
        return float(moments_expm(law, t, n)[n])
    if method == "quadrature":
        return float(moments_ode(law, t, n)[n])
    raise ValueError(f"unknown method {method!r}")


def variance(law: VarianceLaw, t: float) -> float:
    """Var V_t, written so that it vanishes identically when λ ≡ 0."""
    _check_t(law, t)
    if t == 0:
        return 0.0
    sub = law.restricted(t)
    st = OperatorState(sub.grid)
    N = sub.grid.n_intervals
    kap, l2, kt = sub.kappa, sub.lam2, sub.kappa_theta
    two_k = math.exp(-2.0 * integrate_curve(kap, 0.0, t))
    if sub.family is Family.CIR:
        # e^{-2K} ∫ λ² e^{2K} E V_u du
        val = law.v0 * st.omega_at(OperatorKey.of((kap, l2)), N) + st.omega_at(
            OperatorKey.of((kap, l2), (kap, kt)), N
        )
        return max(two_k * val, 0.0)
    # IGa: e^{-2K} ∫ λ² e^{2K} E V_u² du with E V_u² from the n=2 hierarchy
    shifted = kap - l2
    val = (
        law.v0**2 * st.omega_at(OperatorKey.of((l2, l2)), N)
        + law.v0 * st.omega_at(OperatorKey.of((l2, l2), (shifted, 2.0 * kt)), N)
        + st.omega_at(OperatorKey.of((l2, l2), (shifted, 2.0 * kt), (kap, kt)), N)
    )
    return max(two_k * val, 0.0)


def covariance(law: VarianceLaw, s: float, t: float) -> float:
    """Cov(V_s, V_t) = Var(V_s) e^{-∫_s^t κ}; arguments are symmetrized."""
    if s > t:
        s, t = t, s
    _check_t(law, t)
    if s < 0:
        raise DomainError("s must be nonnegative")
    return variance(law, s) * math.exp(-integrate_curve(law.kappa, s, t))


def conditional_coefficients(law: VarianceLaw, s: float, t: float, n: int) -> tuple[float, np.ndarray]:
    """``(B, a)`` with E(V_t^n | V_s = v) = e^B Σ_j a_j v^j."""
    if n == 0:
        return 0.0, np.array([1.0])
    if t == s:
        a = np.zeros(n + 1)
        a[n] = 1.0
        return 0.0, a
    sub = law.window(s, t)
    if n > MAX_DEPTH:
        P = _propagator(sub, t - s, n)
        return 0.0, P[n, :].copy()
    return integrate_curve(sub.b(n), 0.0, t - s), moment_coefficients(sub, n)


def mixed_moment(law: VarianceLaw, s: float, t: float, m: int, n: int, method: str = "operators") -> float:
    """E(V_s^m V_t^n) for s ≤ t by conditioning on V_s."""
    if s > t:
        raise DomainError("mixed moments need s <= t")
    if m < 0 or n < 0 or m + n > MAX_MOMENT or m + n == 0:
        raise UnsupportedError(f"need 1 <= m + n <= {MAX_MOMENT}")
    _check_t(law, t)
    B, a = conditional_coefficients(law, s, t, n)
    raw = [1.0] + [moment_n(law, s, k, method) for k in range(1, m + n + 1)]
    return math.exp(B) * math.fsum(a[j] * raw[m + j] for j in range(n + 1))


def central_moment(law: VarianceLaw, t: float, k: int) -> float:
    """E(V_t - E V_t)^k for k ≤ 4, from the central-moment ODE.

    Solving for central moments directly avoids the cancellation of the
    raw-moment expansion and is exactly zero when λ ≡ 0.
    """
    if not 1 <= k <= 4:
        raise UnsupportedError("central moments are available up to order 4")
    _check_t(law, t)
    if k == 1 or t == 0:
        return 0.0
    return float(_central_ode(law, np.array([t]))[k][0])


def _central_ode(law: VarianceLaw, ts: np.ndarray, rtol: float = 1e-11) -> dict[int, np.ndarray]:
    """Mean and central moments 2..4 at the sorted times ``ts``."""
    ts = np.asarray(ts, float)
    grid = law.grid
    iga = law.family is Family.IGA
    y = np.array([law.v0, 0.0, 0.0, 0.0])
    out = np.zeros((4, ts.size))
    pos = 0
    while pos < ts.size and ts[pos] <= 0.0:
        out[:, pos] = y
        pos += 1
    for i in range(grid.n_intervals):
        a, b = grid.times[i], grid.times[i + 1]
        if pos >= ts.size:
            break
        kap, kt, l2 = law.kappa.values[i], law.kappa_theta.values[i], law.lam2.values[i]

        def rhs(_t, z):
            m, m2, m3, m4 = z
            if iga:
                # diffusion² = λ²(X + m)²
                d2 = l2 * (m2 + m * m)
                d3 = 3 * l2 * (m3 + 2 * m * m2)
                d4 = 6 * l2 * (m4 + 2 * m * m3 + m * m * m2)
            else:
                d2 = l2 * m
                d3 = 3 * l2 * m2
                d4 = 6 * l2 * (m3 + m * m2)
            return [kt - kap * m, -2 * kap * m2 + d2, -3 * kap * m3 + d3, -4 * kap * m4 + d4]

        stop = [u for u in ts[pos:] if a < u <= b * (1 + 1e-14)]
        sol = solve_ivp(rhs, (a, b), y, method="DOP853", rtol=rtol, atol=1e-30,
                        t_eval=sorted(set(stop + [b])) if stop else [b])
        for u in stop:
            j = int(np.argmin(np.abs(sol.t - u)))
            out[:, pos] = sol.y[:, j]
            pos += 1
        y = sol.y[:, -1]
    return {1: out[0], 2: out[1], 3: out[2], 4: out[3]}


# ----------------------------------------------------------------------------
# independent routes
# ----------------------------------------------------------------------------

def _generator(law: VarianceLaw, i: int, n: int) -> np.ndarray:
    """Matrix A of d/dt (1, EV, ..., EV^n) = A (…) on interval i."""
    A = np.zeros((n + 1, n + 1))
    for m in range(1, n + 1):
        A[m, m] = law.b(m).values[i]
        A[m, m - 1] = law.c(m).values[i]
    return A


def _propagator(law: VarianceLaw, t: float, n: int) -> np.ndarray:
    P = np.eye(n + 1)
    g = law.grid
    for i in range(g.n_intervals):
        a, b = g.times[i], min(g.times[i + 1], t)
        if b <= a:
            break
        P = expm(_generator(law, i, n) * (b - a)) @ P
    return P


def moments_expm(law: VarianceLaw, t: float, n: int) -> np.ndarray:
    """(1, E V_t, ..., E V_t^n) via the exact matrix exponential."""
    _check_t(law, t)
    v = law.v0 ** np.arange(n + 1)
    return _propagator(law, t, n) @ v


def moments_ode(law: VarianceLaw, t: float, n: int, rtol: float = 1e-12) -> np.ndarray:
    """(1, E V_t, ..., E V_t^n) by adaptive integration of the moment ODE."""
    _check_t(law, t)
    y = law.v0 ** np.arange(n + 1)
    g = law.grid
    for i in range(g.n_intervals):
        a, b = g.times[i], min(g.times[i + 1], t)
        if b <= a:
            break
        A = _generator(law, i, n)
        sol = solve_ivp(lambda _t, z: A @ z, (a, b), y, method="DOP853", rtol=rtol,
                        atol=1e-14 * np.maximum(np.abs(y), 1e-300))
        y = sol.y[:, -1]
    return y


# ----------------------------------------------------------------------------
# Heston measure shifts
# ----------------------------------------------------------------------------

def heston_shifted_law(params: ModelParams, n: int) -> VarianceLaw:
    """CIR law of V under the n-th measure shift: κ - nλρ with κθ preserved."""
    if params.model is not Model.HESTON:
        raise ValueError("measure shifts are only tractable for the Heston model")
    if n not in (0, 1, 2):
        raise UnsupportedError("shift index must be 0, 1 or 2")
    kt = params.kappa * params.theta
    if n == 0 or params.rho.is_zero():
        return VarianceLaw(Family.CIR, params.v0, params.kappa, params.theta, params.lam, kt)
    kap = params.kappa - n * (params.lam * params.rho)
    if np.any(kap.values <= 0):
        warnings.warn(
            f"effective mean reversion kappa - {n}*lambda*rho is not positive on some interval",
            ModelWarning,
            stacklevel=2,
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        theta_vals = np.where(kap.values != 0, kt.values / np.where(kap.values != 0, kap.values, 1.0), np.inf)
    theta = PiecewiseCurve(kap.grid, np.where(np.isfinite(theta_vals), theta_vals, 0.0), f"theta_q{n}")
    return VarianceLaw(Family.CIR, params.v0, kap, theta, params.lam, kt)
