"""Second-order expansion prices for the Heston and GARCH diffusion models.

Conditioning on the variance path writes the option price as the
expectation of a Black-Scholes kernel,

    Put = E Put_BS(S0 ξ_T, ∫(1-ρ²)V dt),

and a second-order Taylor expansion of the kernel around
(x̂, ŷ) = (S0, ∫(1-ρ²) E V dt) leaves three expectations:

    termXi2    = E(ξ_T - 1)²
    termVarInt = E(∫(1-ρ²)(V - EV) dt)²
    termMixed  = E[(ξ_T - 1) ∫(1-ρ²)(V - EV) dt]

so that

    Put2 = Put_BS(x̂,ŷ) + ½∂xx S0² termXi2 + ½∂yy termVarInt + ∂xy S0 termMixed.

For Heston, changes of measure turn each expectation into moments of a CIR
law with shifted mean reversion κ - nλρ, and every moment reduces to a
short list of iterated integral operators.  GARCH diffusion is handled
only with ρ ≡ 0, where ξ_T ≡ 1 and the correction is the double
covariance integral of the inverse-Gamma variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import solve_ivp

from . import blackscholes as bs
from .core import (
    MarketState,
    Model,
    ModelParams,
    OptionKind,
    OptionSpec,
    PiecewiseCurve,
    restrict_params,
)
from .errors import ModelPreconditionError
from .moments import Family, VarianceLaw, _central_ode, heston_shifted_law
from .operators import OperatorKey, OperatorState

# y-range of the numerical supremum in the error bound, relative to ŷ
_BOUND_Y_SPAN = 1e3
_BOUND_Y_POINTS = 4001
_GAUSS_NODES = 16


@dataclass(frozen=True)
class ExpansionTerms:
    """ŷ and the three expectations; shared by puts, calls and Greeks."""

    yhat: float
    term_xi2: float
    term_var_int: float
    term_mixed: float


@dataclass(frozen=True)
class PricingResult:
    price: float
    xhat: float
    yhat: float
    term_xi2: float
    term_var_int: float
    term_mixed: float
    zeroth_order: float
    kind: OptionKind = OptionKind.PUT
    d_xx: float = 0.0
    d_yy: float = 0.0
    d_xy: float = 0.0
    diagnostics: tuple[str, ...] = field(default=())

    def reconstruct(self) -> float:
        """Price rebuilt from the stored terms and kernel partials."""
        return _assemble(self.zeroth_order, self.xhat, self.d_xx, self.d_yy, self.d_xy,
                         self.term_xi2, self.term_var_int, self.term_mixed)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "price": self.price,
            "xhat": self.xhat,
            "yhat": self.yhat,
            "term_xi2": self.term_xi2,
            "term_var_int": self.term_var_int,
            "term_mixed": self.term_mixed,
            "zeroth_order": self.zeroth_order,
            "diagnostics": list(self.diagnostics),
        }


def _assemble(zeroth, x, dxx, dyy, dxy, xi2, var_int, mixed) -> float:
    return zeroth + 0.5 * dxx * x * x * xi2 + 0.5 * dyy * var_int + dxy * x * mixed


# ----------------------------------------------------------------------------
# expansion terms through operator keys
# ----------------------------------------------------------------------------

def _one(params: ModelParams) -> PiecewiseCurve:
    return PiecewiseCurve.constant(params.grid, 1.0, "1")


def _frame(params: ModelParams, T: float, state: OperatorState | None):
    """Parameters, state and grid index at which to read ω for maturity T.

    A maturity on the parameter grid reuses the caller's state (the
    calibration path); any other maturity works on a restricted copy.
    """
    j = params.grid.index_of_time(T)
    if j is None or j == 0:
        params = restrict_params(params, T)
        j = params.grid.n_intervals
        state = None
    if state is None or state.grid != params.grid:
        state = OperatorState(params.grid)
    return params, state, j


def _first_order(law: VarianceLaw, w: PiecewiseCurve, st: OperatorState, j: int) -> float:
    """∫ w E V dt = v0 ω^{(-κ,w)} + ω^{(-κ,w),(κ,κθ)}."""
    outer = (-law.kappa, w)
    return law.v0 * st.omega_at(OperatorKey.of(outer), j) + st.omega_at(
        OperatorKey.of(outer, (law.kappa, law.kappa_theta)), j
    )


def _half_cir_square(law: VarianceLaw, w: PiecewiseCurve, st: OperatorState, j: int) -> float:
    """½ E(∫ w (V - EV) dt)² for a CIR law: ∫∫_{s<t} w_s w_t Cov(V_s, V_t)."""
    outer = (-law.kappa, w)
    inner = (law.kappa, law.lam2)
    return law.v0 * st.omega_at(OperatorKey.of(outer, outer, inner), j) + st.omega_at(
        OperatorKey.of(outer, outer, inner, (law.kappa, law.kappa_theta)), j
    )


def heston_terms(params: ModelParams, T: float, state: OperatorState | None = None) -> ExpansionTerms:
    if params.model is not Model.HESTON:
        raise ValueError("heston_terms needs Heston parameters")
    p, st, j = _frame(params, T, state)
    rho2 = (p.rho * p.rho).renamed("rho2")
    w = (1.0 - rho2).renamed("w")
    law0 = heston_shifted_law(p, 0)
    yhat = _first_order(law0, w, st, j)
    var_int = 2.0 * _half_cir_square(law0, w, st, j)
    if p.rho.is_zero():
        return ExpansionTerms(yhat, 0.0, var_int, 0.0)
    law1 = heston_shifted_law(p, 1)
    law2 = heston_shifted_law(p, 2)
    mixed = _first_order(law1, w, st, j) - yhat
    # E(ξ-1)² = E_{Q2} e^{∫ρ²V} - 1 expanded to second order around the Q2 mean
    a = _first_order(law2, rho2, st, j)
    b = _half_cir_square(law2, rho2, st, j)
    xi2 = math.expm1(a) * (1.0 + b) + b
    return ExpansionTerms(yhat, xi2, var_int, mixed)


def garch_terms(params: ModelParams, T: float, state: OperatorState | None = None) -> ExpansionTerms:
    if params.model is not Model.GARCH:
        raise ValueError("garch_terms needs GARCH parameters")
    params.require_zero_rho()
    p, st, j = _frame(params, T, state)
    law = VarianceLaw.from_params(p)
    one = _one(p)
    kap, kt, l2 = law.kappa, law.kappa_theta, law.lam2
    yhat = _first_order(law, one, st, j)
    outer = (-kap, one)
    base = (outer, outer, (l2, l2))
    shifted = (kap - l2, kt)
    # ∫∫ Cov = v0² ω^{…,(λ²,λ²)} + 2 v0 ω^{…,(κ-λ²,κθ)} + 2 ω^{…,(κ-λ²,κθ),(κ,κθ)}
    cov2 = math.fsum([
        law.v0**2 * st.omega_at(OperatorKey(base), j),
        2.0 * law.v0 * st.omega_at(OperatorKey(base + (shifted,)), j),
        2.0 * st.omega_at(OperatorKey(base + (shifted, (kap, kt))), j),
    ])
    return ExpansionTerms(yhat, 0.0, 2.0 * cov2, 0.0)


def expansion_terms(params: ModelParams, T: float, state: OperatorState | None = None) -> ExpansionTerms:
    if params.model is Model.HESTON:
        return heston_terms(params, T, state)
    return garch_terms(params, T, state)


# ----------------------------------------------------------------------------
# independent reference: moment ODEs integrated numerically
# ----------------------------------------------------------------------------

def _law_integrals(law: VarianceLaw, w: np.ndarray, T: float, rtol: float) -> tuple[float, float]:
    """(∫ w EV dt, ½ E(∫ w (V-EV) dt)²) by integrating the moment ODEs.

    States: mean m, variance v, Z_t = ∫_0^t w_s Cov(V_s, V_t) ds,
    A = ∫ w m and H = ∫ w Z.
    """
    g = law.grid
    iga = law.family is Family.IGA
    y = np.array([law.v0, 0.0, 0.0, 0.0, 0.0])
    for i in range(g.n_intervals):
        a, b = g.times[i], min(g.times[i + 1], T)
        if b <= a:
            break
        kap, kt, l2, wi = law.kappa.values[i], law.kappa_theta.values[i], law.lam2.values[i], w[i]

        def rhs(_t, z):
            m, v, Z, _A, _H = z
            diff2 = l2 * (v + m * m) if iga else l2 * m
            return [kt - kap * m, -2 * kap * v + diff2, wi * v - kap * Z, wi * m, wi * Z]

        sol = solve_ivp(rhs, (a, b), y, method="DOP853", rtol=rtol, atol=1e-22)
        if not sol.success:
            raise RuntimeError(sol.message)
        y = sol.y[:, -1]
    return float(y[3]), float(y[4])


def expansion_terms_reference(params: ModelParams, T: float, rtol: float = 1e-12) -> ExpansionTerms:
    """The three expectations from a numerical solve of the moment ODEs.

    Shares no code with the operator path; used as a test oracle.
    """
    p = params
    rho2 = p.rho.values**2
    w = 1.0 - rho2
    if p.model is Model.GARCH:
        p.require_zero_rho()
        yhat, half = _law_integrals(VarianceLaw.from_params(p), w, T, rtol)
        return ExpansionTerms(yhat, 0.0, 2.0 * half, 0.0)
    law0 = heston_shifted_law(p, 0)
    yhat, half = _law_integrals(law0, w, T, rtol)
    if p.rho.is_zero():
        return ExpansionTerms(yhat, 0.0, 2.0 * half, 0.0)
    y1, _ = _law_integrals(heston_shifted_law(p, 1), w, T, rtol)
    a, b = _law_integrals(heston_shifted_law(p, 2), rho2, T, rtol)
    return ExpansionTerms(yhat, math.expm1(a) * (1.0 + b) + b, 2.0 * half, y1 - yhat)


# ----------------------------------------------------------------------------
# prices
# ----------------------------------------------------------------------------

def _check_inputs(params: ModelParams, opt: OptionSpec, model: Model):
    if params.model is not model:
        raise ValueError(f"expected {model.value} parameters, got {params.model.value}")
    opt.check_horizon(params.grid)


def price_from_terms(market: MarketState, opt: OptionSpec, terms: ExpansionTerms) -> PricingResult:
    """Assemble the price of ``opt`` from precomputed expansion terms."""
    if terms.yhat <= bs.Y_DEGENERATE:
        raise ModelPreconditionError("expected integrated variance is zero (|rho| = 1 throughout)")
    x, y = market.spot, terms.yhat
    rd, rf = market.rate_integrals(opt.maturity)
    K = opt.strike
    zeroth = bs.option_price(opt.kind, x, y, K, rd, rf)
    dxx = bs.put_partial(2, 0, x, y, K, rd, rf)
    dyy = bs.put_partial(0, 2, x, y, K, rd, rf)
    dxy = bs.put_partial(1, 1, x, y, K, rd, rf)
    price = _assemble(zeroth, x, dxx, dyy, dxy, terms.term_xi2, terms.term_var_int, terms.term_mixed)
    diags = []
    if terms.term_xi2 < 0:
        diags.append("term_xi2 is negative")
    if terms.term_var_int < 0:
        diags.append("term_var_int is negative")
    lower, _ = bs.price_bounds(opt.kind, x, K, rd, rf)
    if price < lower:
        diags.append("price below the discounted intrinsic value")
    return PricingResult(price, x, y, terms.term_xi2, terms.term_var_int, terms.term_mixed,
                         zeroth, opt.kind, dxx, dyy, dxy, tuple(diags))


def price2(market: MarketState, params: ModelParams, opt: OptionSpec,
           state: OperatorState | None = None) -> PricingResult:
    """Second-order price of ``opt`` (put or call) under either model."""
    opt.check_horizon(params.grid)
    return price_from_terms(market, opt, expansion_terms(params, opt.maturity, state))


def heston_put2(market: MarketState, params: ModelParams, opt: OptionSpec,
                state: OperatorState | None = None) -> PricingResult:
    _check_inputs(params, opt, Model.HESTON)
    return price_from_terms(market, replace(opt, kind=OptionKind.PUT), heston_terms(params, opt.maturity, state))


def garch_put2(market: MarketState, params: ModelParams, opt: OptionSpec,
               state: OperatorState | None = None) -> PricingResult:
    """GARCH diffusion put; requires ρ ≡ 0 (no tractable shifted law otherwise)."""
    _check_inputs(params, opt, Model.GARCH)
    params.require_zero_rho()
    return price_from_terms(market, replace(opt, kind=OptionKind.PUT), garch_terms(params, opt.maturity, state))


def price_call2(market: MarketState, params: ModelParams, opt: OptionSpec,
                state: OperatorState | None = None) -> PricingResult:
    """Call with the same expansion terms as the put; only the zeroth order changes."""
    return price2(market, params, replace(opt, kind=OptionKind.CALL), state)


def greeks2(market: MarketState, params: ModelParams, opt: OptionSpec) -> tuple[float, float]:
    """(Delta, Gamma) of the second-order price in the spot.

    The expectations do not depend on S0, so both follow from partials of
    the kernel up to fourth order.  A call shifts Delta by e^{-rfInt}.
    """
    opt.check_horizon(params.grid)
    t = expansion_terms(params, opt.maturity)
    if t.yhat <= bs.Y_DEGENERATE:
        raise ModelPreconditionError("expected integrated variance is zero (|rho| = 1 throughout)")
    x, y, K = market.spot, t.yhat, opt.strike
    rd, rf = market.rate_integrals(opt.maturity)

    def d(ax, ay):
        return bs.put_partial(ax, ay, x, y, K, rd, rf)

    delta = (d(1, 0)
             + 0.5 * (2 * x * d(2, 0) + x * x * d(3, 0)) * t.term_xi2
             + 0.5 * d(1, 2) * t.term_var_int
             + (d(1, 1) + x * d(2, 1)) * t.term_mixed)
    gamma = (d(2, 0)
             + 0.5 * (2 * d(2, 0) + 4 * x * d(3, 0) + x * x * d(4, 0)) * t.term_xi2
             + 0.5 * d(2, 2) * t.term_var_int
             + (2 * d(2, 1) + x * d(3, 1)) * t.term_mixed)
    if opt.kind is OptionKind.CALL:
        delta += math.exp(-rf)
    return float(delta), float(gamma)


# ----------------------------------------------------------------------------
# ρ = 0 error bound
# ----------------------------------------------------------------------------

def _sup_dyyy(x: float, yhat: float, K: float, rd: float, rf: float) -> float:
    ys = yhat * np.logspace(-math.log10(_BOUND_Y_SPAN), math.log10(_BOUND_Y_SPAN), _BOUND_Y_POINTS)
    return float(np.max(np.abs(bs.put_partial(0, 3, x, ys, K, rd, rf))))


def _integrated_central4(law: VarianceLaw, T: float) -> float:
    """∫_0^T (E(V_t - EV_t)^4)^{3/4} dt by Gauss-Legendre on each interval."""
    nodes, weights = np.polynomial.legendre.leggauss(_GAUSS_NODES)
    g = law.grid
    ts, ws = [], []
    for i in range(g.n_intervals):
        a, b = g.times[i], min(g.times[i + 1], T)
        if b <= a:
            break
        ts.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * weights)
    ts, ws = np.concatenate(ts), np.concatenate(ws)
    mu4 = np.maximum(_central_ode(law, ts)[4], 0.0)
    return math.fsum(ws * mu4**0.75)


def garch_error_bound_rho0(market: MarketState, params: ModelParams, opt: OptionSpec) -> float:
    """Computable bound on |Put - Put2| for the GARCH model with ρ ≡ 0.

    (1/6) M̂ T² ∫ E|V_t - EV_t|³ dt, with E|X|³ replaced by (E X⁴)^{3/4}
    and M̂ a grid supremum of |∂yyy Put_BS(S0, y)| over y ∈ [ŷ/10³, 10³ŷ].
    """
    _check_inputs(params, opt, Model.GARCH)
    params.require_zero_rho()
    if params.lam.is_zero():
        return 0.0
    T = opt.maturity
    p = restrict_params(params, T)
    law = VarianceLaw.from_params(p)
    yhat = garch_terms(p, T).yhat
    rd, rf = market.rate_integrals(T)
    M = _sup_dyyy(market.spot, yhat, opt.strike, rd, rf)
    return M * T * T * _integrated_central4(law, T) / 6.0
