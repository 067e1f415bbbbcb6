import math

import numpy as np
import pytest
from scipy.integrate import dblquad

from svmix import blackscholes as bs
from svmix import moments as mo
from svmix.core import MarketState, MaturityGrid, Model, ModelParams, OptionKind, OptionSpec, PiecewiseCurve, safe_set
from svmix.errors import ModelPreconditionError
from svmix.moments import VarianceLaw
from svmix.pricing import (
    expansion_terms,
    expansion_terms_reference,
    garch_error_bound_rho0,
    garch_put2,
    greeks2,
    heston_put2,
    price2,
    price_call2,
)

from conftest import flat_market, random_params


def _opt(market, T, m=1.0, kind=OptionKind.PUT):
    return OptionSpec(m * market.forward(T), T, kind)


def _det_bs(market, params, T, K, kind=OptionKind.PUT):
    """Black-Scholes at the integrated deterministic variance ∫(1-ρ²)EV."""
    law = VarianceLaw.from_params(params)
    w = lambda t: 1 - params.rho(t) ** 2
    cuts = sorted(set([0.0, T] + [t for t in params.grid.times if t < T]))
    from scipy.integrate import quad
    y = sum(quad(lambda t: w(t) * mo.mean(law, t), a, b, epsrel=1e-13)[0] for a, b in zip(cuts, cuts[1:]))
    rd, rf = market.rate_integrals(T)
    return bs.option_price(kind, market.spot, y, K, rd, rf)


@pytest.mark.parametrize("model", list(Model))
def test_reconstruction_identity(rng, model):
    for _ in range(10):
        p = random_params(rng, model)
        mk = flat_market(p.grid, spot=rng.uniform(80, 120), rd=rng.uniform(0, 0.05), rf=rng.uniform(0, 0.05))
        T = p.grid.horizon * rng.uniform(0.2, 1.0)
        res = price2(mk, p, _opt(mk, T, rng.uniform(0.85, 1.15)))
        assert abs(res.reconstruct() - res.price) <= 1e-12 * max(1.0, abs(res.price))


@pytest.mark.parametrize("model", list(Model))
def test_lambda_zero_is_black_scholes(model):
    p, mk = safe_set(model)
    p = p.replace(lam=0.0, rho=0.0)
    for T in (1 / 12, 0.4, 1.0):
        opt = _opt(mk, T, 0.97)
        res = price2(mk, p, opt)
        assert res.term_var_int == 0.0 and res.term_mixed == 0.0
        assert res.term_xi2 == 0.0
        assert res.price == pytest.approx(_det_bs(mk, p, T, opt.strike), abs=1e-12)


def test_lambda_zero_rho_nonzero_keeps_xi2():
    # with deterministic variance ξ_T = exp(∫ρ√V dB - ½∫ρ²V) is still random
    p, mk = safe_set("heston")
    p = p.replace(lam=0.0)
    res = price2(mk, p, _opt(mk, 1.0))
    law = VarianceLaw.from_params(p)
    from scipy.integrate import quad
    cuts = p.grid.times
    a = sum(quad(lambda t: p.rho(t) ** 2 * mo.mean(law, t), lo, hi, epsrel=1e-13)[0] for lo, hi in zip(cuts, cuts[1:]))
    assert res.term_xi2 == pytest.approx(math.expm1(a), rel=1e-10)
    # the exact price is Black-Scholes at the full variance ∫EV; the expansion stays close
    exact = _det_bs(mk, p.replace(rho=0.0), 1.0, _opt(mk, 1.0).strike)
    assert res.price == pytest.approx(exact, rel=1e-2)
    assert res.price != exact


def _cov2(law, T, cuts):
    """2 ∫∫_{s<t<T} Cov(V_s, V_t), split where the covariance has kinks."""
    pts = sorted({c for c in cuts if c < T} | {0.0, T})
    total = 0.0
    for i in range(len(pts) - 1):
        for j in range(i + 1):
            a, b = pts[i], pts[i + 1]
            c, d = pts[j], pts[j + 1]
            hi = (lambda t: t) if i == j else (lambda t, d=d: d)
            total += dblquad(lambda s, t: mo.covariance(law, s, t), a, b, c, hi, epsabs=0, epsrel=1e-12)[0]
    return 2 * total


def test_rho_zero_heston_structure():
    p, mk = safe_set("heston")
    p = p.replace(rho=0.0)
    for T in (1 / 12, 1.0):
        res = heston_put2(mk, p, _opt(mk, T))
        assert res.term_xi2 == 0.0 and res.term_mixed == 0.0
        law = VarianceLaw.from_params(p)
        # 2 ∫∫_{s<t} Cov(V_s, V_t) by direct double quadrature of the covariance
        assert res.term_var_int == pytest.approx(_cov2(law, T, p.grid.times), rel=1e-9)
        ref = res.zeroth_order + 0.5 * res.d_yy * res.term_var_int
        assert res.price == pytest.approx(ref, rel=1e-14)


def test_garch_structure_vs_quadrature():
    p, mk = safe_set("garch")
    law = VarianceLaw.from_params(p)
    T = 0.5
    res = garch_put2(mk, p, _opt(mk, T))
    assert res.term_var_int == pytest.approx(_cov2(law, T, p.grid.times), rel=1e-9)
    assert res.price == pytest.approx(res.zeroth_order + 0.5 * res.d_yy * res.term_var_int, rel=1e-14)


@pytest.mark.parametrize("model", list(Model))
def test_operator_path_vs_reference(rng, model):
    for _ in range(8):
        p = random_params(rng, model)
        T = p.grid.horizon * rng.uniform(0.3, 1.0)
        a, b = expansion_terms(p, T), expansion_terms_reference(p, T)
        for f in ("yhat", "term_xi2", "term_var_int", "term_mixed"):
            x, y = getattr(a, f), getattr(b, f)
            assert abs(x - y) <= 1e-9 * max(abs(y), 1e-6 * a.yhat, 1e-300), f


def test_call_parity_and_shared_terms(rng):
    for _ in range(50):
        p = random_params(rng, Model.HESTON)
        mk = flat_market(p.grid, rd=rng.uniform(-0.01, 0.06), rf=rng.uniform(-0.01, 0.06))
        T = p.grid.horizon * rng.uniform(0.1, 1.0)
        put = price2(mk, p, _opt(mk, T, rng.uniform(0.8, 1.2)))
        opt = OptionSpec(put_strike := _opt(mk, T).strike, T)
        put = price2(mk, p, opt)
        call = price_call2(mk, p, OptionSpec(put_strike, T, OptionKind.CALL))
        rd, rf = mk.rate_integrals(T)
        assert call.price - put.price == pytest.approx(mk.spot * math.exp(-rf) - put_strike * math.exp(-rd), abs=1e-12)
        assert (call.term_xi2, call.term_var_int, call.term_mixed) == (put.term_xi2, put.term_var_int, put.term_mixed)


def test_garch_rejects_rho():
    p, mk = safe_set("garch")
    bad = p.replace(rho=-0.3)
    with pytest.raises(ModelPreconditionError):
        garch_put2(mk, bad, _opt(mk, 0.5))
    with pytest.raises(ModelPreconditionError):
        price2(mk, bad, _opt(mk, 0.5))
    with pytest.raises(ModelPreconditionError):
        garch_error_bound_rho0(mk, bad, _opt(mk, 0.5))
    with pytest.raises(ValueError):
        heston_put2(mk, p, _opt(mk, 0.5))


def test_degenerate_rho_one():
    p, mk = safe_set("heston")
    with pytest.raises(ModelPreconditionError):
        price2(mk, p.replace(rho=-1.0), _opt(mk, 0.5))


@pytest.mark.parametrize("model", list(Model))
@pytest.mark.parametrize("kind", list(OptionKind))
def test_greeks_vs_finite_differences(model, kind):
    p, mk = safe_set(model)
    for T, m in ((1 / 12, 1.0), (0.5, 0.95), (1.0, 1.05)):
        opt = _opt(mk, T, m, kind)
        delta, gamma = greeks2(mk, p, opt)
        P = lambda s: price2(mk.with_spot(s), p, opt).price
        h = 1e-3
        fd_d = (P(mk.spot + h) - P(mk.spot - h)) / (2 * h)
        hg = 0.04
        fd_g = (P(mk.spot + hg) - 2 * P(mk.spot) + P(mk.spot - hg)) / hg**2
        assert delta == pytest.approx(fd_d, rel=1e-6)
        assert gamma == pytest.approx(fd_g, rel=1e-4)
        # Richardson-extrapolated second difference for the tighter gamma check
        hg2 = hg / 2
        fd_g2 = (P(mk.spot + hg2) - 2 * P(mk.spot) + P(mk.spot - hg2)) / hg2**2
        assert gamma == pytest.approx((4 * fd_g2 - fd_g) / 3, rel=1e-5)


def test_greeks_degenerate_is_bs_delta():
    p, mk = safe_set("heston")
    p = p.replace(lam=0.0, rho=0.0)
    opt = _opt(mk, 0.5, 0.98)
    res = price2(mk, p, opt)
    rd, rf = mk.rate_integrals(0.5)
    delta, gamma = greeks2(mk, p, opt)
    assert delta == pytest.approx(bs.put_partial(1, 0, mk.spot, res.yhat, opt.strike, rd, rf), rel=1e-14)
    assert gamma == pytest.approx(bs.put_partial(2, 0, mk.spot, res.yhat, opt.strike, rd, rf), rel=1e-14)


def test_error_bound_properties():
    p, mk = safe_set("garch")
    opt = _opt(mk, 0.5)
    assert garch_error_bound_rho0(mk, p.replace(lam=0.0), opt) == 0.0
    bounds = [garch_error_bound_rho0(mk, p.replace(lam=lam), opt) for lam in (0.1, 0.2, 0.4, 0.8)]
    assert all(b >= 0 for b in bounds)
    assert all(b2 > b1 for b1, b2 in zip(bounds, bounds[1:]))


def test_garch_correction_decreases_with_kappa():
    grid = MaturityGrid((0.0, 0.5))
    mk = flat_market(grid)
    corr = []
    for kappa in (1.0, 5.0, 20.0, 80.0):
        p = ModelParams.from_values("garch", grid, kappa, 0.0036, 0.414, 0.0, 0.0036)
        res = garch_put2(mk, p, _opt(mk, 0.5))
        corr.append(abs(res.price - res.zeroth_order))
    assert all(b < a for a, b in zip(corr, corr[1:]))


def test_diagnostics_flag_extreme_parameters():
    grid = MaturityGrid((0.0, 1.0))
    mk = flat_market(grid)
    p = ModelParams.from_values("heston", grid, 0.5, 0.01, 2.0, 0.0, 0.01)
    res = price2(mk, p, OptionSpec(100.0, 1.0))
    assert res.price < 0
    assert any("intrinsic" in d for d in res.diagnostics)


def test_beyond_horizon_rejected():
    p, mk = safe_set("heston")
    with pytest.raises(ValueError):
        price2(mk, p, OptionSpec(100.0, 2.0))
