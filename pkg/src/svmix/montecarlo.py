"""Monte Carlo oracles: variance paths, mixing (conditional) and direct pricing.

The mixing estimator averages Put_BS(S0 ξ_T, ∫(1-ρ²)V dt) over variance
paths, which integrates out the spot noise independent of the variance
driver.  The direct estimator simulates the log-spot jointly with the
variance and averages the discounted payoff.

Paths are generated in fixed-size blocks, each with its own Philox stream
derived from ``(seed, block)``, so path ``i`` does not depend on how the
work is split and results are bitwise reproducible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import blackscholes as bs
from .core import MarketState, ModelParams, OptionKind, OptionSpec, PiecewiseCurve
from .errors import ConfigError, DomainError, NoSolutionError
from .moments import Family, VarianceLaw

DAYS_PER_YEAR = 365
SHORT_MATURITY = 0.25


class Scheme(str, enum.Enum):
    FULL_TRUNCATION_EULER = "euler"
    IGA_EXPLICIT = "iga-explicit"


@dataclass(frozen=True)
class MCConfig:
    """Simulation settings.

    ``steps_per_day=None`` uses 24 steps per day up to T = 3/12 and 8 per
    day beyond; an explicit value applies to the whole path.  ``scheme=None``
    picks full-truncation Euler for CIR and the explicit scheme for IGa.
    ``control_variate`` regresses mixing samples on ξ_T - 1, whose mean is
    exactly zero on the simulation grid.
    """

    paths: int = 200_000
    steps_per_day: int | None = None
    seed: int = 0
    scheme: Scheme | None = None
    antithetic: bool = False
    control_variate: bool = True
    block_size: int = 1 << 13

    def __post_init__(self):
        if self.paths < 2:
            raise ConfigError("paths must be at least 2")
        if self.steps_per_day is not None and self.steps_per_day < 1:
            raise ConfigError("steps_per_day must be at least 1")
        if self.block_size < 2 or self.block_size % 2:
            raise ConfigError("block_size must be an even number of at least 2")
        if self.antithetic and self.paths % 2:
            raise ConfigError("antithetic sampling needs an even number of paths")
        if self.scheme is not None:
            object.__setattr__(self, "scheme", Scheme(self.scheme))

    def scheme_for(self, family: Family) -> Scheme:
        if self.scheme is None:
            return Scheme.IGA_EXPLICIT if family is Family.IGA else Scheme.FULL_TRUNCATION_EULER
        if self.scheme is Scheme.IGA_EXPLICIT and family is not Family.IGA:
            raise ConfigError("the explicit scheme applies to the IGa (GARCH) variance only")
        return self.scheme


@dataclass(frozen=True)
class MCEstimate:
    value: float
    stderr: float
    paths: int

    def ci(self, z: float = 3.0) -> tuple[float, float]:
        return self.value - z * self.stderr, self.value + z * self.stderr


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Per-path quantities at each observation time (rows follow ``times``).

    ``sto`` is the Itô integral ∫ρ√V dB and ``int_rho2`` the matching
    left-point ∫ρ²V dt, so ξ = exp(sto - int_rho2/2) has unit mean on the
    grid.  ``int_v`` and ``int_w`` are trapezoidal ∫V dt and ∫(1-ρ²)V dt.
    """

    times: np.ndarray
    v: np.ndarray
    int_v: np.ndarray
    int_w: np.ndarray
    sto: np.ndarray
    int_rho2: np.ndarray
    log_spot: np.ndarray | None
    antithetic: bool
    truncations: int = 0
    steps: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.v.shape[1]

    def row(self, t: float) -> int:
        hit = np.nonzero(np.abs(self.times - t) <= 1e-12 * max(1.0, t))[0]
        if not hit.size:
            raise ValueError(f"{t} is not an observation time")
        return int(hit[0])

    def int_v_with(self, t: float, kappa_theta: float) -> np.ndarray:
        """∫V dt on the same IGa paths with the drift level κθ replaced.

        The explicit IGa solution V = Y(v0 + κθ ∫1/Y) is linear in κθ and Y
        does not involve θ, so one ensemble prices every θ exactly.
        """
        if "v0" not in self.extra:
            raise ValueError("θ reweighting needs explicit IGa paths with constant κθ")
        r = self.row(t)
        return self.extra["v0"] * self.extra["int_y"][r] + kappa_theta * self.extra["int_ya"][r]

    def xi(self, t: float) -> np.ndarray:
        r = self.row(t)
        return np.exp(self.sto[r] - 0.5 * self.int_rho2[r])


# ----------------------------------------------------------------------------
# time grid
# ----------------------------------------------------------------------------

def time_grid(horizon: float, cfg: MCConfig, breakpoints: Sequence[float] = ()) -> np.ndarray:
    """Simulation times: the step rule, plus every breakpoint inside (0, horizon]."""
    if horizon <= 0:
        raise DomainError("simulation horizon must be positive")

    def uniform(a, b, spd):
        n = max(1, math.ceil((b - a) * DAYS_PER_YEAR * spd - 1e-9))
        return np.linspace(a, b, n + 1)

    if cfg.steps_per_day is not None:
        base = uniform(0.0, horizon, cfg.steps_per_day)
    elif horizon <= SHORT_MATURITY:
        base = uniform(0.0, horizon, 24)
    else:
        base = np.concatenate([uniform(0.0, SHORT_MATURITY, 24), uniform(SHORT_MATURITY, horizon, 8)[1:]])
    extra = [t for t in breakpoints if 0 < t < horizon]
    pts = np.union1d(base, extra)
    # drop points closer than 1e-12 created by the union
    keep = np.concatenate([[True], np.diff(pts) > 1e-12])
    pts = pts[keep]
    pts[-1] = horizon
    return pts


def _step_values(curve: PiecewiseCurve, mids: np.ndarray) -> np.ndarray:
    return np.asarray(curve(mids), float)


# ----------------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------------

def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


def _normals(rng, n, antithetic):
    if antithetic:
        z = rng.standard_normal(n // 2)
        return np.concatenate([z, -z])
    return rng.standard_normal(n)


def _simulate(law: VarianceLaw, rho: PiecewiseCurve, cfg: MCConfig, observe: Sequence[float],
              with_spot: bool) -> PathEnsemble:
    obs = np.array(sorted(set(float(t) for t in observe)))
    if obs.size == 0 or obs[0] <= 0:
        raise DomainError("observation times must be positive")
    horizon = float(obs[-1])
    if horizon > law.grid.horizon * (1 + 1e-12):
        raise DomainError("observation beyond the parameter horizon")
    if rho.grid != law.grid:
        raise ValueError("rho must live on the law's grid")
    scheme = cfg.scheme_for(law.family)
    ts = time_grid(horizon, cfg, list(law.grid.times) + list(obs))
    dts = np.diff(ts)
    mids = 0.5 * (ts[:-1] + ts[1:])
    kap = _step_values(law.kappa, mids)
    kth = _step_values(law.kappa_theta, mids)
    lam = _step_values(law.lam, mids)
    rh = _step_values(rho, mids)
    sqdt = np.sqrt(dts)
    obs_step = {int(np.argmin(np.abs(ts - t))): r for r, t in enumerate(obs)}

    n_obs, P = obs.size, cfg.paths
    names = ["v", "int_v", "int_w", "sto", "int_rho2"]
    if with_spot:
        names.append("log_spot")
    if scheme is Scheme.IGA_EXPLICIT:
        names += ["int_y", "int_ya"]
    out = {name: np.empty((n_obs, P)) for name in names}
    steps = _StepCoefficients(dts, kap, kth, lam, rh)
    truncations = 0
    for b, start in enumerate(range(0, P, cfg.block_size)):
        nb = min(cfg.block_size, P - start)
        rec = _run_block(law, scheme, steps, obs_step, n_obs, nb, _block_rng(cfg.seed, b),
                         cfg.antithetic, with_spot)
        truncations += rec.pop("truncations")
        for name in names:
            out[name][:, start:start + nb] = rec[name]
    extra = {k: out[k] for k in ("int_y", "int_ya") if k in out}
    if extra and np.ptp(law.kappa_theta.values) == 0:
        extra["v0"] = law.v0
    return PathEnsemble(obs, out["v"], out["int_v"], out["int_w"], out["sto"], out["int_rho2"],
                        out.get("log_spot"), cfg.antithetic, truncations, int(dts.size), extra)


@dataclass(frozen=True, eq=False)
class _StepCoefficients:
    """Per-step parameter values and trapezoid weights.

    A trapezoid sum Σ ½dt_k (f_k + f_{k+1}) is accumulated as Σ h_k f_k
    with h_k = ½(dt_{k-1} + dt_k); the pending ½dt_k f_{k+1} is added
    when a running value is recorded.
    """

    dt: np.ndarray
    kap: np.ndarray
    kth: np.ndarray
    lam: np.ndarray
    rho: np.ndarray

    @property
    def sq(self):
        return np.sqrt(self.dt)

    def half_weights(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tail = 0.5 * w * self.dt
        head = tail + np.concatenate([[0.0], tail[:-1]])
        return head, tail


def _run_block(law, scheme, c: _StepCoefficients, obs_step, n_obs, nb, rng, antithetic, with_spot):
    rec = {name: np.empty((n_obs, nb)) for name in ("v", "int_v", "int_w", "sto", "int_rho2")}
    if with_spot:
        rec["log_spot"] = np.empty((n_obs, nb))
    explicit = scheme is Scheme.IGA_EXPLICIT
    cir = law.family is Family.CIR
    dt, sq, kap, kth, lam, rh = c.dt, c.sq, c.kap, c.kth, c.lam, c.rho
    hv, tv = c.half_weights(np.ones_like(dt))
    hw, tw = c.half_weights(1.0 - rh * rh)
    any_rho = bool(np.any(rh != 0.0))

    v = np.full(nb, law.v0)
    int_v = np.zeros(nb)
    int_w = np.zeros(nb)
    sto = np.zeros(nb)
    r2 = np.zeros(nb)
    logs = np.zeros(nb)
    truncations = 0
    if explicit:
        rec["int_y"] = np.empty((n_obs, nb))
        rec["int_ya"] = np.empty((n_obs, nb))
        log_y = np.zeros(nb)
        y = np.ones(nb)
        inv_y = np.ones(nb)
        u = np.full(nb, law.v0)
        a_int = np.zeros(nb)
        int_y = np.zeros(nb)
        int_ya = np.zeros(nb)

    for k in range(dt.size):
        z = _normals(rng, nb, antithetic)
        vp = v if explicit else np.maximum(v, 0.0)
        int_v += hv[k] * vp
        if any_rho:
            int_w += hw[k] * vp
        need_root = cir or with_spot or rh[k] != 0.0
        root = np.sqrt(vp) if need_root else None
        if rh[k] != 0.0:
            sto += (rh[k] * sq[k]) * (root * z)
            r2 += (rh[k] * rh[k] * dt[k]) * vp
        if with_spot:
            z2 = _normals(rng, nb, antithetic)
            logs += (-0.5 * dt[k]) * vp + (sq[k] * root) * (rh[k] * z + math.sqrt(1.0 - rh[k] * rh[k]) * z2)
        if explicit:
            int_y += hv[k] * y
            int_ya += hv[k] * (y * a_int)
            log_y += (-kap[k] - 0.5 * lam[k] * lam[k]) * dt[k] + (lam[k] * sq[k]) * z
            y = np.exp(log_y)
            inv_new = 1.0 / y
            step = (0.5 * dt[k]) * (inv_y + inv_new)
            inv_y = inv_new
            a_int += step
            u += kth[k] * step
            v = u * y
        else:
            diff = root if cir else vp
            v = v + (kth[k] * dt[k] - (kap[k] * dt[k]) * vp) + (lam[k] * sq[k]) * (diff * z)
            truncations += int(np.count_nonzero(v < 0))
        r = obs_step.get(k + 1)
        if r is not None:
            vn = v if explicit else np.maximum(v, 0.0)
            rec["v"][r] = vn
            rec["int_v"][r] = int_v + tv[k] * vn
            rec["int_w"][r] = int_w + tw[k] * vn if any_rho else rec["int_v"][r]
            rec["sto"][r] = sto
            rec["int_rho2"][r] = r2
            if with_spot:
                rec["log_spot"][r] = logs
            if explicit:
                rec["int_y"][r] = int_y + tv[k] * y
                rec["int_ya"][r] = int_ya + tv[k] * (y * a_int)
    rec["truncations"] = truncations
    return rec


def simulate_variance(law: VarianceLaw, cfg: MCConfig, T: float, rho: PiecewiseCurve | None = None,
                      observe: Sequence[float] | None = None) -> PathEnsemble:
    """Variance paths with the time-integral and ξ accumulators.

    ``observe`` lists the times at which path quantities are recorded
    (default: T only).  ``rho`` defaults to zero.
    """
    if rho is None:
        rho = PiecewiseCurve.constant(law.grid, 0.0, "rho")
    times = [T] if observe is None else list(observe)
    if max(times) > T * (1 + 1e-12):
        raise DomainError("observation times must not exceed T")
    return _simulate(law, rho, cfg, times, with_spot=False)


# ----------------------------------------------------------------------------
# estimators
# ----------------------------------------------------------------------------

def estimate(samples: np.ndarray) -> MCEstimate:
    """Sample mean and standard error of independent samples."""
    x = np.asarray(samples, float)
    value = math.fsum(x) / x.size
    var = math.fsum((x - value) ** 2) / (x.size - 1) if x.size > 1 else 0.0
    return MCEstimate(value, math.sqrt(var / x.size), x.size)


def _pair(ens: PathEnsemble, x: np.ndarray, block_size: int) -> np.ndarray:
    """Antithetic pair means; pairs sit at mirrored positions inside each block."""
    if not ens.antithetic:
        return x
    parts = []
    for start in range(0, x.size, block_size):
        blk = x[start:start + block_size]
        h = blk.size // 2
        parts.append(0.5 * (blk[:h] + blk[h:]))
    return np.concatenate(parts)


def _estimate(ens: PathEnsemble, x: np.ndarray, cfg: MCConfig, control: np.ndarray | None = None) -> MCEstimate:
    y = _pair(ens, x, cfg.block_size)
    if control is not None:
        c = _pair(ens, control, cfg.block_size)
        cc = c - c.mean()
        var_c = float(cc @ cc)
        if var_c > 0:
            y = y - (float(cc @ (y - y.mean())) / var_c) * c
    est = estimate(y)
    return MCEstimate(est.value, est.stderr, x.size)


def _law_and_rho(params: ModelParams) -> tuple[VarianceLaw, PiecewiseCurve]:
    return VarianceLaw.from_params(params), params.rho


def simulate_params(params: ModelParams, cfg: MCConfig, observe: Sequence[float],
                    with_spot: bool = False) -> PathEnsemble:
    """Ensemble for a parameter set under the pricing measure."""
    law, rho = _law_and_rho(params)
    return _simulate(law, rho, cfg, observe, with_spot)


def mixing_samples(market: MarketState, ens: PathEnsemble, opt: OptionSpec,
                   int_w: np.ndarray | None = None) -> np.ndarray:
    """Per-path Put_BS(S0 ξ_T, ∫(1-ρ²)V dt) (or the call); ``int_w`` overrides the ensemble's."""
    r = ens.row(opt.maturity)
    rd, rf = market.rate_integrals(opt.maturity)
    x = market.spot * ens.xi(opt.maturity)
    y = ens.int_w[r] if int_w is None else int_w
    return bs.option_price(opt.kind, x, y, opt.strike, rd, rf)


def mixing_estimate(market: MarketState, ens: PathEnsemble, opt: OptionSpec, cfg: MCConfig,
                    int_w: np.ndarray | None = None) -> MCEstimate:
    control = ens.xi(opt.maturity) - 1.0 if cfg.control_variate else None
    return _estimate(ens, mixing_samples(market, ens, opt, int_w), cfg, control)


def direct_samples(market: MarketState, ens: PathEnsemble, opt: OptionSpec) -> np.ndarray:
    if ens.log_spot is None:
        raise ValueError("ensemble has no spot paths")
    r = ens.row(opt.maturity)
    rd, rf = market.rate_integrals(opt.maturity)
    s = market.spot * np.exp(rd - rf + ens.log_spot[r])
    pay = np.maximum(opt.strike - s, 0.0) if opt.kind is OptionKind.PUT else np.maximum(s - opt.strike, 0.0)
    return math.exp(-rd) * pay


def mixing_mc_prices(market: MarketState, params: ModelParams, opts: Sequence[OptionSpec],
                     cfg: MCConfig) -> list[MCEstimate]:
    """Mixing estimates for many options on one shared set of variance paths."""
    law, rho = _law_and_rho(params)
    ens = _simulate(law, rho, cfg, [o.maturity for o in opts], with_spot=False)
    return [mixing_estimate(market, ens, o, cfg) for o in opts]


def mixing_mc_put(market: MarketState, params: ModelParams, opt: OptionSpec, cfg: MCConfig) -> MCEstimate:
    opt = OptionSpec(opt.strike, opt.maturity, OptionKind.PUT)
    return mixing_mc_prices(market, params, [opt], cfg)[0]


def direct_mc_prices(market: MarketState, params: ModelParams, opts: Sequence[OptionSpec],
                     cfg: MCConfig) -> list[MCEstimate]:
    """Euler estimates of the discounted payoff on one shared set of spot paths."""
    law, rho = _law_and_rho(params)
    ens = _simulate(law, rho, cfg, [o.maturity for o in opts], with_spot=True)
    return [_estimate(ens, direct_samples(market, ens, o), cfg) for o in opts]


def direct_mc_put(market: MarketState, params: ModelParams, opt: OptionSpec, cfg: MCConfig) -> MCEstimate:
    opt = OptionSpec(opt.strike, opt.maturity, OptionKind.PUT)
    return direct_mc_prices(market, params, [opt], cfg)[0]


def moment_estimate(law: VarianceLaw, cfg: MCConfig, t: float, n: int) -> MCEstimate:
    """Sample mean of V_t^n."""
    if not 1 <= n <= 6:
        raise DomainError("moment order must be between 1 and 6")
    ens = simulate_variance(law, cfg, t)
    return _estimate(ens, ens.v[0] ** n, cfg)


def implied_vol_estimate(market: MarketState, est: MCEstimate, opt: OptionSpec) -> tuple[float, float]:
    """Implied vol of an MC price and its standard error (delta method via vega)."""
    p = bs.BsPoint.from_market(market, opt.strike, opt.maturity, 0.0)
    sig = bs.implied_vol(est.value, p, opt.kind)
    rd, rf = p.rd_int, p.rf_int
    vega = bs.put_partial(0, 1, p.x, sig * sig * opt.maturity, opt.strike, rd, rf) * 2 * sig * opt.maturity
    if vega <= 0:
        raise NoSolutionError("zero vega at the implied volatility")
    return sig, est.stderr / vega
