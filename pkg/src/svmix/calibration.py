"""Bootstrap calibration of piecewise-constant parameters, one bucket at a time.

Bucket i holds the quotes maturing at grid time T_{i+1}.  Its free
parameters live on interval i only, so once buckets 0..i-1 are fitted and
their operator values committed, each candidate evaluation advances the
cached ω values over the newest interval alone.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from . import blackscholes as bs
from .core import MarketState, Model, ModelParams, OptionSpec, params_to_dict
from .errors import ConfigError, DomainError, ModelPreconditionError, NumericalError, StateError
from .operators import OperatorState
from .pricing import expansion_terms, price_from_terms

# objective value returned when a candidate cannot be priced
PENALTY = 1e12

# names accepted for the free parameters, mapped to ModelParams fields
_FIELDS = {"kappa": "kappa", "theta": "theta", "lambda": "lam", "lam": "lam", "rho": "rho"}

DEFAULT_BOUNDS = {
    "kappa": (1e-3, 50.0),
    "theta": (1e-5, 1.0),
    "lambda": (1e-4, 5.0),
    "rho": (-0.99, 0.99),
}


@dataclass(frozen=True)
class Quote:
    """One target: a strike (or absolute put delta) and its implied vol."""

    strike_or_delta: float
    iv: float
    weight: float = 1.0
    is_delta: bool = False

    def __post_init__(self):
        if not (self.iv > 0 and math.isfinite(self.iv)):
            raise ConfigError(f"target implied vol must be positive, got {self.iv}")
        if not self.weight > 0:
            raise ConfigError(f"quote weights must be positive, got {self.weight}")
        if self.is_delta and not 0 < self.strike_or_delta < 1:
            raise ConfigError(f"put delta must lie in (0, 1), got {self.strike_or_delta}")
        if not self.is_delta and not self.strike_or_delta > 0:
            raise ConfigError(f"strike must be positive, got {self.strike_or_delta}")

    def strike(self, market: MarketState, T: float) -> float:
        """Delta quotes convert to strikes with their own target vol."""
        if self.is_delta:
            return bs.strike_from_put_delta(self.strike_or_delta, self.iv, market, T)
        return float(self.strike_or_delta)


@dataclass(frozen=True)
class QuoteBucket:
    maturity: float
    quotes: tuple[Quote, ...]

    def __post_init__(self):
        if not self.quotes:
            raise ConfigError(f"bucket at T={self.maturity} has no quotes")


@dataclass(frozen=True)
class QuoteSet:
    buckets: tuple[QuoteBucket, ...]

    def __post_init__(self):
        object.__setattr__(self, "buckets", tuple(self.buckets))
        mats = [b.maturity for b in self.buckets]
        if not mats:
            raise ConfigError("quote set is empty")
        if any(b <= a for a, b in zip(mats, mats[1:])) or mats[0] <= 0:
            raise ConfigError("bucket maturities must be positive and strictly increasing")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[float, Quote]]) -> "QuoteSet":
        """Group (maturity, quote) pairs into buckets, keeping row order."""
        groups: dict[float, list[Quote]] = {}
        for T, q in rows:
            groups.setdefault(float(T), []).append(q)
        return cls(tuple(QuoteBucket(T, tuple(qs)) for T, qs in sorted(groups.items())))

    @property
    def maturities(self) -> tuple[float, ...]:
        return tuple(b.maturity for b in self.buckets)

    def check_grid(self, params: ModelParams):
        times = params.grid.times[1:]
        if len(times) != len(self.buckets):
            raise ConfigError(
                f"parameter grid has {len(times)} intervals but the quotes have {len(self.buckets)} buckets"
            )
        for i, T in enumerate(self.maturities):
            if params.grid.index_of_time(T) != i + 1:
                raise ConfigError(f"bucket maturity {T} is not grid time T_{i + 1} = {times[i]}")


def _parse_flag(text: str) -> bool:
    s = text.strip().lower()
    if s in ("1", "true", "yes", "y", "delta"):
        return True
    if s in ("0", "false", "no", "n", "strike", ""):
        return False
    raise ConfigError(f"delta_flag must be 0/1 or true/false, got {text!r}")


def quotes_from_csv(text: str) -> QuoteSet:
    """Parse ``maturity,strike_or_delta,delta_flag,iv,weight`` rows (header required)."""
    reader = csv.DictReader(io.StringIO(text))
    need = {"maturity", "strike_or_delta", "delta_flag", "iv"}
    if reader.fieldnames is None or not need <= {f.strip() for f in reader.fieldnames}:
        raise ConfigError(f"quote CSV needs columns {sorted(need)} (weight optional)")
    rows = []
    for n, raw in enumerate(reader, start=2):
        r = {k.strip(): (v or "").strip() for k, v in raw.items() if k is not None}
        if not any(r.values()):
            continue
        try:
            T = float(r["maturity"])
            q = Quote(float(r["strike_or_delta"]), float(r["iv"]),
                      float(r["weight"]) if r.get("weight") else 1.0, _parse_flag(r["delta_flag"]))
        except ValueError as exc:
            raise ConfigError(f"quote CSV line {n}: {exc}") from None
        rows.append((T, q))
    return QuoteSet.from_rows(rows)


def load_quotes(path) -> QuoteSet:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return quotes_from_csv(text)


def quotes_to_csv(quotes: QuoteSet) -> str:
    buf = io.StringIO()
    buf.write("maturity,strike_or_delta,delta_flag,iv,weight\n")
    for b in quotes.buckets:
        for q in b.quotes:
            buf.write(f"{b.maturity!r},{q.strike_or_delta!r},{int(q.is_delta)},{q.iv!r},{q.weight!r}\n")
    return buf.getvalue()


def synthetic_quotes(market: MarketState, params: ModelParams,
                     strikes: Sequence[float] | None = None,
                     moneyness: Sequence[float] = (0.97, 1.0, 1.03)) -> QuoteSet:
    """Engine-generated implied vols at each grid maturity.

    Strikes default to ``moneyness`` times the forward of each bucket.
    """
    rows = []
    for T in params.grid.times[1:]:
        ks = strikes if strikes is not None else [m * market.forward(T) for m in moneyness]
        terms = expansion_terms(params, T)
        for K in ks:
            res = price_from_terms(market, OptionSpec(float(K), T), terms)
            iv = bs.implied_vol(res.price, bs.BsPoint.from_market(market, float(K), T, 0.0))
            rows.append((T, Quote(float(K), iv)))
    return QuoteSet.from_rows(rows)


@dataclass(frozen=True)
class CalibConfig:
    """Optimizer settings; ``free`` names the per-bucket parameters fitted.

    κ stays at its initial-guess value by default.  For GARCH ρ is pinned
    at zero and dropped from ``free``.
    """

    initial: ModelParams
    free: tuple[str, ...] = ("theta", "lambda", "rho")
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    max_iterations: int = 400
    vol_tolerance_bp: float = 1e-6
    xatol: float = 1e-10

    def __post_init__(self):
        free = []
        for name in self.free:
            key = name.strip().lower()
            if key == "lam":
                key = "lambda"
            if key not in DEFAULT_BOUNDS:
                raise ConfigError(f"unknown free parameter {name!r}; choose from {', '.join(DEFAULT_BOUNDS)}")
            if key == "rho" and self.initial.model is Model.GARCH:
                continue
            if key not in free:
                free.append(key)
        if not free:
            raise ConfigError("no free parameters to calibrate")
        object.__setattr__(self, "free", tuple(free))
        merged = dict(DEFAULT_BOUNDS)
        for name, b in self.bounds.items():
            key = "lambda" if name == "lam" else name
            if key not in DEFAULT_BOUNDS:
                raise ConfigError(f"bounds given for unknown parameter {name!r}")
            merged[key] = (float(b[0]), float(b[1]))
        for key, (lo, hi) in merged.items():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ConfigError(f"infeasible bounds for {key}: ({lo}, {hi})")
            if key in ("kappa", "theta") and lo <= 0:
                raise ConfigError(f"{key} bounds must be strictly positive")
            if key == "lambda" and lo < 0:
                raise ConfigError("lambda bounds must be nonnegative")
            if key == "rho" and (lo < -1 or hi > 1):
                raise ConfigError("rho bounds must lie in [-1, 1]")
        object.__setattr__(self, "bounds", merged)
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be nonnegative")
        if self.initial.model is Model.GARCH:
            self.initial.require_zero_rho()

    def box(self) -> np.ndarray:
        return np.array([self.bounds[k] for k in self.free], dtype=float)


@dataclass(frozen=True)
class BucketFit:
    maturity: float
    values: dict[str, float]
    residual_bp: tuple[float, ...]
    objective: float
    iterations: int
    evaluations: int
    advances: tuple[int, ...]
    converged: bool
    failed: bool
    message: str = ""
    partial: dict[str, float] | None = None

    @property
    def rms_bp(self) -> float:
        r = np.asarray(self.residual_bp)
        return float(np.sqrt(np.mean(r * r))) if r.size else 0.0


@dataclass(frozen=True)
class CalibReport:
    fitted: ModelParams
    buckets: tuple[BucketFit, ...]
    checkpoint: str

    @property
    def per_bucket_residual_bp(self) -> list[float]:
        return [b.rms_bp for b in self.buckets]

    @property
    def advance_counts(self) -> np.ndarray:
        """Row i: ω advances per interval performed while fitting bucket i."""
        return np.array([b.advances for b in self.buckets], dtype=int)

    @property
    def iterations(self) -> list[int]:
        return [b.iterations for b in self.buckets]

    @property
    def failed(self) -> bool:
        return any(b.failed for b in self.buckets)

    def to_dict(self, market: MarketState | None = None) -> dict:
        return {
            "fitted": params_to_dict(self.fitted, market),
            "buckets": [
                {
                    "maturity": b.maturity,
                    "values": b.values,
                    "residual_bp": list(b.residual_bp),
                    "rms_bp": b.rms_bp,
                    "objective_bp2": b.objective,
                    "iterations": b.iterations,
                    "evaluations": b.evaluations,
                    "advances": list(b.advances),
                    "converged": b.converged,
                    "failed": b.failed,
                    "message": b.message,
                    **({"partial_fit": b.partial} if b.partial is not None else {}),
                }
                for b in self.buckets
            ],
        }


def _with_values(params: ModelParams, i: int, free: Sequence[str], x: Sequence[float]) -> ModelParams:
    return params.with_interval(i, **{_FIELDS[k]: float(v) for k, v in zip(free, x)})


def _interval_values(params: ModelParams, i: int, free: Sequence[str]) -> np.ndarray:
    return np.array([getattr(params, _FIELDS[k]).values[i] for k in free], dtype=float)


def bucket_residuals(market: MarketState, params: ModelParams, bucket: QuoteBucket,
                     state: OperatorState | None = None) -> np.ndarray:
    """Model minus target implied vol per quote, in bp."""
    T = bucket.maturity
    terms = expansion_terms(params, T, state)
    out = np.empty(len(bucket.quotes))
    for n, q in enumerate(bucket.quotes):
        K = q.strike(market, T)
        res = price_from_terms(market, OptionSpec(K, T), terms)
        iv = bs.implied_vol(res.price, bs.BsPoint.from_market(market, K, T, 0.0))
        out[n] = (iv - q.iv) * 1e4
    return out


def objective_eval(market: MarketState, params: ModelParams, bucket: QuoteBucket,
                   state: OperatorState | None = None,
                   on_failure: Callable[[str], None] | None = None) -> float:
    """Σ weight·(model IV - target IV)² in bp² for one bucket.

    Work on the frontier interval is discarded afterwards, so the
    committed part of ``state`` is left untouched.  A candidate that
    cannot be priced scores :data:`PENALTY`.
    """
    try:
        r = bucket_residuals(market, params, bucket, state)
        w = np.array([q.weight for q in bucket.quotes])
        val = float(np.sum(w * r * r))
        if not math.isfinite(val):
            raise NumericalError("non-finite objective")
    except (DomainError, ModelPreconditionError, NumericalError, ValueError) as exc:
        if on_failure:
            on_failure(str(exc))
        val = PENALTY
    finally:
        if state is not None:
            state.rollback()
    return val


def _fit_bucket(market, params, i, bucket, cfg, state) -> tuple[np.ndarray, int, int, bool, str]:
    """Nelder-Mead over the unit box of the free parameters of interval i."""
    box = cfg.box()
    lo, width = box[:, 0], box[:, 1] - box[:, 0]
    failures: list[str] = []
    evals = 0

    def f(u):
        nonlocal evals
        evals += 1
        x = lo + width * np.clip(u, 0.0, 1.0)
        return objective_eval(market, _with_values(params, i, cfg.free, x), bucket, state, failures.append)

    x0 = np.clip(_interval_values(params, i, cfg.free), box[:, 0], box[:, 1])
    u0 = (x0 - lo) / width
    tol = cfg.vol_tolerance_bp**2 * sum(q.weight for q in bucket.quotes)
    f0 = f(u0)
    if f0 <= tol:
        return x0, 0, evals, True, "initial guess within tolerance"
    if cfg.max_iterations == 0:
        return x0, 0, evals, False, "no iterations allowed"
    n = len(u0)
    simplex = np.vstack([u0] + [u0 + np.where(np.arange(n) == k, 0.05 if u0[k] < 0.95 else -0.05, 0.0)
                                for k in range(n)])
    res = minimize(f, u0, method="Nelder-Mead",
                   bounds=[(0.0, 1.0)] * n,
                   options=dict(maxiter=cfg.max_iterations, xatol=cfg.xatol, fatol=min(tol, 1e-14),
                                initial_simplex=simplex, adaptive=n > 2))
    x = lo + width * np.clip(res.x, 0.0, 1.0)
    ok = bool(res.success) and bool(res.fun < PENALTY)
    if res.fun <= tol:
        ok = True
    msg = str(res.message)
    if failures:
        msg += f"; {len(failures)} candidate(s) could not be priced: {failures[-1]}"
    return x, int(res.nit), evals, ok, msg


def bootstrap_calibrate(market: MarketState, quotes: QuoteSet, cfg: CalibConfig,
                        model: Model | str | None = None,
                        state: OperatorState | None = None,
                        start: int = 0, stop: int | None = None,
                        progress: Callable[[str], None] | None = None) -> CalibReport:
    """Fit buckets ``start..stop-1`` in maturity order.

    To resume from a checkpoint pass the restored ``state`` (committed at
    grid index ``start``) and put the already fitted values in
    ``cfg.initial``.  A bucket whose optimizer fails carries the previous
    interval's values (the initial guess for bucket 0) and is flagged.
    """
    params = cfg.initial
    if model is not None and Model(model) is not params.model:
        raise ConfigError(f"initial guess is {params.model.value}, asked to calibrate {Model(model).value}")
    quotes.check_grid(params)
    N = len(quotes.buckets)
    stop = N if stop is None else int(stop)
    if not 0 <= start <= stop <= N:
        raise ConfigError(f"bucket range [{start}, {stop}) outside [0, {N}]")
    if state is None:
        state = OperatorState(params.grid)
        if start:
            for j in range(start):
                expansion_terms(params, params.grid.times[j + 1], state)
            state.commit(start)
    elif state.grid != params.grid:
        raise StateError("checkpoint grid does not match the parameter grid")
    if state.committed != start:
        raise StateError(f"state is committed at T_{state.committed}, expected T_{start}")

    fits = []
    for i in range(start, stop):
        bucket = quotes.buckets[i]
        before = state.advance_counts.copy()
        try:
            x, nit, nev, ok, msg = _fit_bucket(market, params, i, bucket, cfg, state)
        except Exception as exc:  # optimizer breakdown: carry values below
            x, nit, nev, ok, msg = _interval_values(params, i, cfg.free), 0, 0, False, f"optimizer error: {exc}"
        partial = None
        if not ok:
            partial = dict(zip(cfg.free, map(float, x)))
            x = _interval_values(params, max(i - 1, 0), cfg.free)
        params = _with_values(params, i, cfg.free, x)
        try:
            resid = bucket_residuals(market, params, bucket, state)
        except (DomainError, ModelPreconditionError, NumericalError) as exc:
            resid = np.full(len(bucket.quotes), math.nan)
            msg += f"; final pricing failed: {exc}"
            ok = False
        state.commit(i + 1)
        w = np.array([q.weight for q in bucket.quotes])
        fits.append(BucketFit(
            maturity=bucket.maturity,
            values={k: float(getattr(params, _FIELDS[k]).values[i]) for k in ("kappa", "theta", "lambda", "rho")},
            residual_bp=tuple(float(r) for r in resid),
            objective=float(np.sum(w * resid * resid)),
            iterations=nit,
            evaluations=nev,
            advances=tuple(int(c) for c in state.advance_counts - before),
            converged=bool(ok),
            failed=not ok,
            message=msg,
            partial=partial,
        ))
        if progress:
            progress(f"bucket {i} (T={bucket.maturity:g}): rms {fits[-1].rms_bp:.3g} bp, {nit} iterations"
                     + ("" if ok else " FAILED"))
    return CalibReport(params, tuple(fits), state.to_json())
