"""Term structures, market state and option specifications.

Every time-dependent quantity in the package is a :class:`PiecewiseCurve`:
one value per interval ``[T_i, T_{i+1})`` of a :class:`MaturityGrid`.
Integrals of such curves are evaluated exactly.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import ConfigError, ModelPreconditionError

_TIME_EPS = 1e-14


class Model(str, enum.Enum):
    HESTON = "heston"
    GARCH = "garch"


class OptionKind(str, enum.Enum):
    PUT = "put"
    CALL = "call"


@dataclass(frozen=True, eq=False)
class MaturityGrid:
    """Ordered times ``0 = T_0 < T_1 < ... < T_N`` (years)."""

    times: tuple[float, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise ValueError("a maturity grid needs at least two times")
        if times[0] != 0.0:
            raise ValueError("a maturity grid must start at 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("grid times must be strictly increasing")
        object.__setattr__(self, "times", times)
        arr = np.asarray(times)
        dt = np.diff(arr)
        arr.flags.writeable = False
        dt.flags.writeable = False
        object.__setattr__(self, "_arr", arr)
        object.__setattr__(self, "_dt", dt)

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def n_intervals(self) -> int:
        return len(self.times) - 1

    @property
    def array(self) -> np.ndarray:
        return self._arr

    @property
    def dt(self) -> np.ndarray:
        return self._dt

    def interval_of(self, t):
        """Index ``i`` with ``t`` in ``[T_i, T_{i+1})``; the horizon maps to the last interval."""
        idx = np.searchsorted(self._arr, t, side="right") - 1
        return np.clip(idx, 0, self.n_intervals - 1)

    def index_of_time(self, t: float) -> int | None:
        """Grid index of ``t`` if it is (numerically) a grid time, else None."""
        j = int(np.searchsorted(self._arr, t - _TIME_EPS * max(1.0, abs(t))))
        if j < len(self.times) and abs(self.times[j] - t) <= _TIME_EPS * max(1.0, abs(t)):
            return j
        return None

    def __eq__(self, other):
        return isinstance(other, MaturityGrid) and self.times == other.times

    def __hash__(self):
        return hash(self.times)

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True, eq=False)
class PiecewiseCurve:
    """A right-open piecewise-constant function of time.

    ``name`` is optional; it is used to build canonical operator-key strings
    and has no effect on the numbers.
    """

    grid: MaturityGrid
    values: np.ndarray
    name: str | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size == 1 and self.grid.n_intervals > 1:
            vals = np.full(self.grid.n_intervals, vals[0])
        if vals.size != self.grid.n_intervals:
            raise ValueError(
                f"curve needs {self.grid.n_intervals} values, got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("curve values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: MaturityGrid, value: float, name: str | None = None):
        return cls(grid, np.full(grid.n_intervals, float(value)), name)

    def __call__(self, t):
        return self.values[self.grid.interval_of(t)]

    def eval(self, t):
        return self(t)

    def renamed(self, name: str | None) -> "PiecewiseCurve":
        return PiecewiseCurve(self.grid, self.values, name)

    def with_value(self, i: int, value: float) -> "PiecewiseCurve":
        vals = self.values.copy()
        vals[i] = value
        return PiecewiseCurve(self.grid, vals, self.name)

    def is_zero(self) -> bool:
        return not np.any(self.values)

    # arithmetic, used to assemble the derived curves of the operator keys
    def _binary(self, other, op, sym):
        if isinstance(other, PiecewiseCurve):
            if other.grid != self.grid:
                raise ValueError("curves live on different grids")
            vals = op(self.values, other.values)
            oname = other.name
        else:
            vals = op(self.values, float(other))
            oname = repr(float(other))
        name = None
        if self.name is not None and oname is not None:
            name = f"({self.name}{sym}{oname})"
        return PiecewiseCurve(self.grid, vals, name)

    def __add__(self, other):
        return self._binary(other, np.add, "+")

    def __sub__(self, other):
        return self._binary(other, np.subtract, "-")

    def __mul__(self, other):
        return self._binary(other, np.multiply, "*")

    def __truediv__(self, other):
        return self._binary(other, np.divide, "/")

    def __rmul__(self, other):
        c = PiecewiseCurve(self.grid, self.values * float(other))
        name = None if self.name is None else f"({float(other)!r}*{self.name})"
        return c.renamed(name)

    def __radd__(self, other):
        c = PiecewiseCurve(self.grid, self.values + float(other))
        name = None if self.name is None else f"({float(other)!r}+{self.name})"
        return c.renamed(name)

    def __rsub__(self, other):
        c = PiecewiseCurve(self.grid, float(other) - self.values)
        name = None if self.name is None else f"({float(other)!r}-{self.name})"
        return c.renamed(name)

    def __neg__(self):
        name = None if self.name is None else f"-{self.name}"
        return PiecewiseCurve(self.grid, -self.values, name)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"PiecewiseCurve{label}({self.values.tolist()} on {list(self.grid.times)})"


def integrate_curve(c: PiecewiseCurve, a: float, b: float) -> float:
    """Exact integral of ``c`` over ``[a, b]``."""
    T = c.grid.horizon
    tol = _TIME_EPS * max(1.0, T)
    if a < -tol or b > T + tol or a > b + tol:
        raise ValueError(f"integration bounds [{a}, {b}] outside [0, {T}]")
    if b <= a:
        return 0.0
    t = c.grid.array
    overlap = np.clip(np.minimum(b, t[1:]) - np.maximum(a, t[:-1]), 0.0, None)
    return math.fsum(overlap * c.values)


def cumulative_integral(c: PiecewiseCurve) -> np.ndarray:
    """``∫_0^{T_j} c`` at every grid time (length N+1)."""
    out = np.zeros(len(c.grid))
    out[1:] = np.cumsum(c.values * c.grid.dt)
    return out


def discount_factor(c: PiecewiseCurve, T: float) -> float:
    if T < 0:
        raise ValueError("T must be >= 0")
    return math.exp(-integrate_curve(c, 0.0, T))


def restrict_grid(grid: MaturityGrid, T: float) -> MaturityGrid:
    if T <= 0:
        raise ValueError("restriction horizon must be positive")
    if T > grid.horizon * (1 + _TIME_EPS):
        raise ValueError(f"T={T} beyond grid horizon {grid.horizon}")
    j = grid.index_of_time(T)
    if j is not None:
        return MaturityGrid(grid.times[: j + 1])
    inner = [t for t in grid.times if t < T]
    return MaturityGrid(tuple(inner) + (T,))


def window_grid(grid: MaturityGrid, s: float, t: float) -> MaturityGrid:
    """Grid of ``[s, t]`` shifted to start at 0."""
    if not 0 <= s < t:
        raise ValueError("window needs 0 <= s < t")
    inner = [u - s for u in grid.times if s < u < t]
    pts = [0.0] + [u for u in inner if u > _TIME_EPS * max(1.0, t)] + [t - s]
    return MaturityGrid(tuple(pts))


def window_curve(c: PiecewiseCurve, s: float, t: float) -> PiecewiseCurve:
    """Restriction of ``c`` to ``[s, t]``, re-based so that ``s`` maps to 0."""
    g = window_grid(c.grid, s, t)
    mids = s + 0.5 * (g.array[:-1] + g.array[1:])
    return PiecewiseCurve(g, c(mids), c.name)


def restrict_curve(c: PiecewiseCurve, T: float) -> PiecewiseCurve:
    return window_curve(c, 0.0, T)


def refine_curve(c: PiecewiseCurve, times: Iterable[float]) -> PiecewiseCurve:
    """Same function on a finer grid containing the extra ``times``."""
    pts = sorted(set(c.grid.times) | {float(t) for t in times if 0 < t < c.grid.horizon})
    g = MaturityGrid(tuple(pts))
    mids = 0.5 * (g.array[:-1] + g.array[1:])
    return PiecewiseCurve(g, c(mids), c.name)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter term structure of one stochastic-volatility model."""

    model: Model
    kappa: PiecewiseCurve
    theta: PiecewiseCurve
    lam: PiecewiseCurve
    rho: PiecewiseCurve
    v0: float

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        grid = self.kappa.grid
        for c in (self.theta, self.lam, self.rho):
            if c.grid != grid:
                raise ValueError("model parameters must share one grid")
        if self.v0 <= 0:
            raise ValueError("v0 must be positive")
        if np.any(self.kappa.values <= 0) or np.any(self.theta.values <= 0):
            raise ValueError("kappa and theta must be strictly positive")
        if np.any(self.lam.values < 0):
            raise ValueError("lambda must be nonnegative")
        if np.any(np.abs(self.rho.values) > 1):
            raise ValueError("rho must lie in [-1, 1]")
        # canonical names feed the operator-key strings
        object.__setattr__(self, "kappa", self.kappa.renamed("kappa"))
        object.__setattr__(self, "theta", self.theta.renamed("theta"))
        object.__setattr__(self, "lam", self.lam.renamed("lambda"))
        object.__setattr__(self, "rho", self.rho.renamed("rho"))

    @classmethod
    def from_values(cls, model, grid, kappa, theta, lam, rho, v0) -> "ModelParams":
        g = grid if isinstance(grid, MaturityGrid) else MaturityGrid(tuple(grid))
        mk = lambda v: PiecewiseCurve(g, np.broadcast_to(np.asarray(v, float), (g.n_intervals,)))
        return cls(Model(model), mk(kappa), mk(theta), mk(lam), mk(rho), float(v0))

    @property
    def grid(self) -> MaturityGrid:
        return self.kappa.grid

    def replace(self, **changes) -> "ModelParams":
        """Copy with whole curves, scalars or per-interval arrays replaced."""
        out = {}
        for name, val in changes.items():
            if name in ("kappa", "theta", "lam", "rho") and not isinstance(val, PiecewiseCurve):
                val = PiecewiseCurve(self.grid, np.broadcast_to(np.asarray(val, float), (self.grid.n_intervals,)))
            out[name] = val
        return replace(self, **out)

    def with_interval(self, i: int, **values: float) -> "ModelParams":
        """Copy with interval ``i`` of the named curves set to new values."""
        out = {name: getattr(self, name).with_value(i, v) for name, v in values.items()}
        return replace(self, **out)

    def feller(self) -> np.ndarray:
        """Per-interval flag ``2 κ θ > λ²``."""
        return 2 * self.kappa.values * self.theta.values > self.lam.values**2

    def require_zero_rho(self):
        if np.any(self.rho.values != 0.0):
            raise ModelPreconditionError(
                "GARCH diffusion pricing is only available for rho == 0 on every interval"
            )

    def __repr__(self):
        return (
            f"ModelParams({self.model.value}, grid={list(self.grid.times)}, v0={self.v0}, "
            f"kappa={self.kappa.values.tolist()}, theta={self.theta.values.tolist()}, "
            f"lambda={self.lam.values.tolist()}, rho={self.rho.values.tolist()})"
        )


def restrict_params(p: ModelParams, T: float) -> ModelParams:
    """Parameters truncated to ``[0, T]``; an interval containing ``T`` is split."""
    if T <= 0:
        raise ValueError("restriction horizon must be positive")
    if p.grid.index_of_time(T) == p.grid.n_intervals:
        return p
    return ModelParams(
        p.model,
        restrict_curve(p.kappa, T),
        restrict_curve(p.theta, T),
        restrict_curve(p.lam, T),
        restrict_curve(p.rho, T),
        p.v0,
    )


@dataclass(frozen=True, eq=False)
class MarketState:
    spot: float
    rd: PiecewiseCurve
    rf: PiecewiseCurve

    def __post_init__(self):
        if self.spot <= 0:
            raise ValueError("spot must be positive")

    @classmethod
    def flat(cls, spot: float, rd: float, rf: float, horizon: float = 100.0) -> "MarketState":
        g = MaturityGrid((0.0, horizon))
        return cls(float(spot), PiecewiseCurve.constant(g, rd), PiecewiseCurve.constant(g, rf))

    def rate_integrals(self, T: float) -> tuple[float, float]:
        return integrate_curve(self.rd, 0.0, T), integrate_curve(self.rf, 0.0, T)

    def forward(self, T: float) -> float:
        rd, rf = self.rate_integrals(T)
        return self.spot * math.exp(rd - rf)

    def with_spot(self, spot: float) -> "MarketState":
        return replace(self, spot=float(spot))


@dataclass(frozen=True)
class OptionSpec:
    strike: float
    maturity: float
    kind: OptionKind = OptionKind.PUT

    def __post_init__(self):
        object.__setattr__(self, "kind", OptionKind(self.kind))
        if self.strike <= 0:
            raise ValueError("strike must be positive")
        if self.maturity <= 0:
            raise ValueError("maturity must be positive")

    def check_horizon(self, grid: MaturityGrid):
        if self.maturity > grid.horizon * (1 + _TIME_EPS):
            raise ValueError(
                f"maturity {self.maturity} beyond parameter horizon {grid.horizon}"
            )


# ----------------------------------------------------------------------------
# JSON schema shared by the CLI and calibration output
# ----------------------------------------------------------------------------

def _as_list(value, n: int, key: str) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)] * n
    vals = [float(v) for v in value]
    if len(vals) != n:
        raise ConfigError(f"'{key}' needs {n} values (one per interval), got {len(vals)}")
    return vals


def params_from_dict(data: Mapping[str, Any]) -> tuple[ModelParams, MarketState]:
    """Parse the params/market JSON schema.

    Example::

        {"grid": [0, 0.25, 1.0], "kappa": [5.0, 5.0], "theta": [0.019, 0.011],
         "lambda": [0.414, 0.414], "rho": [-0.391, -0.391], "v0": 0.0036,
         "spot": 100.0, "rd": [0.02, 0.02], "rf": [0.0, 0.0], "model": "heston"}
    """
    try:
        grid = MaturityGrid(tuple(float(t) for t in data["grid"]))
        n = grid.n_intervals
        model = Model(str(data.get("model", "heston")).lower())
        params = ModelParams(
            model,
            PiecewiseCurve(grid, _as_list(data["kappa"], n, "kappa")),
            PiecewiseCurve(grid, _as_list(data["theta"], n, "theta")),
            PiecewiseCurve(grid, _as_list(data["lambda"], n, "lambda")),
            PiecewiseCurve(grid, _as_list(data.get("rho", 0.0), n, "rho")),
            float(data["v0"]),
        )
        market = MarketState(
            float(data.get("spot", 100.0)),
            PiecewiseCurve(grid, _as_list(data.get("rd", 0.0), n, "rd")),
            PiecewiseCurve(grid, _as_list(data.get("rf", 0.0), n, "rf")),
        )
    except KeyError as exc:
        raise ConfigError(f"missing field {exc.args[0]!r}") from None
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return params, market


def params_to_dict(params: ModelParams, market: MarketState | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {
        "grid": list(params.grid.times),
        "kappa": params.kappa.values.tolist(),
        "theta": params.theta.values.tolist(),
        "lambda": params.lam.values.tolist(),
        "rho": params.rho.values.tolist(),
        "v0": params.v0,
        "model": params.model.value,
    }
    if market is not None:
        mids = 0.5 * (params.grid.array[:-1] + params.grid.array[1:])
        out["spot"] = market.spot
        out["rd"] = market.rd(mids).tolist()
        out["rf"] = market.rf(mids).tolist()
    return out


def load_params(path) -> tuple[ModelParams, MarketState]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return params_from_dict(data)


def safe_set(model: Model | str = Model.HESTON, term_structure: bool = True) -> tuple[ModelParams, MarketState]:
    """The reference parameter set used throughout the tests and tables.

    With ``term_structure`` the long-run level steps through
    0.019, 0.011, 0.009, 0.009 on the 1M/3M/6M/1Y buckets.
    """
    model = Model(model)
    grid = MaturityGrid((0.0, 1 / 12, 3 / 12, 6 / 12, 1.0))
    theta = [0.019, 0.011, 0.009, 0.009] if term_structure else 0.019
    rho = -0.391 if model is Model.HESTON else 0.0
    params = ModelParams.from_values(model, grid, 5.0, theta, 0.414, rho, 0.0036)
    market = MarketState(100.0, PiecewiseCurve.constant(grid, 0.02), PiecewiseCurve.constant(grid, 0.0))
    return params, market


SAFE_MATURITIES = (1 / 12, 3 / 12, 6 / 12, 1.0)
SAFE_THETAS = (0.019, 0.011, 0.009, 0.009)


def safe_theta(T: float) -> float:
    """Long-run level of the reference set quoted for maturity ``T``."""
    for Tm, th in zip(SAFE_MATURITIES, SAFE_THETAS):
        if T <= Tm * (1 + _TIME_EPS):
            return th
    return SAFE_THETAS[-1]


def safe_set_for_maturity(model: Model | str, T: float, horizon: float | None = None) -> tuple[ModelParams, MarketState]:
    """Constant-parameter reference set for one maturity bucket.

    The reference set lists one calibrated parameter vector per maturity;
    options of maturity T are priced with the vector of T's bucket held
    constant on ``[0, horizon]`` (default: ``[0, T]``).
    """
    model = Model(model)
    grid = MaturityGrid((0.0, T if horizon is None else horizon))
    rho = -0.391 if model is Model.HESTON else 0.0
    params = ModelParams.from_values(model, grid, 5.0, safe_theta(T), 0.414, rho, 0.0036)
    market = MarketState(100.0, PiecewiseCurve.constant(grid, 0.02), PiecewiseCurve.constant(grid, 0.0))
    return params, market
