"""Command-line interface: ``svmix {price,surface,sensitivity,mc-validate,calibrate}``.

Exit codes: 0 success, 2 input error, 3 model precondition, 4 numeric failure.
Every command is deterministic given ``--seed``.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import blackscholes as bs
from . import moments
from .calibration import CalibConfig, bootstrap_calibrate, load_quotes
from .core import (
    SAFE_MATURITIES,
    MarketState,
    MaturityGrid,
    Model,
    ModelParams,
    OptionKind,
    OptionSpec,
    PiecewiseCurve,
    load_params,
    params_from_dict,
    params_to_dict,
    safe_set_for_maturity,
)
from .errors import (
    ConfigError,
    DomainError,
    ModelPreconditionError,
    NumericalError,
    StateError,
    UnsupportedError,
)
from .montecarlo import MCConfig, estimate, direct_samples, mixing_estimate, simulate_params, _estimate
from .moments import VarianceLaw
from .pricing import garch_error_bound_rho0, greeks2, price2
from .sensitivity import (
    DELTA_VOLS,
    REFERENCE_SWEEPS,
    STRIKE_LABELS,
    cells_to_csv,
    maturity_label,
    parse_sweep,
    resolve_strike,
    sensitivity_cells,
)

EXIT_OK, EXIT_INPUT, EXIT_MODEL, EXIT_NUMERIC = 0, 2, 3, 4


# ----------------------------------------------------------------------------
# shared helpers
# ----------------------------------------------------------------------------

def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _strike_list(text: str) -> list[str | float]:
    out: list[str | float] = []
    for s in text.split(","):
        s = s.strip().lower()
        if not s:
            continue
        out.append(s if s in STRIKE_LABELS else float(s))
    return out


def _load_inputs(args, T: float | None = None) -> tuple[ModelParams, MarketState, str]:
    """Params from ``--params`` or the reference set; applies --model and --rho."""
    model = Model(args.model) if args.model else None
    if args.params:
        params, market = load_params(args.params)
        source = str(args.params)
        if model is not None and model is not params.model:
            params = dataclasses.replace(params, model=model)
    else:
        model = model or Model.HESTON
        params, market = safe_set_for_maturity(model, T if T is not None else SAFE_MATURITIES[0])
        source = "reference set"
    if getattr(args, "rho", None) is not None:
        params = params.replace(rho=args.rho)
    if params.model is Model.GARCH:
        params.require_zero_rho()
    return params, market, source


def _mc_config(args, antithetic_default: bool = True) -> MCConfig:
    anti = antithetic_default if args.antithetic is None else args.antithetic
    paths = args.paths
    if anti and paths % 2:
        paths += 1
    return MCConfig(paths=paths, steps_per_day=args.steps_per_day, seed=args.seed, antithetic=anti)


def _emit(text: str, out: str | None):
    if out:
        try:
            Path(out).write_text(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {out}: {exc}") from None
    else:
        sys.stdout.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _f6(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.6g}"


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_price(args) -> int:
    params, market, source = _load_inputs(args, args.T)
    K = resolve_strike(args.strike, market, params, args.T, args.delta_vol)
    opt = OptionSpec(K, args.T, OptionKind(args.kind))
    res = price2(market, params, opt)
    point = bs.BsPoint.from_market(market, K, args.T, 0.0)
    delta, gamma = greeks2(market, params, opt)
    out = {
        "model": params.model.value,
        "params": source,
        "maturity": args.T,
        "strike": K,
        "strike_spec": str(args.strike),
        "delta_vol": args.delta_vol,
        **res.to_dict(),
        "implied_vol": bs.implied_vol(res.price, point, opt.kind),
        "delta": delta,
        "gamma": gamma,
    }
    if params.model is Model.GARCH and opt.kind is OptionKind.PUT:
        out["error_bound"] = garch_error_bound_rho0(market, params, opt)
    _emit(_json(out), args.out)
    return EXIT_OK


def cmd_surface(args) -> int:
    mats = _float_list(args.maturities)
    strikes = _strike_list(args.strikes)
    buf = io.StringIO()
    model = _load_inputs(args, mats[0])[0].model.value if mats else args.model
    buf.write(f"# model={model} params={args.params or 'reference set per maturity'}"
              f" delta_vol={args.delta_vol}\n")
    buf.write("maturity,strike_label,strike,price,implied_vol\n")
    for T in mats:
        params, market, _ = _load_inputs(args, T)
        for spec in strikes:
            K = resolve_strike(spec, market, params, T, args.delta_vol)
            opt = OptionSpec(K, T, OptionKind(args.kind))
            res = price2(market, params, opt)
            iv = bs.implied_vol(res.price, bs.BsPoint.from_market(market, K, T, 0.0), opt.kind)
            label = spec if isinstance(spec, str) else _f6(K)
            buf.write(f"{maturity_label(T)},{label},{_f6(K)},{_f6(res.price)},{_f6(iv)}\n")
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    if args.sweep and len(args.sweep) > 1:
        raise ConfigError("a sensitivity run varies exactly one parameter; pass --sweep once")
    model = Model(args.model or "heston")
    if args.sweep:
        param, values = parse_sweep(args.sweep[0])
    else:
        param, values = "kappa", REFERENCE_SWEEPS["kappa"]
    base = None
    if args.params:
        params, market, _ = _load_inputs(args)
        model = params.model
        base = (params, market)
    elif args.rho is not None:
        raise ConfigError("--rho needs --params here; sweep rho instead")
    cfg = _mc_config(args)
    mats = _float_list(args.maturities)
    strikes = _strike_list(args.strikes)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    cells = sensitivity_cells(model, param, values, mats, strikes, cfg, base, args.delta_vol, progress)
    header = (f"error_bp = IV(expansion) - IV(mixing MC); model={model.value}; "
              f"params={args.params or 'reference set per maturity'}; paths={cfg.paths}; "
              f"steps_per_day={cfg.steps_per_day or 'auto'}; seed={cfg.seed}; "
              f"antithetic={int(cfg.antithetic)}; delta_vol={args.delta_vol}")
    _emit(cells_to_csv(cells, header), args.out)
    return EXIT_OK


def _check(name: str, value: float, ref: float, se: float, z: float = 3.0) -> dict:
    ok = abs(value - ref) <= z * se + 1e-14 * max(1.0, abs(ref))
    return {"check": name, "mc": value, "reference": ref, "stderr": se,
            "z": (value - ref) / se if se > 0 else (0.0 if value == ref else math.inf), "pass": bool(ok)}


def cmd_mc_validate(args) -> int:
    T = args.T
    params, market, source = _load_inputs(args, T)
    cfg = _mc_config(args, antithetic_default=False)
    law = VarianceLaw.from_params(params).restricted(T)
    K = resolve_strike(args.strike, market, params, T)
    put, call = OptionSpec(K, T, OptionKind.PUT), OptionSpec(K, T, OptionKind.CALL)
    checks = []

    ens = simulate_params(params, cfg, [T], with_spot=True)
    vt = ens.v[0]
    m1 = estimate(vt)
    checks.append(_check("mean V_T", m1.value, moments.mean(law, T), m1.stderr))
    m2 = estimate(vt * vt)
    checks.append(_check("E V_T^2", m2.value, moments.moment_n(law, T, 2), m2.stderr))

    mix = mixing_estimate(market, ens, put, cfg)
    dir_put = _estimate(ens, direct_samples(market, ens, put), cfg)
    comb = math.hypot(mix.stderr, dir_put.stderr)
    checks.append(_check("mixing put vs direct put", mix.value, dir_put.value, comb))
    checks.append({"check": "stderr(mixing) < stderr(direct)", "mixing": mix.stderr,
                   "direct": dir_put.stderr, "pass": bool(mix.stderr < dir_put.stderr)})

    rd, rf = market.rate_integrals(T)
    parity = _estimate(ens, direct_samples(market, ens, call) - direct_samples(market, ens, put), cfg)
    checks.append(_check("direct call - put vs forward parity", parity.value,
                         market.spot * math.exp(-rf) - K * math.exp(-rd), parity.stderr))
    if np.all(params.rho.values == 0):
        checks.append({"check": "xi_T == 1 when rho == 0",
                       "max_abs_dev": float(np.max(np.abs(ens.xi(T) - 1.0))),
                       "pass": bool(np.all(ens.xi(T) == 1.0))})

    report = {
        "model": params.model.value, "params": source, "maturity": T, "strike": K,
        "paths": cfg.paths, "steps_per_day": cfg.steps_per_day, "seed": cfg.seed,
        "truncations": ens.truncations, "checks": checks,
        "pass": all(c["pass"] for c in checks),
    }
    _emit(_json(report), args.out)
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def _calib_inputs(args, quotes):
    cfg_data = {}
    if args.config:
        try:
            cfg_data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        if not isinstance(cfg_data, dict):
            raise ConfigError("calibration config must be a JSON object")
    if "initial" in cfg_data:
        params, market = params_from_dict(cfg_data["initial"])
    elif args.params:
        params, market, _ = _load_inputs(args)
    else:
        model = Model(args.model or "heston")
        grid = MaturityGrid((0.0,) + quotes.maturities)
        rho = -0.3 if model is Model.HESTON else 0.0
        params = ModelParams.from_values(model, grid, 5.0, 0.01, 0.4, rho, 0.0036)
        market = MarketState(100.0, PiecewiseCurve.constant(grid, 0.02), PiecewiseCurve.constant(grid, 0.0))
    if args.model and Model(args.model) is not params.model:
        params = dataclasses.replace(params, model=Model(args.model))
    if params.model is Model.GARCH:
        params = params.replace(rho=0.0)
    known = {"initial", "free", "bounds", "max_iterations", "vol_tolerance_bp", "xatol"}
    extra = set(cfg_data) - known
    if extra:
        raise ConfigError(f"unknown calibration config keys: {sorted(extra)}")
    kw = {k: cfg_data[k] for k in ("max_iterations", "vol_tolerance_bp", "xatol") if k in cfg_data}
    if "free" in cfg_data:
        kw["free"] = tuple(cfg_data["free"])
    if "bounds" in cfg_data:
        kw["bounds"] = {k: tuple(v) for k, v in cfg_data["bounds"].items()}
    if args.max_iterations is not None:
        kw["max_iterations"] = args.max_iterations
    if args.tolerance is not None:
        kw["vol_tolerance_bp"] = args.tolerance
    try:
        cfg = CalibConfig(params, **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, market


def cmd_calibrate(args) -> int:
    quotes = load_quotes(args.quotes)
    cfg, market = _calib_inputs(args, quotes)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    report = bootstrap_calibrate(market, quotes, cfg, progress=progress)
    _emit(_json(report.to_dict(market)), args.out)
    if args.fitted:
        _emit(_json(params_to_dict(report.fitted, market)), args.fitted)
    if args.checkpoint:
        _emit(report.checkpoint + "\n", args.checkpoint)
    return EXIT_NUMERIC if report.failed else EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, rho: bool = True):
    p.add_argument("--model", choices=[m.value for m in Model], help="model (default: heston or the params file)")
    p.add_argument("--params", help="params/market JSON; default: the reference set")
    if rho:
        p.add_argument("--rho", type=float, help="override rho on every interval")
    p.add_argument("--out", help="output file (default: stdout)")


def _mc_flags(p: argparse.ArgumentParser, paths: int = 200_000):
    p.add_argument("--paths", type=int, default=paths)
    p.add_argument("--steps-per-day", type=int, default=None,
                   help="default: 24 per day up to 3M, 8 per day beyond")
    p.add_argument("--seed", type=int, default=0)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--antithetic", dest="antithetic", action="store_true", default=None)
    g.add_argument("--no-antithetic", dest="antithetic", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="svmix", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="second-order price of one option (JSON)")
    _common(p)
    p.add_argument("--T", type=float, default=SAFE_MATURITIES[0], help="maturity in years")
    p.add_argument("--strike", default="atm", help="VALUE, atm, d25 or d10")
    p.add_argument("--kind", choices=[k.value for k in OptionKind], default="put")
    p.add_argument("--delta-vol", choices=DELTA_VOLS, default="atm",
                   help="volatility used to turn a delta into a strike")
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("surface", help="expansion prices and implied vols on a maturity x strike grid (CSV)")
    _common(p)
    p.add_argument("--maturities", default=",".join(repr(T) for T in SAFE_MATURITIES))
    p.add_argument("--strikes", default=",".join(STRIKE_LABELS))
    p.add_argument("--kind", choices=[k.value for k in OptionKind], default="put")
    p.add_argument("--delta-vol", choices=DELTA_VOLS, default="atm")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("sensitivity", help="IV error table, expansion minus mixing Monte Carlo (CSV, bp)")
    _common(p)
    p.add_argument("--sweep", action="append", help="PARAM=v1,v2,... (exactly one; default: the kappa grid)")
    p.add_argument("--maturities", default=",".join(repr(T) for T in SAFE_MATURITIES))
    p.add_argument("--strikes", default=",".join(STRIKE_LABELS))
    p.add_argument("--delta-vol", choices=DELTA_VOLS, default="v0",
                   help="volatility used to turn a delta into a strike (default v0, the reference tables' convention)")
    p.add_argument("--verbose", action="store_true")
    _mc_flags(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("mc-validate", help="Monte Carlo cross-checks against closed forms (JSON)")
    _common(p)
    p.add_argument("--T", type=float, default=SAFE_MATURITIES[0])
    p.add_argument("--strike", default="atm")
    _mc_flags(p, paths=100_000)
    p.set_defaults(func=cmd_mc_validate)

    p = sub.add_parser("calibrate", help="bootstrap calibration to a quote CSV (JSON report)")
    _common(p, rho=False)
    p.add_argument("--quotes", required=True, help="CSV: maturity,strike_or_delta,delta_flag,iv,weight")
    p.add_argument("--config", help="JSON: initial, free, bounds, max_iterations, vol_tolerance_bp")
    p.add_argument("--fitted", help="write fitted params JSON here")
    p.add_argument("--checkpoint", help="write the operator-state checkpoint JSON here")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--tolerance", type=float, help="implied-vol tolerance in bp")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelPreconditionError as exc:
        print(f"svmix: model precondition: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (NumericalError, StateError, FloatingPointError) as exc:
        print(f"svmix: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError, UnsupportedError, ValueError, KeyError) as exc:
        print(f"svmix: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
