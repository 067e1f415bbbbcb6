"""Second-order option prices for stochastic volatility with term structure."""

from .calibration import CalibConfig, CalibReport, Quote, QuoteSet, bootstrap_calibrate, objective_eval
from .core import (
    MarketState,
    MaturityGrid,
    Model,
    ModelParams,
    OptionKind,
    OptionSpec,
    PiecewiseCurve,
    safe_set,
    safe_set_for_maturity,
)
from .montecarlo import MCConfig, MCEstimate, direct_mc_put, mixing_mc_put
from .operators import OperatorKey, OperatorState, omega
from .pricing import PricingResult, garch_error_bound_rho0, garch_put2, greeks2, heston_put2, price2, price_call2

__version__ = "0.1.0"
