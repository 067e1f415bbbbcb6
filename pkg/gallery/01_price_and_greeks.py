"""Second-order prices, Greeks and implied vols on the reference parameter set.

Run with ``python gallery/01_price_and_greeks.py``.
"""

from svmix import blackscholes as bs
from svmix.core import OptionKind, OptionSpec, safe_set_for_maturity
from svmix.pricing import garch_error_bound_rho0, greeks2, price2

# %% one Heston put per reference maturity, struck at the forward
for T in (1 / 12, 0.25, 0.5, 1.0):
    params, market = safe_set_for_maturity("heston", T)
    opt = OptionSpec(market.forward(T), T)
    res = price2(market, params, opt)
    delta, gamma = greeks2(market, params, opt)
    iv = bs.implied_vol(res.price, bs.BsPoint.from_market(market, opt.strike, T, 0.0))
    print(f"T={T:.3f}  K={opt.strike:8.3f}  put={res.price:.6f}  "
          f"(BS part {res.zeroth_order:.6f})  iv={iv:.4%}  delta={delta:.4f}  gamma={gamma:.4f}")

# %% the correction terms are shared between a put and a call
params, market = safe_set_for_maturity("heston", 0.5)
put = price2(market, params, OptionSpec(100.0, 0.5))
call = price2(market, params, OptionSpec(100.0, 0.5, OptionKind.CALL))
print("\ncall - put      :", call.price - put.price)
print("corrections put :", put.price - put.zeroth_order)
print("corrections call:", call.price - call.zeroth_order)

# %% GARCH diffusion with zero correlation, plus its computable error bound
params, market = safe_set_for_maturity("garch", 1.0)
opt = OptionSpec(market.forward(1.0), 1.0)
res = price2(market, params, opt)
print(f"\nGARCH 1Y ATM put {res.price:.6f}, error bound {garch_error_bound_rho0(market, params, opt):.3g}")
print("the bound takes a supremum of a third y-derivative that blows up at the money, so it is loose there")
