import json
import math

import numpy as np
import pytest
from scipy.integrate import dblquad, quad

from svmix.core import MaturityGrid, PiecewiseCurve, integrate_curve, refine_curve
from svmix.errors import StateError, UnsupportedError
from svmix.moments import VarianceLaw
from svmix.operators import (
    OperatorKey,
    OperatorState,
    e_factor,
    omega,
    omega_advance,
    omega_at,
    phi,
    phi_values,
    quadrature_reference,
)
from svmix.pricing import expansion_terms

from conftest import random_curve, random_grid

G1 = MaturityGrid((0.0, 1.0))


def const(v, g=G1, name=None):
    return PiecewiseCurve.constant(g, v, name)


def random_key(rng, grid, depth, lo=-10, hi=10):
    return OperatorKey(tuple((random_curve(rng, grid, lo, hi), random_curve(rng, grid, lo, hi))
                             for _ in range(depth)))


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


# -- e and φ ----------------------------------------------------------------

def test_e_factor(rng):
    assert e_factor(0.0, [const(3.0)]) == 1.0
    assert e_factor(0.7, [const(0.0), const(0.0)]) == 1.0
    for _ in range(10):
        g = random_grid(rng, 3)
        ks = [random_curve(rng, g, -2, 2) for _ in range(3)]
        ref = math.exp(sum(integrate_curve(k, 0, g.horizon) for k in ks))
        assert e_factor(g.horizon, ks) == pytest.approx(ref, rel=1e-14)


def test_phi_single_cases():
    assert phi_values([0.0], [0], 0.3) == pytest.approx(0.3, rel=1e-15)
    assert phi_values([2.0], [0], 0.3) == pytest.approx(math.expm1(0.6) / 2.0, rel=1e-14)
    assert phi_values([0.0], [2], 0.3) == pytest.approx(0.1, rel=1e-14)
    g = MaturityGrid((0.0, 0.5, 0.8))
    st = OperatorState(g)
    k = PiecewiseCurve(g, [1.0, -3.0])
    ref = quad(lambda u: ((u - 0.5) / 0.3) ** 1 * math.exp(-3.0 * (u - 0.5)), 0.5, 0.7)[0]
    assert phi(st, 1, 0.7, [(k, 1)]) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("p2,p1", [(0, 0), (1, 0), (0, 2), (2, 1), (1, 1)])
def test_phi_two_fold_vs_quadrature(rng, p2, p1):
    for _ in range(5):
        k2, k1 = rng.uniform(-6, 6, 2)
        D = rng.uniform(0.05, 0.8)
        # outer variable s, inner r ≤ s, both on [0, 1] in γ units
        ref, _ = dblquad(lambda r, s: D * D * s**p2 * math.exp(k2 * D * s) * r**p1 * math.exp(k1 * D * r),
                         0, 1, 0, lambda s: s, epsabs=0, epsrel=1e-13)
        assert phi_values([k2, k1], [p2, p1], D) == pytest.approx(ref, rel=1e-10)


def test_phi_near_zero_k_is_continuous():
    D = 0.4
    at0 = phi_values([0.0, 1.5], [1, 0], D)
    for k in (1e-13, 1e-10, 1e-7, 1e-5):
        assert phi_values([k, 1.5], [1, 0], D) == pytest.approx(at0, rel=10 * k + 1e-13)


def test_phi_limits():
    with pytest.raises(UnsupportedError):
        phi_values([1.0] * 6, [0] * 6, 0.1)
    with pytest.raises(UnsupportedError):
        phi_values([1.0], [-1], 0.1)


# -- ω ------------------------------------------------------------------------

def test_omega_simple_cases():
    assert omega(OperatorKey.of((const(0.0), const(1.0))), 1.0) == pytest.approx(1.0, rel=1e-15)
    k, c = 1.7, 0.3
    assert omega(OperatorKey.of((const(k), const(c)))) == pytest.approx(c * math.expm1(k) / k, rel=1e-14)
    key = OperatorKey.of((const(1.0), const(0.0)), (const(2.0), const(3.0)))
    assert omega(key) == 0.0
    assert quadrature_reference(key, 1.0).value == 0.0
    q = quadrature_reference(OperatorKey.of((const(k), const(c))), 1.0)
    assert q.converged and q.value == pytest.approx(c * math.expm1(k) / k, rel=1e-11)


def test_omega_at_time_zero_and_idempotent(rng):
    g = random_grid(rng, 4)
    key = random_key(rng, g, 3)
    st = OperatorState(g)
    assert st.omega_at(key, 0) == 0.0
    a = st.omega_at(key, g.n_intervals)
    before = st.advance_counts.copy()
    assert st.omega_at(key, g.n_intervals) == a
    assert np.array_equal(st.advance_counts, before)


def test_single_interval_equals_advance():
    key = OperatorKey.of((const(-1.0), const(2.0)), (const(0.5), const(1.0)))
    st = OperatorState(G1)
    inner = key.suffix(1)
    omega_advance(st, inner, 0)
    val = omega_advance(st, key, 0)
    assert omega_at(OperatorState(G1), key, 1) == val


def test_missing_prerequisite_is_state_error():
    g = MaturityGrid((0.0, 0.5, 1.0))
    key = OperatorKey.of((const(1.0, g), const(1.0, g)))
    with pytest.raises(StateError):
        OperatorState(g).omega_advance(key, 1)


def test_depth_limit():
    with pytest.raises(UnsupportedError):
        OperatorKey(tuple((const(1.0), const(1.0)) for _ in range(6)))


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_omega_vs_quadrature_random(rng, depth):
    for _ in range(8):
        g = random_grid(rng, 5)
        key = random_key(rng, g, depth)
        ref = quadrature_reference(key, g.horizon).value
        assert _rel(omega(key), ref) <= 1e-9


def test_omega_mid_interval_time(rng):
    g = random_grid(rng, 4)
    key = random_key(rng, g, 3, -3, 3)
    T = 0.6 * g.horizon
    assert _rel(omega(key, T), quadrature_reference(key, T).value) <= 1e-9


def test_checkpoint_one_pass_equals_stepwise(rng):
    g = random_grid(rng, 5)
    key = random_key(rng, g, 4, -4, 4)
    one = OperatorState(g).omega_at(key, g.n_intervals)
    st = OperatorState(g)
    for j in range(1, g.n_intervals + 1):
        st.omega_at(key, j)
    assert st.omega_at(key, g.n_intervals) == one


def test_grid_refinement_invariance(rng):
    for _ in range(10):
        g = random_grid(rng, 3)
        key = random_key(rng, g, 3, -5, 5)
        extra = rng.uniform(0, g.horizon, 3)
        fine = OperatorKey(tuple((refine_curve(k, extra), refine_curve(l, extra)) for k, l in key.pairs))
        assert _rel(omega(fine), omega(key)) <= 1e-12


def test_pricing_keys_vs_quadrature_safe_set():
    from svmix.core import safe_set
    from svmix.moments import heston_shifted_law

    p, _ = safe_set("heston")
    w = 1.0 - p.rho * p.rho
    for n in (0, 1, 2):
        law = heston_shifted_law(p, n)
        keys = [
            OperatorKey.of((-law.kappa, w)),
            OperatorKey.of((-law.kappa, w), (law.kappa, law.kappa_theta)),
            OperatorKey.of((-law.kappa, w), (-law.kappa, w), (law.kappa, law.lam2)),
            OperatorKey.of((-law.kappa, w), (-law.kappa, w), (law.kappa, law.lam2), (law.kappa, law.kappa_theta)),
        ]
        for key in keys:
            assert _rel(omega(key), quadrature_reference(key, 1.0).value) <= 1e-9
    g, _ = safe_set("garch")
    law = VarianceLaw.from_params(g)
    one = const(1.0, g.grid)
    key = OperatorKey.of((-law.kappa, one), (-law.kappa, one), (law.lam2, law.lam2),
                         (law.kappa - law.lam2, law.kappa_theta), (law.kappa, law.kappa_theta))
    assert _rel(omega(key), quadrature_reference(key, 1.0).value) <= 1e-9


# -- commit / rollback / checkpoints ------------------------------------------

def _ladder():
    from svmix.core import safe_set

    return safe_set("heston")[0]


def test_commit_rollback_semantics():
    p = _ladder()
    st = OperatorState(p.grid)
    T1 = p.grid.times[1]
    a = expansion_terms(p, T1, st)
    st.commit(1)
    b = expansion_terms(p, T1, st)
    assert a == b
    # changing interval 1 only leaves bucket 0 prices untouched
    q = p.with_interval(1, theta=0.05)
    expansion_terms(q, p.grid.times[2], st)
    st.rollback()
    assert expansion_terms(p, T1, st) == a
    with pytest.raises(StateError):
        st.rollback(0)
    with pytest.raises(StateError):
        st.commit(0)
    with pytest.raises(StateError):
        expansion_terms(p.with_interval(0, theta=0.02), T1, st)


def test_pending_values_refresh_when_frontier_changes():
    p = _ladder()
    st = OperatorState(p.grid)
    T2 = p.grid.times[2]
    expansion_terms(p, T2, st)
    q = p.with_interval(1, lam=0.3)
    assert expansion_terms(q, T2, st) == expansion_terms(q, T2)


def test_json_checkpoint_roundtrip():
    p = _ladder()
    st = OperatorState(p.grid)
    for j in (1, 2):
        expansion_terms(p, p.grid.times[j], st)
    st.commit(2)
    text = st.to_json()
    json.loads(text)
    restored = OperatorState.from_json(text)
    assert restored.committed == 2
    for T in p.grid.times[1:]:
        assert expansion_terms(p, T, restored) == expansion_terms(p, T, st)
    with pytest.raises(StateError):
        OperatorState.from_json(text, MaturityGrid((0.0, 1.0)))
