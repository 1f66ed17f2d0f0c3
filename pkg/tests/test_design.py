from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from expost import (
    AdditiveValues,
    MaxValues,
    Mechanism,
    PrivateValues,
    SignalSpace,
    Tabulated,
    TruncatedExponential,
    Uniform,
    adjusted_hazard,
    iron,
    make_grid,
    optimal_additive,
    optimal_max_must_sell,
    optimal_strictly_increasing,
    revenue_objective,
    synthesize_payments,
    verify_epic,
    verify_epir,
    virtual_value,
    virtual_value_field,
)
from expost.errors import ConfigurationError, PreconditionError
from expost.generators import random_em_rule
from expost.mechanism import AllocationRule, constant_rule
from expost.revenue import expected_revenue_mc
from expost.signals import SignalDistribution
from expost.values import value_table


def gcm_oracle(raw, weights):
    """Ironed values by brute force: greatest convex minorant of the cumulative curve.

    The minorant at each knot is the minimum over all chords spanning it, so
    this never runs pool-adjacent-violators.
    """
    W = np.r_[0.0, np.cumsum(weights)]
    C = np.r_[0.0, np.cumsum(weights * raw)]
    K = W.size
    G = C.copy()
    for k in range(K):
        for a in range(k + 1):
            for b in range(k, K):
                if W[b] > W[a]:
                    G[k] = min(G[k], C[a] + (C[b] - C[a]) * (W[k] - W[a]) / (W[b] - W[a]))
    return np.diff(G) / weights


def quantile_weights(t):
    w = np.zeros(t.size)
    w[:-1] += np.diff(t) / 2
    w[1:] += np.diff(t) / 2
    return w


class LinearDensity(SignalDistribution):
    """F(s) = 1 - (1 - s)^2 on [0, 1]; the density vanishes at the top."""

    name = "linear-density"

    def _cdf(self, s):
        return 1 - (1 - s) ** 2

    def _pdf(self, s):
        return 2 * (1 - s)

    def _ppf(self, u):
        return 1 - np.sqrt(1 - u)


# ---------------------------------------------------------------------------
# virtual values and hazards


def test_virtual_value_examples(unit, uniform):
    assert virtual_value(PrivateValues(2, unit), uniform, 0, (0.5, 0.2)) == pytest.approx(0.0)
    assert virtual_value(AdditiveValues([1, 1], unit), uniform, 0, (0.5, 0.5)) == pytest.approx(0.5)
    assert virtual_value(MaxValues(2, unit), uniform, 0, (0.9, 0.2)) == pytest.approx(0.8)


def test_virtual_value_against_finite_difference_derivative(unit, uniform):
    model = MaxValues(2, unit)
    s = np.array([0.9, 0.2])
    h = 1e-7
    dv = (model.value(0, s + [h, 0]) - model.value(0, s)) / h
    assert virtual_value(model, uniform, 0, s) == pytest.approx(0.9 - 0.1 * dv, abs=1e-6)


def test_virtual_value_never_exceeds_value(unit, uniform, grid21):
    for model in (MaxValues(2, unit), AdditiveValues([1, 3], unit), PrivateValues(2, unit)):
        J = virtual_value_field(model, uniform, grid21).J
        assert np.all(J <= value_table(model, grid21) + 1e-12)


def test_adjusted_hazard_examples(uniform):
    assert adjusted_hazard(uniform, 2.0, 0.5) == pytest.approx(1.0)
    assert adjusted_hazard(uniform, 1.0, 1.0) == 0.0
    x = np.linspace(0, 1, 201)
    assert adjusted_hazard(Tabulated(x, x ** 2), 1.0, 0.5) == pytest.approx(0.75)
    with pytest.raises(ConfigurationError):
        adjusted_hazard(uniform, -1.0, 0.5)


def test_vanishing_top_density_uses_one_sided_limit(unit):
    dist = LinearDensity(unit)
    grid = make_grid(unit, 21)
    J = virtual_value_field(PrivateValues(1, unit), dist, grid).J[0]
    assert np.all(np.isfinite(J))
    assert J[-1] == pytest.approx(1.0, abs=1e-9)  # (1 - s)/2 -> 0


def test_virtual_value_csv(tmp_path, unit, uniform):
    grid = make_grid(unit, 3)
    virtual_value_field(MaxValues(2, unit), uniform, grid).to_csv(tmp_path / "J.csv")
    lines = (tmp_path / "J.csv").read_text().splitlines()
    assert lines[0] == "s_1,s_2,J_1,J_2" and len(lines) == 10


# ---------------------------------------------------------------------------
# ironing


def test_iron_regular_curve_is_identity(unit, uniform):
    x = np.linspace(0, 1, 51)
    raw = 2 * x - 1
    assert np.max(np.abs(iron(raw, x, uniform).values - raw)) <= 1e-12


def test_iron_constant_curve(uniform):
    x = np.linspace(0, 1, 11)
    out = iron(np.full(11, 0.3), x, uniform)
    assert np.array_equal(out.values, np.full(11, 0.3))


def test_iron_dip_matches_convex_minorant(uniform):
    x = np.array([0, 1 / 3, 2 / 3, 1])
    raw = np.array([0.2, 0.6, 0.3, 0.8])
    out = iron(raw, x, uniform)
    expected = gcm_oracle(raw, quantile_weights(x))
    np.testing.assert_allclose(out.values, expected, atol=1e-12)
    np.testing.assert_allclose(out.values, [0.2, 0.45, 0.45, 0.8], atol=1e-12)
    assert out.flat_intervals == [(1, 2)]


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 14))
def test_iron_properties(seed, m):
    rng = np.random.default_rng(seed)
    knots = np.linspace(0, 1, 6)
    cdf = np.r_[0.0, np.sort(rng.uniform(0.05, 0.95, 4)), 1.0]
    cdf = np.maximum.accumulate(cdf + np.arange(6) * 1e-3) / (cdf[-1] + 5e-3)
    cdf[-1] = 1.0
    dist = Tabulated(knots, cdf)
    x = np.linspace(0, 1, m)
    raw = rng.normal(size=m)
    out = iron(raw, x, dist)
    assert np.all(np.diff(out.values) >= -1e-12)
    assert np.max(np.abs(iron(out.values, x, dist).values - out.values)) <= 1e-12
    w = quantile_weights(np.asarray(dist.cdf(x)))
    np.testing.assert_allclose(out.values, gcm_oracle(raw, w), atol=1e-9)
    bigger = raw + np.abs(rng.normal(size=m))
    assert np.all(iron(bigger, x, dist).values >= out.values - 1e-12)
    assert np.dot(w, out.values) == pytest.approx(np.dot(w, raw))


def test_iron_length_mismatch(uniform):
    with pytest.raises(ConfigurationError):
        iron([0.1, 0.2], [0.0, 0.5, 1.0], uniform)


# ---------------------------------------------------------------------------
# optimal designs


def test_strictly_increasing_private_values(unit, uniform):
    grid = make_grid(unit, 11)
    mech = optimal_strictly_increasing(PrivateValues(2, unit), uniform, grid)
    q = mech.allocation.q
    a, b = grid.profile_index((0.8, 0.3))
    assert q[0, a, b] == 1.0 and q[1, a, b] == 0.0
    a, b = grid.profile_index((0.4, 0.3))
    assert q[:, a, b].sum() == 0.0
    a, b = grid.profile_index((0.5, 0.5))  # J = 0 counts as a sale; tie to the first agent
    assert q[0, a, b] == 1.0


def test_strictly_increasing_additive_tie(unit, uniform):
    grid = make_grid(unit, 11)
    mech = optimal_strictly_increasing(AdditiveValues([1, 1], unit), uniform, grid)
    a, b = grid.profile_index((0.5, 0.5))
    assert mech.allocation.q[0, a, b] == 1.0 and mech.allocation.q[1, a, b] == 0.0


def test_strictly_increasing_rejects_flat_values(unit, uniform):
    with pytest.raises(PreconditionError, match="revenue_objective"):
        optimal_strictly_increasing(MaxValues(2, unit), uniform, make_grid(unit, 11))


def test_strictly_increasing_with_ironing_is_epic(unit):
    # bimodal density makes the private-value virtual value non-monotone
    knots = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    dist = Tabulated(knots, [0.0, 0.4, 0.45, 0.5, 0.9, 1.0])
    grid = make_grid(unit, 26)
    model = PrivateValues(2, unit)
    raw = virtual_value_field(model, dist, grid).J[0][:, 0]
    assert np.any(np.diff(raw) < 0)
    mech = optimal_strictly_increasing(model, dist, grid)
    assert verify_epic(mech, model).passed and verify_epir(mech, model).passed


def test_additive_equal_weights_highest_signal_wins(unit, uniform):
    grid = make_grid(unit, 21)
    q = optimal_additive(uniform, [1, 1], grid).allocation.q
    s = grid.profiles(2)
    sold = q.sum(axis=0) > 0
    winner = q.argmax(axis=0)
    top = np.where(s[..., 0] >= s[..., 1], 0, 1)
    assert np.array_equal(winner[sold], top[sold])
    a, b = grid.profile_index((0.1, 0.1))
    assert q[:, a, b].sum() == 0.0  # both virtual values negative


def test_additive_unequal_weights_example(unit, uniform):
    grid = make_grid(unit, 11)
    q = optimal_additive(uniform, [2, 1], grid).allocation.q
    a, b = grid.profile_index((0.5, 0.4))
    assert q[1, a, b] == 1.0 and q[0, a, b] == 0.0
    # grid argmin cross-check of the adjusted hazards
    assert np.argmin([2 * (1 - 0.5), 1 * (1 - 0.4)]) == 1


def test_additive_monotone_under_mhr(unit):
    dist = TruncatedExponential(1.5, unit)
    grid = make_grid(unit, 21)
    mech = optimal_additive(dist, [1.0, 1.7], grid)
    q = mech.allocation.q
    assert np.all(np.diff(q[0], axis=0) >= 0) and np.all(np.diff(q[1], axis=1) >= 0)
    model = AdditiveValues([1.0, 1.7], unit)
    assert verify_epic(mech, model).passed and verify_epir(mech, model).passed


def test_additive_rejects_non_mhr(unit):
    dist = Tabulated([0.0, 0.5, 1.0], [0.0, 0.9, 1.0])
    with pytest.raises(PreconditionError, match="hazard"):
        optimal_additive(dist, [1, 1], make_grid(unit, 11))


def test_must_sell_payment_examples(unit, uniform):
    grid = make_grid(unit, 11)
    mech = optimal_max_must_sell([0.5, 0.5], uniform, grid)
    a, b = grid.profile_index((0.8, 0.5))
    np.testing.assert_allclose(mech.payment.p[:, a, b], [0.25, 0.4], atol=1e-12)

    mech = optimal_max_must_sell([1.0, 0.0], uniform, grid)
    np.testing.assert_allclose(mech.payment.p[0], np.broadcast_to(grid.points[None, :], (11, 11)), atol=1e-12)
    assert np.max(np.abs(mech.payment.p[1])) < 1e-12


def test_must_sell_single_agent_pays_lowest_value():
    space = SignalSpace(0.2, 1.0)
    grid = make_grid(space, 9)
    mech = optimal_max_must_sell([1.0], Uniform(space), grid)
    np.testing.assert_allclose(mech.payment.p[0], 0.2, atol=1e-12)


def test_must_sell_rejects_bad_shares(unit, uniform):
    with pytest.raises(ConfigurationError, match="shares"):
        optimal_max_must_sell([0.6, 0.6], uniform, make_grid(unit, 5))


@pytest.mark.parametrize("shares", [[1.0, 0.0], [0.5, 0.5], [0.3, 0.7], [0.2, 0.3, 0.5]])
def test_must_sell_is_epic_and_epir(unit, uniform, shares):
    n = len(shares)
    grid = make_grid(unit, 21 if n == 2 else 9)
    model = MaxValues(n, unit)
    mech = optimal_max_must_sell(shares, uniform, grid, model)
    assert verify_epic(mech, model).passed and verify_epir(mech, model).passed


def test_revenue_objective_zero_rule(unit, uniform, grid21):
    rule = AllocationRule(grid21, np.zeros((2, 21, 21)))
    assert revenue_objective(rule, MaxValues(2, unit), uniform) == 0.0


def test_revenue_objective_matches_mc(unit, uniform):
    grid = make_grid(unit, 51)
    model = MaxValues(2, unit)
    mech = optimal_max_must_sell([0.5, 0.5], uniform, grid, model)
    obj = revenue_objective(mech, model, uniform)
    mc = expected_revenue_mc(mech, uniform, 200_000, seed=1)
    assert abs(obj - mc.mean) <= 3 * mc.std_error + 1e-3


def test_revenue_objective_equals_quadrature_revenue_for_binding_ir(unit, uniform, rng):
    """With IR binding at the bottom, the virtual-surplus integral is the expected payment."""
    from expost.revenue import expected_revenue_quadrature
    grid = make_grid(unit, 41)
    model = AdditiveValues([1.0, 1.0], unit)
    rule = random_em_rule(model, grid, rng)
    mech = Mechanism(rule, synthesize_payments(rule, model))
    assert revenue_objective(rule, model, uniform) == pytest.approx(
        expected_revenue_quadrature(mech, uniform).mean, abs=5e-3)


def test_optimal_additive_dominates_random_em_rules(unit, uniform, rng):
    grid = make_grid(unit, 21)
    model = AdditiveValues([1, 1], unit)
    best = revenue_objective(optimal_additive(uniform, [1, 1], grid), model, uniform)
    for _ in range(20):
        assert revenue_objective(random_em_rule(model, grid, rng), model, uniform) <= best + 1e-12
    assert revenue_objective(constant_rule(grid, [0.5, 0.5]), model, uniform) <= best
