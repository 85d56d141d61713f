import numpy as np
import pytest
from scipy.integrate import quad

from core.errors import InvalidArgumentError
from core.models import NoiseCorrelation, PulseSwitch
from core.noise import (
    correlation_sum_rule,
    filter_function,
    fit_correlation_time,
    ornstein_uhlenbeck_hahn,
    overhauser_correlation,
    semiclassical_coherence,
)

from conftest import C13, FIELD, MO95, N14, make_bath, random_quadrupole


def _quad_filter(t, u, pulses):
    switches = np.sort(pulses.times_at(t))

    def y(s):
        return -1.0 if np.searchsorted(switches, s, side="right") % 2 else 1.0

    breaks = [p for p in np.concatenate([switches, switches - u]) if 0.0 < p < t - u]
    value, _ = quad(lambda s: y(s) * y(s + u), 0.0, t - u, points=breaks or None, limit=200, epsabs=1e-13)
    return 2.0 * value


@pytest.mark.parametrize(
    "pulses", [PulseSwitch.free(), PulseSwitch.hahn(), PulseSwitch.cpmg(2), PulseSwitch.cpmg(3)]
)
def test_filter_function_matches_quadrature(pulses):
    t = 3.7
    grid = np.random.default_rng(5).uniform(0.0, t, 1000)
    exact = filter_function(t, grid, pulses)
    oracle = np.array([_quad_filter(t, u, pulses) for u in grid])
    np.testing.assert_allclose(exact, oracle, atol=1e-9)


def test_filter_function_edges():
    hahn = PulseSwitch.hahn()
    assert filter_function(2.0, 0.0, hahn) == pytest.approx(4.0)
    assert filter_function(2.0, 2.0, hahn) == pytest.approx(0.0)
    assert filter_function(2.0, 1.0, hahn) == pytest.approx(-2.0)
    assert isinstance(filter_function(2.0, 0.5, hahn), float)
    with pytest.raises(InvalidArgumentError):
        filter_function(2.0, 2.5, hahn)


def test_static_noise_is_refocused_by_the_echo():
    lags = np.linspace(0.0, 10.0, 101)
    static = NoiseCorrelation(times=lags, values=np.full(lags.size, 3.0))
    times = np.linspace(0.0, 10.0, 41)
    echo = semiclassical_coherence(static, PulseSwitch.hahn(), times)
    np.testing.assert_allclose(echo.values, 1.0, atol=1e-10)

    free = semiclassical_coherence(static, PulseSwitch.free(), times)
    np.testing.assert_allclose(free.values, np.exp(-0.5 * 3.0 * times**2), rtol=1e-10)


def test_ornstein_uhlenbeck_hahn_echo():
    b, tau_c = 1.3, 2.0
    lags = np.linspace(0.0, 8.0, 8001)
    correlation = NoiseCorrelation(times=lags, values=b**2 * np.exp(-lags / tau_c))
    times = np.linspace(0.0, 8.0, 33)
    curve = semiclassical_coherence(correlation, PulseSwitch.hahn(), times)
    np.testing.assert_allclose(curve.values, ornstein_uhlenbeck_hahn(times, b, tau_c), atol=1e-5)


def test_ornstein_uhlenbeck_limits():
    t = np.array([0.5, 1.0])
    slow = ornstein_uhlenbeck_hahn(t, 1.0, 1e3)
    # tau_c >> t gives exp(-b^2 t^3 / (12 tau_c)).
    np.testing.assert_allclose(np.log(slow), -(t**3) / (12 * 1e3), rtol=1e-3)


def test_semiclassical_grid_must_cover_times():
    correlation = NoiseCorrelation(times=np.linspace(0.0, 1.0, 11), values=np.ones(11))
    with pytest.raises(InvalidArgumentError):
        semiclassical_coherence(correlation, PulseSwitch.hahn(), np.array([0.0, 2.0]))


def test_sum_rule(rng, qubit):
    entries = []
    for k in range(6):
        sp = (C13, N14, MO95)[k % 3]
        quadrupole = random_quadrupole(rng) if sp.spin >= 1 else np.zeros((3, 3))
        entries.append((sp, (3.0 * k - 7.0, rng.uniform(-1, 1), 4.0 + k), "host", quadrupole))
    bath = make_bath(entries)
    correlation = overhauser_correlation(bath, qubit, FIELD, np.linspace(0.0, 1.0, 11), order=2, r_dipole=5.0)
    assert correlation.values[0] == pytest.approx(correlation_sum_rule(bath, qubit), rel=1e-8)
    assert {"order_1", "order_2", "layer_host"} <= set(correlation.parts)
    np.testing.assert_allclose(correlation.parts["order_1"][0], correlation.values[0], rtol=1e-10)


def test_isolated_spin_gives_constant_correlation(qubit):
    bath = make_bath([(C13, (2.0, 1.0, 5.0), "host")])
    lags = np.linspace(0.0, 5.0, 21)
    correlation = overhauser_correlation(bath, qubit, FIELD, lags, order=1)
    np.testing.assert_allclose(correlation.values, correlation.values[0], rtol=1e-12)
    fit = fit_correlation_time(correlation)
    assert not fit.decaying
    assert fit.tau_c == float("inf")


def test_empty_bath_has_zero_correlation(qubit):
    correlation = overhauser_correlation(make_bath([]), qubit, FIELD, np.linspace(0.0, 1.0, 5), order=2)
    np.testing.assert_array_equal(correlation.values, 0.0)


def test_condition_on_is_validated(qubit):
    with pytest.raises(InvalidArgumentError):
        overhauser_correlation(make_bath([]), qubit, FIELD, np.zeros(1), order=1, condition_on="c")


def test_fit_recovers_exponential_correlation():
    lags = np.linspace(0.0, 20.0, 201)
    correlation = NoiseCorrelation(times=lags, values=4.0 * np.exp(-lags / 2.5))
    fit = fit_correlation_time(correlation)
    assert fit.decaying
    assert fit.tau_c == pytest.approx(2.5, rel=1e-6)
    assert fit.b == pytest.approx(2.0, rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_fit_tolerates_one_percent_noise(seed):
    lags = np.linspace(0.0, 30.0, 301)
    exact = 4.0 * np.exp(-lags / 5.0)
    noisy = exact + np.random.default_rng(seed).normal(0.0, 0.01 * exact[0], lags.size)
    fit = fit_correlation_time(NoiseCorrelation(times=lags, values=noisy))
    assert fit.decaying
    assert fit.tau_c == pytest.approx(5.0, rel=0.05)


def test_fit_needs_enough_samples():
    correlation = NoiseCorrelation(times=np.linspace(0.0, 1.0, 4), values=np.ones(4))
    with pytest.raises(InvalidArgumentError):
        fit_correlation_time(correlation)

