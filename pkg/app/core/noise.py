"""Overhauser-field noise, correlation filter functions and the semiclassical coherence.

Sign convention: ln L(t) = -1/2 * level_gap^2 * Integral_0^t C(u) F_t(u) du, with
F_t(u) = 2 Integral_0^{t-u} y(s) y(s+u) ds. Static noise under a Hahn echo gives
L = 1 and free evolution decays.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import least_squares

from core.cce import bath_hamiltonian_parts, bath_hyperfine, generate_clusters, hermitian_eigh
from core.constants import DEFAULT_MAX_CLUSTER_DIM, DEFAULT_R_DIPOLE_A
from core.errors import InvalidArgumentError, NumericalFailureError
from core.logger import get_logger
from core.models import (
    BathConfiguration,
    CoherenceCurve,
    CorrelationFit,
    NoiseCorrelation,
    PulseSwitch,
    QubitModel,
)
from core.workers import WorkerPool

SIGN_CONVENTION = "ln L = -0.5 * level_gap**2 * integral_0^t C(u) F_t(u) du"

_MIN_FIT_SAMPLES = 8
_TAU_CEILING_MS = 1e6
_WEIGHT_FLOOR = 1e-300
_BATCH_ELEMENTS = 4_000_000


def cluster_correlation(
    hamiltonian: np.ndarray, eta: np.ndarray, times: np.ndarray
) -> np.ndarray:
    """(1/d) Re Tr[eta(t) eta(0)] under Heisenberg evolution with ``hamiltonian``."""
    energies, vectors = hermitian_eigh(hamiltonian)
    rotated = vectors.conj().T @ eta @ vectors
    weights = (np.abs(rotated) ** 2).ravel() / hamiltonian.shape[0]
    frequencies = (energies[:, None] - energies[None, :]).ravel()
    keep = weights > _WEIGHT_FLOOR
    weights, frequencies = weights[keep], frequencies[keep]

    result = np.empty(times.size)
    step = max(1, _BATCH_ELEMENTS // max(1, frequencies.size))
    for start in range(0, times.size, step):
        chunk = times[start : start + step]
        result[start : start + step] = np.cos(np.outer(chunk, frequencies)) @ weights
    return result


def overhauser_correlation(
    config: BathConfiguration,
    qubit: QubitModel,
    field: float,
    times: np.ndarray,
    order: int,
    r_dipole: float = DEFAULT_R_DIPOLE_A,
    condition_on: str = "a",
    secular_only: bool = False,
    max_dim: int = DEFAULT_MAX_CLUSTER_DIM,
    pool: Optional[WorkerPool] = None,
) -> NoiseCorrelation:
    if condition_on not in ("a", "b"):
        raise InvalidArgumentError(f"condition_on must be 'a' or 'b', got {condition_on!r}.")
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise InvalidArgumentError("Correlation lags must be non-negative.")

    cluster_set = generate_clusters(config, order, r_dipole)
    if not cluster_set.clusters:
        return NoiseCorrelation(times=times, values=np.zeros(times.size), level_gap=qubit.level_gap)

    hyperfine = bath_hyperfine(config, qubit)
    a_parallel = hyperfine[:, 2, 2]
    level = qubit.levels[0] if condition_on == "a" else qubit.levels[1]

    def evaluate(cluster: tuple[int, ...]) -> np.ndarray:
        bath, coupling, embedded = bath_hamiltonian_parts(
            cluster, config, qubit, field, secular_only, max_dim, hyperfine
        )
        eta = sum(a_parallel[index] * embedded[k][2] for k, index in enumerate(cluster))
        return cluster_correlation(bath + level * coupling, eta, times)

    ordered = cluster_set.ordered()
    raw = dict(zip(ordered, (pool or WorkerPool(1)).map(evaluate, ordered)))

    layers = config.layers
    total = np.zeros(times.size)
    parts: dict[str, np.ndarray] = {}
    irreducible: dict[tuple[int, ...], np.ndarray] = {}
    for cluster in ordered:
        contribution = raw[cluster].copy()
        for sub in cluster_set.subclusters.get(cluster, []):
            contribution -= irreducible[sub]
        irreducible[cluster] = contribution
        total += contribution

        order_key = f"order_{len(cluster)}"
        parts[order_key] = parts.get(order_key, np.zeros(times.size)) + contribution
        cluster_layers = {layers[i] for i in cluster}
        layer_key = f"layer_{cluster_layers.pop()}" if len(cluster_layers) == 1 else "layer_mixed"
        parts[layer_key] = parts.get(layer_key, np.zeros(times.size)) + contribution

    if not np.all(np.isfinite(total)):
        raise NumericalFailureError("Non-finite Overhauser correlation.")
    get_logger().info(
        "Overhauser correlation from %d clusters, C(0) = %.6g rad^2/ms^2",
        len(ordered),
        total[0] if times.size else float("nan"),
    )
    return NoiseCorrelation(times=times, values=total, level_gap=qubit.level_gap, parts=parts)


def correlation_sum_rule(config: BathConfiguration, qubit: QubitModel) -> float:
    """Closed form C(0) = sum_i A_zz,i^2 s_i (s_i + 1) / 3."""
    if len(config) == 0:
        return 0.0
    a_parallel = bath_hyperfine(config, qubit)[:, 2, 2]
    spins = np.array([spin.species.spin for spin in config.spins])
    return float(np.sum(a_parallel**2 * spins * (spins + 1) / 3.0))


def _switch_times(t: float, pulses: PulseSwitch) -> np.ndarray:
    switches = np.sort(pulses.times_at(t))
    if np.any(switches < 0) or np.any(switches > t):
        raise InvalidArgumentError("Pulse times must lie within [0, t].")
    return switches


def _y(s: np.ndarray, switches: np.ndarray) -> np.ndarray:
    return np.where(np.searchsorted(switches, s, side="right") % 2 == 0, 1.0, -1.0)


def filter_function(t: float, u, pulses: PulseSwitch):
    """Exact F_t(u) for a piecewise-constant switching function y."""
    scalar = np.ndim(u) == 0
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if t < 0:
        raise InvalidArgumentError(f"Total time must be non-negative, got {t}.")
    tolerance = 1e-12 * max(1.0, t)
    if np.any(u < -tolerance) or np.any(u > t + tolerance):
        raise InvalidArgumentError("Filter function requires 0 <= u <= t.")
    u = np.clip(u, 0.0, t)

    switches = _switch_times(t, pulses)
    upper = (t - u)[:, None]
    shifted = switches[None, :] - u[:, None]
    cuts = np.concatenate(
        [np.zeros_like(upper), upper, np.broadcast_to(switches, shifted.shape), shifted], axis=1
    )
    cuts = np.sort(np.clip(cuts, 0.0, upper), axis=1)
    widths = np.diff(cuts, axis=1)
    middles = 0.5 * (cuts[:, 1:] + cuts[:, :-1])
    products = _y(middles, switches) * _y(middles + u[:, None], switches)
    values = 2.0 * np.sum(widths * products, axis=1)
    return float(values[0]) if scalar else values


def _integration_nodes(t: float, grid: np.ndarray, switches: np.ndarray) -> np.ndarray:
    kinks = [grid[grid <= t], [0.0, t], switches, t - switches]
    if switches.size > 1:
        kinks.append(np.abs(switches[:, None] - switches[None, :]).ravel())
    nodes = np.unique(np.concatenate([np.asarray(k, dtype=float).ravel() for k in kinks]))
    return nodes[(nodes >= 0.0) & (nodes <= t)]


def semiclassical_coherence(
    correlation: NoiseCorrelation,
    pulses: PulseSwitch,
    times: np.ndarray,
) -> CoherenceCurve:
    times = np.asarray(times, dtype=float)
    grid = correlation.times
    if times.size and (grid.size == 0 or times.max() > grid[-1] * (1 + 1e-12)):
        raise InvalidArgumentError(
            "Correlation grid does not cover the requested evolution times."
        )
    if np.any(times < 0):
        raise InvalidArgumentError("Evolution times must be non-negative.")

    gap_sq = correlation.level_gap**2
    values = np.ones(times.size)
    for index, t in enumerate(times):
        if t == 0.0:
            continue
        switches = _switch_times(t, pulses)
        nodes = _integration_nodes(t, grid, switches)
        integrand = np.interp(nodes, grid, correlation.values) * filter_function(t, nodes, pulses)
        exponent = -0.5 * gap_sq * trapezoid(integrand, nodes)
        values[index] = np.exp(exponent)

    return CoherenceCurve(times=times, values=np.abs(values), raw=values.astype(complex))


def ornstein_uhlenbeck_hahn(times: np.ndarray, b: float, tau_c: float) -> np.ndarray:
    """Closed-form Hahn-echo coherence for C(t) = b^2 exp(-t / tau_c)."""
    x = np.asarray(times, dtype=float) / tau_c
    return np.exp(-(b * tau_c) ** 2 * (x - 3 + 4 * np.exp(-x / 2) - np.exp(-x)))


def fit_correlation_time(correlation: NoiseCorrelation) -> CorrelationFit:
    times = np.asarray(correlation.times, dtype=float)
    values = np.asarray(correlation.values, dtype=float)
    if times.size < _MIN_FIT_SAMPLES:
        raise InvalidArgumentError(
            f"Correlation fit needs at least {_MIN_FIT_SAMPLES} samples, got {times.size}."
        )
    if not np.isfinite(values[0]) or values[0] <= 0:
        raise InvalidArgumentError("C(0) must be finite and positive.")

    c0 = values[0]
    delta = (values - c0) / c0
    scale_t = times[-1] - times[0]
    t = (times - times[0]) / scale_t
    if delta.min() > -1e-9:
        get_logger().warning("Correlation does not decay on the grid; tau_C reported as infinite.")
        return CorrelationFit(b=0.0, tau_c=float("inf"), residual=0.0, decaying=False)

    plateau = delta[-1] if delta[-1] < 0 else delta.min()
    below = np.nonzero(delta <= (1 - np.exp(-1)) * plateau)[0]
    tau0 = t[below[0]] if below.size and t[below[0]] > 0 else 0.5
    dt = float(np.min(np.diff(t)))
    tau_hi = _TAU_CEILING_MS / scale_t

    def residuals(params: np.ndarray) -> np.ndarray:
        b, tau = params
        return b * b * (np.exp(-t / tau) - 1.0) - delta

    best = None
    for b0 in (1.0, np.sqrt(-plateau)):
        start = np.array([min(b0, np.sqrt(2.0)), np.clip(tau0, dt, tau_hi)])
        result = least_squares(
            residuals,
            start,
            bounds=([0.0, dt], [np.sqrt(2.0), tau_hi]),
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=2000,
        )
        if best is None or result.cost < best.cost:
            best = result
    if not best.success:
        raise NumericalFailureError(f"Correlation fit did not converge: {best.message}")

    b, tau = best.x
    tau_ms = tau * scale_t
    decaying = tau_ms < 0.999 * _TAU_CEILING_MS
    if not decaying:
        get_logger().warning("Correlation time hit the %.0e ms ceiling.", _TAU_CEILING_MS)
    return CorrelationFit(
        b=float(b * np.sqrt(c0)),
        tau_c=float(tau_ms) if decaying else float("inf"),
        residual=float(np.linalg.norm(best.fun) * c0),
        decaying=decaying,
    )
