"""Decay fits, bath decompositions, thickness sweeps and crossover search."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from core.cce import compute_coherence, ensemble_average, ensemble_coherence
from core.errors import InsufficientDecayError, InvalidArgumentError, NumericalFailureError
from core.logger import get_logger
from core.models import (
    HOST,
    BathConfiguration,
    CoherenceCurve,
    CrossoverResult,
    DecayFit,
    Decomposition,
    EngineSettings,
    EnsembleStatistics,
    PowerLawFit,
    QubitModel,
    SweepResult,
)
from core.workers import WorkerPool

DECAY_THRESHOLD = 0.8
FIT_WINDOW = (0.02, 0.98)
N_BOUNDS = (0.3, 6.0)
N_STARTS = (1.0, 2.0, 3.0)
COMPONENTS = ("host", "substrate", "total")

_MIN_WINDOW_POINTS = 3
_RESOLVED_LEVEL = 0.2
_MAX_GRID_ADJUSTMENTS = 6

ConfigurationSource = Callable[[float], Sequence[BathConfiguration]]


def crossing_time(times: np.ndarray, values: np.ndarray, level: float) -> float:
    below = np.flatnonzero(values <= level)
    if below.size == 0:
        return float("inf")
    k = int(below[0])
    if k == 0:
        return float(times[0])
    t0, t1, v0, v1 = times[k - 1], times[k], values[k - 1], values[k]
    return float(t0 + (v0 - level) * (t1 - t0) / (v0 - v1))


def fit_compressed_exponential(curve: CoherenceCurve) -> DecayFit:
    """Least-squares fit of exp[-(t / T2)^n] on the points with L in the fit window."""
    times = np.asarray(curve.times, dtype=float)
    values = np.asarray(curve.values, dtype=float)
    if times.size == 0 or values.min() > DECAY_THRESHOLD:
        raise InsufficientDecayError(
            f"Coherence never drops below {DECAY_THRESHOLD} on the time grid; extend t_max."
        )

    mask = (values >= FIT_WINDOW[0]) & (values <= FIT_WINDOW[1]) & (times > 0)
    if mask.sum() < _MIN_WINDOW_POINTS:
        raise InsufficientDecayError(
            f"Only {int(mask.sum())} samples inside the fit window; refine the time grid."
        )

    t_1e = crossing_time(times, values, np.exp(-1.0))
    scale = t_1e if np.isfinite(t_1e) and t_1e > 0 else float(times[mask][-1])
    x = times[mask] / scale
    y = values[mask]

    def residuals(params: np.ndarray) -> np.ndarray:
        t2, n = params
        return np.exp(-((x / t2) ** n)) - y

    lower, upper = np.array([1e-6, N_BOUNDS[0]]), np.array([1e6, N_BOUNDS[1]])
    starts = [np.array([1.0, n]) for n in N_STARTS]
    slope, intercept = np.polyfit(np.log(x), np.log(-np.log(y)), 1)
    if np.isfinite(slope) and slope > 0:
        starts.append(np.array([np.exp(-intercept / slope), slope]))

    best = None
    for start in starts:
        start = np.clip(start, lower * 1.000001, upper * 0.999999)
        result = least_squares(
            residuals,
            start,
            bounds=(lower, upper),
            xtol=1e-15,
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=5000,
        )
        if best is None or result.cost < best.cost:
            best = result
    if best.status <= 0:
        raise NumericalFailureError(
            f"Compressed-exponential fit did not converge (residual {np.linalg.norm(best.fun):.3g})."
        )

    t2, n = best.x
    bound_hit = bool(n <= N_BOUNDS[0] + 1e-9 or n >= N_BOUNDS[1] - 1e-9)
    if bound_hit:
        get_logger().warning("Compressed-exponential fit hit the n bound: n = %.4f", n)
    return DecayFit(
        T2=float(t2 * scale),
        n=float(n),
        residual=float(np.linalg.norm(best.fun)),
        window=(float(times[mask][0]), float(times[mask][-1])),
        t_1e=t_1e,
        bound_hit=bound_hit,
    )


def fit_or_undecayed(curve: CoherenceCurve) -> DecayFit:
    try:
        return fit_compressed_exponential(curve)
    except InsufficientDecayError:
        return DecayFit.undecayed((float(curve.times[0]), float(curve.times[-1])))


def ensemble_statistics(
    curves: Sequence[CoherenceCurve],
    ensemble: Optional[CoherenceCurve] = None,
    ensemble_fit: Optional[DecayFit] = None,
) -> EnsembleStatistics:
    """Fit of the ensemble curve next to mean and SD of the per-configuration fits.

    Configurations that never decay are left out of the mean and SD.
    """
    ensemble = ensemble if ensemble is not None else ensemble_average(curves)
    members = []
    for curve in curves:
        try:
            members.append(fit_compressed_exponential(curve))
        except InsufficientDecayError as exc:
            get_logger().info("Configuration seed %s not fitted: %s", curve.seed, exc)

    n_values = np.array([fit.n for fit in members])
    t2_values = np.array([fit.T2 for fit in members])
    ddof = 1 if len(members) > 1 else 0
    nan = float("nan")
    return EnsembleStatistics(
        ensemble_fit=ensemble_fit if ensemble_fit is not None else fit_compressed_exponential(ensemble),
        member_fits=tuple(members),
        n_mean=float(n_values.mean()) if members else nan,
        n_std=float(n_values.std(ddof=ddof)) if members else nan,
        T2_mean=float(t2_values.mean()) if members else nan,
        T2_std=float(t2_values.std(ddof=ddof)) if members else nan,
    )


def _group_labels(config: BathConfiguration, by: str) -> list[str]:
    if by == "layer":
        return [spin.layer for spin in config.spins]
    if by == "species":
        return [spin.species.name for spin in config.spins]
    raise InvalidArgumentError(f"Decomposition key must be 'layer' or 'species', got {by!r}.")


def species_decomposition(
    config: BathConfiguration,
    qubit: QubitModel,
    field: float,
    times: np.ndarray,
    settings: EngineSettings = EngineSettings(),
    by: str = "layer",
    pool: Optional[WorkerPool] = None,
) -> Decomposition:
    labels = _group_labels(config, by)
    groups = sorted(set(labels))

    parts = {}
    product = np.ones(np.asarray(times).size)
    for group in groups:
        subset = config.subset([k for k, label in enumerate(labels) if label == group])
        parts[group] = compute_coherence(subset, qubit, field, times, settings, pool)
        product = product * parts[group].values

    total = compute_coherence(config, qubit, field, times, settings, pool)
    deviation = float(np.max(np.abs(total.values - product))) if product.size else 0.0
    get_logger().info(
        "Decomposition by %s into %d sub-baths: max deviation %.3g", by, len(groups), deviation
    )
    return Decomposition(
        parts=parts,
        total=total,
        product=CoherenceCurve(times=total.times, values=product),
        max_deviation=deviation,
    )


def adaptive_coherence(
    evaluate: Callable[[np.ndarray], CoherenceCurve],
    t_max: float,
    points: int,
    max_adjustments: int = _MAX_GRID_ADJUSTMENTS,
) -> CoherenceCurve:
    """Rescale t_max until the decay is resolved on a ``points``-sample grid."""
    if t_max <= 0 or points < 2:
        raise InvalidArgumentError("Time grid needs t_max > 0 and at least two points.")
    min_window = max(2 * _MIN_WINDOW_POINTS, points // 10)
    direction = 0
    curve = evaluate(np.linspace(0.0, t_max, points))
    for _ in range(max_adjustments):
        values = curve.values
        window = int(np.sum((values >= FIT_WINDOW[0]) & (values <= FIT_WINDOW[1])))
        if values.min() > _RESOLVED_LEVEL and direction >= 0:
            step, direction = 2.0, 1
        elif values.min() < FIT_WINDOW[0] and window < min_window and direction <= 0:
            step, direction = 0.5, -1
        else:
            break
        t_max *= step
        get_logger().info("Adaptive time grid: t_max -> %.6g ms", t_max)
        curve = evaluate(np.linspace(0.0, t_max, points))
    return curve


def _split(config: BathConfiguration) -> dict[str, BathConfiguration]:
    host = [k for k, spin in enumerate(config.spins) if spin.layer == HOST]
    substrate = [k for k, spin in enumerate(config.spins) if spin.layer != HOST]
    return {"host": config.subset(host), "substrate": config.subset(substrate), "total": config}


def component_curves(
    configs: Sequence[BathConfiguration],
    qubit: QubitModel,
    field: float,
    settings: EngineSettings,
    t_max: dict[str, float],
    points: int,
    pool: Optional[WorkerPool] = None,
    components: Sequence[str] = COMPONENTS,
) -> dict[str, CoherenceCurve]:
    """Ensemble curves of the host-only, substrate-only and full baths.

    Each ensemble curve keeps its per-configuration curves in ``members``.

    ``t_max`` holds the starting grid length per component and is updated in
    place with the length that resolved each decay.
    """
    split = [_split(config) for config in configs]
    curves = {}
    for component in components:
        baths = [parts[component] for parts in split]
        if all(len(bath) == 0 for bath in baths):
            times = np.linspace(0.0, t_max[component], points)
            curves[component] = CoherenceCurve(times=times, values=np.ones(points))
            continue

        def evaluate(times: np.ndarray, baths=baths) -> CoherenceCurve:
            return ensemble_average(ensemble_coherence(baths, qubit, field, times, settings, pool))

        curves[component] = adaptive_coherence(evaluate, t_max[component], points)
        t_max[component] = float(curves[component].times[-1])
    return curves


def _violations(deltas: Sequence[float], values: Sequence[float], sign: float) -> list[float]:
    finite = [(d, v) for d, v in zip(deltas, values) if np.isfinite(v)]
    return [
        later[0]
        for earlier, later in zip(finite, finite[1:])
        if sign * (later[1] - earlier[1]) < 0
    ]


def local_extrema(deltas: Sequence[float], values: Sequence[float]) -> dict[str, list[float]]:
    maxima, minima = [], []
    for k in range(1, len(values) - 1):
        left, middle, right = values[k - 1], values[k], values[k + 1]
        if not all(np.isfinite([left, middle, right])):
            continue
        if middle > left and middle > right:
            maxima.append(float(deltas[k]))
        elif middle < left and middle < right:
            minima.append(float(deltas[k]))
    return {"maxima": maxima, "minima": minima}


def thickness_sweep(
    configurations_at: ConfigurationSource,
    deltas: Sequence[float],
    qubit: QubitModel,
    field: float,
    settings: EngineSettings,
    t_max: float,
    points: int,
    pool: Optional[WorkerPool] = None,
) -> SweepResult:
    deltas = tuple(float(d) for d in deltas)
    if not deltas:
        raise InvalidArgumentError("The sweep needs at least one host thickness.")
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise InvalidArgumentError("Sweep thicknesses must be strictly increasing.")

    logger = get_logger()
    grid = {component: float(t_max) for component in COMPONENTS}
    fits = {component: [] for component in COMPONENTS}
    statistics = []
    all_curves = []
    configurations = 0
    for delta in deltas:
        configs = list(configurations_at(delta))
        configurations = max(configurations, len(configs))
        curves = component_curves(configs, qubit, field, settings, grid, points, pool)
        all_curves.append(curves)
        at_delta = {}
        for component in COMPONENTS:
            curve = curves[component]
            at_delta[component] = ensemble_statistics(
                curve.members or (curve,), curve, ensemble_fit=fit_or_undecayed(curve)
            )
            fits[component].append(at_delta[component].ensemble_fit)
        statistics.append(at_delta)
        logger.info(
            "Delta %.3g nm: T2 host %.4g, substrate %.4g, total %.4g ms",
            delta,
            fits["host"][-1].T2,
            fits["substrate"][-1].T2,
            fits["total"][-1].T2,
        )

    host_t2 = [fit.T2 for fit in fits["host"]]
    sub_t2 = [fit.T2 for fit in fits["substrate"]]
    host_violations = _violations(deltas, host_t2, -1.0)
    sub_violations = _violations(deltas, sub_t2, 1.0)
    if host_violations or sub_violations:
        logger.warning(
            "Sweep monotonicity: host rises at %s, substrate falls at %s", host_violations, sub_violations
        )
    diagnostics = {
        "host_non_increasing": not host_violations,
        "substrate_non_decreasing": not sub_violations,
        "host_violations_nm": host_violations,
        "substrate_violations_nm": sub_violations,
        "total_extrema_nm": local_extrema(deltas, [fit.T2 for fit in fits["total"]]),
        "divergence_count": int(
            sum(curve.divergence_count for curves in all_curves for curve in curves.values())
        ),
    }
    return SweepResult(
        deltas=deltas,
        host=tuple(fits["host"]),
        substrate=tuple(fits["substrate"]),
        total=tuple(fits["total"]),
        configurations=configurations,
        diagnostics=diagnostics,
        curves=tuple(all_curves),
        statistics=tuple(statistics),
    )


def fit_power_law(
    sweep: SweepResult,
    fit_range: tuple[float, float],
    component: str = "substrate",
) -> PowerLawFit:
    if component not in COMPONENTS:
        raise InvalidArgumentError(f"Unknown sweep component {component!r}.")
    low, high = fit_range
    if low <= 0 or high <= low:
        raise InvalidArgumentError(f"Degenerate power-law range {fit_range}.")
    if low < sweep.deltas[0] or high > sweep.deltas[-1]:
        raise InvalidArgumentError(
            f"Power-law range {fit_range} lies outside the sweep [{sweep.deltas[0]}, {sweep.deltas[-1]}]."
        )

    fits = getattr(sweep, component)
    points = [
        (delta, fit.T2)
        for delta, fit in zip(sweep.deltas, fits)
        if low <= delta <= high and np.isfinite(fit.T2) and fit.T2 > 0
    ]
    if len(points) < 4:
        raise InvalidArgumentError(
            f"Power-law fit needs at least 4 finite points in {fit_range}, got {len(points)}."
        )

    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    (alpha, intercept), residuals, *_ = np.polyfit(x, y, 1, full=True)
    return PowerLawFit(
        alpha=float(alpha),
        prefactor=float(np.exp(intercept)),
        fit_range=(float(low), float(high)),
        residual=float(np.sqrt(residuals[0])) if len(residuals) else 0.0,
    )


def crossover_thickness(
    t2_at: Callable[[float], tuple[float, float]],
    delta_range: tuple[float, float],
    grid_points: int,
    resolution_nm: float,
) -> CrossoverResult:
    """Smallest host thickness where T2 of the host bath drops below T2 of the substrate bath.

    ``t2_at`` maps a thickness in nm to (T2_host, T2_substrate).
    """
    low, high = delta_range
    if low <= 0 or high <= low or grid_points < 2 or resolution_nm <= 0:
        raise InvalidArgumentError(
            "Crossover search needs 0 < low < high, two grid points and a positive resolution."
        )

    evaluations: list[tuple[float, float, float]] = []

    def host_limited(delta: float) -> bool:
        host, substrate = t2_at(delta)
        evaluations.append((float(delta), float(host), float(substrate)))
        return host < substrate

    previous = None
    for delta in np.geomspace(low, high, grid_points):
        if not host_limited(delta):
            previous = float(delta)
            continue
        if previous is None:
            return CrossoverResult(float(delta), (float(delta), float(delta)), True, tuple(evaluations))
        lo, hi = previous, float(delta)
        while hi - lo > resolution_nm:
            middle = float(np.sqrt(lo * hi))
            if host_limited(middle):
                hi = middle
            else:
                lo = middle
        get_logger().info("Crossover thickness %.4g nm in bracket [%.4g, %.4g]", hi, lo, hi)
        return CrossoverResult(hi, (lo, hi), True, tuple(evaluations))

    get_logger().warning("No crossover below %.4g nm", high)
    return CrossoverResult(None, (float(high), float("inf")), False, tuple(evaluations))


def crossover_evaluator(
    configurations_at: ConfigurationSource,
    qubit: QubitModel,
    field: float,
    settings: EngineSettings,
    t_max: float,
    points: int,
    pool: Optional[WorkerPool] = None,
) -> Callable[[float], tuple[float, float]]:
    grid = {component: float(t_max) for component in COMPONENTS}

    def t2_at(delta: float) -> tuple[float, float]:
        configs = list(configurations_at(delta))
        curves = component_curves(
            configs, qubit, field, settings, grid, points, pool, components=("host", "substrate")
        )
        return fit_or_undecayed(curves["host"]).T2, fit_or_undecayed(curves["substrate"]).T2

    return t2_at
