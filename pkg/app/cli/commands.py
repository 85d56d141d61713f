"""Command implementations behind ``app/main.py``.

Each command reads a validated RunConfig, drives the core through a worker
pool, writes its data files atomically and finishes with one manifest.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Iterator, Optional

import numpy as np

from core import __version__
from core.analysis import (
    crossing_time,
    crossover_evaluator,
    crossover_thickness,
    ensemble_statistics,
    fit_or_undecayed,
    fit_power_law,
    species_decomposition,
    thickness_sweep,
)
from core.cce import ensemble_average
from core.config import RunConfig, config_hash, load_config
from core.errors import ConfigError, InsufficientDecayError, VdwCoherenceError
from core.logger import attach_run_log, get_logger
from core.models import (
    HOST,
    BathConfiguration,
    CommandResult,
    CoherenceCurve,
    RunManifest,
    SiteTable,
)
from core.noise import SIGN_CONVENTION, fit_correlation_time, semiclassical_coherence
from core.persistence import (
    ProgressTracker,
    atomic_write_text,
    clear_error,
    read_coherence_csv,
    write_correlation_csv,
    write_coherence_csv,
    write_csv,
    write_error,
    write_long_csv,
    write_manifest,
    write_pair_csv,
    write_sweep_csv,
)
from core.pseudospin import dominant_pairs, pair_parameters, pair_tracks, pseudospin_coherence
from core.resources import available_materials
from core.solver import CCESolver, SemiclassicalSolver
from core.spinmodel import isotopes_by_element, load_isotopes
from core.structure import (
    assemble_stack,
    build_material,
    configuration_xyz,
    ensemble_seeds,
    sample_isotopes,
)
from core.workers import WorkerPool

COMMANDS = ("coherence", "noise", "pseudospin", "sweep", "crossover", "materials")
SCAN_HEADER = ["delta_nm", "b", "tau_C_ms", "residual", "T2_ms", "n"]


class RunContext:
    """Shared state of one command run: seeds, bath sampling, files and manifest."""

    def __init__(self, command: str, config: RunConfig, out_dir: Path, threads: int = 1) -> None:
        self.command = command
        self.config = config
        self.out_dir = Path(out_dir)
        self.pool = WorkerPool(threads)
        self.logger = get_logger()
        self.hash = config_hash(config)
        self.seeds = ensemble_seeds(config.ensemble.master_seed, config.ensemble.size)
        self.qubit = config.qubit_model()
        self.field = config.field.B_gauss
        self.settings = config.engine_settings()
        self._sites: dict[Optional[float], SiteTable] = {}
        self.manifest = RunManifest(
            config_hash=self.hash,
            code_version=__version__,
            command=command,
            seeds=list(self.seeds),
            parameters=self._parameters(),
        )

    def _parameters(self) -> dict[str, Any]:
        spec = self.config.heterostructure()
        return {
            "spec_hash": spec.spec_hash(),
            "B_gauss": self.field,
            "field_direction": "+z",
            "order": self.settings.order,
            "r_dipole_A": self.settings.r_dipole,
            "bath_radius_A": spec.bath_radius,
            "secular_only": self.settings.secular_only,
            "quadrupole": self.config.cce.quadrupole,
            "ensemble_size": self.config.ensemble.size,
            "master_seed": self.config.ensemble.master_seed,
            "config": self.config.model_dump(mode="json"),
        }

    def sites(self, delta_nm: Optional[float] = None) -> SiteTable:
        if delta_nm not in self._sites:
            self._sites[delta_nm] = assemble_stack(self.config.heterostructure(delta_nm))
        return self._sites[delta_nm]

    def configuration(self, seed: int, delta_nm: Optional[float] = None) -> BathConfiguration:
        return sample_isotopes(self.sites(delta_nm), seed, quadrupole=self.config.cce.quadrupole)

    def configurations_at(self, delta_nm: float) -> list[BathConfiguration]:
        return [self.configuration(seed, delta_nm) for seed in self.seeds]

    def path(self, name: str) -> Path:
        if name not in self.manifest.files:
            self.manifest.files.append(name)
        return self.out_dir / name

    @contextmanager
    def timed(self, label: str) -> Iterator[None]:
        started = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.timings[label] = round(time.perf_counter() - started, 6)

    def finish(self, message: str) -> CommandResult:
        clear_error(self.out_dir)
        write_manifest(self.out_dir, self.manifest)
        return CommandResult(True, message, status="ok", details=str(self.out_dir / "manifest.json"))


def _rms_to_1e(reference: CoherenceCurve, other: CoherenceCurve) -> float:
    t_1e = crossing_time(reference.times, reference.values, np.exp(-1.0))
    mask = reference.times <= t_1e
    return float(np.sqrt(np.mean((reference.values[mask] - other.values[mask]) ** 2)))


def _coherence_curves(run: RunContext, solver: CCESolver, times: np.ndarray) -> list[CoherenceCurve]:
    """Per-seed CCE curves; pending seeds are solved a pool-width batch at a time."""
    progress = ProgressTracker(run.out_dir, run.hash)
    curves: dict[int, CoherenceCurve] = {}
    resumed = []
    pending = []
    for seed in run.seeds:
        target = run.path(f"coherence_seed{seed}.csv")
        if progress.done(seed) and target.is_file():
            record = progress.record(seed)
            curve = read_coherence_csv(target, seed=seed)
            curves[seed] = replace(
                curve,
                divergence_count=int(record.get("divergence_count", 0)),
                clip_count=int(record.get("clip_count", 0)),
            )
            resumed.append(seed)
            run.path(f"structure_seed{seed}.xyz")
        else:
            pending.append(seed)

    batch = run.pool.threads
    for start in range(0, len(pending), batch):
        seeds = pending[start : start + batch]
        configs = [run.configuration(seed) for seed in seeds]
        for seed, config in zip(seeds, configs):
            atomic_write_text(run.path(f"structure_seed{seed}.xyz"), configuration_xyz(config))
        for seed, curve in zip(seeds, solver.coherence_many(configs, times)):
            write_coherence_csv(run.path(f"coherence_seed{seed}.csv"), curve)
            progress.mark(seed, divergence_count=curve.divergence_count, clip_count=curve.clip_count)
            curves[seed] = curve

    ordered = [curves[seed] for seed in run.seeds]
    divergence = sum(curve.divergence_count for curve in ordered)
    clipping = sum(curve.clip_count for curve in ordered)
    if resumed:
        run.logger.info("Resumed %d configurations from %s", len(resumed), run.out_dir)
    run.manifest.diagnostics.update(
        {"divergence_count": divergence, "clip_count": clipping, "resumed_seeds": resumed}
    )
    return ordered


def cmd_coherence(config: RunConfig, out_dir: Path, threads: int = 1) -> CommandResult:
    run = RunContext("coherence", config, out_dir, threads)
    times = config.times()
    solver = CCESolver(run.qubit, run.field, run.settings, run.pool)

    with run.timed("coherence"):
        curves = _coherence_curves(run, solver, times)
    ensemble = ensemble_average(curves)
    write_coherence_csv(run.path("coherence_ensemble.csv"), ensemble)
    series = {"ensemble": ensemble, **{f"seed_{curve.seed}": curve for curve in curves}}
    write_long_csv(run.path("figure_coherence.csv"), series)

    first = run.configuration(run.seeds[0])
    layers = set(first.layers)
    if HOST in layers and len(layers) > 1:
        with run.timed("decomposition"):
            parts = species_decomposition(
                first, run.qubit, run.field, times, run.settings, "layer", run.pool
            )
        write_long_csv(
            run.path("figure_decomposition.csv"),
            {**parts.parts, "total": parts.total, "product": parts.product},
        )
        run.manifest.diagnostics["decomposition_max_deviation"] = parts.max_deviation

    if config.cce.convergence_check:
        with run.timed("convergence"):
            higher = CCESolver(
                run.qubit, run.field, config.engine_settings(run.settings.order + 1), run.pool
            ).coherence(first, times)
        reference = curves[0]
        t_1e = crossing_time(reference.times, reference.values, np.exp(-1.0))
        mask = times <= t_1e
        run.manifest.diagnostics["order_convergence"] = {
            "orders": [run.settings.order, run.settings.order + 1],
            "max_abs_difference_to_1e": float(
                np.max(np.abs(reference.values[mask] - higher.values[mask]))
            ),
        }

    try:
        stats = ensemble_statistics(curves, ensemble)
    except InsufficientDecayError:
        run.manifest.results["fit"] = "insufficient decay"
        write_manifest(run.out_dir, run.manifest)
        raise
    run.manifest.results.update({"fit": stats.ensemble_fit.to_dict(), "statistics": stats.to_dict()})
    return run.finish(
        f"Ensemble T2 = {stats.ensemble_fit.T2:.4g} ms, n = {stats.ensemble_fit.n:.3f} "
        f"({len(curves)} configurations)."
    )


def cmd_noise(config: RunConfig, out_dir: Path, threads: int = 1) -> CommandResult:
    run = RunContext("noise", config, out_dir, threads)
    times = config.times()
    lag_max = config.noise.lag_t_max_ms or config.time.t_max_ms
    if lag_max < config.time.t_max_ms:
        raise ConfigError("noise.lag_t_max_ms must cover time.t_max_ms.")
    lags = np.linspace(0.0, lag_max, config.time.points)

    seed = run.seeds[0]
    bath = run.configuration(seed)
    semiclassical = SemiclassicalSolver(
        run.qubit,
        run.field,
        config.engine_settings(config.noise.order),
        pulses=config.pulse_switch(),
        condition_on=config.noise.condition_on,
        pool=run.pool,
    )
    with run.timed("correlation"):
        correlation = semiclassical.correlation(bath, lags)
    write_correlation_csv(run.path("correlation.csv"), correlation)
    fit = fit_correlation_time(correlation)

    semiclassical_curve = semiclassical_coherence(correlation, semiclassical.pulses, times)
    write_coherence_csv(run.path("coherence_semiclassical.csv"), semiclassical_curve)
    series = {"semiclassical": semiclassical_curve}

    if config.noise.compare_cce:
        with run.timed("cce"):
            curve = CCESolver(run.qubit, run.field, run.settings, run.pool).coherence(bath, times)
        write_coherence_csv(run.path("coherence_cce.csv"), curve)
        series["cce"] = curve
        run.manifest.results["rms_semiclassical_vs_cce_to_1e"] = _rms_to_1e(curve, semiclassical_curve)
    write_long_csv(run.path("figure_noise.csv"), series)

    scan = []
    for delta in config.noise.delta_scan_nm:
        with run.timed(f"correlation_{delta:g}nm"):
            scanned = semiclassical.correlation(run.configuration(seed, delta), lags)
        scan_fit = fit_correlation_time(scanned)
        decay = fit_or_undecayed(semiclassical_coherence(scanned, semiclassical.pulses, times)).to_dict()
        scan.append({"delta_nm": delta, **scan_fit.to_dict(), "T2_ms": decay["T2_ms"], "n": decay["n"]})
        write_correlation_csv(run.path(f"correlation_{delta:g}nm.csv"), scanned)
    if scan:
        write_csv(
            run.path("tau_c_scan.csv"),
            SCAN_HEADER,
            ({key: row[key] for key in SCAN_HEADER} for row in scan),
        )

    run.manifest.parameters["sign_convention"] = SIGN_CONVENTION
    run.manifest.parameters["pulses"] = config.noise.pulses
    run.manifest.parameters["condition_on"] = config.noise.condition_on
    run.manifest.results.update(
        {"correlation_fit": fit.to_dict(), "C0": float(correlation.values[0]), "tau_c_scan": scan}
    )
    tau = f"{fit.tau_c:.4g} ms" if fit.decaying else "infinite"
    return run.finish(f"Correlation time {tau}, b = {fit.b:.4g} rad/ms (seed {seed}).")


def cmd_pseudospin(config: RunConfig, out_dir: Path, threads: int = 1) -> CommandResult:
    run = RunContext("pseudospin", config, out_dir, threads)
    times = config.times()
    seed = run.seeds[0]
    bath = run.configuration(seed)

    scan = pair_parameters(bath, run.qubit, times=times, r_dipole=run.settings.r_dipole)
    curve = pseudospin_coherence(scan.pairs, times)
    top = dominant_pairs(scan.pairs, config.pseudospin.top_k)
    write_pair_csv(run.path("pairs.csv"), top)
    write_coherence_csv(run.path("coherence_pseudospin.csv"), curve)
    series = {"pseudospin": curve}
    run.manifest.diagnostics["skipped_pairs"] = scan.skipped
    run.manifest.results["pair_count"] = len(scan.pairs)
    run.manifest.parameters["contribution_metric"] = "max over the time grid of 1 - L_pair(t)"

    if config.pseudospin.compare_cce:
        secular = replace(run.settings, order=2, secular_only=True)
        with run.timed("cce_secular"):
            reference = CCESolver(run.qubit, run.field, secular, run.pool).coherence(bath, times)
        write_coherence_csv(run.path("coherence_cce_secular.csv"), reference)
        series["cce_secular"] = reference
        run.manifest.results["max_abs_difference_vs_cce"] = float(
            np.max(np.abs(reference.values - curve.values))
        )
    write_long_csv(run.path("figure_pseudospin.csv"), series)

    deltas = config.pseudospin.track_deltas_nm
    if deltas and top:
        with run.timed("tracks"):
            tracks = pair_tracks(lambda delta: run.configuration(seed, delta), deltas, run.qubit, top)
        rows = [
            {"rank": rank, "delta_nm": d, "omega_m1": omega, "delta": rate}
            for rank, track in enumerate(tracks, start=1)
            for d, omega, rate in zip(track.deltas, track.omega_m1, track.delta)
        ]
        write_csv(run.path("pair_tracks.csv"), ["rank", "delta_nm", "omega_m1", "delta"], rows)
        run.manifest.results["zero_crossings_nm"] = {
            str(rank): list(track.zero_crossings) for rank, track in enumerate(tracks, start=1)
        }

    return run.finish(f"{len(scan.pairs)} flip-flop pairs, {scan.skipped} skipped (seed {seed}).")


def cmd_sweep(config: RunConfig, out_dir: Path, threads: int = 1) -> CommandResult:
    if not config.sweep.deltas_nm:
        raise ConfigError("sweep.deltas_nm: at least one thickness is required")
    run = RunContext("sweep", config, out_dir, threads)
    with run.timed("sweep"):
        sweep = thickness_sweep(
            run.configurations_at,
            config.sweep.deltas_nm,
            run.qubit,
            run.field,
            run.settings,
            config.time.t_max_ms,
            config.time.points,
            run.pool,
        )
    write_sweep_csv(run.path("sweep.csv"), sweep)
    write_long_csv(
        run.path("figure_sweep_curves.csv"),
        {
            f"{delta:g}nm/{component}": curve
            for delta, curves in zip(sweep.deltas, sweep.curves)
            for component, curve in curves.items()
        },
    )
    run.manifest.diagnostics.update(sweep.diagnostics)
    run.manifest.results["fits"] = [
        {"delta_nm": d, "host": h.to_dict(), "substrate": s.to_dict(), "total": t.to_dict()}
        for d, h, s, t in zip(sweep.deltas, sweep.host, sweep.substrate, sweep.total)
    ]
    run.manifest.results["statistics"] = [
        {"delta_nm": d, **{component: stats.to_dict() for component, stats in at_delta.items()}}
        for d, at_delta in zip(sweep.deltas, sweep.statistics)
    ]

    message = (
        f"Sweep over {len(sweep.deltas)} thicknesses "
        f"({sweep.configurations} configurations each)."
    )
    if config.sweep.power_law_range_nm is not None:
        power = fit_power_law(sweep, config.sweep.power_law_range_nm, config.sweep.power_law_component)
        run.manifest.results["power_law"] = {
            "alpha": power.alpha,
            "prefactor_ms": power.prefactor,
            "fit_range_nm": list(power.fit_range),
            "component": config.sweep.power_law_component,
            "residual": power.residual,
        }
        message += f" alpha = {power.alpha:.3f}."
    return run.finish(message)


def cmd_crossover(config: RunConfig, out_dir: Path, threads: int = 1) -> CommandResult:
    if config.stack.substrate_below is None and config.stack.substrate_above is None:
        raise ConfigError("stack: the crossover search needs a substrate layer")
    run = RunContext("crossover", config, out_dir, threads)
    resolution = config.crossover.resolution_nm or config.host_spacing_nm()
    evaluate = crossover_evaluator(
        run.configurations_at,
        run.qubit,
        run.field,
        run.settings,
        config.time.t_max_ms,
        config.time.points,
        run.pool,
    )
    with run.timed("crossover"):
        result = crossover_thickness(
            evaluate,
            (config.crossover.delta_min_nm, config.crossover.delta_max_nm),
            config.crossover.grid_points,
            resolution,
        )
    write_csv(
        run.path("crossover.csv"),
        ["delta_nm", "T2_host_ms", "T2_sub_ms"],
        (
            {"delta_nm": d, "T2_host_ms": host, "T2_sub_ms": sub}
            for d, host, sub in sorted(result.evaluations)
        ),
    )
    run.manifest.parameters["resolution_nm"] = resolution
    run.manifest.results["crossover"] = {
        "delta_nm": result.delta_nm,
        "bracket_nm": list(result.bracket),
        "in_range": result.in_range,
    }
    if not result.in_range:
        return run.finish(
            f"No crossover up to {config.crossover.delta_max_nm:g} nm; bracket {result.bracket}."
        )
    return run.finish(f"Host bath dominates from {result.delta_nm:.4g} nm (bracket {result.bracket}).")


def cmd_materials_list(name: Optional[str] = None) -> CommandResult:
    table = load_isotopes()
    if name is not None:
        if name not in available_materials():
            raise ConfigError(
                f"Unknown material {name!r}; available: {', '.join(available_materials())}."
            )
        material = build_material(name, table)
        return CommandResult(
            True, f"Material {name}", status="ok", details=json.dumps(material.to_dict(), indent=2)
        )

    lines = ["Materials:"]
    lines += [f"  {material}" for material in available_materials()]
    lines.append("Isotopes (name, spin, gamma rad/ms/G, abundance, Q barn):")
    for _, species in sorted(isotopes_by_element(table).items()):
        for sp in species:
            moment = "-" if sp.quadrupole_moment is None else f"{sp.quadrupole_moment:g}"
            lines.append(
                f"  {sp.name:<6} {sp.spin:<4g} {sp.gamma:<12.6g} {sp.abundance:<8.6g} {moment}"
            )
    return CommandResult(
        True, f"{len(available_materials())} materials", status="ok", details="\n".join(lines)
    )


_DISPATCH: dict[str, Callable[[RunConfig, Path, int], CommandResult]] = {
    "coherence": cmd_coherence,
    "noise": cmd_noise,
    "pseudospin": cmd_pseudospin,
    "sweep": cmd_sweep,
    "crossover": cmd_crossover,
}


def execute(
    command: str,
    config_path: Optional[Path] = None,
    out_dir: Optional[Path] = None,
    threads: int = 1,
    seed: Optional[int] = None,
    verbose: bool = False,
    name: Optional[str] = None,
) -> CommandResult:
    """Run one command and turn any failure into a CommandResult with an exit code."""
    logger = get_logger()
    if out_dir is not None:
        attach_run_log(Path(out_dir), verbose)
    try:
        if command == "materials":
            return cmd_materials_list(name)
        if command not in _DISPATCH:
            raise ConfigError(f"Unknown command {command!r}; choose from {', '.join(COMMANDS)}.")
        if config_path is None:
            raise ConfigError(f"The {command} command needs --config.")
        config = load_config(config_path, seed_override=seed)
        logger.info("Running %s with %s into %s", command, config_path, out_dir)
        return _DISPATCH[command](config, Path(out_dir), threads)
    except VdwCoherenceError as exc:
        logger.error("%s failed: %s", command, exc)
        return _failure(out_dir, exc)
    except Exception as exc:
        logger.exception("%s failed unexpectedly", command)
        return _failure(out_dir, VdwCoherenceError(f"{type(exc).__name__}: {exc}"))


def _failure(out_dir: Optional[Path], exc: VdwCoherenceError) -> CommandResult:
    payload = write_error(out_dir, exc)
    return CommandResult(
        False,
        str(exc),
        status=payload["error"],
        details=json.dumps(payload),
        exit_code=exc.exit_code,
    )
