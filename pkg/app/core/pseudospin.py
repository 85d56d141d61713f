"""Analytic pair model of the Hahn echo.

A flip-flopping same-species spin-1/2 pair is a two-level pseudospin with
splitting omega_m1 = A_zz,i - A_zz,j in qubit level -1 and flip rate delta.
Its echo factor is 1 - kappa sin^2(Omega t / 4) sin^2(delta t / 4) with
Omega = sqrt(omega_m1^2 + delta^2).
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from core.cce import bath_hyperfine, generate_clusters
from core.constants import DEFAULT_R_DIPOLE_A
from core.errors import InvalidArgumentError
from core.logger import get_logger
from core.models import (
    BathConfiguration,
    CoherenceCurve,
    PairScan,
    PairTrack,
    QubitModel,
    SpinPair,
)
from core.spinmodel import dipolar_tensor, flip_rate


def _is_flip_flop_pair(config: BathConfiguration, i: int, j: int) -> bool:
    first, second = config.spins[i].species, config.spins[j].species
    return first.name == second.name and first.spin == 0.5


def _factor(omega: float, delta: float, kappa: float, times: np.ndarray) -> np.ndarray:
    big = np.hypot(omega, delta)
    return 1.0 - kappa * np.sin(big * times / 4) ** 2 * np.sin(delta * times / 4) ** 2


def pair_parameters(
    config: BathConfiguration,
    qubit: QubitModel,
    pairs: Optional[Iterable[tuple[int, int]]] = None,
    times: Optional[np.ndarray] = None,
    r_dipole: float = DEFAULT_R_DIPOLE_A,
) -> PairScan:
    """Pseudospin parameters of each pair; ``pairs=None`` takes every pair within ``r_dipole``."""
    if qubit.levels[0] != 0:
        raise InvalidArgumentError("The pair model needs qubit level a = 0.")
    if pairs is None:
        pairs = generate_clusters(config, 2, r_dipole).clusters.get(2, [])
    pairs = [tuple(sorted((int(i), int(j)))) for i, j in pairs]
    if not pairs:
        return PairScan(pairs=[], skipped=0)

    a_parallel = bath_hyperfine(config, qubit)[:, 2, 2]
    window = None if times is None else np.asarray(times, dtype=float)
    result: list[SpinPair] = []
    skipped = 0
    for i, j in pairs:
        if i == j or not _is_flip_flop_pair(config, i, j):
            skipped += 1
            continue
        first, second = config.spins[i], config.spins[j]
        r_vec = second.position - first.position
        tensor = dipolar_tensor(r_vec, first.species.gamma, second.species.gamma)
        omega = float(a_parallel[i] - a_parallel[j])
        delta = flip_rate(tensor)
        denominator = omega**2 + delta**2
        kappa = omega**2 / denominator if denominator > 0 else 0.0
        contribution = 0.0
        if window is not None and window.size:
            contribution = float(np.max(1.0 - _factor(omega, delta, kappa, window)))
        r_ij = float(np.linalg.norm(r_vec))
        result.append(
            SpinPair(
                i=i,
                j=j,
                omega_m1=omega,
                delta=delta,
                kappa=kappa,
                contribution=min(max(contribution, 0.0), kappa),
                r_ij=r_ij,
                theta_deg=float(np.degrees(np.arccos(np.clip(abs(r_vec[2]) / r_ij, 0.0, 1.0)))),
                keys=(first.key, second.key),
            )
        )

    if skipped:
        get_logger().info("Pair model skipped %d pairs without flip-flop symmetry", skipped)
    return PairScan(pairs=result, skipped=skipped)


def pair_coherence(pair: SpinPair, times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise InvalidArgumentError("Evolution times must be non-negative.")
    return _factor(pair.omega_m1, pair.delta, pair.kappa, times)


def pseudospin_coherence(pairs: Sequence[SpinPair], times: np.ndarray) -> CoherenceCurve:
    times = np.asarray(times, dtype=float)
    values = np.ones(times.size)
    for pair in pairs:
        values = values * pair_coherence(pair, times)
    return CoherenceCurve(times=times, values=values, raw=values.astype(complex))


def dominant_pairs(
    pairs: Sequence[SpinPair], k: int, window: Optional[np.ndarray] = None
) -> list[SpinPair]:
    if k < 1:
        raise InvalidArgumentError(f"k must be at least 1, got {k}.")
    if window is not None:
        window = np.asarray(window, dtype=float)
        pairs = [
            replace(p, contribution=min(float(np.max(1.0 - pair_coherence(p, window))), p.kappa))
            for p in pairs
        ]
    return sorted(pairs, key=lambda p: (-p.contribution, p.i, p.j))[:k]


def zero_crossings(x: np.ndarray, y: np.ndarray) -> tuple[float, ...]:
    crossings = []
    for k in range(len(x) - 1):
        y0, y1 = y[k], y[k + 1]
        if not (np.isfinite(y0) and np.isfinite(y1)):
            continue
        if y0 == 0.0:
            crossings.append(float(x[k]))
        elif y0 * y1 < 0:
            crossings.append(float(x[k] - y0 * (x[k + 1] - x[k]) / (y1 - y0)))
    if len(y) and y[-1] == 0.0:
        crossings.append(float(x[-1]))
    return tuple(crossings)


def pair_tracks(
    configuration_at: Callable[[float], BathConfiguration],
    deltas: Sequence[float],
    qubit: QubitModel,
    tracked: Sequence[SpinPair],
) -> list[PairTrack]:
    """Follow pairs by site key across host thicknesses; missing spins give NaN."""
    deltas = np.asarray(deltas, dtype=float)
    omegas = np.full((len(tracked), deltas.size), np.nan)
    rates = np.full((len(tracked), deltas.size), np.nan)

    for column, thickness in enumerate(deltas):
        config = configuration_at(float(thickness))
        index = {spin.key: n for n, spin in enumerate(config.spins)}
        located = [(row, index.get(p.keys[0]), index.get(p.keys[1])) for row, p in enumerate(tracked)]
        present = [(row, i, j) for row, i, j in located if i is not None and j is not None]
        if not present:
            continue
        scan = pair_parameters(config, qubit, [(i, j) for _, i, j in present])
        by_indices = {(p.i, p.j): p for p in scan.pairs}
        for row, i, j in present:
            pair = by_indices.get(tuple(sorted((i, j))))
            if pair is None:
                continue
            # omega sign follows the tracked key order.
            sign = 1.0 if config.spins[pair.i].key == tracked[row].keys[0] else -1.0
            omegas[row, column] = sign * pair.omega_m1
            rates[row, column] = pair.delta

    return [
        PairTrack(
            keys=pair.keys,
            deltas=deltas,
            omega_m1=omegas[row],
            delta=rates[row],
            zero_crossings=zero_crossings(deltas, omegas[row]),
        )
        for row, pair in enumerate(tracked)
    ]
