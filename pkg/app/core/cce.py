"""Cluster correlation expansion of the Hahn-echo coherence function.

Conventions: ``times`` is the total evolution time t = 2 tau in ms; the bath
starts in the infinite-temperature state Identity / d; the pi pulse is ideal.
"""

from __future__ import annotations

from itertools import combinations
from math import prod
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from core.constants import CLIP_CEILING, DIVISOR_FLOOR, EXCLUSION_RADIUS_A
from core.errors import (
    ClusterTooLargeError,
    DegenerateGeometryError,
    InvalidArgumentError,
    NumericalFailureError,
)
from core.logger import get_logger
from core.models import (
    BathConfiguration,
    ClusterSet,
    CoherenceCurve,
    ConditionalPair,
    EngineSettings,
    QubitModel,
)
from core.spinmodel import (
    coupling_constant,
    dipolar_tensor,
    dipole_tensors,
    quadrupole_term,
    spin_operators,
    zeeman_term,
)
from core.workers import WorkerPool

# Upper bound on time points x d^2 held in memory per propagator batch.
_BATCH_ELEMENTS = 2_000_000


def generate_clusters(config: BathConfiguration, order: int, r_dipole: float) -> ClusterSet:
    if order < 1:
        raise InvalidArgumentError(f"CCE order must be at least 1, got {order}.")
    if r_dipole <= 0:
        raise InvalidArgumentError(f"r_dipole must be positive, got {r_dipole}.")

    n_spins = len(config)
    if n_spins == 0:
        return ClusterSet(order=order, r_dipole=r_dipole, clusters={}, subclusters={})

    neighbors: list[set[int]] = [set() for _ in range(n_spins)]
    if n_spins > 1:
        for i, j in cKDTree(config.positions).query_pairs(r_dipole, output_type="ndarray"):
            neighbors[i].add(int(j))
            neighbors[j].add(int(i))

    clusters: dict[int, list[tuple[int, ...]]] = {1: [(i,) for i in range(n_spins)]}
    current = clusters[1]
    for size in range(2, order + 1):
        grown: set[tuple[int, ...]] = set()
        for cluster in current:
            members = set(cluster)
            frontier = set().union(*(neighbors[i] for i in cluster)) - members
            for candidate in frontier:
                grown.add(tuple(sorted(members | {candidate})))
        if not grown:
            break
        current = sorted(grown)
        clusters[size] = current

    known = {cluster for group in clusters.values() for cluster in group}
    subclusters = {}
    for size, group in clusters.items():
        for cluster in group:
            subclusters[cluster] = [
                sub
                for sub_size in range(1, size)
                for sub in combinations(cluster, sub_size)
                if sub in known
            ]

    get_logger().info(
        "Clusters up to order %d (r_dipole %.2f A): %s",
        order,
        r_dipole,
        ", ".join(f"{size}:{len(group)}" for size, group in sorted(clusters.items())),
    )
    return ClusterSet(order=order, r_dipole=r_dipole, clusters=clusters, subclusters=subclusters)


def bath_hyperfine(config: BathConfiguration, qubit: QubitModel) -> np.ndarray:
    """Point-dipole hyperfine tensors of every bath spin, shape (N, 3, 3)."""
    if len(config) == 0:
        return np.zeros((0, 3, 3))
    r_vecs = config.positions - np.asarray(qubit.position, dtype=float)
    distance = np.linalg.norm(r_vecs, axis=1)
    if np.any(distance <= EXCLUSION_RADIUS_A):
        index = int(np.argmin(distance))
        raise DegenerateGeometryError(
            f"Bath spin {index} lies inside the {EXCLUSION_RADIUS_A} A exclusion radius."
        )
    return dipole_tensors(r_vecs, coupling_constant(qubit.gamma_e, config.gammas))


def _embedded_operators(dims: list[int], ops) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    embedded = []
    for k, spin_ops in enumerate(ops):
        left = np.eye(prod(dims[:k]))
        right = np.eye(prod(dims[k + 1 :]))
        embedded.append(
            tuple(np.kron(np.kron(left, op), right) for op in (spin_ops.x, spin_ops.y, spin_ops.z))
        )
    return embedded


def _embed(k: int, dims: list[int], local: np.ndarray) -> np.ndarray:
    return np.kron(np.kron(np.eye(prod(dims[:k])), local), np.eye(prod(dims[k + 1 :])))


def bath_hamiltonian_parts(
    cluster: Sequence[int],
    config: BathConfiguration,
    qubit: QubitModel,
    field: float,
    secular_only: bool = False,
    max_dim: int = 4096,
    hyperfine: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, list]:
    """Qubit-independent bath Hamiltonian, unit hyperfine coupling S_z = 1, and embedded I operators."""
    spins = [config.spins[i] for i in cluster]
    ops = [spin_operators(spin.species.spin) for spin in spins]
    dims = [o.dimension for o in ops]
    dimension = prod(dims)
    if dimension > max_dim:
        raise ClusterTooLargeError(
            f"Cluster {tuple(cluster)} has Hilbert dimension {dimension} > {max_dim}."
        )

    embedded = _embedded_operators(dims, ops)
    bath = np.zeros((dimension, dimension), dtype=complex)
    coupling = np.zeros((dimension, dimension), dtype=complex)
    for k, (index, spin) in enumerate(zip(cluster, spins)):
        local = zeeman_term(spin.species.gamma, field, ops[k])
        if np.any(spin.quadrupole):
            local = local + quadrupole_term(spin.quadrupole, ops[k])
        bath += _embed(k, dims, local)

        if hyperfine is not None:
            tensor = hyperfine[index]
        else:
            tensor = bath_hyperfine(config.subset([index]), qubit)[0]
        row = tensor[2]
        ix, iy, iz = embedded[k]
        if secular_only:
            coupling += row[2] * iz
        else:
            coupling += row[0] * ix + row[1] * iy + row[2] * iz

    for k, l in combinations(range(len(spins)), 2):
        tensor = dipolar_tensor(
            spins[l].position - spins[k].position,
            spins[k].species.gamma,
            spins[l].species.gamma,
        )
        first, second = embedded[k], embedded[l]
        if secular_only:
            bath += tensor[2, 2] * first[2] @ second[2]
            if spins[k].species.name == spins[l].species.name:
                flip = 0.5 * (tensor[0, 0] + tensor[1, 1])
                bath += flip * (first[0] @ second[0] + first[1] @ second[1])
        else:
            for a in range(3):
                for b in range(3):
                    bath += tensor[a, b] * first[a] @ second[b]

    return bath, coupling, embedded


def conditional_hamiltonians(
    cluster: Sequence[int],
    config: BathConfiguration,
    qubit: QubitModel,
    field: float,
    secular_only: bool = False,
    max_dim: int = 4096,
    hyperfine: Optional[np.ndarray] = None,
) -> ConditionalPair:
    for index in cluster:
        if not 0 <= index < len(config):
            raise InvalidArgumentError(f"Cluster refers to missing spin {index}.")
    bath, coupling, _ = bath_hamiltonian_parts(
        cluster, config, qubit, field, secular_only, max_dim, hyperfine
    )
    level_a, level_b = qubit.levels
    return ConditionalPair(h_a=bath + level_a * coupling, h_b=bath + level_b * coupling)


def hermitian_eigh(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    energies, vectors = np.linalg.eigh(matrix)
    if not np.all(np.isfinite(energies)):
        raise NumericalFailureError("Non-finite eigenvalues in a cluster Hamiltonian.")
    return energies, vectors


def _propagators(energies: np.ndarray, vectors: np.ndarray, tau: np.ndarray) -> np.ndarray:
    phases = np.exp(-1j * np.outer(tau, energies))
    return np.einsum("ij,tj,kj->tik", vectors, phases, vectors.conj(), optimize=True)


def cluster_coherence(pair: ConditionalPair, times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise InvalidArgumentError("Evolution times must be non-negative.")

    energies_a, vectors_a = hermitian_eigh(pair.h_a)
    energies_b, vectors_b = hermitian_eigh(pair.h_b)
    dimension = pair.dimension
    tau = 0.5 * times

    result = np.empty(times.size, dtype=complex)
    step = max(1, _BATCH_ELEMENTS // (dimension * dimension))
    for start in range(0, times.size, step):
        chunk = slice(start, start + step)
        u_a = _propagators(energies_a, vectors_a, tau[chunk])
        u_b = _propagators(energies_b, vectors_b, tau[chunk])
        w_a = u_b @ u_a
        w_b = u_a @ u_b
        result[chunk] = np.einsum("tij,tij->t", w_b.conj(), w_a) / dimension
    if not np.all(np.isfinite(result)):
        raise NumericalFailureError("Non-finite cluster coherence.")
    return result


def cce_product(
    coherences: dict[tuple[int, ...], np.ndarray],
    cluster_set: ClusterSet,
    times: np.ndarray,
) -> CoherenceCurve:
    times = np.asarray(times, dtype=float)
    total = np.ones(times.size, dtype=complex)
    irreducible: dict[tuple[int, ...], np.ndarray] = {}
    divergence = 0

    for cluster in cluster_set.ordered():
        value = np.asarray(coherences[cluster], dtype=complex)
        divisor = np.ones(times.size, dtype=complex)
        for sub in cluster_set.subclusters.get(cluster, []):
            divisor = divisor * irreducible[sub]
        dead = np.abs(divisor) < DIVISOR_FLOOR
        contribution = np.ones(times.size, dtype=complex)
        contribution[~dead] = value[~dead] / divisor[~dead]
        divergence += int(dead.sum())
        irreducible[cluster] = contribution
        total *= contribution

    magnitude = np.abs(total)
    clipped = magnitude > CLIP_CEILING
    magnitude = np.minimum(magnitude, CLIP_CEILING)
    if divergence or clipped.any():
        get_logger().warning(
            "CCE product: %d divergent factors, %d clipped points", divergence, int(clipped.sum())
        )
    return CoherenceCurve(
        times=times,
        values=magnitude,
        raw=total,
        divergence_count=divergence,
        clip_count=int(clipped.sum()),
    )


def compute_coherence(
    config: BathConfiguration,
    qubit: QubitModel,
    field: float,
    times: np.ndarray,
    settings: EngineSettings = EngineSettings(),
    pool: Optional[WorkerPool] = None,
) -> CoherenceCurve:
    return ensemble_coherence([config], qubit, field, times, settings, pool)[0]


def ensemble_coherence(
    configs: Sequence[BathConfiguration],
    qubit: QubitModel,
    field: float,
    times: np.ndarray,
    settings: EngineSettings = EngineSettings(),
    pool: Optional[WorkerPool] = None,
) -> list[CoherenceCurve]:
    """CCE coherence of several configurations from one pool over (configuration, cluster).

    Results are reduced per configuration in cluster order, so each curve is
    identical to a separate run whatever the thread count.
    """
    times = np.asarray(times, dtype=float)
    cluster_sets = [generate_clusters(config, settings.order, settings.r_dipole) for config in configs]
    hyperfines = [
        bath_hyperfine(config, qubit) if cluster_set.clusters else None
        for config, cluster_set in zip(configs, cluster_sets)
    ]
    tasks = [
        (index, cluster)
        for index, cluster_set in enumerate(cluster_sets)
        for cluster in cluster_set.ordered()
    ]

    def evaluate(task: tuple[int, tuple[int, ...]]) -> np.ndarray:
        index, cluster = task
        pair = conditional_hamiltonians(
            cluster,
            configs[index],
            qubit,
            field,
            secular_only=settings.secular_only,
            max_dim=settings.max_cluster_dim,
            hyperfine=hyperfines[index],
        )
        return cluster_coherence(pair, times)

    values = (pool or WorkerPool(1)).map(evaluate, tasks)
    per_config: list[dict[tuple[int, ...], np.ndarray]] = [{} for _ in configs]
    for (index, cluster), value in zip(tasks, values):
        per_config[index][cluster] = value

    curves = []
    for config, cluster_set, coherences in zip(configs, cluster_sets, per_config):
        if not cluster_set.clusters:
            curves.append(
                CoherenceCurve(
                    times=times,
                    values=np.ones(times.size),
                    raw=np.ones(times.size, dtype=complex),
                    seed=config.seed,
                )
            )
            continue
        curve = cce_product(coherences, cluster_set, times)
        curves.append(
            CoherenceCurve(
                times=curve.times,
                values=curve.values,
                raw=curve.raw,
                divergence_count=curve.divergence_count,
                clip_count=curve.clip_count,
                seed=config.seed,
            )
        )
    return curves


def full_bath_coherence(
    config: BathConfiguration,
    qubit: QubitModel,
    field: float,
    times: np.ndarray,
    secular_only: bool = False,
    max_dim: int = 4096,
) -> np.ndarray:
    """Exact Hahn-echo coherence of the whole bath treated as one cluster."""
    if len(config) == 0:
        return np.ones(np.asarray(times).size, dtype=complex)
    pair = conditional_hamiltonians(
        tuple(range(len(config))), config, qubit, field, secular_only, max_dim
    )
    return cluster_coherence(pair, times)


def ensemble_average(curves: Sequence[CoherenceCurve]) -> CoherenceCurve:
    if not curves:
        raise InvalidArgumentError("Cannot average an empty set of curves.")
    times = curves[0].times
    for curve in curves[1:]:
        if curve.times.shape != times.shape or not np.array_equal(curve.times, times):
            raise InvalidArgumentError("Ensemble curves must share one time grid.")
    values = np.mean(np.stack([curve.values for curve in curves]), axis=0)
    return CoherenceCurve(
        times=times,
        values=values,
        divergence_count=sum(curve.divergence_count for curve in curves),
        clip_count=sum(curve.clip_count for curve in curves),
        members=tuple(curves),
    )
