"""Spin algebra and interaction tensors in the internal unit system.

All builders are pure functions; operator sets are cached and read-only.
"""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from core.constants import (
    EFG_BARN_AU_TO_RAD_PER_MS,
    EXCLUSION_RADIUS_A,
    GAMMA_SI_TO_INTERNAL,
    HBAR_MU0_O4PI,
    MIN_PAIR_DISTANCE_A,
)
from core.errors import DataError, DegenerateGeometryError, InvalidArgumentError
from core.models import IsotopeSpecies, SpinOperatorSet
from core.resources import isotope_file

_ISOTOPE_FIELDS = {"name", "spin", "gamma_rad_per_ms_G", "abundance"}
_ISOTOPE_OPTIONAL = {"quadrupole_moment_barn"}
_HERMITIAN_TOL = 1e-13


def _check_half_integer(s: float) -> float:
    two_s = 2.0 * float(s)
    if not np.isfinite(two_s) or abs(two_s - round(two_s)) > 1e-9:
        raise InvalidArgumentError(f"Spin must be a half-integer, got {s!r}.")
    return round(two_s) / 2.0


def spin_operators(s: float) -> SpinOperatorSet:
    s = _check_half_integer(s)
    if s < 0.5:
        raise InvalidArgumentError(f"Spin must be at least 1/2, got {s!r}.")
    return _spin_operators(s)


@lru_cache(maxsize=None)
def _spin_operators(s: float) -> SpinOperatorSet:
    m = s - np.arange(int(round(2 * s)) + 1)
    raising = np.zeros((m.size, m.size), dtype=complex)
    for k in range(1, m.size):
        raising[k - 1, k] = np.sqrt(s * (s + 1) - m[k] * (m[k] + 1))
    lowering = raising.conj().T

    x = (raising + lowering) / 2
    y = (raising - lowering) / 2j
    z = np.diag(m).astype(complex)
    for matrix in (x, y, z):
        matrix.setflags(write=False)
    return SpinOperatorSet(spin=s, x=x, y=y, z=z)


def coupling_constant(gamma_i: float, gamma_j: float) -> float:
    return HBAR_MU0_O4PI * gamma_i * gamma_j


def dipole_tensors(r_vecs: np.ndarray, prefactors: np.ndarray) -> np.ndarray:
    """Point-dipole tensors K (1 - 3 r r) / r^3 for an (N, 3) batch of vectors."""
    r_vecs = np.atleast_2d(np.asarray(r_vecs, dtype=float))
    r = np.linalg.norm(r_vecs, axis=1)
    unit = r_vecs / r[:, None]
    tensors = np.eye(3)[None, :, :] - 3.0 * unit[:, :, None] * unit[:, None, :]
    return tensors * (np.broadcast_to(prefactors, r.shape) / r**3)[:, None, None]


def dipolar_tensor(r_vec, gamma_i: float, gamma_j: float) -> np.ndarray:
    r_vec = np.asarray(r_vec, dtype=float)
    if np.linalg.norm(r_vec) <= MIN_PAIR_DISTANCE_A:
        raise DegenerateGeometryError(
            f"Spins closer than {MIN_PAIR_DISTANCE_A} A cannot carry a dipolar tensor."
        )
    return dipole_tensors(r_vec, coupling_constant(gamma_i, gamma_j))[0]


def hyperfine_point_dipole(r_vec, gamma_e: float, gamma_n: float) -> np.ndarray:
    r_vec = np.asarray(r_vec, dtype=float)
    if np.linalg.norm(r_vec) <= EXCLUSION_RADIUS_A:
        raise DegenerateGeometryError(
            f"Nucleus at {r_vec.tolist()} lies inside the {EXCLUSION_RADIUS_A} A exclusion radius."
        )
    return dipole_tensors(r_vec, coupling_constant(gamma_e, gamma_n))[0]


def flip_rate(tensor: np.ndarray) -> float:
    """Flip-flop rate delta of a same-species spin-1/2 pair: (J_xx + J_yy) / 2."""
    return 0.5 * float(tensor[0, 0] + tensor[1, 1])


def quadrupole_term(tensor: np.ndarray, ops: SpinOperatorSet) -> np.ndarray:
    tensor = np.asarray(tensor, dtype=float)
    if tensor.shape != (3, 3):
        raise InvalidArgumentError(f"Quadrupole tensor must be 3x3, got {tensor.shape}.")
    if not np.allclose(tensor, tensor.T, atol=1e-12 * max(1.0, np.abs(tensor).max())):
        raise InvalidArgumentError("Quadrupole tensor must be symmetric.")
    if any(op.shape != (ops.dimension, ops.dimension) for op in (ops.x, ops.y)):
        raise InvalidArgumentError("Spin operator dimensions do not match.")

    components = (ops.x, ops.y, ops.z)
    term = np.zeros((ops.dimension, ops.dimension), dtype=complex)
    for a in range(3):
        for b in range(3):
            if tensor[a, b] != 0.0:
                term += tensor[a, b] * components[a] @ components[b]
    return 0.5 * (term + term.conj().T)


def zeeman_term(gamma: float, field: float, ops: SpinOperatorSet) -> np.ndarray:
    if field < 0:
        raise InvalidArgumentError(f"Magnetic field must be non-negative, got {field}.")
    return -gamma * field * ops.z


def is_hermitian(matrix: np.ndarray, tol: float = _HERMITIAN_TOL) -> bool:
    scale = max(1.0, float(np.abs(matrix).max(initial=0.0)))
    return bool(np.abs(matrix - matrix.conj().T).max(initial=0.0) <= tol * scale)


def gamma_to_si(gamma: float) -> float:
    return gamma / GAMMA_SI_TO_INTERNAL


def gamma_from_si(gamma_si: float) -> float:
    return gamma_si * GAMMA_SI_TO_INTERNAL


def efg_to_quadrupole(efg_au: np.ndarray, species: IsotopeSpecies) -> np.ndarray:
    """Quadrupole tensor P = eQV / (2s(2s - 1) hbar) from an EFG tensor in atomic units."""
    if species.spin < 1 or not species.quadrupole_moment:
        return np.zeros((3, 3))
    s = species.spin
    factor = EFG_BARN_AU_TO_RAD_PER_MS * species.quadrupole_moment / (2 * s * (2 * s - 1))
    return factor * np.asarray(efg_au, dtype=float)


def parse_isotope_records(records: list) -> dict[str, IsotopeSpecies]:
    if not isinstance(records, list):
        raise DataError("Isotope file must contain a JSON array of records.")

    table: dict[str, IsotopeSpecies] = {}
    for index, record in enumerate(records):
        if not isinstance(record, dict):
            raise DataError(f"Isotope record {index} is not an object.")
        keys = set(record)
        missing = _ISOTOPE_FIELDS - keys
        unknown = keys - _ISOTOPE_FIELDS - _ISOTOPE_OPTIONAL
        if missing:
            raise DataError(f"Isotope record {index} misses fields {sorted(missing)}.")
        if unknown:
            raise DataError(f"Isotope record {index} has unknown fields {sorted(unknown)}.")

        name = str(record["name"])
        try:
            spin = _check_half_integer(record["spin"])
        except InvalidArgumentError as exc:
            raise DataError(f"Isotope {name}: {exc}") from exc
        gamma = float(record["gamma_rad_per_ms_G"])
        abundance = float(record["abundance"])
        if spin < 0:
            raise DataError(f"Isotope {name}: negative spin.")
        if not 0 < abundance <= 1:
            raise DataError(f"Isotope {name}: abundance {abundance} outside (0, 1].")
        if spin > 0 and (not np.isfinite(gamma) or gamma == 0):
            raise DataError(f"Isotope {name}: spin-active isotopes need a finite nonzero gamma.")
        if name in table:
            raise DataError(f"Isotope {name} is listed twice.")

        moment = record.get("quadrupole_moment_barn")
        table[name] = IsotopeSpecies(
            name=name,
            spin=spin,
            gamma=gamma,
            abundance=abundance,
            quadrupole_moment=None if moment is None else float(moment),
        )
    return table


def load_isotopes(path: Optional[Path] = None) -> dict[str, IsotopeSpecies]:
    path = Path(path) if path is not None else isotope_file()
    return dict(_load_isotopes_cached(str(path.resolve())))


@lru_cache(maxsize=8)
def _load_isotopes_cached(path: str) -> tuple[tuple[str, IsotopeSpecies], ...]:
    try:
        with open(path, encoding="utf-8") as handle:
            records = json.load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"Isotope file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"Isotope file {path} is not valid JSON: {exc}") from exc
    return tuple(parse_isotope_records(records).items())


def isotopes_by_element(table: dict[str, IsotopeSpecies]) -> dict[str, tuple[IsotopeSpecies, ...]]:
    grouped: dict[str, list[IsotopeSpecies]] = {}
    for species in table.values():
        grouped.setdefault(species.element, []).append(species)
    return {
        element: tuple(sorted(group, key=lambda sp: (int(sp.name[: -len(element)] or 0), sp.name)))
        for element, group in grouped.items()
    }
