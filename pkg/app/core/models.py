from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from core.constants import (
    DEFAULT_BATH_RADIUS_A,
    DEFAULT_GAP_A,
    DEFAULT_MAX_CLUSTER_DIM,
    DEFAULT_R_DIPOLE_A,
    ELECTRON_GAMMA,
)

HOST = "host"
SUBSTRATE_BELOW = "substrate_below"
SUBSTRATE_ABOVE = "substrate_above"
LAYER_ROLES = (HOST, SUBSTRATE_BELOW, SUBSTRATE_ABOVE)


@dataclass(frozen=True)
class IsotopeSpecies:
    name: str
    spin: float
    gamma: float
    abundance: float
    quadrupole_moment: Optional[float] = None

    @property
    def element(self) -> str:
        return self.name.lstrip("0123456789")

    @property
    def active(self) -> bool:
        return self.spin > 0


@dataclass(frozen=True, eq=False)
class SpinOperatorSet:
    spin: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    @property
    def dimension(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class QubitModel:
    levels: tuple[int, int] = (0, -1)
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma_e: float = ELECTRON_GAMMA

    @property
    def level_gap(self) -> int:
        return abs(self.levels[0] - self.levels[1])


@dataclass(frozen=True, eq=False)
class BasisSite:
    element: str
    frac: np.ndarray
    label: str


@dataclass(frozen=True, eq=False)
class MaterialSpec:
    name: str
    lattice_vectors: np.ndarray
    basis: tuple[BasisSite, ...]
    isotopes: dict[str, tuple[IsotopeSpecies, ...]]
    interlayer_spacing: Optional[float] = None
    quadrupole_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    efg_tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def elements(self) -> list[str]:
        return sorted({site.element for site in self.basis})

    @property
    def layers_per_cell(self) -> int:
        if not self.interlayer_spacing:
            return 1
        return max(1, int(round(self.lattice_vectors[2, 2] / self.interlayer_spacing)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "lattice_vectors_A": np.asarray(self.lattice_vectors).tolist(),
            "basis": [
                {"element": s.element, "frac": np.asarray(s.frac).tolist(), "label": s.label}
                for s in self.basis
            ],
            "interlayer_spacing_A": self.interlayer_spacing,
            "quadrupole_tensors": {
                k: np.asarray(v).tolist() for k, v in sorted(self.quadrupole_tensors.items())
            },
            "efg_tensors_au": {
                k: np.asarray(v).tolist() for k, v in sorted(self.efg_tensors.items())
            },
        }


@dataclass(frozen=True)
class LayerSpec:
    material: MaterialSpec
    role: str
    n_layers: Optional[int] = None
    thickness_nm: Optional[float] = None
    bulk: bool = False
    gap_to_neighbor: float = DEFAULT_GAP_A

    def to_dict(self) -> dict[str, Any]:
        return {
            "material": self.material.to_dict(),
            "role": self.role,
            "n_layers": self.n_layers,
            "thickness_nm": self.thickness_nm,
            "bulk": self.bulk,
            "gap_A": self.gap_to_neighbor,
        }


@dataclass(frozen=True)
class HeterostructureSpec:
    layers: tuple[LayerSpec, ...]
    bath_radius: float = DEFAULT_BATH_RADIUS_A
    qubit_site: Optional[str] = None
    qubit_z_offset: Optional[float] = None
    quadrupole: bool = True

    @property
    def host(self) -> LayerSpec:
        return next(layer for layer in self.layers if layer.role == HOST)

    def layer(self, role: str) -> Optional[LayerSpec]:
        return next((layer for layer in self.layers if layer.role == role), None)

    def spec_hash(self) -> str:
        payload = {
            "layers": [layer.to_dict() for layer in self.layers],
            "bath_radius_A": self.bath_radius,
            "qubit_site": self.qubit_site,
            "qubit_z_offset_A": self.qubit_z_offset,
            "quadrupole": self.quadrupole,
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class SiteTable:
    elements: np.ndarray
    positions: np.ndarray
    layer_tags: np.ndarray
    labels: np.ndarray
    materials: np.ndarray
    keys: np.ndarray
    material_specs: dict[str, MaterialSpec]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.elements)


@dataclass(frozen=True, eq=False)
class BathSpin:
    species: IsotopeSpecies
    position: np.ndarray
    quadrupole: np.ndarray
    layer: str
    key: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class BathConfiguration:
    spins: tuple[BathSpin, ...]
    seed: int
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.spins)

    @property
    def positions(self) -> np.ndarray:
        if not self.spins:
            return np.zeros((0, 3))
        return np.array([spin.position for spin in self.spins], dtype=float)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([spin.species.gamma for spin in self.spins], dtype=float)

    @property
    def layers(self) -> list[str]:
        return [spin.layer for spin in self.spins]

    def subset(self, indices) -> BathConfiguration:
        return BathConfiguration(
            spins=tuple(self.spins[i] for i in indices),
            seed=self.seed,
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class EngineSettings:
    order: int = 2
    r_dipole: float = DEFAULT_R_DIPOLE_A
    max_cluster_dim: int = DEFAULT_MAX_CLUSTER_DIM
    secular_only: bool = False


@dataclass(frozen=True)
class ClusterSet:
    order: int
    r_dipole: float
    clusters: dict[int, list[tuple[int, ...]]]
    subclusters: dict[tuple[int, ...], list[tuple[int, ...]]]

    def ordered(self) -> list[tuple[int, ...]]:
        return [cluster for size in sorted(self.clusters) for cluster in self.clusters[size]]

    def count(self, size: Optional[int] = None) -> int:
        if size is None:
            return sum(len(group) for group in self.clusters.values())
        return len(self.clusters.get(size, []))


@dataclass(frozen=True, eq=False)
class ConditionalPair:
    h_a: np.ndarray
    h_b: np.ndarray

    @property
    def dimension(self) -> int:
        return self.h_a.shape[0]


@dataclass(frozen=True, eq=False)
class CoherenceCurve:
    times: np.ndarray
    values: np.ndarray
    raw: Optional[np.ndarray] = None
    divergence_count: int = 0
    clip_count: int = 0
    members: tuple[CoherenceCurve, ...] = ()
    seed: Optional[int] = None


@dataclass(frozen=True, eq=False)
class NoiseCorrelation:
    times: np.ndarray
    values: np.ndarray
    level_gap: float = 1.0
    parts: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class PulseSwitch:
    """Sign switches of y(t) as fractions of the total evolution time."""

    fractions: tuple[float, ...] = (0.5,)

    @classmethod
    def free(cls) -> PulseSwitch:
        return cls(())

    @classmethod
    def hahn(cls) -> PulseSwitch:
        return cls((0.5,))

    @classmethod
    def cpmg(cls, n_pulses: int) -> PulseSwitch:
        return cls(tuple((2 * k - 1) / (2 * n_pulses) for k in range(1, n_pulses + 1)))

    def times_at(self, t: float) -> np.ndarray:
        return np.asarray(self.fractions, dtype=float) * t


@dataclass(frozen=True)
class CorrelationFit:
    b: float
    tau_c: float
    residual: float
    decaying: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "b": self.b,
            "tau_C_ms": self.tau_c if np.isfinite(self.tau_c) else "inf",
            "residual": self.residual,
            "decaying": self.decaying,
        }


@dataclass(frozen=True)
class SpinPair:
    i: int
    j: int
    omega_m1: float
    delta: float
    kappa: float
    contribution: float = 0.0
    r_ij: float = 0.0
    theta_deg: float = 0.0
    keys: tuple[tuple[int, ...], tuple[int, ...]] = ((), ())


@dataclass(frozen=True)
class PairScan:
    pairs: list[SpinPair]
    skipped: int = 0


@dataclass(frozen=True, eq=False)
class PairTrack:
    keys: tuple[tuple[int, ...], tuple[int, ...]]
    deltas: np.ndarray
    omega_m1: np.ndarray
    delta: np.ndarray
    zero_crossings: tuple[float, ...] = ()


@dataclass(frozen=True)
class DecayFit:
    T2: float
    n: float
    residual: float
    window: tuple[float, float]
    t_1e: float = float("nan")
    bound_hit: bool = False
    decayed: bool = True

    @classmethod
    def undecayed(cls, window: tuple[float, float]) -> DecayFit:
        return cls(float("inf"), float("nan"), 0.0, window, float("inf"), False, False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "T2_ms": _finite_or_str(self.T2),
            "n": _finite_or_str(self.n),
            "residual": self.residual,
            "window_ms": list(self.window),
            "t_1e_ms": _finite_or_str(self.t_1e),
            "bound_hit": self.bound_hit,
            "decayed": self.decayed,
        }


@dataclass(frozen=True)
class SweepResult:
    deltas: tuple[float, ...]
    host: tuple[DecayFit, ...]
    substrate: tuple[DecayFit, ...]
    total: tuple[DecayFit, ...]
    configurations: int
    diagnostics: dict[str, Any] = field(default_factory=dict)
    curves: tuple[dict[str, CoherenceCurve], ...] = ()
    statistics: tuple[dict[str, EnsembleStatistics], ...] = ()


@dataclass(frozen=True, eq=False)
class Decomposition:
    parts: dict[str, CoherenceCurve]
    total: CoherenceCurve
    product: CoherenceCurve
    max_deviation: float


@dataclass(frozen=True)
class EnsembleStatistics:
    ensemble_fit: DecayFit
    member_fits: tuple[DecayFit, ...]
    n_mean: float
    n_std: float
    T2_mean: float
    T2_std: float

    @property
    def n_reduction(self) -> float:
        if not self.member_fits or not np.isfinite(self.n_mean) or self.n_mean == 0:
            return float("nan")
        return 1.0 - self.ensemble_fit.n / self.n_mean

    def to_dict(self) -> dict[str, Any]:
        return {
            "ensemble": self.ensemble_fit.to_dict(),
            "members_fitted": len(self.member_fits),
            "n_mean": _finite_or_str(self.n_mean),
            "n_std": _finite_or_str(self.n_std),
            "T2_mean_ms": _finite_or_str(self.T2_mean),
            "T2_std_ms": _finite_or_str(self.T2_std),
            "n_reduction": _finite_or_str(self.n_reduction),
        }


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    prefactor: float
    fit_range: tuple[float, float]
    residual: float


@dataclass(frozen=True)
class CrossoverResult:
    delta_nm: Optional[float]
    bracket: tuple[float, float]
    in_range: bool
    evaluations: tuple[tuple[float, float, float], ...] = ()


@dataclass
class CommandResult:
    success: bool
    message: str
    status: str = ""
    details: str = ""
    exit_code: int = 0


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    command: str
    seeds: list[int] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    results: dict[str, Any] = field(default_factory=dict)
    parameters: dict[str, Any] = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "command": self.command,
            "seeds": list(self.seeds),
            "parameters": self.parameters,
            "timings_s": self.timings,
            "diagnostics": self.diagnostics,
            "results": self.results,
            "files": sorted(self.files),
        }


def _finite_or_str(value: float) -> Any:
    if np.isfinite(value):
        return float(value)
    return str(value)
