"""Run configuration: TOML files validated into frozen pydantic models."""

from __future__ import annotations

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core.constants import (
    DEFAULT_BATH_RADIUS_A,
    DEFAULT_FIELD_GAUSS,
    DEFAULT_GAP_A,
    DEFAULT_MAX_CLUSTER_DIM,
    DEFAULT_R_DIPOLE_A,
    ELECTRON_GAMMA,
)
from core.errors import ConfigError
from core.models import (
    HOST,
    SUBSTRATE_ABOVE,
    SUBSTRATE_BELOW,
    EngineSettings,
    HeterostructureSpec,
    LayerSpec,
    MaterialSpec,
    PulseSwitch,
    QubitModel,
)
from core.structure import build_material


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class HostLayer(_Block):
    material: str
    n_layers: Optional[int] = Field(default=None, ge=1)
    thickness_nm: Optional[float] = Field(default=None, gt=0)
    bulk: bool = False

    @model_validator(mode="after")
    def _one_thickness(self) -> HostLayer:
        given = sum([self.n_layers is not None, self.thickness_nm is not None, self.bulk])
        if given > 1:
            raise ValueError("give only one of n_layers, thickness_nm or bulk")
        return self


class SubstrateLayer(_Block):
    material: str
    n_layers: Optional[int] = Field(default=None, ge=1)
    bulk: bool = False
    gap_A: float = Field(default=DEFAULT_GAP_A, gt=0)

    @model_validator(mode="after")
    def _one_thickness(self) -> SubstrateLayer:
        if self.n_layers is not None and self.bulk:
            raise ValueError("give either n_layers or bulk")
        return self


class StackConfig(_Block):
    host: HostLayer
    substrate_below: Optional[SubstrateLayer] = None
    substrate_above: Optional[SubstrateLayer] = None
    bath_radius_A: float = Field(default=DEFAULT_BATH_RADIUS_A, gt=0)
    qubit_z_offset_A: Optional[float] = None


class QubitConfig(_Block):
    levels: tuple[int, int] = (0, -1)
    site: Optional[str] = None
    gamma_e: float = ELECTRON_GAMMA

    @model_validator(mode="after")
    def _levels(self) -> QubitConfig:
        a, b = self.levels
        if a == b or a not in (-1, 0, 1) or b not in (-1, 0, 1):
            raise ValueError("levels must be two distinct values from {-1, 0, 1}")
        return self


class FieldConfig(_Block):
    B_gauss: float = Field(default=DEFAULT_FIELD_GAUSS, gt=0)


class CCEConfig(_Block):
    order: int = Field(default=2, ge=1)
    r_dipole_A: float = Field(default=DEFAULT_R_DIPOLE_A, gt=0)
    max_cluster_dim: int = Field(default=DEFAULT_MAX_CLUSTER_DIM, ge=2)
    secular_only: bool = False
    quadrupole: bool = True
    convergence_check: bool = False


class TimeConfig(_Block):
    t_max_ms: float = Field(default=12.0, gt=0)
    points: int = Field(default=201, ge=2)


class EnsembleConfig(_Block):
    size: int = Field(default=50, ge=1)
    master_seed: int = Field(default=1, ge=0, lt=2**64)


class NoiseConfig(_Block):
    condition_on: Literal["a", "b"] = "a"
    pulses: Literal["free", "hahn", "cpmg"] = "hahn"
    cpmg_pulses: int = Field(default=2, ge=1)
    order: Optional[int] = Field(default=None, ge=1)
    lag_t_max_ms: Optional[float] = Field(default=None, gt=0)
    compare_cce: bool = True
    delta_scan_nm: tuple[float, ...] = ()


class PseudospinConfig(_Block):
    top_k: int = Field(default=100, ge=1)
    compare_cce: bool = True
    track_deltas_nm: tuple[float, ...] = ()


class SweepConfig(_Block):
    deltas_nm: tuple[float, ...] = ()
    power_law_range_nm: Optional[tuple[float, float]] = None
    power_law_component: Literal["host", "substrate", "total"] = "substrate"


class CrossoverConfig(_Block):
    delta_min_nm: float = Field(default=1.0, gt=0)
    delta_max_nm: float = Field(default=200.0, gt=0)
    grid_points: int = Field(default=12, ge=2)
    resolution_nm: Optional[float] = Field(default=None, gt=0)


class RunConfig(_Block):
    stack: StackConfig
    qubit: QubitConfig = QubitConfig()
    field: FieldConfig = FieldConfig()
    cce: CCEConfig = CCEConfig()
    time: TimeConfig = TimeConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    noise: NoiseConfig = NoiseConfig()
    pseudospin: PseudospinConfig = PseudospinConfig()
    sweep: SweepConfig = SweepConfig()
    crossover: CrossoverConfig = CrossoverConfig()

    @model_validator(mode="after")
    def _ranges(self) -> RunConfig:
        for name, values in (
            ("sweep.deltas_nm", self.sweep.deltas_nm),
            ("noise.delta_scan_nm", self.noise.delta_scan_nm),
            ("pseudospin.track_deltas_nm", self.pseudospin.track_deltas_nm),
        ):
            if any(value <= 0 for value in values):
                raise ValueError(f"{name} must be positive")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        if self.crossover.delta_max_nm <= self.crossover.delta_min_nm:
            raise ValueError("crossover.delta_max_nm must exceed crossover.delta_min_nm")
        return self

    def qubit_model(self) -> QubitModel:
        return QubitModel(levels=self.qubit.levels, gamma_e=self.qubit.gamma_e)

    def engine_settings(self, order: Optional[int] = None) -> EngineSettings:
        return EngineSettings(
            order=order or self.cce.order,
            r_dipole=self.cce.r_dipole_A,
            max_cluster_dim=self.cce.max_cluster_dim,
            secular_only=self.cce.secular_only,
        )

    def times(self, t_max: Optional[float] = None) -> np.ndarray:
        return np.linspace(0.0, t_max or self.time.t_max_ms, self.time.points)

    def pulse_switch(self) -> PulseSwitch:
        if self.noise.pulses == "free":
            return PulseSwitch.free()
        if self.noise.pulses == "cpmg":
            return PulseSwitch.cpmg(self.noise.cpmg_pulses)
        return PulseSwitch.hahn()

    def heterostructure(self, delta_nm: Optional[float] = None) -> HeterostructureSpec:
        """Layer stack; ``delta_nm`` replaces the host thickness."""
        host = self.stack.host
        layers = [
            LayerSpec(
                material=_material(host.material),
                role=HOST,
                n_layers=None if delta_nm is not None else host.n_layers,
                thickness_nm=delta_nm if delta_nm is not None else host.thickness_nm,
                bulk=False if delta_nm is not None else host.bulk,
            )
        ]
        for role, block in (
            (SUBSTRATE_BELOW, self.stack.substrate_below),
            (SUBSTRATE_ABOVE, self.stack.substrate_above),
        ):
            if block is not None:
                layers.append(
                    LayerSpec(
                        material=_material(block.material),
                        role=role,
                        n_layers=block.n_layers,
                        bulk=block.bulk,
                        gap_to_neighbor=block.gap_A,
                    )
                )
        return HeterostructureSpec(
            layers=tuple(layers),
            bath_radius=self.stack.bath_radius_A,
            qubit_site=self.qubit.site,
            qubit_z_offset=self.stack.qubit_z_offset_A,
            quadrupole=self.cce.quadrupole,
        )

    def host_spacing_nm(self) -> float:
        material = _material(self.stack.host.material)
        return float(material.interlayer_spacing or material.lattice_vectors[2, 2]) / 10.0


@lru_cache(maxsize=32)
def _material(name: str) -> MaterialSpec:
    return build_material(name)


def _error_path(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ())) or "<root>"


def parse_config(data: dict, seed_override: Optional[int] = None) -> RunConfig:
    if seed_override is not None:
        ensemble = dict(data.get("ensemble", {}))
        ensemble["master_seed"] = seed_override
        data = {**data, "ensemble": ensemble}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{_error_path(first)}: {first['msg']}") from exc


def load_config(path: Path, seed_override: Optional[int] = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid TOML: {exc}") from exc
    return parse_config(data, seed_override)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
