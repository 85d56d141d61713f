from abc import ABC, abstractmethod
from typing import Optional, Sequence

import numpy as np

from core.cce import compute_coherence, ensemble_coherence
from core.models import (
    BathConfiguration,
    CoherenceCurve,
    EngineSettings,
    NoiseCorrelation,
    PulseSwitch,
    QubitModel,
)
from core.noise import overhauser_correlation, semiclassical_coherence
from core.pseudospin import pair_parameters, pseudospin_coherence
from core.workers import WorkerPool


class CoherenceSolver(ABC):
    name = ""

    def __init__(self, qubit: QubitModel, field: float, settings: EngineSettings) -> None:
        self.qubit = qubit
        self.field = field
        self.settings = settings

    @abstractmethod
    def coherence(self, config: BathConfiguration, times: np.ndarray) -> CoherenceCurve:
        raise NotImplementedError


class CCESolver(CoherenceSolver):
    name = "cce"

    def __init__(
        self,
        qubit: QubitModel,
        field: float,
        settings: EngineSettings,
        pool: Optional[WorkerPool] = None,
    ) -> None:
        super().__init__(qubit, field, settings)
        self.pool = pool

    def coherence(self, config: BathConfiguration, times: np.ndarray) -> CoherenceCurve:
        return compute_coherence(config, self.qubit, self.field, times, self.settings, self.pool)

    def coherence_many(
        self, configs: Sequence[BathConfiguration], times: np.ndarray
    ) -> list[CoherenceCurve]:
        return ensemble_coherence(configs, self.qubit, self.field, times, self.settings, self.pool)


class SemiclassicalSolver(CoherenceSolver):
    """Gaussian-noise coherence rebuilt from the CCE Overhauser correlation."""

    name = "semiclassical"

    def __init__(
        self,
        qubit: QubitModel,
        field: float,
        settings: EngineSettings,
        pulses: PulseSwitch = PulseSwitch.hahn(),
        condition_on: str = "a",
        pool: Optional[WorkerPool] = None,
    ) -> None:
        super().__init__(qubit, field, settings)
        self.pulses = pulses
        self.condition_on = condition_on
        self.pool = pool
        self.last_correlation: Optional[NoiseCorrelation] = None

    def correlation(self, config: BathConfiguration, lags: np.ndarray) -> NoiseCorrelation:
        self.last_correlation = overhauser_correlation(
            config,
            self.qubit,
            self.field,
            lags,
            self.settings.order,
            r_dipole=self.settings.r_dipole,
            condition_on=self.condition_on,
            secular_only=self.settings.secular_only,
            max_dim=self.settings.max_cluster_dim,
            pool=self.pool,
        )
        return self.last_correlation

    def coherence(self, config: BathConfiguration, times: np.ndarray) -> CoherenceCurve:
        times = np.asarray(times, dtype=float)
        correlation = self.correlation(config, times)
        curve = semiclassical_coherence(correlation, self.pulses, times)
        return CoherenceCurve(times=curve.times, values=curve.values, raw=curve.raw, seed=config.seed)


class PseudospinSolver(CoherenceSolver):
    name = "pseudospin"

    def coherence(self, config: BathConfiguration, times: np.ndarray) -> CoherenceCurve:
        scan = pair_parameters(config, self.qubit, times=times, r_dipole=self.settings.r_dipole)
        curve = pseudospin_coherence(scan.pairs, times)
        return CoherenceCurve(times=curve.times, values=curve.values, raw=curve.raw, seed=config.seed)
