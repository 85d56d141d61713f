import json
from pathlib import Path

import numpy as np
import pytest

from core.config import _material
from core.models import BathConfiguration, BathSpin, IsotopeSpecies, QubitModel

C13 = IsotopeSpecies("13C", 0.5, 6.728284, 0.0107)
N15 = IsotopeSpecies("15N", 0.5, -2.71262, 0.00364)
N14 = IsotopeSpecies("14N", 1.0, 1.93378, 0.99636, 0.02044)
MO95 = IsotopeSpecies("95Mo", 2.5, -1.7514, 0.1590, -0.022)

FIELD = 3000.0
PRESETS = Path(__file__).resolve().parents[1] / "presets"


def make_bath(spins, seed=0):
    """Bath from (species, position, layer[, quadrupole]) tuples; keys follow list order."""
    built = []
    for index, entry in enumerate(spins):
        species, position, layer = entry[:3]
        quadrupole = entry[3] if len(entry) > 3 else np.zeros((3, 3))
        built.append(
            BathSpin(
                species=species,
                position=np.asarray(position, dtype=float),
                quadrupole=np.asarray(quadrupole, dtype=float),
                layer=layer,
                key=(0, 0, index, 0, 0),
            )
        )
    return BathConfiguration(spins=tuple(built), seed=seed)


def random_quadrupole(rng, scale=2.0):
    matrix = rng.normal(scale=scale, size=(3, 3))
    matrix = 0.5 * (matrix + matrix.T)
    return matrix - np.trace(matrix) / 3 * np.eye(3)


@pytest.fixture
def qubit():
    return QubitModel()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    """Data root with a spin-free silicon and a sparse carbon lattice."""
    root = tmp_path / "data"
    (root / "materials").mkdir(parents=True)
    isotopes = [
        {"name": "28Si", "spin": 0, "gamma_rad_per_ms_G": 0.0, "abundance": 1.0},
        {"name": "12C", "spin": 0, "gamma_rad_per_ms_G": 0.0, "abundance": 0.9893},
        {"name": "13C", "spin": 0.5, "gamma_rad_per_ms_G": 6.728284, "abundance": 0.0107},
    ]
    (root / "isotopes-v1.json").write_text(json.dumps(isotopes), encoding="utf-8")
    materials = {
        "Si28": {
            "name": "Si28",
            "lattice_vectors_A": [[3.84, 0.0, 0.0], [-1.92, 3.3255, 0.0], [0.0, 0.0, 3.14]],
            "basis": [{"element": "Si", "frac": [0.0, 0.0, 0.0], "label": "Si1"}],
            "interlayer_spacing_A": 3.14,
        },
        "graphene": {
            "name": "graphene",
            "lattice_vectors_A": [[2.46, 0.0, 0.0], [-1.23, 2.1304225, 0.0], [0.0, 0.0, 3.35]],
            "basis": [
                {"element": "C", "frac": [0.333333333, 0.666666667, 0.0], "label": "C1"},
                {"element": "C", "frac": [0.666666667, 0.333333333, 0.0], "label": "C2"},
            ],
            "interlayer_spacing_A": 3.35,
        },
    }
    for name, record in materials.items():
        (root / "materials" / f"{name}.json").write_text(json.dumps(record), encoding="utf-8")
    monkeypatch.setenv("VDW_COHERENCE_DATA_DIR", str(root))
    _material.cache_clear()
    yield root
    _material.cache_clear()
