import os
import sys
from pathlib import Path

from core.errors import ConfigError
from core.logger import get_logger

DATA_DIR_ENV = "VDW_COHERENCE_DATA_DIR"
ISOTOPE_FILE = "isotopes-v1.json"


def _resource_root() -> Path:
    if getattr(sys, "frozen", False) and hasattr(sys, "_MEIPASS"):
        return Path(getattr(sys, "_MEIPASS"))
    return Path(__file__).resolve().parents[1]


def data_root() -> Path:
    override = os.environ.get(DATA_DIR_ENV)
    if override:
        path = Path(override).expanduser()
        if not path.is_dir():
            raise ConfigError(f"{DATA_DIR_ENV} points to a missing directory: {path}")
        get_logger().info("Using data directory override %s", path)
        return path
    return _resource_root() / "data"


def isotope_file() -> Path:
    return data_root() / ISOTOPE_FILE


def material_dir() -> Path:
    return data_root() / "materials"


def material_file(name: str) -> Path:
    return material_dir() / f"{name}.json"


def available_materials() -> list[str]:
    directory = material_dir()
    if not directory.is_dir():
        return []
    return sorted(path.stem for path in directory.glob("*.json"))
