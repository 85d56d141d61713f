"""Lattices, layered heterostructures and isotope sampling.

Every generated site carries a stable key (role slot, layer counted from the
qubit layer or from the host interface, lateral cell i, lateral cell j, basis
index). Isotopes are drawn from a counter-based Philox stream addressed by
(seed, key), so a site keeps its isotope when the rest of the stack changes.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from core.constants import EXCLUSION_RADIUS_A, MIN_SITE_SEPARATION_A
from core.errors import ConfigError, DataError, DegenerateGeometryError, InvalidArgumentError
from core.logger import get_logger
from core.models import (
    HOST,
    LAYER_ROLES,
    SUBSTRATE_ABOVE,
    SUBSTRATE_BELOW,
    BasisSite,
    BathConfiguration,
    BathSpin,
    HeterostructureSpec,
    IsotopeSpecies,
    LayerSpec,
    MaterialSpec,
    SiteTable,
)
from core.resources import available_materials, material_file
from core.spinmodel import efg_to_quadrupole, isotopes_by_element, load_isotopes

_MATERIAL_FIELDS = {"name", "lattice_vectors_A", "basis"}
_MATERIAL_OPTIONAL = {"interlayer_spacing_A", "quadrupole_tensors", "efg_tensors_au"}
_ROLE_SLOTS = {HOST: 0, SUBSTRATE_BELOW: 1, SUBSTRATE_ABOVE: 2}
_COUNTER_OFFSET = 1 << 32
_LAYER_EPS = 1e-6


def build_material(
    name_or_path: Union[str, Path],
    isotopes: Optional[dict[str, IsotopeSpecies]] = None,
) -> MaterialSpec:
    path = Path(name_or_path)
    if str(name_or_path) in available_materials():
        path = material_file(str(name_or_path))
    elif not path.is_file():
        raise ConfigError(
            f"Unknown material {name_or_path!r}; available: {', '.join(available_materials())}."
        )

    try:
        with open(path, encoding="utf-8") as handle:
            record = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DataError(f"Material file {path} is not valid JSON: {exc}") from exc
    return parse_material(record, isotopes if isotopes is not None else load_isotopes())


def parse_material(record: dict, isotopes: dict[str, IsotopeSpecies]) -> MaterialSpec:
    if not isinstance(record, dict):
        raise DataError("Material file must contain a JSON object.")
    keys = set(record)
    if _MATERIAL_FIELDS - keys:
        raise DataError(f"Material file misses fields {sorted(_MATERIAL_FIELDS - keys)}.")
    unknown = keys - _MATERIAL_FIELDS - _MATERIAL_OPTIONAL
    if unknown:
        raise DataError(f"Material file has unknown fields {sorted(unknown)}.")

    name = str(record["name"])
    lattice = np.asarray(record["lattice_vectors_A"], dtype=float)
    if lattice.shape != (3, 3) or not np.all(np.isfinite(lattice)):
        raise DataError(f"Material {name}: lattice_vectors_A must be a finite 3x3 array.")
    volume = abs(np.linalg.det(lattice))
    if volume <= 1e-8 * np.prod(np.linalg.norm(lattice, axis=1)):
        raise DegenerateGeometryError(f"Material {name}: lattice vectors are linearly dependent.")

    by_element = isotopes_by_element(isotopes)
    basis = []
    for index, entry in enumerate(record["basis"]):
        element = str(entry["element"])
        frac = np.asarray(entry["frac"], dtype=float)
        if frac.shape != (3,) or np.any(frac < 0) or np.any(frac >= 1):
            raise DataError(f"Material {name}: basis site {index} has fractional coordinates outside [0, 1).")
        if element not in by_element:
            raise DataError(f"Material {name}: no isotope data for element {element}.")
        basis.append(BasisSite(element=element, frac=frac, label=str(entry.get("label", element))))
    if not basis:
        raise DataError(f"Material {name}: empty basis.")

    spacing = record.get("interlayer_spacing_A")
    if spacing is not None:
        spacing = float(spacing)
        if spacing <= 0:
            raise DataError(f"Material {name}: interlayer spacing must be positive.")
        if abs(lattice[2, 0]) > 1e-9 or abs(lattice[2, 1]) > 1e-9 or abs(lattice[0, 2]) > 1e-9 or abs(lattice[1, 2]) > 1e-9:
            raise DataError(f"Material {name}: layered materials need in-plane a1, a2 and a3 along z.")

    labels = {site.label for site in basis}
    tensors = {}
    for table_name in ("quadrupole_tensors", "efg_tensors_au"):
        table = {}
        for label, values in (record.get(table_name) or {}).items():
            if label not in labels:
                raise DataError(f"Material {name}: {table_name} refers to unknown site {label!r}.")
            tensor = np.asarray(values, dtype=float)
            if tensor.shape != (3, 3) or not np.allclose(tensor, tensor.T):
                raise DataError(f"Material {name}: {table_name}[{label}] must be a symmetric 3x3 array.")
            table[label] = tensor
        tensors[table_name] = table

    return MaterialSpec(
        name=name,
        lattice_vectors=lattice,
        basis=tuple(basis),
        isotopes={element: by_element[element] for element in {site.element for site in basis}},
        interlayer_spacing=spacing,
        quadrupole_tensors=tensors["quadrupole_tensors"],
        efg_tensors=tensors["efg_tensors_au"],
    )


def layer_count(layer: LayerSpec, bath_radius: float) -> int:
    spacing = layer.material.interlayer_spacing or layer.material.lattice_vectors[2, 2]
    if layer.bulk:
        return int(math.ceil(2 * bath_radius / spacing)) + 1
    if layer.n_layers is not None:
        return int(layer.n_layers)
    if layer.thickness_nm is not None:
        return int(math.floor(layer.thickness_nm * 10.0 / spacing + 1e-9)) + 1
    return 1


def assemble_stack(spec: HeterostructureSpec) -> SiteTable:
    _validate_spec(spec)
    logger = get_logger()
    host = spec.host
    radius = spec.bath_radius

    host_layers = layer_count(host, radius)
    if host_layers < 1:
        raise DegenerateGeometryError("The host layer must contain at least one atomic layer.")
    qubit_layer = (host_layers - 1) // 2
    host_block = _slab(host.material, host_layers, radius)
    qubit_xyz = _qubit_site(host.material, host_block, qubit_layer, spec.qubit_site)

    host_z = host_block["positions"][:, 2]
    z_bottom, z_top = float(host_z.min()), float(host_z.max())
    if spec.qubit_z_offset is not None:
        qubit_xyz = np.array([qubit_xyz[0], qubit_xyz[1], 0.5 * (z_bottom + z_top) + spec.qubit_z_offset])
    elif host_layers % 2 == 0:
        # An even stack has no central layer; the qubit takes the lower of the two.
        logger.info(
            "Qubit in host layer %d of %d, %.3f A below the mid-plane",
            qubit_layer,
            host_layers,
            0.5 * (z_bottom + z_top) - qubit_xyz[2],
        )

    blocks = [
        _tag(host_block, HOST, host.material, host_block["layer"] - qubit_layer, np.zeros(3)),
    ]
    lateral = np.array([qubit_xyz[0], qubit_xyz[1], 0.0])
    for role in (SUBSTRATE_BELOW, SUBSTRATE_ABOVE):
        layer = spec.layer(role)
        if layer is None:
            continue
        count = layer_count(layer, radius)
        if count == 0:
            continue
        block = _slab(layer.material, count, radius)
        z = block["positions"][:, 2]
        if role == SUBSTRATE_BELOW:
            # Layer 0 of the substrate faces the host.
            shift = np.array([0.0, 0.0, z_bottom - layer.gap_to_neighbor - z.max()])
            layer_index = count - 1 - block["layer"]
        else:
            shift = np.array([0.0, 0.0, z_top + layer.gap_to_neighbor - z.min()])
            layer_index = block["layer"]
        blocks.append(_tag(block, role, layer.material, layer_index, lateral + shift))

    positions = np.concatenate([b["positions"] for b in blocks]) - qubit_xyz
    distance = np.linalg.norm(positions, axis=1)
    keep = (distance <= radius) & (distance > EXCLUSION_RADIUS_A)

    table = SiteTable(
        elements=np.concatenate([b["elements"] for b in blocks])[keep],
        positions=positions[keep],
        layer_tags=np.concatenate([b["tags"] for b in blocks])[keep],
        labels=np.concatenate([b["labels"] for b in blocks])[keep],
        materials=np.concatenate([b["materials"] for b in blocks])[keep],
        keys=np.concatenate([b["keys"] for b in blocks])[keep],
        material_specs={layer.material.name: layer.material for layer in spec.layers},
        provenance=spec.spec_hash(),
    )
    logger.info(
        "Assembled %d sites (%d host layers) within %.1f A of the qubit",
        len(table),
        host_layers,
        radius,
    )
    return table


def _validate_spec(spec: HeterostructureSpec) -> None:
    roles = [layer.role for layer in spec.layers]
    unknown = set(roles) - set(LAYER_ROLES)
    if unknown:
        raise InvalidArgumentError(f"Unknown layer roles {sorted(unknown)}.")
    if roles.count(HOST) != 1:
        raise InvalidArgumentError("A heterostructure needs exactly one host layer.")
    if len(set(roles)) != len(roles):
        raise InvalidArgumentError("Each substrate role may appear only once.")
    if spec.bath_radius <= 0:
        raise InvalidArgumentError("bath_radius must be positive.")
    for layer in spec.layers:
        if layer.role != HOST and layer.gap_to_neighbor <= 0:
            raise DegenerateGeometryError(
                f"Layer {layer.material.name} ({layer.role}) overlaps the host: gap {layer.gap_to_neighbor} A."
            )
        if layer.n_layers is not None and layer.n_layers < 0:
            raise InvalidArgumentError("n_layers must be non-negative.")


def _lateral_range(lattice: np.ndarray, radius: float) -> tuple[int, int]:
    in_plane = lattice[:2, :2]
    reciprocal = np.linalg.inv(in_plane).T
    return tuple(int(math.ceil(radius * np.linalg.norm(reciprocal[k]))) + 1 for k in range(2))


def _slab(material: MaterialSpec, n_layers: int, radius: float) -> dict[str, np.ndarray]:
    lattice = material.lattice_vectors
    per_cell = material.layers_per_cell
    m_i, m_j = _lateral_range(lattice, radius)
    ii, jj = np.meshgrid(np.arange(-m_i, m_i + 1), np.arange(-m_j, m_j + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    lateral = ii[:, None] * lattice[0] + jj[:, None] * lattice[1]

    chunks = {key: [] for key in ("positions", "layer", "i", "j", "b")}
    for stack_cell in range(int(math.ceil(n_layers / per_cell)) + 1):
        for b, site in enumerate(material.basis):
            layer = stack_cell * per_cell + int(math.floor(site.frac[2] * per_cell + _LAYER_EPS))
            if layer >= n_layers:
                continue
            origin = site.frac @ lattice + stack_cell * lattice[2]
            chunks["positions"].append(lateral + origin)
            chunks["layer"].append(np.full(ii.size, layer))
            chunks["i"].append(ii)
            chunks["j"].append(jj)
            chunks["b"].append(np.full(ii.size, b))

    block = {key: np.concatenate(values) for key, values in chunks.items()}
    block["elements"] = np.array([material.basis[b].element for b in block["b"]], dtype=object)
    block["labels"] = np.array([material.basis[b].label for b in block["b"]], dtype=object)
    return block


def _qubit_site(
    material: MaterialSpec,
    block: dict[str, np.ndarray],
    qubit_layer: int,
    site_label: Optional[str],
) -> np.ndarray:
    candidates = (block["layer"] == qubit_layer) & (block["i"] == 0) & (block["j"] == 0)
    if site_label is not None:
        matches = (block["labels"] == site_label) | (block["elements"] == site_label)
        candidates &= matches
    else:
        first = material.basis[0].element
        candidates &= block["elements"] == first
    indices = np.flatnonzero(candidates)
    if indices.size == 0:
        raise ConfigError(f"No qubit site {site_label or material.basis[0].element!r} in {material.name}.")
    return block["positions"][indices[np.argmin(block["b"][indices])]].copy()


def _tag(
    block: dict[str, np.ndarray],
    role: str,
    material: MaterialSpec,
    layer_index: np.ndarray,
    shift: np.ndarray,
) -> dict[str, np.ndarray]:
    size = block["b"].size
    keys = np.stack(
        [np.full(size, _ROLE_SLOTS[role]), layer_index, block["i"], block["j"], block["b"]],
        axis=1,
    ).astype(np.int64)
    return {
        "positions": block["positions"] + shift,
        "elements": block["elements"],
        "labels": block["labels"],
        "tags": np.full(size, HOST if role == HOST else "substrate", dtype=object),
        "materials": np.full(size, material.name, dtype=object),
        "keys": keys,
    }


def site_uniform(seed: int, key) -> float:
    """Uniform draw in [0, 1) addressed by (seed, site key) on a Philox counter."""
    slot, layer, i, j, b = (int(value) for value in key)
    bit_generator = np.random.Philox(
        key=np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, b], dtype=np.uint64),
        counter=np.array(
            [slot, layer + _COUNTER_OFFSET, i + _COUNTER_OFFSET, j + _COUNTER_OFFSET],
            dtype=np.uint64,
        ),
    )
    return (int(bit_generator.random_raw()) >> 11) * 2.0**-53


def sample_isotopes(sites: SiteTable, seed: int, quadrupole: bool = True) -> BathConfiguration:
    if len(sites) == 0:
        raise InvalidArgumentError("Cannot sample isotopes on an empty site table.")

    distributions = {}
    for material in sites.material_specs.values():
        for element, species in material.isotopes.items():
            total = sum(sp.abundance for sp in species)
            if abs(total - 1.0) > 1e-6:
                raise DataError(f"Abundances of {element} sum to {total:.8f}, not 1.")
            distributions[element] = (species, np.cumsum([sp.abundance for sp in species]))

    spins = []
    for index in range(len(sites)):
        element = sites.elements[index]
        species, cumulative = distributions[element]
        if len(species) == 1:
            chosen = species[0]
        else:
            u = site_uniform(seed, sites.keys[index])
            chosen = species[min(int(np.searchsorted(cumulative, u, side="right")), len(species) - 1)]
        if not chosen.active:
            continue
        material = sites.material_specs[sites.materials[index]]
        spins.append(
            BathSpin(
                species=chosen,
                position=sites.positions[index].copy(),
                quadrupole=_site_quadrupole(material, sites.labels[index], chosen) if quadrupole else np.zeros((3, 3)),
                layer=str(sites.layer_tags[index]),
                key=tuple(int(v) for v in sites.keys[index]),
            )
        )

    config = BathConfiguration(spins=tuple(spins), seed=int(seed), provenance=sites.provenance)
    if len(spins) > 1 and cKDTree(config.positions).query_pairs(MIN_SITE_SEPARATION_A):
        raise DegenerateGeometryError(f"Two bath spins lie within {MIN_SITE_SEPARATION_A} A.")
    get_logger().info("Seed %d: %d spin-active nuclei out of %d sites", seed, len(spins), len(sites))
    return config


def _site_quadrupole(material: MaterialSpec, label: str, species: IsotopeSpecies) -> np.ndarray:
    if species.spin < 1:
        return np.zeros((3, 3))
    if label in material.quadrupole_tensors:
        return material.quadrupole_tensors[label].copy()
    if label in material.efg_tensors:
        return efg_to_quadrupole(material.efg_tensors[label], species)
    return np.zeros((3, 3))


def ensemble_seeds(master_seed: int, count: int) -> list[int]:
    if count < 1:
        raise InvalidArgumentError("Ensemble size must be at least 1.")
    sequence = np.random.SeedSequence(int(master_seed))
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < count:
        for child in sequence.spawn(count - len(seeds)):
            value = int(child.generate_state(1, dtype=np.uint64)[0])
            if value not in seen:
                seen.add(value)
                seeds.append(value)
    return seeds


def configuration_xyz(config: BathConfiguration) -> str:
    lines = [str(len(config) + 1), f"seed={config.seed} provenance={config.provenance}"]
    lines.append("X 0.000000 0.000000 0.000000")
    for spin in config.spins:
        x, y, z = spin.position
        lines.append(f"{spin.species.name} {x:.6f} {y:.6f} {z:.6f}")
    return "\n".join(lines) + "\n"
