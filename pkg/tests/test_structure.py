import numpy as np
import pytest

from core.constants import EXCLUSION_RADIUS_A
from core.errors import ConfigError, DegenerateGeometryError, InvalidArgumentError
from core.models import HOST, SUBSTRATE_BELOW, HeterostructureSpec, LayerSpec
from core.resources import available_materials
from core.structure import (
    assemble_stack,
    build_material,
    configuration_xyz,
    ensemble_seeds,
    layer_count,
    sample_isotopes,
    site_uniform,
)


def _stack(host="graphene", substrate=None, radius=20.0, gap=3.4, **host_kwargs):
    layers = [LayerSpec(material=build_material(host), role=HOST, **host_kwargs)]
    if substrate is not None:
        layers.append(
            LayerSpec(material=build_material(substrate), role=SUBSTRATE_BELOW, n_layers=1, gap_to_neighbor=gap)
        )
    return HeterostructureSpec(layers=tuple(layers), bath_radius=radius)


def test_builtin_materials():
    names = available_materials()
    assert len(names) >= 8
    assert {"MoS2", "WS2", "graphene", "hBN", "Au111"} <= set(names)
    mos2 = build_material("MoS2")
    assert mos2.basis[0].element == "Mo"
    assert mos2.layers_per_cell == 2


def test_unknown_material():
    with pytest.raises(ConfigError):
        build_material("unobtainium")


def test_layer_count():
    mos2 = build_material("MoS2")
    assert layer_count(LayerSpec(material=mos2, role=HOST, n_layers=3), 50.0) == 3
    assert layer_count(LayerSpec(material=mos2, role=HOST, thickness_nm=1.0), 50.0) == 2
    bulk = layer_count(LayerSpec(material=mos2, role=HOST, bulk=True), 30.0)
    assert bulk * 6.147 >= 60.0


def test_stack_sites_inside_sphere_and_outside_exclusion():
    sites = assemble_stack(_stack(n_layers=1, radius=15.0))
    distance = np.linalg.norm(sites.positions, axis=1)
    assert len(sites) > 0
    assert np.all(distance <= 15.0)
    assert np.all(distance > EXCLUSION_RADIUS_A)
    assert set(sites.layer_tags) == {HOST}
    np.testing.assert_allclose(sites.positions[:, 2], 0.0, atol=1e-9)


def test_substrate_sits_below_the_gap():
    sites = assemble_stack(_stack(substrate="graphene", n_layers=1, gap=3.4))
    substrate = sites.layer_tags == "substrate"
    assert substrate.any()
    np.testing.assert_allclose(sites.positions[substrate, 2], -3.4, atol=1e-9)
    assert len({tuple(key) for key in sites.keys}) == len(sites)


def test_even_host_stack_places_the_qubit_in_the_lower_central_layer():
    sites = assemble_stack(_stack(n_layers=2, radius=15.0))
    assert set(np.round(sites.positions[:, 2], 6)) == {0.0, 3.35}

    layer = LayerSpec(material=build_material("graphene"), role=HOST, n_layers=2)
    centred = assemble_stack(HeterostructureSpec(layers=(layer,), bath_radius=15.0, qubit_z_offset=0.0))
    assert set(np.round(centred.positions[:, 2], 6)) == {-1.675, 1.675}


def test_overlapping_substrate_is_rejected():
    graphene = build_material("graphene")
    spec = HeterostructureSpec(
        layers=(
            LayerSpec(material=graphene, role=HOST, n_layers=1),
            LayerSpec(material=graphene, role=SUBSTRATE_BELOW, n_layers=1, gap_to_neighbor=0.0),
        )
    )
    with pytest.raises(DegenerateGeometryError):
        assemble_stack(spec)


def test_two_hosts_are_rejected():
    graphene = build_material("graphene")
    layer = LayerSpec(material=graphene, role=HOST, n_layers=1)
    with pytest.raises(InvalidArgumentError):
        assemble_stack(HeterostructureSpec(layers=(layer, layer)))


def test_sampling_is_deterministic_and_seed_dependent():
    sites = assemble_stack(_stack(n_layers=1, radius=40.0))
    first = sample_isotopes(sites, 7)
    again = sample_isotopes(sites, 7)
    other = sample_isotopes(sites, 8)
    assert [s.key for s in first.spins] == [s.key for s in again.spins]
    assert [s.key for s in first.spins] != [s.key for s in other.spins]


def test_abundance_statistics():
    sites = assemble_stack(_stack(n_layers=1, radius=100.0))
    config = sample_isotopes(sites, 3)
    fraction = len(config) / len(sites)
    assert 0.007 < fraction < 0.015
    assert all(spin.species.name == "13C" for spin in config.spins)


def test_host_isotopes_survive_adding_a_substrate():
    alone = sample_isotopes(assemble_stack(_stack(n_layers=1, radius=30.0)), 11)
    stacked = sample_isotopes(assemble_stack(_stack(substrate="graphene", n_layers=1, radius=30.0)), 11)
    host_keys = {spin.key for spin in stacked.spins if spin.layer == HOST}
    assert host_keys == {spin.key for spin in alone.spins}


def test_site_uniform_range():
    draws = [site_uniform(5, (0, 0, i, j, 0)) for i in range(20) for j in range(20)]
    assert all(0.0 <= u < 1.0 for u in draws)
    assert len(set(draws)) == len(draws)
    assert 0.4 < np.mean(draws) < 0.6


def test_ensemble_seeds():
    seeds = ensemble_seeds(1, 50)
    assert seeds == ensemble_seeds(1, 50)
    assert len(set(seeds)) == 50
    assert all(0 <= seed < 2**64 for seed in seeds)
    assert not set(seeds) & set(ensemble_seeds(2, 50))
    with pytest.raises(InvalidArgumentError):
        ensemble_seeds(1, 0)


def test_seed_collisions_across_master_seeds():
    derived = [seed for master in range(2000) for seed in ensemble_seeds(master, 50)]
    assert len(set(derived)) == len(derived)


def test_configuration_xyz():
    config = sample_isotopes(assemble_stack(_stack(n_layers=1, radius=40.0)), 2)
    lines = configuration_xyz(config).splitlines()
    assert int(lines[0]) == len(config) + 1
    assert lines[2].startswith("X ")
    assert len(lines) == len(config) + 3


def test_data_dir_override(data_dir):
    assert available_materials() == ["Si28", "graphene"]
    assert build_material("Si28").basis[0].element == "Si"


def test_missing_data_dir_override(monkeypatch, tmp_path):
    monkeypatch.setenv("VDW_COHERENCE_DATA_DIR", str(tmp_path / "nowhere"))
    with pytest.raises(ConfigError):
        available_materials()
