#!/usr/bin/env python3
"""
Synthetic scene generator tests.

Run with: pytest test_synthlab.py -v
"""

from dataclasses import replace

import numpy as np
import pytest

from conftest import SMALL_SCENE
from core.geodata import (
    aggregate_target, extract_patches, load_cube, load_stations, load_target,
    match_station_to_cell,
)
from core.stdown_core import TRAINING_HOURS, ConfigError, FormatError
from core.synthlab import (
    SCENE_SCHEMA, SM_CEIL, SM_FLOOR, SceneSpec, gen_scene, parse_manifest,
    scene_hash, scene_manifest, smooth_field, truth_mapping, write_scene,
)


def small(**changes) -> SceneSpec:
    return SceneSpec(**{**SMALL_SCENE, **changes}).validate()


# ============================================================================
# SCENE PARAMETERS
# ============================================================================

class TestSceneSpec:
    """Test scene parameter validation and the manifest."""

    def test_coarse_must_be_coarser(self):
        """Test a coarse step not above the fine step is rejected."""
        with pytest.raises(ConfigError):
            small(coarse_step=0.1)

    def test_coarse_inside_fine(self):
        """Test the coarse grid may not extend past the fine grid."""
        with pytest.raises(ConfigError):
            small(coarse_n=9)

    def test_start_on_step_boundary(self):
        """Test the start time must fall on a 3-hour boundary."""
        with pytest.raises(ConfigError):
            small(start_epoch=1622505600 + 3600)

    def test_unknown_mapping(self):
        """Test only the known truth mappings are accepted."""
        with pytest.raises(ConfigError):
            small(mapping="cubic")

    def test_unknown_key(self):
        """Test unknown manifest keys are rejected."""
        with pytest.raises(ConfigError):
            SceneSpec.from_dict({"seed": 1, "resolution": 9})

    def test_manifest_roundtrip(self, small_spec):
        """Test the manifest text parses back to the same parameters."""
        assert parse_manifest(scene_manifest(small_spec)) == small_spec

    def test_hash_tracks_parameters(self, small_spec):
        """Test any parameter change changes the hash."""
        assert scene_hash(small_spec) == scene_hash(small())
        assert scene_hash(small_spec) != scene_hash(replace(small_spec, seed=1))
        assert scene_hash(small_spec) != scene_hash(replace(small_spec, station_noise=0.03))

    def test_invalid_manifest(self):
        """Test malformed manifest text raises FormatError."""
        with pytest.raises(FormatError):
            parse_manifest("{not json")


# ============================================================================
# TRUTH MAPPING
# ============================================================================

class TestTruthMapping:
    """Test the soil-moisture truth mapping."""

    def test_monotone_in_memory(self, small_spec):
        """Test wetter memory never lowers soil moisture."""
        memory = np.linspace(0.0, 20.0, 50)
        zero = np.zeros_like(memory)
        sm = truth_mapping(small_spec, memory, zero, zero + 0.4, zero + 0.25)
        assert np.all(np.diff(sm) >= 0.0)
        assert sm[-1] > sm[0]

    def test_warmer_is_drier(self, small_spec):
        """Test a positive temperature anomaly lowers soil moisture."""
        one = np.ones(1)
        cool = truth_mapping(small_spec, one, -one, one * 0.4, one * 0.25)
        warm = truth_mapping(small_spec, one, one, one * 0.4, one * 0.25)
        assert warm[0] < cool[0]

    def test_clamped(self, small_spec):
        """Test extreme inputs stay within the soil-moisture range."""
        big = np.array([-100.0, 100.0])
        sm = truth_mapping(small_spec, big, np.zeros(2), np.zeros(2), np.zeros(2))
        assert sm.min() >= SM_FLOOR and sm.max() <= SM_CEIL

    def test_linear_center(self):
        """Test the linear mapping returns its center at z = 0."""
        spec = small(mapping="linear", bias=0.0)
        zero = np.zeros(3)
        np.testing.assert_allclose(truth_mapping(spec, zero, zero, zero, zero), 0.25)

    def test_smooth_field_unit_variance(self):
        """Test random fields are standardized."""
        field = smooth_field(np.random.default_rng(0), (32, 32), 3.0)
        assert field.mean() == pytest.approx(0.0, abs=1e-12)
        assert field.std() == pytest.approx(1.0)


# ============================================================================
# SCENES
# ============================================================================

class TestScene:
    """Test generated scene contents."""

    def test_deterministic(self, small_spec, small_scene):
        """Test the same parameters reproduce the scene bit for bit."""
        again = gen_scene(small_spec)
        np.testing.assert_array_equal(again.cube_fine.values, small_scene.cube_fine.values)
        np.testing.assert_array_equal(again.target_coarse.mask, small_scene.target_coarse.mask)
        np.testing.assert_array_equal(again.stations[0].sm, small_scene.stations[0].sm)

    def test_seed_changes_scene(self, small_scene):
        """Test another seed gives another truth."""
        other = gen_scene(small(seed=5))
        assert not np.array_equal(other.truth_fine.values, small_scene.truth_fine.values)

    def test_shapes(self, small_scene):
        """Test cube shapes, schema and time axis."""
        assert small_scene.cube_fine.shape == (32, 24, 24, 9)
        assert small_scene.cube_coarse.shape == (32, 8, 8, 9)
        assert small_scene.cube_fine.schema == SCENE_SCHEMA
        np.testing.assert_array_equal(small_scene.cube_coarse.times, small_scene.cube_fine.times)

    def test_truth_range(self, small_scene):
        """Test the truth stays in the clamped range."""
        values = small_scene.truth_fine.values
        assert values.min() >= SM_FLOOR and values.max() <= SM_CEIL

    def test_target_hours(self, small_scene):
        """Test the coarse target exists only at the training hours."""
        hours = small_scene.target_coarse.times // 3600 % 24
        assert set(hours.tolist()) == set(TRAINING_HOURS)
        assert hours.size == 8

    def test_target_is_aggregated_truth(self, small_spec, small_scene):
        """Test valid target cells equal the coarse aggregate of the truth."""
        target = small_scene.target_coarse
        agg = aggregate_target(small_scene.truth_fine, small_spec.coarse_grid())
        idx = np.searchsorted(agg.times, target.times)
        np.testing.assert_array_equal(target.values[target.mask], agg.values[idx][target.mask])

    def test_gap_fraction(self, small_scene):
        """Test each target time has at least round(0.1 * 64) gaps."""
        masked = (~small_scene.target_coarse.mask).sum(axis=(1, 2))
        assert np.all(masked >= 6)

    def test_full_gaps_leave_no_patches(self):
        """Test gap fraction 1 masks every target cell."""
        scene = gen_scene(small(gap_fraction=1.0, days=1))
        assert not scene.target_coarse.mask.any()
        assert extract_patches(scene.cube_coarse, scene.target_coarse, 4, 3, 2) == []

    def test_water_cells_masked(self):
        """Test open-water cells are masked at every target time."""
        scene = gen_scene(small(water_fraction=0.25, gap_fraction=0.0, days=1))
        always = (~scene.target_coarse.mask).all(axis=0)
        assert always.sum() >= 16

    def test_input_noise_spares_truth(self, small_scene):
        """Test input noise perturbs the wetness channel only."""
        noisy = gen_scene(small(input_noise=0.5))
        np.testing.assert_array_equal(noisy.truth_fine.values, small_scene.truth_fine.values)
        wet = SCENE_SCHEMA.index("wetness_index")
        assert not np.array_equal(noisy.cube_fine.values[..., wet],
                                  small_scene.cube_fine.values[..., wet])
        np.testing.assert_array_equal(noisy.cube_fine.values[..., :wet],
                                      small_scene.cube_fine.values[..., :wet])

    def test_target_noise_in_range(self):
        """Test target noise keeps values inside [0, 1]."""
        scene = gen_scene(small(target_noise=0.5, days=1))
        valid = scene.target_coarse.values[scene.target_coarse.mask]
        assert valid.min() >= 0.0 and valid.max() <= 1.0


class TestStations:
    """Test synthetic station series."""

    def test_ids_and_networks(self, small_scene):
        """Test station ids and alternating networks."""
        assert [s.id for s in small_scene.stations] == [f"S{n:03d}" for n in range(6)]
        assert [s.network for s in small_scene.stations[:2]] == ["network_a", "network_b"]

    def test_distinct_cells(self, small_scene):
        """Test stations sit in distinct fine cells."""
        grid = small_scene.truth_fine.grid
        cells = {match_station_to_cell(s, grid) for s in small_scene.stations}
        assert len(cells) == 6

    def test_noise_free_stations_equal_truth(self):
        """Test zero station noise reproduces the truth at the station cell."""
        scene = gen_scene(small(station_noise=0.0, days=1))
        truth = scene.truth_fine
        for st in scene.stations:
            i, j = match_station_to_cell(st, truth.grid)
            np.testing.assert_array_equal(st.sm, truth.values[:, i, j])
            np.testing.assert_array_equal(st.times, truth.times)


class TestWriteScene:
    """Test the scene directory."""

    def test_layout_and_reload(self, small_spec, small_scene, temp_dir):
        """Test every product is written and reads back unchanged."""
        summary = write_scene(small_scene, small_spec, temp_dir / "scene")
        root = temp_dir / "scene"
        for name in ("fine", "coarse", "target", "truth_fine", "truth_coarse"):
            assert (root / name).is_dir()
        assert summary["hash"] == scene_hash(small_spec)
        assert summary["stations"] == 6
        assert parse_manifest((root / "scene.json").read_text()) == small_spec

        cube = load_cube(root / "coarse")
        np.testing.assert_array_equal(cube.values, small_scene.cube_coarse.values.astype(cube.values.dtype))
        target = load_target(root / "target")
        np.testing.assert_array_equal(target.mask, small_scene.target_coarse.mask)
        assert len(load_stations(root / "stations.csv")) == 6
