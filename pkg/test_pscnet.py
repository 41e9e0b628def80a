#!/usr/bin/env python3
"""
Network tests: configuration, context encoding, blocks, inference.

Run with: pytest test_pscnet.py -v
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from core.diffcore import Tensor, tensor
from core.geodata import (
    Channel, DataCube, DomainBounds, GeoGrid, VarSchema, zscore_fit, zscore_fit_target,
)
from core.pscnet import (
    ModelConfig, activation_audit, add_context, as_tensors, check_params, context_channels,
    distill_plan, hour_of_year, infer_full, init_params, load_params, masked_window,
    mftf_forward, model_forward, output_mask, parameter_group, parameter_inventory,
    parameter_shapes, positional_encode, prepare_inputs, receptive_radius, save_params,
    se_forward, stage_forward,
)
from core.stdown_core import ConfigError, FormatError, SchemaMismatchError, ShapeMismatchError

JAN1_2021 = 1609459200
JAN1_2020 = 1577836800
NORM_TOKENS = {"norm", "bn", "batchnorm", "running", "mean", "var", "gamma", "beta", "stats"}


def zero_stage_params(config: ModelConfig) -> dict:
    return {k: np.zeros(v.shape) for k, v in init_params(config, 0).items()}


def stage_input(h: int, w: int, c: int, seed: int = 0) -> Tensor:
    return tensor(np.random.default_rng(seed).standard_normal((h, w, c)))


@st.composite
def model_configs(draw):
    base = draw(st.sampled_from([2, 4, 8]))
    stages = draw(st.integers(1, 3))
    return ModelConfig(
        in_channels=draw(st.integers(4, 12)),
        base_channels=base,
        window_length=draw(st.integers(1, 6)),
        tcn_dilations=tuple(draw(st.lists(st.integers(1, 4), min_size=1, max_size=3))),
        distill_kernel=draw(st.sampled_from([2, 3])),
        num_stages=stages,
        stage_dilations=tuple(draw(st.lists(st.integers(1, 3), min_size=stages, max_size=stages))),
        se_reduction=draw(st.sampled_from([d for d in (1, 2, 4) if base % d == 0])),
        ffn_expansion=draw(st.integers(1, 2)),
        se_pool=draw(st.sampled_from(["global", "local"])),
        se_window=draw(st.sampled_from([3, 5])),
    ).validate()


# ============================================================================
# CONFIGURATION & PARAMETERS
# ============================================================================

class TestModelConfig:
    """Test configuration validation and parameter tables."""

    def test_default_validates(self):
        """Test the default configuration is consistent."""
        cfg = ModelConfig().validate()
        assert cfg.tcn_levels == 3
        assert len(cfg.stage_dilations) == cfg.num_stages

    def test_reduction_must_divide_width(self):
        """Test se_reduction must divide base_channels."""
        with pytest.raises(ConfigError):
            ModelConfig(base_channels=10, se_reduction=4).validate()

    def test_one_dilation_per_stage(self):
        """Test stage_dilations length must equal num_stages."""
        with pytest.raises(ConfigError):
            ModelConfig(num_stages=2, stage_dilations=(1,)).validate()

    def test_counts_positive(self):
        """Test zero counts are rejected."""
        with pytest.raises(ConfigError):
            ModelConfig(window_length=0).validate()

    def test_unknown_keys(self):
        """Test unknown model keys are rejected."""
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"depth": 3})

    def test_dict_roundtrip(self):
        """Test to_dict/from_dict keep tuples of dilations."""
        cfg = tiny_model(se_pool="local")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_groups_partition_parameters(self):
        """Test every parameter belongs to exactly one group."""
        params = init_params(tiny_model(), 0)
        groups = {name: parameter_group(name) for name in params}
        assert set(groups.values()) == {"temporal", "spatial"}
        assert all(g == "temporal" for n, g in groups.items() if n.startswith("mftf."))
        assert not any("norm" in n or "running" in n for n in params)

    def test_default_init_zero_head(self):
        """Test the default scheme starts with zero biases and head."""
        params = init_params(tiny_model(), 0)
        assert not params["head.w"].any()
        assert not params["mftf.input.b"].any()
        assert params["mftf.input.w"].any()

    def test_init_deterministic(self):
        """Test the same seed draws the same parameters."""
        a, b = init_params(tiny_model(), 5, "random"), init_params(tiny_model(), 5, "random")
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_unknown_scheme(self):
        """Test unknown init schemes are rejected."""
        with pytest.raises(ConfigError):
            init_params(tiny_model(), 0, "xavier")

    def test_params_file_roundtrip(self, temp_dir):
        """Test params.bin in declaration order, 64-bit exact."""
        params = init_params(tiny_model(), 1, "random")
        inventory = parameter_inventory(params)
        path = save_params(temp_dir / "params.bin", params, "f64le")
        back = load_params(path, inventory, "f64le")
        assert list(back) == list(params)
        assert all(np.array_equal(back[k], params[k]) for k in params)

    def test_params_file_f32_size(self, temp_dir):
        """Test f32le stores 4 bytes per parameter."""
        params = init_params(tiny_model(), 1)
        total = sum(a.size for a in params.values())
        path = save_params(temp_dir / "params.bin", params)
        assert path.stat().st_size == 4 * total

    def test_params_file_size_mismatch(self, temp_dir):
        """Test a params.bin that does not fit the table raises."""
        params = init_params(tiny_model(), 1)
        path = save_params(temp_dir / "params.bin", params)
        inventory = parameter_inventory(init_params(tiny_model(base_channels=8), 1))
        with pytest.raises(FormatError):
            load_params(path, inventory)

    def test_check_params(self):
        """Test parameters from another configuration are rejected."""
        with pytest.raises(SchemaMismatchError):
            check_params(init_params(tiny_model(), 0), tiny_model(num_stages=2, stage_dilations=(1, 2)))


class TestDistillPlan:
    """Test the temporal distillation schedule."""

    def test_t5(self):
        """Test T=5, k=3 shrinks 5 -> 3 -> 1."""
        assert distill_plan(5, 3, (1, 1)) == [(3, 1), (3, 1)]

    def test_t5_default_dilations(self):
        """Test a level too long for the sequence closes with kernel T_l."""
        assert distill_plan(5, 3, (1, 2, 4)) == [(3, 1), (3, 1)]

    def test_t1(self):
        """Test T=1 applies a length-1 kernel."""
        assert distill_plan(1, 3, (1, 2)) == [(1, 1)]

    def test_t2(self):
        """Test T=2 with effective length 3 uses one length-2 kernel."""
        assert distill_plan(2, 3, (1,)) == [(2, 1)]

    @pytest.mark.parametrize("t_len", range(1, 12))
    def test_always_reaches_one(self, t_len):
        """Test every plan ends at length 1."""
        length = t_len
        for k, d in distill_plan(t_len, 3, (1, 2)):
            length -= d * (k - 1)
        assert length == 1


# ============================================================================
# CONTEXT
# ============================================================================

class TestContext:
    """Test positional context channels."""

    GRID = GeoGrid(35.0, -100.0, 0.1, 0.1, 3, 4)

    def test_year_start_hoy(self):
        """Test Jan 1 00:00 has HOY 0 everywhere."""
        ctx = context_channels([JAN1_2021], self.GRID, DomainBounds.from_grid(self.GRID))
        assert not ctx[..., 0].any()

    def test_mid_year_hoy(self):
        """Test hour 4392 maps to 0.5."""
        t = JAN1_2020 + 4392 * 3600
        assert hour_of_year([t])[0] == 4392
        ctx = context_channels([t], self.GRID, DomainBounds.from_grid(self.GRID))
        np.testing.assert_allclose(ctx[..., 0], 0.5)

    def test_latitude_midpoint(self):
        """Test the middle row of the domain has latitude 0.5."""
        ctx = context_channels([JAN1_2021], self.GRID, DomainBounds.from_grid(self.GRID))
        np.testing.assert_allclose(ctx[0, 1, :, 2], 0.5)
        assert np.all((ctx[..., 1] > 0) & (ctx[..., 1] < 1))

    def test_rejects_existing_context(self):
        """Test encoding a window that already has context raises."""
        window = np.zeros((1, 3, 4, 2))
        with pytest.raises(SchemaMismatchError):
            positional_encode(window, [JAN1_2021], self.GRID, DomainBounds.from_grid(self.GRID),
                              ["a", "HOY"])

    def test_add_context_twice(self, small_scene):
        """Test cubes cannot be encoded twice."""
        cube = small_scene.cube_coarse
        bounds = DomainBounds.from_grid(cube.grid)
        encoded = add_context(cube, bounds)
        assert len(encoded.schema) == len(cube.schema) + 3
        assert encoded.mask[..., -3:].all()
        with pytest.raises(SchemaMismatchError):
            add_context(encoded, bounds)

    def test_fine_grid_uses_training_bounds(self, small_scene):
        """Test fine-grid context is normalized with the coarse domain bounds."""
        bounds = DomainBounds.from_grid(small_scene.cube_coarse.grid)
        fine = small_scene.cube_fine.grid
        ctx = context_channels([JAN1_2021], fine, bounds)
        expected = (fine.lons() - bounds.lon_min) / (bounds.lon_max - bounds.lon_min)
        np.testing.assert_allclose(ctx[0, 0, :, 1], expected)


# ============================================================================
# BLOCKS
# ============================================================================

class TestBlocks:
    """Test the SE gate and residual stages."""

    def test_se_zero_weights_halve(self):
        """Test zero gate weights give sigmoid(0) = 0.5."""
        cfg = tiny_model()
        params = as_tensors(zero_stage_params(cfg))
        x = stage_input(5, 5, cfg.base_channels)
        out = se_forward(x, params, "stage0.se", cfg)
        np.testing.assert_allclose(out.data, x.data / 2)

    def test_se_saturated_gate(self):
        """Test a large positive gate bias passes the input through."""
        cfg = tiny_model()
        raw = zero_stage_params(cfg)
        raw["stage0.se.b2"] = np.full(cfg.base_channels, 50.0)
        x = stage_input(5, 5, cfg.base_channels)
        out = se_forward(x, as_tensors(raw), "stage0.se", cfg)
        np.testing.assert_allclose(out.data, x.data, rtol=1e-12)

    @pytest.mark.parametrize("pool", ["global", "local"])
    def test_se_constant_field(self, pool):
        """Test a constant field stays constant per channel."""
        cfg = tiny_model(se_pool=pool, se_window=3)
        params = as_tensors(init_params(cfg, 2, "random"))
        x = tensor(np.ones((6, 7, 1)) * np.arange(1.0, cfg.base_channels + 1))
        out = se_forward(x, params, "stage0.se", cfg).data
        np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), rtol=1e-12)

    def test_zero_branches_are_identity(self):
        """Test a stage with zero branch weights is the identity."""
        cfg = tiny_model()
        x = stage_input(6, 6, cfg.base_channels)
        out = stage_forward(x, as_tensors(zero_stage_params(cfg)), 0, cfg)
        np.testing.assert_array_equal(out.data, x.data)

    def test_stage_keeps_spatial_shape(self):
        """Test stages never change H x W."""
        cfg = tiny_model(stage_dilations=(2,))
        out = stage_forward(stage_input(9, 5, cfg.base_channels),
                            as_tensors(init_params(cfg, 0, "random")), 0, cfg)
        assert out.shape == (9, 5, cfg.base_channels)

    def test_mftf_collapses_time(self):
        """Test the temporal block maps (T, C) sequences to one feature vector."""
        cfg = tiny_model()
        x = np.random.default_rng(3).standard_normal((3, 2, cfg.window_length, cfg.in_channels))
        out = mftf_forward(tensor(x), as_tensors(init_params(cfg, 0, "random")), cfg)
        assert out.shape == (3, 2, cfg.base_channels)

    def test_mftf_is_per_pixel(self):
        """Test changing one pixel's sequence only changes that pixel's features."""
        cfg = tiny_model()
        params = as_tensors(init_params(cfg, 0, "random"))
        x = np.random.default_rng(4).standard_normal((3, 3, cfg.window_length, cfg.in_channels))
        y = x.copy()
        y[1, 2] += 1.0
        a = mftf_forward(tensor(x), params, cfg).data
        b = mftf_forward(tensor(y), params, cfg).data
        changed = np.any(a != b, axis=-1)
        expected = np.zeros((3, 3), dtype=bool)
        expected[1, 2] = True
        np.testing.assert_array_equal(changed, expected)

    def test_receptive_radius(self):
        """Test the radius sums the dilated kernel reach of every stage."""
        assert receptive_radius(tiny_model()) == 1
        assert receptive_radius(tiny_model(num_stages=2, stage_dilations=(1, 2))) == 3
        assert receptive_radius(tiny_model(se_pool="local", se_window=3)) == 2

    def test_perturbation_stays_in_receptive_field(self):
        """Test a single-pixel change only moves outputs within the radius."""
        cfg = tiny_model(num_stages=2, stage_dilations=(1, 2), se_pool="local", se_window=3)
        radius = receptive_radius(cfg)
        params = as_tensors(init_params(cfg, 3, "random"))
        window = np.random.default_rng(4).standard_normal((cfg.window_length, 21, 21, cfg.in_channels))
        base = model_forward(window, params, cfg).data
        bumped = window.copy()
        bumped[:, 10, 10, :] += 1.0
        diff = np.abs(model_forward(bumped, params, cfg).data - base)
        far = np.ones(diff.shape, bool)
        far[10 - radius:11 + radius, 10 - radius:11 + radius] = False
        assert diff[far].max() <= 1e-12
        assert diff[10, 10] > 0

    def test_crop_matches_full_image(self):
        """Test a 32x32 crop reproduces full-image outputs wherever its receptive field fits."""
        cfg = tiny_model(num_stages=2, stage_dilations=(1, 2), se_pool="local", se_window=3)
        radius = receptive_radius(cfg)
        params = as_tensors(init_params(cfg, 5, "random"))
        window = np.random.default_rng(6).standard_normal((cfg.window_length, 48, 40, cfg.in_channels))
        full = model_forward(window, params, cfg).data
        top, left = 9, 4
        crop = model_forward(window[:, top:top + 32, left:left + 32], params, cfg).data
        inner = slice(radius, 32 - radius)
        np.testing.assert_allclose(
            crop[inner, inner],
            full[top + radius:top + 32 - radius, left + radius:left + 32 - radius],
            rtol=0, atol=1e-12,
        )
        assert np.abs(crop[0, 0] - full[top, left]) > 0

    def test_activations_are_gelu_and_sigmoid(self):
        """Test the only nonlinearities are GELU and the gate sigmoid."""
        assert activation_audit(tiny_model()) == ["gelu", "sigmoid"]


# ============================================================================
# FORWARD & INFERENCE
# ============================================================================

class TestForward:
    """Test whole-model forward passes."""

    @pytest.mark.parametrize("h,w", [(32, 32), (37, 51)])
    def test_no_downsampling(self, h, w):
        """Test the output map matches the input grid."""
        cfg = tiny_model()
        params = as_tensors(init_params(cfg, 0, "random"))
        window = np.random.default_rng(0).standard_normal((cfg.window_length, h, w, cfg.in_channels))
        assert model_forward(window, params, cfg).shape == (h, w)

    @settings(max_examples=50, deadline=None)
    @given(cfg=model_configs(), h=st.integers(1, 20), w=st.integers(1, 20), seed=st.integers(0, 2**16))
    def test_random_configs_keep_grid(self, cfg, h, w, seed):
        """Test any valid configuration maps an H x W window to an H x W map."""
        params = as_tensors(init_params(cfg, seed, "random"))
        window = np.random.default_rng(seed).standard_normal((cfg.window_length, h, w, cfg.in_channels))
        out = model_forward(window, params, cfg)
        assert out.shape == (h, w)
        assert np.isfinite(out.data).all()

    @settings(max_examples=50, deadline=None)
    @given(cfg=model_configs())
    def test_no_normalization_tensors(self, cfg):
        """Test the parameter table holds only weights and biases, no normalization state."""
        names = [name for name, _ in parameter_shapes(cfg)]
        tokens = {tok for name in names for tok in name.replace("_", ".").split(".")}
        assert not tokens & NORM_TOKENS
        assert all(name.endswith((".w", ".b", ".k", ".w1", ".b1", ".w2", ".b2", "_up", "_down"))
                   for name in names)
        assert set(names) == set(init_params(cfg, 0))

    def test_identical_batch_members(self):
        """Test identical windows in a batch give identical outputs."""
        cfg = tiny_model()
        params = as_tensors(init_params(cfg, 0, "random"))
        window = np.random.default_rng(1).standard_normal((cfg.window_length, 8, 8, cfg.in_channels))
        out = model_forward(np.stack([window, window]), params, cfg).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_window_shape_checked(self):
        """Test windows of the wrong length or width are rejected."""
        cfg = tiny_model()
        params = as_tensors(init_params(cfg, 0))
        with pytest.raises(ShapeMismatchError):
            model_forward(np.zeros((cfg.window_length + 1, 4, 4, cfg.in_channels)), params, cfg)
        with pytest.raises(ShapeMismatchError):
            model_forward(np.zeros((cfg.window_length, 4, 4, 3)), params, cfg)

    def test_output_mask_dilates_gaps(self):
        """Test invalid pixels mask outputs within the radius."""
        valid = np.ones((7, 7), bool)
        valid[3, 3] = False
        out = output_mask(valid, 1)
        assert not out[2:5, 2:5].any()
        assert out.sum() == 49 - 9
        np.testing.assert_array_equal(output_mask(valid, 0), valid)


class TestInference:
    """Test full-grid inference on the small scene."""

    @pytest.fixture
    def setup(self, small_scene):
        cube = small_scene.cube_coarse
        cfg = tiny_model()
        return dict(
            cfg=cfg, params=init_params(cfg, 7, "random"), stats=zscore_fit(cube),
            target_stats=zscore_fit_target(small_scene.target_coarse),
            bounds=DomainBounds.from_grid(cube.grid),
        )

    def test_coarse_self_inference_matches_forward(self, small_scene, setup):
        """Test infer_full reproduces a direct forward pass on the training grid."""
        cube = small_scene.cube_coarse
        out = infer_full(cube, setup["params"], setup["cfg"], setup["stats"],
                         setup["target_stats"], setup["bounds"])
        prepared = prepare_inputs(cube, setup["cfg"], setup["stats"], setup["bounds"])
        k = cube.times.size - 1
        window, _ = masked_window(prepared.cube, k, setup["cfg"].window_length)
        pred = model_forward(window, as_tensors(setup["params"]), setup["cfg"]).data
        ts = setup["target_stats"]
        expected = np.clip(pred * ts.std[0] + ts.mean[0], 0.0, 1.0)
        valid = out.mask[k]
        assert valid.any()
        np.testing.assert_array_equal(out.values[k][valid], expected[valid])

    def test_fine_grid_output(self, small_scene, setup):
        """Test inference on the denser grid keeps its shape and time axis."""
        cube = small_scene.cube_fine
        out = infer_full(cube, setup["params"], setup["cfg"], setup["stats"],
                         setup["target_stats"], setup["bounds"])
        assert out.grid == cube.grid
        np.testing.assert_array_equal(out.times, cube.times)
        t_len = setup["cfg"].window_length
        assert not out.mask[:t_len - 1].any()
        assert out.mask[t_len - 1:].any()
        assert np.all((out.values >= 0.0) & (out.values <= 1.0))

    def test_thread_count_does_not_matter(self, small_scene, setup):
        """Test results are identical for 1 and 3 workers."""
        args = (small_scene.cube_coarse, setup["params"], setup["cfg"], setup["stats"],
                setup["target_stats"], setup["bounds"])
        one, three = infer_full(*args, threads=1), infer_full(*args, threads=3)
        np.testing.assert_array_equal(one.values, three.values)
        np.testing.assert_array_equal(one.mask, three.mask)

    def test_schema_mismatch(self, small_scene, setup):
        """Test a cube with other channels is rejected."""
        cube = small_scene.cube_coarse
        schema = VarSchema(tuple(Channel(f"x{i}", c.kind, c.units)
                                 for i, c in enumerate(cube.schema.channels)))
        renamed = DataCube(cube.grid, schema, cube.times, cube.values, cube.mask)
        with pytest.raises(SchemaMismatchError):
            infer_full(renamed, setup["params"], setup["cfg"], setup["stats"],
                       setup["target_stats"], setup["bounds"])

    def test_masked_input_masks_output(self, small_scene, setup):
        """Test an invalid input pixel masks the outputs around it."""
        cube = small_scene.cube_coarse
        mask = np.array(cube.mask)
        mask[:, 4, 4, 0] = False
        gapped = cube.replace(mask=mask)
        out = infer_full(gapped, setup["params"], setup["cfg"], setup["stats"],
                         setup["target_stats"], setup["bounds"])
        k = cube.times.size - 1
        radius = receptive_radius(setup["cfg"])
        assert not out.mask[k, 4 - radius:5 + radius, 4 - radius:5 + radius].any()

    @pytest.mark.parametrize("pool", ["local", "global"])
    def test_unmasked_outputs_and_image_wide_gate(self, small_scene, setup, pool):
        """Test masked inputs leave valid outputs alone only with the local gate."""
        cfg = tiny_model(se_pool=pool, se_window=3)
        params = init_params(cfg, 7, "random")
        cube = small_scene.cube_coarse
        mask = np.array(cube.mask)
        mask[:, 0, 0, 0] = False
        args = (params, cfg, setup["stats"], setup["target_stats"], setup["bounds"])
        base = infer_full(cube, *args)
        gapped = infer_full(cube.replace(mask=mask), *args)
        k = cube.times.size - 1
        shared = base.mask[k] & gapped.mask[k]
        assert shared.any()
        if pool == "local":
            np.testing.assert_array_equal(gapped.values[k][shared], base.values[k][shared])
        else:
            assert np.any(gapped.values[k][shared] != base.values[k][shared])
