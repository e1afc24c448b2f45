"""Tests for IDW interpolation and the ablation switchboard."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2g.baselines_ablations import (
    ABLATION_NAMES,
    AblationSpec,
    apply_ablation,
    idw_densify,
)
from d2g.grid_domain import GridSpec
from d2g.model import ModelConfig

SPEC8 = GridSpec(height=8, width=8)


def naive_idw(values, mask, power, max_radius=None):
    h, w = values.shape
    out = np.zeros((h, w))
    stations = [(r, c, values[r, c]) for r in range(h) for c in range(w) if mask[r, c]]
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                out[i, j] = values[i, j]
                continue
            dmin = min(np.hypot(i - r, j - c) for r, c, _ in stations)
            if max_radius is not None and dmin > max_radius:
                continue
            num = den = 0.0
            for r, c, v in stations:
                wgt = np.hypot(i - r, j - c) ** (-power)
                num += wgt * v
                den += wgt
            out[i, j] = num / den
    return out


class TestIdwDensify:
    def test_station_cells_return_their_value_exactly(self):
        values = np.zeros((8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        values[1, 2] = 3.7
        mask[1, 2] = True
        values[4, 0] = 0.0
        mask[4, 0] = True
        out = idw_densify(values, mask, SPEC8).values
        assert out[1, 2] == 3.7
        assert out[4, 0] == 0.0

    def test_equidistant_pair_averages(self):
        values = np.zeros((8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        values[2, 0], values[2, 4] = 0.0, 10.0
        mask[2, 0] = mask[2, 4] = True
        out = idw_densify(values, mask, SPEC8).values
        assert out[2, 2] == pytest.approx(5.0, abs=1e-12)

    def test_three_stations_match_naive_oracle(self):
        rng = np.random.default_rng(0)
        values = np.zeros((8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        for r, c in [(0, 1), (3, 3), (4, 0)]:
            mask[r, c] = True
            values[r, c] = rng.gamma(2.0, 2.0)
        out = idw_densify(values, mask, SPEC8, power=2.0).values
        want = naive_idw(values, mask, power=2.0)
        np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)

    def test_max_radius_zeroes_far_cells(self):
        values = np.zeros((8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        values[0, 0] = 8.0
        mask[0, 0] = True
        out = idw_densify(values, mask, SPEC8, max_radius=2.0).values
        assert out[0, 1] > 0
        assert out[4, 4] == 0.0
        assert out[0, 0] == 8.0
        want = naive_idw(values, mask, power=2.0, max_radius=2.0)
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_no_stations_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            idw_densify(np.zeros((8, 8)), np.zeros((8, 8), dtype=bool), SPEC8)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            idw_densify(np.zeros((4, 4)), np.zeros((4, 4), dtype=bool), SPEC8)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_interpolation_stays_inside_value_range(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((8, 8)) < 0.3
        if not mask.any():
            mask[2, 2] = True
        values = np.where(mask, rng.gamma(2.0, 2.0, (8, 8)), 0.0)
        out = idw_densify(values, mask, SPEC8).values
        lo, hi = values[mask].min(), values[mask].max()
        assert out.min() >= lo - 1e-12
        assert out.max() <= hi + 1e-12


class TestAblationSpec:
    def test_all_names_construct(self):
        for name in ABLATION_NAMES:
            assert AblationSpec(name).name == name

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown ablation"):
            AblationSpec("no_unet")

    def test_target_inputs_flag(self):
        assert AblationSpec("target_inputs").target_inputs
        assert not AblationSpec("full").target_inputs


def config_delta(a: ModelConfig, b: ModelConfig) -> set:
    da, db = a.to_dict(), b.to_dict()
    return {k for k in da if da[k] != db[k]}


class TestApplyAblation:
    BASE = ModelConfig()

    def test_full_is_identity(self):
        assert apply_ablation(self.BASE, "full") == self.BASE

    def test_target_inputs_leaves_model_untouched(self):
        assert apply_ablation(self.BASE, "target_inputs") == self.BASE

    def test_no_bottleneck_swaps_model_kind_only(self):
        cfg = apply_ablation(self.BASE, "no_bottleneck")
        assert config_delta(self.BASE, cfg) == {"model_kind"}
        assert cfg.model_kind == "pixel_merge"

    def test_no_stations_collapses_history(self):
        cfg = apply_ablation(self.BASE, "no_stations")
        assert config_delta(self.BASE, cfg) == {"timesteps"}
        assert cfg.timesteps == 1

    def test_no_radar_flips_radar_flag_only(self):
        cfg = apply_ablation(self.BASE, "no_radar")
        assert config_delta(self.BASE, cfg) == {"use_radar"}

    def test_no_te_requires_and_uses_grid_shape(self):
        with pytest.raises(ValueError, match="grid_shape"):
            apply_ablation(self.BASE, "no_te")
        cfg = apply_ablation(self.BASE, "no_te", grid_shape=(32, 32))
        assert config_delta(self.BASE, cfg) == {"te_attention", "bottleneck_hw"}
        assert cfg.bottleneck_hw == (4, 4)

    def test_no_te_rejects_indivisible_grid(self):
        with pytest.raises(ValueError, match="divisible"):
            apply_ablation(self.BASE, "no_te", grid_shape=(30, 30))

    def test_distribution_swaps(self):
        assert apply_ablation(self.BASE, "gamma").distribution == "gamma"
        assert apply_ablation(self.BASE, "gaussian").distribution == "gaussian"
        assert config_delta(self.BASE, apply_ablation(self.BASE, "gamma")) == {
            "distribution"
        }

    def test_accepts_spec_objects(self):
        cfg = apply_ablation(self.BASE, AblationSpec("gamma"))
        assert cfg.distribution == "gamma"

    def test_every_variant_yields_buildable_config(self):
        from d2g.model import build_model

        for name in ABLATION_NAMES:
            cfg = apply_ablation(self.BASE, name, grid_shape=(16, 16))
            model = build_model(dataclasses.replace(cfg))
            assert sum(p.numel() for p in model.parameters()) > 0
