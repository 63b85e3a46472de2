import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlvdiff.registry import (
    MODALITY_NAMES,
    NUM_MODALITIES,
    PALETTE_SIZE,
    ModalityTensor,
    from_color_space,
    palette_color,
    seg_snap_residual,
    to_color_space,
)


def _clip(mod, data, space="native", aux=None):
    return ModalityTensor(mod, np.asarray(data, dtype=np.float64), space, aux)


def _rand_native(mod, rng, shape=(2, 8, 8)):
    T, H, W = shape
    if mod in ("rgb", "albedo"):
        return rng.random((T, H, W, 3))
    if mod == "depth":
        return rng.uniform(0.5, 20.0, (T, H, W, 1))
    if mod == "normal":
        v = rng.normal(size=(T, H, W, 3))
        return v / np.linalg.norm(v, axis=-1, keepdims=True)
    if mod in ("roughness", "metallic"):
        return rng.random((T, H, W, 1))
    if mod == "segmentation":
        return rng.integers(0, PALETTE_SIZE, (T, H, W, 1)).astype(np.float64)
    if mod == "canny":
        return rng.integers(0, 2, (T, H, W, 3)).astype(np.float64)
    raise AssertionError(mod)


class TestPalette:
    def test_registry_has_eight_unique_modalities(self):
        assert NUM_MODALITIES == 8
        assert len(set(MODALITY_NAMES)) == 8

    def test_id0_is_zero_hue_color(self):
        # hue 0, s=0.75, v=0.95 -> (0.95, 0.2375, 0.2375), frozen
        np.testing.assert_allclose(palette_color(0), [0.95, 0.2375, 0.2375], atol=1e-12)

    def test_deterministic_frozen_values(self):
        # frozen literals guard against cross-process / cross-version drift
        np.testing.assert_allclose(palette_color(7), palette_color(7))
        np.testing.assert_allclose(
            palette_color(1), [0.2375, 0.4454217500000003, 0.95], atol=1e-12
        )

    def test_all_256_distinct(self):
        pal = np.array([palette_color(k) for k in range(PALETTE_SIZE)])
        assert len(np.unique(pal.round(12), axis=0)) == PALETTE_SIZE

    def test_first_three_ids_hue_gaps(self):
        # hue_k = frac(k * 0.61803): {0.0, 0.61803, 0.23606}; the minimal
        # circular gap is 0.23606 (qualitatively well-separated)
        hues = [(k * 0.61803) % 1.0 for k in range(3)]
        np.testing.assert_allclose(hues, [0.0, 0.61803, 0.23606], atol=1e-9)
        gaps = []
        for i in range(3):
            for j in range(i + 1, 3):
                d = abs(hues[i] - hues[j])
                gaps.append(min(d, 1.0 - d))
        assert min(gaps) >= 0.23

    @pytest.mark.parametrize("bad", [-1, 256, 300, 0.5])
    def test_out_of_range_rejected(self, bad):
        with pytest.raises(ValueError):
            palette_color(bad)


class TestToColorSpace:
    def test_normal_unit_z(self):
        t = _clip("normal", np.tile([0.0, 0.0, 1.0], (1, 4, 4, 1)))
        c = to_color_space(t)
        np.testing.assert_allclose(c.data, np.tile([0.5, 0.5, 1.0], (1, 4, 4, 1)), atol=1e-12)

    def test_constant_depth_maps_to_half(self):
        t = _clip("depth", np.full((2, 4, 4, 1), 5.0))
        c = to_color_space(t)
        np.testing.assert_allclose(c.data, 0.5)
        assert c.aux["depth_min"] == 5.0 and c.aux["depth_max"] == 5.0

    def test_seg_colors_match_palette(self):
        ids = np.zeros((1, 4, 4, 1))
        ids[0, 0, 0, 0] = 1
        ids[0, 1, 0, 0] = 2
        c = to_color_space(_clip("segmentation", ids))
        np.testing.assert_allclose(c.data[0, 0, 0], palette_color(1))
        np.testing.assert_allclose(c.data[0, 1, 0], palette_color(2))
        np.testing.assert_allclose(c.data[0, 2, 2], palette_color(0))
        assert c.aux["ids"] == (0, 1, 2)

    def test_range_invariant_adversarial_depth(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(1e-6, 1e6, (2, 8, 8, 1))
        d[0, 0, 0, 0] = 1e-9
        d[1, 7, 7, 0] = 1e9
        c = to_color_space(_clip("depth", d))
        assert c.data.min() >= 0.0 and c.data.max() <= 1.0

    @pytest.mark.parametrize("mod", MODALITY_NAMES)
    def test_range_invariant_all_modalities(self, mod):
        rng = np.random.default_rng(3)
        c = to_color_space(_clip(mod, _rand_native(mod, rng)))
        assert c.data.min() >= 0.0 and c.data.max() <= 1.0
        assert c.space == "color"

    def test_nonfinite_rejected(self):
        bad = np.full((1, 4, 4, 1), np.nan)
        with pytest.raises(ValueError):
            _clip("roughness", bad)

    def test_seg_id_at_palette_size_rejected(self):
        with pytest.raises(ValueError):
            _clip("segmentation", np.full((1, 4, 4, 1), float(PALETTE_SIZE)))

    def test_wrong_space_rejected(self):
        c = to_color_space(_clip("rgb", np.zeros((1, 4, 4, 3))))
        with pytest.raises(ValueError):
            to_color_space(c)


class TestFromColorSpace:
    @pytest.mark.parametrize("mod", MODALITY_NAMES)
    def test_round_trip(self, mod):
        rng = np.random.default_rng(11)
        x = _rand_native(mod, rng)
        back = from_color_space(to_color_space(_clip(mod, x)))
        if mod == "segmentation":
            np.testing.assert_array_equal(back.data, x)
        else:
            np.testing.assert_allclose(back.data, x, atol=1e-5)

    def test_unit_z_color_decodes(self):
        c = ModalityTensor("normal", np.tile([0.5, 0.5, 1.0], (1, 4, 4, 1)), "color")
        n = from_color_space(c)
        np.testing.assert_allclose(n.data, np.tile([0.0, 0.0, 1.0], (1, 4, 4, 1)), atol=1e-12)

    def test_seg_snap_survives_small_perturbation(self):
        rng = np.random.default_rng(5)
        ids = rng.integers(0, 5, (2, 8, 8, 1)).astype(np.float64)
        c = to_color_space(_clip("segmentation", ids))
        noisy = np.clip(c.data + rng.uniform(-0.01, 0.01, c.data.shape), 0.0, 1.0)
        back = from_color_space(ModalityTensor("segmentation", noisy, "color", c.aux))
        np.testing.assert_array_equal(back.data, ids)

    def test_depth_decode_without_aux_rejected(self):
        c = ModalityTensor("depth", np.full((1, 4, 4, 3), 0.3), "color")
        with pytest.raises(ValueError):
            from_color_space(c)

    def test_normal_decode_renormalizes(self):
        # off-unit color decodes to an exactly unit vector
        c = ModalityTensor("normal", np.tile([0.9, 0.5, 0.5], (1, 4, 4, 1)), "color")
        n = from_color_space(c)
        np.testing.assert_allclose(np.linalg.norm(n.data, axis=-1), 1.0, atol=1e-12)

    def test_seg_residual_zero_on_exact_palette(self):
        ids = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        c = to_color_space(_clip("segmentation", ids))
        assert seg_snap_residual(c) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["depth", "normal", "roughness", "rgb"]))
def test_round_trip_property(seed, mod):
    rng = np.random.default_rng(seed)
    x = _rand_native(mod, rng, shape=(1, 4, 4))
    t = ModalityTensor(mod, x)
    back = from_color_space(to_color_space(t))
    np.testing.assert_allclose(back.data, x, atol=1e-5)
    assert back.space == "native"
