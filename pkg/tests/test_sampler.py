import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ctrlvdiff import sampler as sp
from ctrlvdiff.codec import LatentCodec
from ctrlvdiff.datastore import ClipRecord
from ctrlvdiff.denoiser import DenoiserConfig, init_params
from ctrlvdiff.diffusion import make_schedule
from ctrlvdiff.registry import (MODALITY_NAMES, PALETTE_SIZE, ModalityTensor,
                                to_color_space)


@pytest.fixture(scope="module")
def rig():
    model = init_params(DenoiserConfig(dim=16, depth=1, heads=2, max_t=4,
                                       max_grid=4, seed=0))
    return model, LatentCodec(patch=2, seed=0), make_schedule("linear-beta", 10)


def _native_clip(seed=0, t=2, h=8, w=8):
    rng = np.random.default_rng(seed)
    unit_z = np.zeros((t, h, w, 3))
    unit_z[..., 2] = 1.0
    tensors = {
        "rgb": ModalityTensor("rgb", rng.random((t, h, w, 3))),
        "depth": ModalityTensor("depth", 1.0 + rng.random((t, h, w, 1)) * 4.0),
        "normal": ModalityTensor("normal", unit_z),
        "albedo": ModalityTensor("albedo", rng.random((t, h, w, 3))),
        "roughness": ModalityTensor("roughness", rng.random((t, h, w, 1))),
        "metallic": ModalityTensor("metallic", rng.random((t, h, w, 1))),
        "segmentation": ModalityTensor("segmentation", np.zeros((t, h, w, 1))),
        "canny": ModalityTensor("canny", np.zeros((t, h, w, 3))),
    }
    return ClipRecord(clip_id="clip_edit", tensors=tensors,
                      caption="1 sphere, red, rough, camera orbit, light bright",
                      meta={})


class TestRequestValidation:
    def _rgb(self):
        return ModalityTensor("rgb", np.random.default_rng(0).random((2, 8, 8, 3)))

    def test_empty_targets_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            sp.GenerationRequest(conditions={"rgb": self._rgb()}, caption="x",
                                 targets=(), steps=2)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            sp.GenerationRequest(conditions={"rgb": self._rgb()}, caption="x",
                                 targets=("rgb", "depth"), steps=2)

    def test_unknown_modality_rejected(self):
        with pytest.raises(ValueError, match="unknown modality"):
            sp.GenerationRequest(conditions={}, caption="x", targets=("flow",),
                                 steps=2, frames=2, size=(8, 8))

    def test_duplicate_targets_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            sp.GenerationRequest(conditions={}, caption="x",
                                 targets=("depth", "depth"), steps=2,
                                 frames=2, size=(8, 8))

    def test_unconditioned_needs_shape(self):
        with pytest.raises(ValueError, match="frames and size"):
            sp.GenerationRequest(conditions={}, caption="x", targets=("rgb",),
                                 steps=2)

    def test_condition_modality_mismatch_rejected(self):
        with pytest.raises(ValueError, match="depth"):
            sp.GenerationRequest(conditions={"depth": self._rgb()}, caption="x",
                                 targets=("rgb",), steps=2)


class TestStride:
    def test_single_step_is_deepest_index(self):
        assert list(sp._stride(1000, 1)) == [999]

    def test_full_run_covers_everything(self):
        assert list(sp._stride(10, 10)) == list(range(9, -1, -1))

    def test_subsequences_descend_and_keep_endpoints(self):
        for n, k in [(1000, 50), (100, 7), (10, 3), (50, 49), (8, 2)]:
            ts = sp._stride(n, k)
            assert len(ts) == k
            assert len(set(ts.tolist())) == k
            assert (np.diff(ts) < 0).all()
            assert ts[0] == n - 1 and ts[-1] == 0

    def test_more_steps_than_schedule_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            sp._stride(10, 11)


class TestGenerate:
    def test_single_step_equals_one_shot_estimate(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=1)
        rgb = clip.tensors["rgb"]
        req = sp.GenerationRequest(conditions={"rgb": rgb}, caption="probe",
                                   targets=("depth",), steps=1, seed=9)
        res = sp.generate(model, codec, schedule, req)

        rng = np.random.default_rng(9)
        z = rng.standard_normal((2, 4, 4, 12))
        cond_lat = codec.encode(to_color_space(rgb)).data
        roles = sp._roles_for({"rgb": rgb}, ("depth",))
        stack = sp._assemble({"rgb": cond_lat, "depth": z}, roles, (2, 4, 4), 12)
        eps = sp._predict(model, stack, roles, schedule.num_steps - 1, "probe")["depth"]
        a = float(schedule.alpha_bar[-1])
        x0 = (z - math.sqrt(1.0 - a) * eps) / math.sqrt(a)
        expected = np.clip(codec.decode_array(x0, "depth"), 0.0, 1.0)
        assert_array_equal(res.color["depth"].data, expected)

    def test_seed_determinism(self, rig):
        model, codec, schedule = rig
        rgb = _native_clip(seed=2).tensors["rgb"]
        req = sp.GenerationRequest(conditions={"rgb": rgb}, caption="probe",
                                   targets=("depth", "segmentation"), steps=4,
                                   seed=3)
        a = sp.generate(model, codec, schedule, req)
        b = sp.generate(model, codec, schedule, req)
        for m in req.targets:
            assert_array_equal(a.color[m].data, b.color[m].data)
            assert_array_equal(a.native[m].data, b.native[m].data)

    def test_seed_changes_output(self, rig):
        model, codec, schedule = rig
        rgb = _native_clip(seed=2).tensors["rgb"]
        base = dict(conditions={"rgb": rgb}, caption="probe",
                    targets=("depth",), steps=3)
        a = sp.generate(model, codec, schedule,
                        sp.GenerationRequest(seed=0, **base))
        b = sp.generate(model, codec, schedule,
                        sp.GenerationRequest(seed=1, **base))
        assert not np.array_equal(a.color["depth"].data, b.color["depth"].data)

    def test_conditions_untouched_and_echoed(self, rig):
        model, codec, schedule = rig
        rgb = _native_clip(seed=4).tensors["rgb"]
        before = rgb.data.copy()
        req = sp.GenerationRequest(conditions={"rgb": rgb}, caption="probe",
                                   targets=("albedo",), steps=2, seed=0)
        res = sp.generate(model, codec, schedule, req)
        assert res.conditions["rgb"] is rgb
        assert_array_equal(rgb.data, before)

    def test_unconditioned_all_targets(self, rig):
        model, codec, schedule = rig
        req = sp.GenerationRequest(conditions={}, caption="probe",
                                   targets=tuple(MODALITY_NAMES), steps=2,
                                   seed=5, frames=2, size=(8, 8))
        res = sp.generate(model, codec, schedule, req)
        assert set(res.native) == set(MODALITY_NAMES)
        for m in MODALITY_NAMES:
            assert res.native[m].space == "native"
            assert res.native[m].data.shape[:3] == (2, 8, 8)

    def test_condition_resolution_mismatch_rejected(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=6)
        small = ModalityTensor("depth",
                               1.0 + np.random.default_rng(0).random((2, 4, 4, 1)))
        req = sp.GenerationRequest(
            conditions={"rgb": clip.tensors["rgb"], "depth": small},
            caption="x", targets=("albedo",), steps=2)
        with pytest.raises(ValueError, match="disagree"):
            sp.generate(model, codec, schedule, req)

    def test_indivisible_size_rejected(self, rig):
        model, codec, schedule = rig
        req = sp.GenerationRequest(conditions={}, caption="x", targets=("rgb",),
                                   steps=2, frames=2, size=(9, 8))
        with pytest.raises(ValueError, match="divisible"):
            sp.generate(model, codec, schedule, req)

    def test_grid_beyond_model_capacity_rejected(self, rig):
        model, codec, schedule = rig
        req = sp.GenerationRequest(conditions={}, caption="x", targets=("rgb",),
                                   steps=2, frames=2, size=(16, 16))
        with pytest.raises(ValueError):
            sp.generate(model, codec, schedule, req)


class TestUnderstand:
    def test_returns_seven_well_formed_modalities(self, rig):
        model, codec, schedule = rig
        rgb = _native_clip(seed=7).tensors["rgb"]
        res = sp.understand(model, codec, schedule, rgb, "probe", steps=3, seed=1)
        assert set(res.native) == set(MODALITY_NAMES) - {"rgb"}

        normals = res.native["normal"].data
        assert np.abs(np.linalg.norm(normals, axis=-1) - 1.0).max() <= 1e-4
        assert res.native["depth"].data.min() > 0.0
        seg = res.native["segmentation"].data
        assert_array_equal(seg, np.rint(seg))
        assert seg.min() >= 0 and seg.max() < PALETTE_SIZE
        assert np.isin(res.native["canny"].data, (0.0, 1.0)).all()
        assert res.seg_residual is not None and math.isfinite(res.seg_residual)

    def test_depth_decoded_into_fixed_range(self, rig):
        model, codec, schedule = rig
        rgb = _native_clip(seed=8).tensors["rgb"]
        res = sp.understand(model, codec, schedule, rgb, "probe", steps=2, seed=0)
        lo, hi = sp.DEPTH_DECODE_RANGE
        d = res.native["depth"].data
        assert d.min() >= lo - 1e-9 and d.max() <= hi + 1e-9

    def test_rejects_non_rgb_condition(self, rig):
        model, codec, schedule = rig
        depth = _native_clip(seed=9).tensors["depth"]
        with pytest.raises(ValueError, match="rgb"):
            sp.understand(model, codec, schedule, depth, "probe", steps=2)


class TestEditMask:
    def test_disk_geometry(self):
        mask = sp._edit_mask({"center": (4, 4), "radius": 2}, (2, 9, 9))
        assert mask.shape == (2, 9, 9)
        assert mask[0, 4, 4]
        assert mask[1, 4, 6] and not mask[1, 4, 7]
        assert not mask[0, 0, 0]

    def test_disk_outside_bounds_rejected(self):
        with pytest.raises(ValueError, match="outside frame bounds"):
            sp._edit_mask({"center": (1, 4), "radius": 3}, (2, 8, 8))

    def test_mask_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="outside frame bounds"):
            sp._edit_mask({"mask": np.zeros((2, 4, 4), dtype=bool)}, (2, 8, 8))

    def test_2d_mask_repeats_over_frames(self):
        m2 = np.zeros((8, 8), dtype=bool)
        m2[3, 5] = True
        mask = sp._edit_mask({"mask": m2}, (3, 8, 8))
        assert mask.shape == (3, 8, 8)
        assert mask[:, 3, 5].all() and mask.sum() == 3


class TestEdits:
    def test_identity_edit_matches_plain_reconstruction(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=10)
        edit = {"kind": "material",
                "payload": {"mask": np.zeros((2, 8, 8), dtype=bool),
                            "albedo": (1.0, 0.0, 0.0)}}
        edited = sp.edit_and_rerender(model, codec, schedule, clip, edit,
                                      steps=3, seed=11)
        plain = sp.generate(model, codec, schedule, sp.GenerationRequest(
            conditions={m: clip.tensors[m] for m in MODALITY_NAMES if m != "rgb"},
            caption=clip.caption, targets=("rgb",), steps=3, seed=11))
        assert_array_equal(edited.native["rgb"].data, plain.native["rgb"].data)

    def test_relight_swaps_caption(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=12)
        relit = sp.edit_and_rerender(
            model, codec, schedule, clip,
            {"kind": "relight", "payload": {"caption": clip.caption.replace(
                "light bright", "light dim")}}, steps=2, seed=0)
        plain = sp.generate(model, codec, schedule, sp.GenerationRequest(
            conditions={m: clip.tensors[m] for m in MODALITY_NAMES if m != "rgb"},
            caption=clip.caption, targets=("rgb",), steps=2, seed=0))
        assert not np.array_equal(relit.native["rgb"].data,
                                  plain.native["rgb"].data)

    def test_relight_without_caption_rejected(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=13)
        with pytest.raises(ValueError, match="caption"):
            sp.edit_and_rerender(model, codec, schedule, clip,
                                 {"kind": "relight", "payload": {}}, steps=2)

    def test_material_edit_conditions_carry_the_override(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=14)
        mask = np.zeros((2, 8, 8), dtype=bool)
        mask[:, 2:5, 2:5] = True
        res = sp.edit_and_rerender(
            model, codec, schedule, clip,
            {"kind": "material", "payload": {"mask": mask,
                                             "albedo": (0.9, 0.05, 0.05),
                                             "roughness": 0.2}},
            steps=2, seed=0)
        alb = res.conditions["albedo"].data
        assert_array_equal(alb[mask], np.tile((0.9, 0.05, 0.05), (mask.sum(), 1)))
        assert_array_equal(alb[~mask], clip.tensors["albedo"].data[~mask])
        assert_array_equal(res.conditions["roughness"].data[mask][:, 0],
                           np.full(mask.sum(), 0.2))

    def test_material_edit_without_intrinsics_rejected(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=15)
        with pytest.raises(ValueError, match="albedo/roughness/metallic"):
            sp.edit_and_rerender(
                model, codec, schedule, clip,
                {"kind": "material",
                 "payload": {"mask": np.zeros((2, 8, 8), dtype=bool)}}, steps=2)

    def test_insert_conditions_only_albedo_and_normal(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=16)
        res = sp.edit_and_rerender(
            model, codec, schedule, clip,
            {"kind": "insert", "payload": {"center": (4, 4), "radius": 2,
                                           "albedo": (0.1, 0.8, 0.1),
                                           "normal": (0.0, 0.0, 1.0),
                                           "with_depth": True}},
            steps=2, seed=0)
        assert set(res.conditions) == {"albedo", "normal"}
        assert set(res.native) == {"rgb", "depth"}

    def test_insert_with_non_unit_normal_rejected(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=17)
        with pytest.raises(ValueError, match="unit length"):
            sp.edit_and_rerender(
                model, codec, schedule, clip,
                {"kind": "insert", "payload": {"center": (4, 4), "radius": 2,
                                               "albedo": (0.1, 0.8, 0.1),
                                               "normal": (0.0, 0.0, 2.0)}},
                steps=2)

    def test_missing_modality_named(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=18)
        partial = ClipRecord(clip_id=clip.clip_id,
                             tensors={m: t for m, t in clip.tensors.items()
                                      if m != "normal"},
                             caption=clip.caption, meta={})
        with pytest.raises(ValueError, match="normal"):
            sp.edit_and_rerender(
                model, codec, schedule, partial,
                {"kind": "insert", "payload": {"center": (4, 4), "radius": 2,
                                               "albedo": (0.1, 0.8, 0.1),
                                               "normal": (0.0, 0.0, 1.0)}},
                steps=2)

    def test_unknown_kind_rejected(self, rig):
        model, codec, schedule = rig
        clip = _native_clip(seed=19)
        with pytest.raises(ValueError, match="unknown edit kind"):
            sp.edit_and_rerender(model, codec, schedule, clip,
                                 {"kind": "recolor", "payload": {}}, steps=2)
