import numpy as np
import pytest
import torch

from ctrlvdiff import denoiser as dn
from ctrlvdiff.hmcs import NoiseSchedule, build_model_input, stage1_roles
from ctrlvdiff.registry import MODALITY_NAMES


def _micro_cfg(**kw):
    base = dict(dim=16, depth=1, heads=2, max_t=4, max_grid=4, seed=3)
    base.update(kw)
    return dn.DenoiserConfig(**base)


def _batch(rng, b=2, t=2, hw=4):
    stack = rng.normal(size=(b, t, hw, hw, 104))
    roles = rng.integers(0, 3, size=(b, 8))
    ts = rng.integers(1, 8, size=b)
    return (torch.from_numpy(stack).float(), torch.from_numpy(roles),
            torch.from_numpy(ts), ["red sphere, camera arc"] * b)


class TestInit:
    def test_same_seed_byte_identical(self):
        a = dn.init_params(_micro_cfg(seed=7))
        b = dn.init_params(_micro_cfg(seed=7))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb), na

    def test_different_seed_differs(self):
        a = dn.init_params(_micro_cfg(seed=7))
        b = dn.init_params(_micro_cfg(seed=8))
        assert not torch.equal(a.token_proj.weight, b.token_proj.weight)

    def test_all_heads_copy_rgb_at_init(self):
        m = dn.init_params(_micro_cfg())
        for i in range(1, 8):
            assert torch.equal(m.head_projs[i].weight, m.head_projs[0].weight)
            assert torch.equal(m.head_projs[i].bias, m.head_projs[0].bias)
            assert torch.equal(m.head_norms[i].weight, m.head_norms[0].weight)

    def test_default_param_count_matches_arithmetic(self):
        cfg = dn.DenoiserConfig()
        m = dn.init_params(cfg)
        d, slot, buckets = cfg.dim, 13, cfg.caption_buckets
        in_ch = 8 * slot
        token = in_ch * d + d
        embeds = 8 * slot + 3 * slot
        pos = cfg.max_t * d + 2 * cfg.max_grid * d
        tmlp = (d * 4 * d + 4 * d) + (4 * d * d + d)
        cap = buckets * d
        block = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) \
            + (d * 4 * d + 4 * d) + (4 * d * d + d)
        heads = 8 * (2 * d) + 8 * (d * 12 + 12) + 8
        expected = token + embeds + pos + tmlp + cap + cfg.depth * block + heads
        assert dn.count_parameters(m) == expected
        assert expected < 2_000_000

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            dn.DenoiserConfig(dim=130, heads=4)
        with pytest.raises(ValueError):
            dn.DenoiserConfig(dim=0)

    def test_truncated_init_bounded(self):
        m = dn.init_params(_micro_cfg())
        assert m.token_proj.weight.abs().max() <= 0.04 + 1e-9
        assert m.token_proj.bias.abs().max() == 0.0


class TestForward:
    def test_output_shapes_mirror_latents(self):
        m = dn.init_params(_micro_cfg())
        out = m(*_batch(np.random.default_rng(0)))
        assert list(out.keys()) == list(MODALITY_NAMES)
        for name in MODALITY_NAMES:
            assert out[name].shape == (2, 2, 4, 4, 12)

    def test_batch_duplication_identical(self):
        m = dn.init_params(_micro_cfg())
        stack, roles, t, caps = _batch(np.random.default_rng(1), b=1)
        stack2 = torch.cat([stack, stack])
        roles2 = torch.cat([roles, roles])
        t2 = torch.cat([t, t])
        with torch.no_grad():
            out = m(stack2, roles2, t2, caps * 2)
        for name in MODALITY_NAMES:
            assert torch.equal(out[name][0], out[name][1])

    def test_caption_permutation_invariant_bitwise(self):
        m = dn.init_params(_micro_cfg())
        stack, roles, t, _ = _batch(np.random.default_rng(2), b=1)
        with torch.no_grad():
            a = m(stack, roles, t, ["red sphere camera arc light dim"])
            b = m(stack, roles, t, ["light camera dim sphere arc red"])
        for name in MODALITY_NAMES:
            assert torch.equal(a[name], b[name])

    def test_caption_changes_output(self):
        m = dn.init_params(_micro_cfg())
        stack, roles, t, _ = _batch(np.random.default_rng(3), b=1)
        with torch.no_grad():
            a = m(stack, roles, t, ["red sphere"])
            b = m(stack, roles, t, ["blue box"])
        assert not torch.equal(a["rgb"], b["rgb"])

    def test_identical_slices_equal_embeddings_coincide(self):
        # heads start identical, so if two modalities see the same slice,
        # the same role, and are forced onto the same modality embedding,
        # their predictions must match bit for bit
        m = dn.init_params(_micro_cfg())
        rng = np.random.default_rng(4)
        stack = rng.normal(size=(1, 2, 4, 4, 104)).astype(np.float32)
        stack[..., 13:26] = stack[..., 0:13]  # depth slice := rgb slice
        roles = torch.zeros((1, 8), dtype=torch.long) + 2  # all noisy
        with torch.no_grad():
            m.modality_embed[1] = m.modality_embed[0]
            out = m(torch.from_numpy(stack), roles, torch.tensor([2]), ["x"])
        assert torch.equal(out["rgb"], out["depth"])

    def test_all_heads_coincide_at_init(self):
        # identical head copies mean every modality predicts the same thing
        # until training moves them apart
        m = dn.init_params(_micro_cfg())
        stack, roles, t, caps = _batch(np.random.default_rng(5), b=1)
        with torch.no_grad():
            out = m(stack, roles, t, caps)
        for name in MODALITY_NAMES[1:]:
            assert torch.equal(out[name], out["rgb"])

    def test_heads_are_independent_parameters(self):
        m = dn.init_params(_micro_cfg())
        stack, roles, t, caps = _batch(np.random.default_rng(5), b=1)
        with torch.no_grad():
            m.head_projs[1].weight += 0.01
            out = m(stack, roles, t, caps)
        assert not torch.equal(out["depth"], out["rgb"])
        assert torch.equal(out["normal"], out["rgb"])  # others untouched

    def test_bad_channel_count_rejected(self):
        m = dn.init_params(_micro_cfg())
        stack, roles, t, caps = _batch(np.random.default_rng(6))
        with pytest.raises(ValueError, match="registry layout"):
            m(stack[..., :100], roles, t, caps)

    def test_oversized_grid_rejected(self):
        m = dn.init_params(_micro_cfg())
        rng = np.random.default_rng(7)
        stack = torch.from_numpy(rng.normal(size=(1, 2, 8, 8, 104))).float()
        roles = torch.zeros((1, 8), dtype=torch.long)
        with pytest.raises(ValueError, match="exceeds"):
            m(stack, roles, torch.tensor([1]), ["x"])

    def test_roles_shape_rejected(self):
        m = dn.init_params(_micro_cfg())
        stack, _, t, caps = _batch(np.random.default_rng(8))
        with pytest.raises(ValueError, match="roles"):
            m(stack, torch.zeros((2, 7), dtype=torch.long), t, caps)


class TestPredictEps:
    def _sample(self, caption="red sphere"):
        rng = np.random.default_rng(0)
        sched = NoiseSchedule("linear-beta", tuple(np.linspace(0.9999, 0.01, 8)))
        latents = {m: rng.normal(size=(2, 4, 4, 12)) for m in MODALITY_NAMES}
        return build_model_input(latents, stage1_roles(), 3, sched, rng, caption)

    def test_shapes_and_determinism(self):
        m = dn.init_params(_micro_cfg())
        s = self._sample()
        a = dn.predict_eps(m, s)
        b = dn.predict_eps(m, s)
        assert set(a) == set(MODALITY_NAMES)
        for name in MODALITY_NAMES:
            assert a[name].shape == (2, 4, 4, 12)
            np.testing.assert_array_equal(a[name], b[name])


class TestGradients:
    def test_float64_matches_finite_differences(self):
        m = dn.init_params(_micro_cfg()).double()
        rng = np.random.default_rng(0)
        stack = rng.normal(size=(2, 2, 4, 4, 104))
        roles = rng.integers(0, 3, size=(2, 8))
        t = np.array([3, 7])
        rep = dn.gradient_check(m, stack, roles, t, ["red sphere", ""],
                                n_per_tensor=3)
        assert rep["overall"] <= 1e-3, rep

    def test_float32_within_loose_tolerance(self):
        m = dn.init_params(_micro_cfg(seed=5))
        rng = np.random.default_rng(1)
        stack = rng.normal(size=(1, 2, 4, 4, 104)).astype(np.float32)
        roles = rng.integers(0, 3, size=(1, 8))
        t = np.array([2])
        rep = dn.gradient_check(m, stack, roles, t, ["box"], n_per_tensor=2)
        assert rep["overall"] <= 5e-2, rep


class TestParamArrays:
    def test_round_trip_bitwise(self):
        a = dn.init_params(_micro_cfg(seed=1))
        b = dn.init_params(_micro_cfg(seed=2))
        dn.load_arrays(b, dn.params_to_arrays(a))
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_name_mismatch_rejected(self):
        m = dn.init_params(_micro_cfg())
        arrays = dn.params_to_arrays(m)
        arrays.pop("token_proj.weight")
        with pytest.raises(ValueError, match="mismatch"):
            dn.load_arrays(m, arrays)


class TestCaptionBuckets:
    def test_sorted_and_stable(self):
        ids = dn.caption_bucket_ids("Red sphere, red box", 1024)
        assert ids == sorted(ids)
        assert len(ids) == 4  # bag keeps duplicates
        assert ids == dn.caption_bucket_ids("red box red sphere", 1024)

    def test_empty(self):
        assert dn.caption_bucket_ids("", 1024) == []
