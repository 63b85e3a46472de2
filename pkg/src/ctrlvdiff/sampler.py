"""Reverse-diffusion inference: generation, understanding, editing.

Three entry points share one ancestral sampling loop:

* ``generate``  - any condition subset -> any disjoint target subset.
* ``understand``- rgb -> the other seven, one reverse process per target.
* ``edit_and_rerender`` - relight / material / insert edits expressed as
  condition-tensor surgery followed by plain generation, so an empty edit
  degenerates to clip reconstruction bit for bit.

Condition latents are held at their clean encoded values at every step;
absent modalities ride along as zeros with the absence flag set; only
target slices evolve.  Sampling is plain ancestral DDPM on an evenly
strided subsequence of the training schedule (no guidance scale).  All
stochastic draws come from one generator in fixed registry order, so a
seed pins the output bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import torch

from .codec import LatentCodec
from .datastore import ClipRecord
from .denoiser import Denoiser, roles_to_ids
from .hmcs import (ROLE_CONDITION, ROLE_NONE, ROLE_NOISY, NoiseSchedule,
                   RoleAssignment)
from .registry import (MODALITY_NAMES, ModalityTensor, from_color_space,
                       seg_snap_residual, to_color_space)
from .scenegen import derive_seed
from .validation import check_positive_int, require

__all__ = ["GenerationRequest", "SampleResult", "generate", "understand",
           "edit_and_rerender", "EDIT_KINDS", "DEPTH_DECODE_RANGE"]

# Fixed decode range for depth predictions: generated clips carry no per-clip
# normalization metadata, and the scale-and-shift alignment in the depth
# metrics absorbs any fixed affine choice.
DEPTH_DECODE_RANGE = (1.0, 16.0)

EDIT_KINDS = ("relight", "material", "insert")


@dataclass(frozen=True)
class GenerationRequest:
    """One inference job: condition tensors, caption, targets, budget.

    ``frames``/``size`` are only consulted when ``conditions`` is empty
    (nothing else pins the output shape).
    """

    conditions: Mapping[str, ModalityTensor]
    caption: str
    targets: Tuple[str, ...]
    steps: int
    seed: int = 0
    frames: Optional[int] = None
    size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        require(len(self.targets) >= 1, "targets must be non-empty")
        for m in tuple(self.conditions) + tuple(self.targets):
            require(m in MODALITY_NAMES, f"unknown modality {m!r}")
        overlap = set(self.conditions) & set(self.targets)
        require(not overlap, f"conditions and targets overlap: {sorted(overlap)}")
        require(len(set(self.targets)) == len(self.targets), "duplicate targets")
        check_positive_int(self.steps, "steps")
        for m, tens in self.conditions.items():
            require(isinstance(tens, ModalityTensor) and tens.modality == m,
                    f"condition {m!r} must be a ModalityTensor of that modality")
        if not self.conditions:
            require(self.frames is not None and self.size is not None,
                    "unconditioned requests must give frames and size")


@dataclass(frozen=True)
class SampleResult:
    """Decoded predictions plus the raw color-space outputs.

    ``native`` has one entry per requested target.  ``color`` keeps the
    clipped [0,1]^3 predictions before any native-space snapping
    (segmentation before the palette snap, canny before thresholding),
    which is what the self-consistency filters score.  Conditions are
    echoed untouched.  ``seg_residual`` is the mean distance from the raw
    segmentation colors to their snapped palette entries, None when
    segmentation was not a target.
    """

    native: Mapping[str, ModalityTensor]
    color: Mapping[str, ModalityTensor]
    conditions: Mapping[str, ModalityTensor] = field(default_factory=dict)
    seg_residual: Optional[float] = None


def _stride(num_steps: int, steps: int) -> np.ndarray:
    """Evenly spaced descending schedule indices, deepest index always
    included; consecutive gaps are >= 1 so flooring never collides."""
    require(steps <= num_steps,
            f"steps {steps} exceeds schedule length {num_steps}")
    if steps == 1:
        return np.array([num_steps - 1], dtype=np.int64)
    return np.floor(np.linspace(num_steps - 1, 0, steps)).astype(np.int64)


def _roles_for(conditions, targets) -> RoleAssignment:
    roles = {}
    for m in MODALITY_NAMES:
        if m in conditions:
            roles[m] = ROLE_CONDITION
        elif m in targets:
            roles[m] = ROLE_NOISY
        else:
            roles[m] = ROLE_NONE
    k = len(conditions)
    d = sum(1 for r in roles.values() if r == ROLE_NONE)
    return RoleAssignment(roles=roles, text_only=(k == 0), k=k, d=d,
                          p_t=1.0 if k == 0 else 0.0)


def _assemble(state: Mapping[str, np.ndarray], roles: RoleAssignment,
              shape: Tuple[int, int, int], channels: int) -> np.ndarray:
    """Input stack in the training layout: per modality in registry order,
    latent body then absence flag."""
    tt, hh, ww = shape
    slices = []
    for m in MODALITY_NAMES:
        flag = np.zeros((tt, hh, ww, 1), dtype=np.float32)
        if roles.roles[m] == ROLE_NONE:
            body = np.zeros((tt, hh, ww, channels), dtype=np.float32)
            flag[...] = 1.0
        else:
            body = np.asarray(state[m], dtype=np.float32)
        slices.append(body)
        slices.append(flag)
    return np.concatenate(slices, axis=-1)


def _predict(model: Denoiser, stack: np.ndarray, roles: RoleAssignment,
             t: int, caption: str) -> Dict[str, np.ndarray]:
    dtype = next(model.parameters()).dtype
    s = torch.from_numpy(stack).to(dtype)[None]
    r = torch.from_numpy(roles_to_ids(roles.roles))[None]
    with torch.no_grad():
        out = model(s, r, torch.tensor([int(t)]), [caption])
    return {m: out[m][0].numpy().astype(np.float64) for m in MODALITY_NAMES}


def generate(model: Denoiser, codec: LatentCodec, schedule: NoiseSchedule,
             request: GenerationRequest) -> SampleResult:
    """Ancestral reverse diffusion for the requested targets.

    Targets start as unit gaussians at the deepest schedule index and step
    through the posterior of the strided subsequence; the final transition
    treats the signal level below the last index as 1, which makes it
    noiseless and reduces a one-step run to the decoded x0 estimate.
    """
    torch.set_num_threads(1)
    model.eval()

    cond_color = {m: to_color_space(t) if t.space == "native" else t
                  for m, t in request.conditions.items()}
    if cond_color:
        shapes = {m: t.data.shape[:3] for m, t in cond_color.items()}
        require(len(set(shapes.values())) == 1,
                f"condition resolutions disagree: {shapes}")
        t_frames, h, w = next(iter(shapes.values()))
    else:
        t_frames, (h, w) = request.frames, request.size
        check_positive_int(t_frames, "frames")
        check_positive_int(h, "height")
        check_positive_int(w, "width")
    require(h % codec.patch == 0 and w % codec.patch == 0,
            f"frame size ({h},{w}) not divisible by patch {codec.patch}")

    roles = _roles_for(request.conditions, request.targets)
    hp, wp, cc = h // codec.patch, w // codec.patch, codec.latent_channels

    state: Dict[str, np.ndarray] = {
        m: codec.encode(c).data for m, c in cond_color.items()}
    rng = np.random.default_rng(request.seed)
    for m in MODALITY_NAMES:
        if m in request.targets:
            state[m] = rng.standard_normal((t_frames, hp, wp, cc))

    ts = _stride(schedule.num_steps, request.steps)
    for i, t in enumerate(ts):
        stack = _assemble(state, roles, (t_frames, hp, wp), cc)
        eps = _predict(model, stack, roles, int(t), request.caption)
        a_t = float(schedule.alpha_bar[int(t)])
        a_prev = float(schedule.alpha_bar[int(ts[i + 1])]) if i + 1 < len(ts) else 1.0
        last = i + 1 == len(ts)
        for m in MODALITY_NAMES:
            if m not in request.targets:
                continue
            x_t = state[m]
            x0 = (x_t - math.sqrt(1.0 - a_t) * eps[m]) / math.sqrt(a_t)
            if last:
                # signal level below the deepest remaining index is 1, which
                # collapses the posterior mean to the x0 estimate exactly
                state[m] = x0
            else:
                beta_eff = 1.0 - a_t / a_prev
                mean = (math.sqrt(a_prev) * beta_eff * x0
                        + math.sqrt(1.0 - beta_eff) * (1.0 - a_prev) * x_t) / (1.0 - a_t)
                var = beta_eff * (1.0 - a_prev) / (1.0 - a_t)
                state[m] = mean + math.sqrt(var) * rng.standard_normal(x_t.shape)

    native: Dict[str, ModalityTensor] = {}
    color: Dict[str, ModalityTensor] = {}
    seg_residual = None
    for m in request.targets:
        raw = codec.decode_array(state[m], m)
        ct = ModalityTensor(m, np.clip(raw, 0.0, 1.0), "color")
        color[m] = ct
        if m == "segmentation":
            seg_residual = seg_snap_residual(ct)
        aux = None
        if m == "depth":
            aux = {"depth_min": DEPTH_DECODE_RANGE[0],
                   "depth_max": DEPTH_DECODE_RANGE[1]}
        native[m] = from_color_space(ct, aux)
    return SampleResult(native=native, color=color,
                        conditions=dict(request.conditions),
                        seg_residual=seg_residual)


def understand(model: Denoiser, codec: LatentCodec, schedule: NoiseSchedule,
               rgb: ModalityTensor, caption: str, steps: int,
               seed: int = 0) -> SampleResult:
    """rgb -> the other seven modalities (depth stays in the fixed decode
    range; align downstream when comparing against metric ground truth).

    Each target runs its own reverse process (rgb condition, one noisy
    slice, six absent).  Training role draws always leave at least one
    modality absent unless the conditions fill every non-target slot, so
    a single joint pass over all seven targets would hand the denoiser a
    role layout it never trains on; seven short chains stay inside the
    trained family and cost the same tokens per step.
    """
    require(rgb.modality == "rgb", f"understand conditions on rgb, got {rgb.modality!r}")
    native: Dict[str, ModalityTensor] = {}
    color: Dict[str, ModalityTensor] = {}
    seg_residual = None
    for m in MODALITY_NAMES:
        if m == "rgb":
            continue
        part = generate(model, codec, schedule, GenerationRequest(
            conditions={"rgb": rgb}, caption=caption, targets=(m,),
            steps=steps, seed=derive_seed(seed, "understand", m)))
        native[m] = part.native[m]
        color[m] = part.color[m]
        if m == "segmentation":
            seg_residual = part.seg_residual
    return SampleResult(native=native, color=color,
                        conditions={"rgb": rgb}, seg_residual=seg_residual)


def _clip_shape(tensors: Mapping[str, ModalityTensor]) -> Tuple[int, int, int]:
    first = next(iter(tensors.values()))
    return tuple(first.data.shape[:3])


def _edit_mask(payload: Mapping, shape: Tuple[int, int, int]) -> np.ndarray:
    """Boolean [T,H,W] region: an explicit mask array (2-D masks repeat over
    frames) or a disk given as center=(row, col), radius in pixels.  Regions
    poking outside the frame are rejected."""
    t, h, w = shape
    if "mask" in payload:
        mask = np.asarray(payload["mask"], dtype=bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (t,) + mask.shape)
        require(mask.shape == (t, h, w),
                f"edit mask shape {mask.shape} outside frame bounds {(t, h, w)}")
        return mask
    require("center" in payload and "radius" in payload,
            "edit payload needs a mask or a (center, radius) disk")
    cy, cx = (float(v) for v in payload["center"])
    r = float(payload["radius"])
    require(r > 0.0, "disk radius must be positive")
    require(r <= cy <= h - 1 - r and r <= cx <= w - 1 - r,
            f"disk center=({cy},{cx}) radius={r} outside frame bounds ({h},{w})")
    yy, xx = np.mgrid[0:h, 0:w]
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return np.broadcast_to(disk, (t, h, w))


def _overridden(tensor: ModalityTensor, mask: np.ndarray, value) -> ModalityTensor:
    """Copy of a native tensor with ``value`` written inside the mask; the
    constructor re-validates, so out-of-range stamps are rejected."""
    data = tensor.data.copy()
    v = np.asarray(value, dtype=np.float64).reshape(-1)
    require(v.shape[0] == data.shape[-1],
            f"{tensor.modality}: override has {v.shape[0]} channels, "
            f"tensor has {data.shape[-1]}")
    data[mask] = v
    return ModalityTensor(tensor.modality, data, "native")


def edit_and_rerender(model: Denoiser, codec: LatentCodec,
                      schedule: NoiseSchedule, clip: ClipRecord,
                      edit: Mapping, steps: int = 50,
                      seed: int = 0) -> SampleResult:
    """Apply one edit to the clip's condition tensors and regenerate rgb.

    relight: payload {"caption": text}; all non-rgb modalities condition.
    material: payload mask/disk plus any of {"albedo": rgb triple,
      "roughness": scalar, "metallic": scalar}; edited intrinsics and the
      remaining non-rgb modalities condition.
    insert: payload mask/disk plus {"albedo": triple, "normal": unit
      vector}; only the stamped albedo + normal condition, and
      "with_depth": true adds depth to the regenerated targets.

    An edit that changes nothing (all-false mask, same caption) runs the
    same request a plain reconstruction would, so outputs match bitwise at
    equal seeds.
    """
    kind = edit.get("kind")
    require(kind in EDIT_KINDS, f"unknown edit kind {kind!r}; expected one of {EDIT_KINDS}")
    payload = dict(edit.get("payload") or {})
    tensors = dict(clip.tensors)
    caption = clip.caption
    targets: Tuple[str, ...] = ("rgb",)

    if kind == "relight":
        caption = payload.get("caption")
        require(isinstance(caption, str) and caption.strip() != "",
                "relight payload needs a caption")
        cond_names = [m for m in MODALITY_NAMES if m != "rgb"]
    elif kind == "material":
        _require_modalities(tensors, [m for m in MODALITY_NAMES if m != "rgb"])
        mask = _edit_mask(payload, _clip_shape(tensors))
        edited = [k for k in ("albedo", "roughness", "metallic") if k in payload]
        require(len(edited) >= 1,
                "material payload needs at least one of albedo/roughness/metallic")
        for name in edited:
            tensors[name] = _overridden(tensors[name], mask, payload[name])
        cond_names = [m for m in MODALITY_NAMES if m != "rgb"]
    else:
        _require_modalities(tensors, ["albedo", "normal"])
        mask = _edit_mask(payload, _clip_shape(tensors))
        require("albedo" in payload and "normal" in payload,
                "insert payload needs an albedo color and a normal vector")
        tensors["albedo"] = _overridden(tensors["albedo"], mask, payload["albedo"])
        tensors["normal"] = _overridden(tensors["normal"], mask, payload["normal"])
        cond_names = ["albedo", "normal"]
        if payload.get("with_depth"):
            targets = ("rgb", "depth")

    conditions = {m: tensors[m] for m in cond_names}
    return generate(model, codec, schedule, GenerationRequest(
        conditions=conditions, caption=caption, targets=targets,
        steps=steps, seed=seed))


def _require_modalities(tensors: Mapping[str, ModalityTensor], names) -> None:
    missing = [m for m in names if m not in tensors]
    require(not missing, f"edit needs modalities {missing} (render or run "
                         "understanding first)")
