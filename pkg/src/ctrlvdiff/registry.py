"""Modality registry: the eight per-pixel channel families and their codecs.

Every clip tensor travels through the system in one of three value spaces:

* ``native`` - whatever the renderer measures (distances, unit vectors,
  material scalars, instance ids, binary edges).
* ``color``  - a shared [0,1]^3 per-pixel space all modalities are mapped
  into before latent encoding, so the denoiser sees homogeneous inputs.
* ``latent`` - the output of the invertible clip codec (see codec.py).

The native<->color maps here are deterministic bijections up to float
precision; per-clip inversion metadata rides along in ``aux``.  Depth is
stored as min-max normalised *disparity* (1/d): any fixed decoding range is
then an affine function of true disparity, which the scale-and-shift
alignment used by the depth metrics absorbs exactly.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

MODALITY_NAMES = (
    "rgb",
    "depth",
    "normal",
    "albedo",
    "roughness",
    "metallic",
    "segmentation",
    "canny",
)
NUM_MODALITIES = len(MODALITY_NAMES)
MODALITY_IDS = {name: i for i, name in enumerate(MODALITY_NAMES)}

PALETTE_SIZE = 256
# Golden-ratio conjugate, truncated to the digits the palette is frozen at.
# Never extend the precision: stored segmentation clips would re-colorize.
_HUE_STEP = 0.61803
_PALETTE_SAT = 0.75
_PALETTE_VAL = 0.95


@dataclass(frozen=True)
class ModalitySpec:
    """Static description of one modality."""

    name: str
    mod_id: int
    native_channels: int
    # inclusive per-channel bounds in native space; None = unbounded above
    low: float
    high: Optional[float]


SPECS: Mapping[str, ModalitySpec] = {
    "rgb": ModalitySpec("rgb", 0, 3, 0.0, 1.0),
    "depth": ModalitySpec("depth", 1, 1, 0.0, None),  # strictly positive, open below
    "normal": ModalitySpec("normal", 2, 3, -1.0, 1.0),
    "albedo": ModalitySpec("albedo", 3, 3, 0.0, 1.0),
    "roughness": ModalitySpec("roughness", 4, 1, 0.0, 1.0),
    "metallic": ModalitySpec("metallic", 5, 1, 0.0, 1.0),
    "segmentation": ModalitySpec("segmentation", 6, 1, 0.0, float(PALETTE_SIZE - 1)),
    "canny": ModalitySpec("canny", 7, 3, 0.0, 1.0),
}


def _build_palette() -> np.ndarray:
    out = np.empty((PALETTE_SIZE, 3), dtype=np.float64)
    for k in range(PALETTE_SIZE):
        hue = (k * _HUE_STEP) % 1.0
        out[k] = colorsys.hsv_to_rgb(hue, _PALETTE_SAT, _PALETTE_VAL)
    return out


_PALETTE = _build_palette()
_PALETTE.flags.writeable = False


def palette_color(seg_id: int) -> np.ndarray:
    """Fixed color for an instance id: golden-ratio hue walk in HSV."""
    if not (0 <= int(seg_id) < PALETTE_SIZE) or int(seg_id) != seg_id:
        raise ValueError(f"segmentation id {seg_id!r} outside palette [0, {PALETTE_SIZE})")
    return _PALETTE[int(seg_id)].copy()


@dataclass(frozen=True)
class ModalityTensor:
    """One modality's clip: dense [T, H, W, C] array plus a value-space tag.

    ``aux`` carries whatever ``from_color_space`` needs to invert the encode
    (depth range, active segmentation ids); it is None in native space.
    """

    modality: str
    data: np.ndarray
    space: str = "native"
    aux: Optional[Mapping] = None

    def __post_init__(self):
        if self.modality not in SPECS:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.space not in ("native", "color", "latent"):
            raise ValueError(f"unknown value space {self.space!r}")
        d = self.data
        if not isinstance(d, np.ndarray) or d.ndim != 4:
            raise ValueError(f"{self.modality}: expected [T,H,W,C] array, got {getattr(d, 'shape', None)}")
        if not np.isfinite(d).all():
            raise ValueError(f"{self.modality}: non-finite values")
        if self.space == "color":
            if d.shape[3] != 3:
                raise ValueError(f"{self.modality}: color space needs 3 channels, got {d.shape[3]}")
            if d.min() < 0.0 or d.max() > 1.0:
                raise ValueError(f"{self.modality}: color values outside [0,1]")
        elif self.space == "native":
            spec = SPECS[self.modality]
            if d.shape[3] != spec.native_channels:
                raise ValueError(
                    f"{self.modality}: native channels {d.shape[3]} != {spec.native_channels}")
            _check_native(self.modality, d)

    @property
    def shape(self):
        return self.data.shape


def _check_native(modality: str, d: np.ndarray) -> None:
    if modality == "depth":
        if d.min() <= 0.0:
            raise ValueError("depth: native values must be strictly positive")
    elif modality == "normal":
        norms = np.linalg.norm(d, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("normal: native vectors must be unit length within 1e-4")
    elif modality == "segmentation":
        ids = np.rint(d)
        if np.abs(d - ids).max() > 1e-6:
            raise ValueError("segmentation: ids must be integral")
        if ids.min() < 0 or ids.max() >= PALETTE_SIZE:
            raise ValueError(f"segmentation: ids must lie in [0, {PALETTE_SIZE})")
    elif modality == "canny":
        if not np.isin(d, (0.0, 1.0)).all():
            raise ValueError("canny: native values must be exactly 0 or 1")
    else:  # rgb, albedo, roughness, metallic: closed unit interval
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError(f"{modality}: native values outside [0,1]")


def to_color_space(m: ModalityTensor) -> ModalityTensor:
    """Map a native clip into the shared [0,1]^3 space.

    Depth: per-clip min-max normalised disparity (near = 1), gray triplet,
    aux records (depth_min, depth_max).  Degenerate flat clips map to 0.5.
    Normal: (n+1)/2.  Scalars (roughness/metallic): gray triplet.
    Segmentation: palette lookup, aux records the clip's active ids.
    rgb / albedo / canny: identity.
    """
    if m.space != "native":
        raise ValueError(f"to_color_space expects native space, got {m.space!r}")
    d = m.data.astype(np.float64)
    name = m.modality
    aux = None
    if name in ("rgb", "albedo", "canny"):
        color = d
    elif name == "normal":
        color = np.clip((d + 1.0) * 0.5, 0.0, 1.0)
    elif name in ("roughness", "metallic"):
        color = np.repeat(d, 3, axis=-1)
    elif name == "depth":
        dmin = float(d.min())
        dmax = float(d.max())
        if dmin == dmax:
            c = np.full_like(d, 0.5)
        else:
            c = (1.0 / d - 1.0 / dmax) / (1.0 / dmin - 1.0 / dmax)
            c = np.clip(c, 0.0, 1.0)
        color = np.repeat(c, 3, axis=-1)
        aux = {"depth_min": dmin, "depth_max": dmax}
    elif name == "segmentation":
        ids = np.rint(d).astype(np.int64)
        color = _PALETTE[ids[..., 0]]
        aux = {"ids": tuple(int(i) for i in np.unique(ids))}
    else:  # pragma: no cover
        raise AssertionError(name)
    return ModalityTensor(name, color, "color", aux)


def from_color_space(m: ModalityTensor, aux: Optional[Mapping] = None) -> ModalityTensor:
    """Invert to_color_space.

    ``aux`` defaults to the metadata riding on the tensor.  Depth requires
    its recorded (depth_min, depth_max); segmentation snaps each pixel to
    the nearest palette entry, restricted to aux["ids"] when present.
    Normals are renormalised so the native invariant always holds.
    """
    if m.space != "color":
        raise ValueError(f"from_color_space expects color space, got {m.space!r}")
    if aux is None:
        aux = m.aux
    c = m.data.astype(np.float64)
    name = m.modality
    if name in ("rgb", "albedo"):
        native = c
    elif name == "canny":
        native = (c > 0.5).astype(np.float64)
    elif name == "normal":
        v = c * 2.0 - 1.0
        norms = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = norms > 1e-6
        unit_z = np.zeros_like(v)
        unit_z[..., 2] = 1.0
        native = np.where(safe, v / np.where(safe, norms, 1.0), unit_z)
    elif name in ("roughness", "metallic"):
        native = np.clip(c.mean(axis=-1, keepdims=True), 0.0, 1.0)
    elif name == "depth":
        if aux is None or "depth_min" not in aux or "depth_max" not in aux:
            raise ValueError("depth decode requires (depth_min, depth_max) metadata")
        dmin = float(aux["depth_min"])
        dmax = float(aux["depth_max"])
        g = np.clip(c.mean(axis=-1, keepdims=True), 0.0, 1.0)
        if dmin == dmax:
            native = np.full_like(g, dmin)
        else:
            disp = g * (1.0 / dmin - 1.0 / dmax) + 1.0 / dmax
            native = 1.0 / disp
    elif name == "segmentation":
        if aux is not None and "ids" in aux:
            cand_ids = np.asarray(sorted(int(i) for i in aux["ids"]), dtype=np.int64)
            if cand_ids.size == 0 or cand_ids.min() < 0 or cand_ids.max() >= PALETTE_SIZE:
                raise ValueError("segmentation aux ids outside palette")
        else:
            cand_ids = np.arange(PALETTE_SIZE, dtype=np.int64)
        cand = _PALETTE[cand_ids]  # [K,3]
        flat = c.reshape(-1, 3)
        # nearest palette color; ties go to the lowest id (candidates sorted)
        d2 = ((flat[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2)
        best = cand_ids[np.argmin(d2, axis=1)]
        native = best.reshape(c.shape[:3] + (1,)).astype(np.float64)
    else:  # pragma: no cover
        raise AssertionError(name)
    return ModalityTensor(name, native, "native")


def seg_snap_residual(m: ModalityTensor) -> float:
    """Mean L2 distance from predicted seg colors to their snapped palette
    entries; a cheap well-formedness score for generated segmentation."""
    if m.modality != "segmentation" or m.space != "color":
        raise ValueError("seg_snap_residual expects a color-space segmentation tensor")
    flat = m.data.reshape(-1, 3).astype(np.float64)
    d2 = ((flat[:, None, :] - _PALETTE[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())
