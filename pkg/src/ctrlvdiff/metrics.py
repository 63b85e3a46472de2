"""Evaluation protocols: depth, normals, segmentation, image quality,
temporal smoothness.

All functions take bare numpy arrays (callers unwrap ModalityTensors) and
return plain float dicts.  Threshold comparisons are strict, with one
numeric-hygiene rule: measured quantities are rounded at far-below-signal
resolution (depth ratios to 1e-12, angles to 1e-9 degrees) before
comparison, so a construction sitting mathematically ON a boundary lands
on it deterministically instead of scattering by one ulp per pixel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .registry import ModalityTensor, to_color_space
from .validation import require

log = logging.getLogger(__name__)

__all__ = ["depth_metrics", "normal_metrics", "seg_iou", "psnr", "ssim",
           "image_quality", "temporal_consistency", "evaluate_clip",
           "aggregate", "MetricReport", "FAMILIES"]

# ratio/angle rounding decimals: far below any meaningful measurement
# resolution, far above float64 noise
_RATIO_DECIMALS = 12
_ANGLE_DECIMALS = 9


def depth_metrics(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> Dict:
    """AbsRel and delta1 between positive depth maps.

    ``align`` fits scale s and shift b on predicted disparity against
    ground-truth disparity (least squares) and evaluates the realigned
    prediction; a non-positive fitted scale falls back to the unaligned
    prediction with ``aligned`` False in the result.  delta1 uses a strict
    ratio < 1.25.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    require(pred.shape == gt.shape, f"shape mismatch {pred.shape} vs {gt.shape}")
    require(gt.size > 0, "empty depth map")
    require(float(gt.min()) > 0.0, "ground-truth depth must be positive")
    require(float(pred.min()) > 0.0, "predicted depth must be positive")

    disp_p = 1.0 / pred.reshape(-1)
    disp_g = 1.0 / gt.reshape(-1)
    scale, shift, aligned = 1.0, 0.0, False
    d_hat = pred.reshape(-1)
    if align:
        a = np.stack([disp_p, np.ones_like(disp_p)], axis=1)
        (s, b), *_ = np.linalg.lstsq(a, disp_g, rcond=None)
        if s > 0.0:
            # keep realigned disparity positive so depth stays finite
            d_hat = 1.0 / np.maximum(s * disp_p + b, 1e-9)
            scale, shift, aligned = float(s), float(b), True
        else:
            log.warning("depth alignment fitted scale %.3g <= 0; "
                        "falling back to unaligned", s)

    g = gt.reshape(-1)
    abs_rel = float(np.mean(np.abs(d_hat - g) / g))
    ratio = np.round(np.maximum(d_hat / g, g / d_hat), _RATIO_DECIMALS)
    delta1 = float(np.mean(ratio < 1.25))
    return {"abs_rel": abs_rel, "delta1": delta1,
            "scale": scale, "shift": shift, "aligned": aligned}


def normal_metrics(pred: np.ndarray, gt: np.ndarray) -> Dict:
    """Angular error statistics between normal maps ([..., 3]).

    Inputs off unit length by more than 1e-3 are renormalized with a
    warning; pixels that are zero vectors after renormalization are
    excluded and counted.  Accuracies use strict < at 11.25/22.5/30 deg.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    require(pred.shape == gt.shape, f"shape mismatch {pred.shape} vs {gt.shape}")
    require(pred.shape[-1] == 3, "normal maps need a trailing xyz axis")

    def _unit(v, name):
        n = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.abs(n - 1.0).max() > 1e-3:
            log.warning("%s normals off unit length by %.3g; renormalizing",
                        name, float(np.abs(n - 1.0).max()))
        ok = n[..., 0] > 1e-12
        return np.divide(v, n, out=np.zeros_like(v), where=n > 1e-12), ok

    p, ok_p = _unit(pred, "predicted")
    g, ok_g = _unit(gt, "ground-truth")
    valid = ok_p & ok_g
    excluded = int(valid.size - valid.sum())
    require(valid.any(), "no valid pixels after excluding zero normals")

    dots = np.clip((p * g).sum(axis=-1)[valid], -1.0, 1.0)
    ang = np.round(np.degrees(np.arccos(dots)), _ANGLE_DECIMALS)
    out = {"mean_deg": float(ang.mean()),
           "median_deg": float(np.median(ang)),
           "excluded": excluded}
    out["acc_11_25"] = float((ang < 11.25).mean())
    out["acc_22_5"] = float((ang < 22.5).mean())
    out["acc_30"] = float((ang < 30.0).mean())
    return out


def seg_iou(pred_colors: np.ndarray, gt_ids: np.ndarray,
            k: Optional[int] = None) -> Dict:
    """Cluster predicted colors, match clusters to instances, report IoU.

    K-means (k-means++ init, 50 iterations, seed 0) over the predicted
    pixel colors yields k masks; a one-to-one assignment maximizing total
    IoU matches them to ground-truth instances.  Assignment ties resolve
    to the lowest cluster index.  k defaults to the instance count and
    must not be smaller.
    """
    pred = np.asarray(pred_colors, dtype=np.float64)
    require(pred.shape[-1] == 3, "predicted segmentation must be colors")
    ids = np.asarray(gt_ids)
    if ids.ndim == pred.ndim:
        require(ids.shape[-1] == 1, "id maps carry one channel")
        ids = ids[..., 0]
    require(ids.shape == pred.shape[:-1],
            f"shape mismatch {ids.shape} vs {pred.shape[:-1]}")

    flat_ids = np.rint(ids.reshape(-1)).astype(np.int64)
    instances = np.unique(flat_ids)
    if k is None:
        k = int(instances.size)
    require(k >= instances.size,
            f"k = {k} smaller than the {instances.size} ground-truth instances")
    flat = pred.reshape(-1, 3)
    require(flat.shape[0] >= k, "fewer pixels than clusters")

    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=50,
                random_state=0)
    labels = km.fit_predict(flat)

    iou = np.zeros((k, instances.size))
    for c in range(k):
        in_c = labels == c
        n_c = in_c.sum()
        for j, inst in enumerate(instances):
            in_i = flat_ids == inst
            inter = np.logical_and(in_c, in_i).sum()
            union = n_c + in_i.sum() - inter
            iou[c, j] = inter / union if union else 0.0
    rows, cols = linear_sum_assignment(-iou)
    per_instance = {int(instances[j]): float(iou[c, j])
                    for c, j in zip(rows, cols)}
    miou = float(np.mean([per_instance[int(i)] for i in instances]))
    return {"miou": miou, "per_instance": per_instance}


def _check_clip_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    require(pred.shape == gt.shape, f"shape mismatch {pred.shape} vs {gt.shape}")
    require(pred.ndim in (3, 4), "expected [H,W,C] or [T,H,W,C]")
    if pred.ndim == 3:
        pred, gt = pred[None], gt[None]
    for name, x in (("pred", pred), ("gt", gt)):
        require(float(x.min()) >= 0.0 and float(x.max()) <= 1.0,
                f"{name} values outside [0,1]")
    return pred, gt


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Frame-averaged 10*log10(1/MSE), capped at 100 dB below MSE 1e-10."""
    pred, gt = _check_clip_pair(pred, gt)
    vals = []
    for f in range(pred.shape[0]):
        mse = float(np.mean((pred[f] - gt[f]) ** 2))
        vals.append(100.0 if mse < 1e-10 else 10.0 * math.log10(1.0 / mse))
    return float(np.mean(vals))


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


_SSIM_WINDOW = _gaussian_window()
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean structural similarity: 7x7 gaussian window (sigma 1.5),
    channel- then frame-averaged, statistics over the valid interior."""
    pred, gt = _check_clip_pair(pred, gt)
    t, h, w_, c = pred.shape
    win = _SSIM_WINDOW.shape[0]
    require(h >= win and w_ >= win, f"frames must be at least {win}x{win}")
    vals = []
    for f in range(t):
        per_channel = []
        for ch in range(c):
            x = pred[f, :, :, ch]
            y = gt[f, :, :, ch]
            mx = signal.convolve2d(x, _SSIM_WINDOW, mode="valid")
            my = signal.convolve2d(y, _SSIM_WINDOW, mode="valid")
            sxx = signal.convolve2d(x * x, _SSIM_WINDOW, mode="valid") - mx * mx
            syy = signal.convolve2d(y * y, _SSIM_WINDOW, mode="valid") - my * my
            sxy = signal.convolve2d(x * y, _SSIM_WINDOW, mode="valid") - mx * my
            num = (2.0 * mx * my + _SSIM_C1) * (2.0 * sxy + _SSIM_C2)
            den = (mx * mx + my * my + _SSIM_C1) * (sxx + syy + _SSIM_C2)
            per_channel.append(float((num / den).mean()))
        vals.append(float(np.mean(per_channel)))
    return float(np.mean(vals))


def image_quality(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}


def temporal_consistency(clip: np.ndarray) -> float:
    """1 - mean absolute change between consecutive frames, in [0,1]."""
    clip = np.asarray(clip, dtype=np.float64)
    require(clip.ndim == 4, "expected [T,H,W,C]")
    require(clip.shape[0] >= 2, "temporal consistency needs at least 2 frames")
    step = np.abs(np.diff(clip, axis=0)).mean()
    return float(np.clip(1.0 - step, 0.0, 1.0))


# ---------------------------------------------------------------------------
# per-clip evaluation + aggregation (the eval CLI's engine)
# ---------------------------------------------------------------------------

FAMILIES = ("depth", "normal", "seg", "rgb", "temporal")

_UNIT_KEYS = ("delta1", "acc_11_25", "acc_22_5", "acc_30", "miou")


@dataclass(frozen=True)
class MetricReport:
    """Aggregated scalars plus the per-clip breakdown they summarize."""

    scalars: Mapping[str, float]
    per_clip: Mapping[str, Mapping[str, float]]

    def __post_init__(self):
        for name, v in self.scalars.items():
            require(math.isfinite(v), f"{name}: non-finite aggregate")
            short = name.split("/")[-1]
            if short in _UNIT_KEYS:
                require(0.0 <= v <= 1.0, f"{name} = {v} outside [0,1]")
            if short == "ssim":
                require(-1.0 <= v <= 1.0, f"{name} = {v} outside [-1,1]")


def _as_native(t: ModalityTensor) -> np.ndarray:
    require(t.space == "native", f"{t.modality}: expected native space")
    return t.data


def evaluate_clip(pred: Mapping[str, ModalityTensor],
                  gt: Mapping[str, ModalityTensor],
                  families: Sequence[str] = FAMILIES,
                  seg_k: Optional[int] = None) -> Dict[str, float]:
    """Metric rows for one clip, keyed "family/name".

    depth and normal compare native spaces; seg clusters the predicted
    colors (native predictions are colorized first) against native ids;
    rgb compares natives; temporal scores the predicted rgb alone.
    """
    rows: Dict[str, float] = {}
    for fam in families:
        require(fam in FAMILIES, f"unknown metric family {fam!r}")
        if fam == "depth":
            dm = depth_metrics(_as_native(pred["depth"]), _as_native(gt["depth"]))
            rows["depth/abs_rel"] = dm["abs_rel"]
            rows["depth/delta1"] = dm["delta1"]
            rows["depth/scale"] = dm["scale"]
            rows["depth/shift"] = dm["shift"]
        elif fam == "normal":
            nm = normal_metrics(_as_native(pred["normal"]), _as_native(gt["normal"]))
            for key in ("mean_deg", "median_deg", "acc_11_25", "acc_22_5", "acc_30"):
                rows[f"normal/{key}"] = nm[key]
        elif fam == "seg":
            p = pred["segmentation"]
            colors = to_color_space(p).data if p.space == "native" else p.data
            sm = seg_iou(colors, _as_native(gt["segmentation"]), k=seg_k)
            rows["seg/miou"] = sm["miou"]
        elif fam == "rgb":
            iq = image_quality(_as_native(pred["rgb"]), _as_native(gt["rgb"]))
            rows["rgb/psnr"] = iq["psnr"]
            rows["rgb/ssim"] = iq["ssim"]
        else:
            rows["temporal/consistency"] = temporal_consistency(
                _as_native(pred["rgb"]))
    return rows


def aggregate(per_clip: Mapping[str, Mapping[str, float]]) -> MetricReport:
    """Mean of every metric row over clips, in sorted clip order."""
    require(len(per_clip) >= 1, "nothing to aggregate")
    names = sorted({n for rows in per_clip.values() for n in rows})
    scalars = {}
    for n in names:
        vals = [rows[n] for _, rows in sorted(per_clip.items()) if n in rows]
        scalars[n] = float(np.mean(vals))
    return MetricReport(scalars=scalars, per_clip=dict(per_clip))
