"""Procedural analytic renderer: exactly-aligned 8-modality clips + captions.

One primary ray per pixel against sphere / box / ground-plane primitives.
Every modality is read off the same hit record, so cross-modal boundaries
coincide pixel-exactly by construction.  Shading is Lambert plus a
Blinn-Phong lobe whose strength/exponent are monotone in (metallic,
roughness), so material edits visibly change rgb:

    rgb = albedo * max(0, n.l) * atten
        + (0.04 + 0.96 * metallic) * max(0, n.h)^(2 / (roughness^2 + 1e-3))

with atten = intensity / (1 + 0.05 * dist^2).  Light intensity is constant
across a clip's frames.  Background pixels carry instance id 0, far-plane
depth (10x scene radius), the negated view direction as normal, and a
fixed sky albedo that no material-table entry uses.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage as ndi

from .registry import ModalityTensor
from .validation import check_positive_int, require

FOV_DEG = 60.0
SKY_ALBEDO = (0.05, 0.07, 0.10)
ATTEN_K = 0.05
FAR_FACTOR = 10.0
HEIGHT_BAND = (0.5, 2.0)
MAX_STEP = 0.65          # per-frame camera displacement cap
_STEP_BUDGET = 0.6       # sampled spans keep per-frame motion under this
_EPS = 1e-6

TRAJECTORY_PATTERNS = ("arc", "linear", "zoom", "orbit")

# (color word, albedo, roughness, metallic); finish word derives from
# roughness (>= 0.5 reads "rough").  Albedos are pairwise distinct and
# none equals SKY_ALBEDO -- segmentation/albedo boundaries depend on it.
MATERIAL_TABLE = (
    ("red", (0.80, 0.10, 0.10), 0.80, 0.00),
    ("green", (0.10, 0.70, 0.15), 0.60, 0.00),
    ("blue", (0.15, 0.20, 0.85), 0.30, 0.00),
    ("yellow", (0.85, 0.80, 0.10), 0.70, 0.00),
    ("purple", (0.55, 0.15, 0.70), 0.40, 0.00),
    ("cyan", (0.10, 0.75, 0.75), 0.25, 0.00),
    ("orange", (0.90, 0.45, 0.08), 0.65, 0.00),
    ("pink", (0.90, 0.50, 0.60), 0.35, 0.00),
    ("white", (0.92, 0.92, 0.90), 0.55, 0.00),
    ("gray", (0.45, 0.45, 0.45), 0.50, 0.00),
    ("brown", (0.45, 0.28, 0.12), 0.85, 0.00),
    ("olive", (0.45, 0.50, 0.15), 0.75, 0.00),
    ("gold", (0.85, 0.65, 0.15), 0.30, 0.90),
    ("silver", (0.75, 0.75, 0.78), 0.20, 0.95),
    ("copper", (0.80, 0.45, 0.30), 0.35, 0.85),
    ("steel", (0.50, 0.55, 0.60), 0.15, 0.80),
)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Primitive:
    shape: str  # sphere | box | ground-plane
    center: Tuple[float, float, float]
    size: Tuple[float, ...]  # sphere: (r,); box: (hx,hy,hz); plane: ()
    albedo: Tuple[float, float, float]
    roughness: float
    metallic: float
    instance_id: int
    color_word: str
    finish_word: str

    @property
    def bound_radius(self) -> float:
        if self.shape == "sphere":
            return self.size[0]
        if self.shape == "box":
            return float(np.linalg.norm(self.size))
        return 0.0


@dataclass(frozen=True)
class LightSpec:
    position: Tuple[float, float, float]
    intensity: float


@dataclass(frozen=True)
class SceneSpec:
    primitives: Tuple[Primitive, ...]
    light: LightSpec
    seed: Optional[int] = None

    def __post_init__(self):
        require(1 <= len(self.primitives) <= 4,
                f"scenes hold 1-4 primitives, got {len(self.primitives)}")
        ids = [p.instance_id for p in self.primitives]
        require(len(set(ids)) == len(ids), "instance ids must be unique")
        require(all(0 < i < 256 for i in ids), "instance ids must lie in (0, 256)")
        for p in self.primitives:
            require(0.0 <= p.roughness <= 1.0 and 0.0 <= p.metallic <= 1.0,
                    "material scalars must lie in [0,1]")

    @property
    def scene_radius(self) -> float:
        r = 1.0
        for p in self.primitives:
            if p.shape != "ground-plane":
                r = max(r, float(np.linalg.norm(p.center)) + p.bound_radius)
        return r

    @property
    def far_plane(self) -> float:
        return FAR_FACTOR * self.scene_radius


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "primitives": [
            {
                "shape": p.shape, "center": list(p.center), "size": list(p.size),
                "albedo": list(p.albedo), "roughness": p.roughness,
                "metallic": p.metallic, "instance_id": p.instance_id,
                "color_word": p.color_word, "finish_word": p.finish_word,
            }
            for p in scene.primitives
        ],
        "light": {"position": list(scene.light.position), "intensity": scene.light.intensity},
        "seed": scene.seed,
    }


def scene_hash(scene: SceneSpec) -> str:
    blob = json.dumps(scene_to_dict(scene), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_scene(rng: np.random.Generator, seed: Optional[int] = None) -> SceneSpec:
    """1-4 primitives, materials drawn without replacement from the fixed
    table (so every instance, and the sky, has a distinct albedo)."""
    n = int(rng.integers(1, 5))
    with_plane = bool(rng.random() < 0.6)
    mat_idx = rng.choice(len(MATERIAL_TABLE), size=n, replace=False)

    prims = []
    placed = []  # (center, bound_radius) of solid objects
    next_id = 1
    n_objects = n - 1 if with_plane else n
    if with_plane:
        word, alb, rough, metal = MATERIAL_TABLE[int(mat_idx[0])]
        prims.append(Primitive(
            "ground-plane", (0.0, 0.0, 0.0), (), alb, rough, metal,
            next_id, word, "rough" if rough >= 0.5 else "smooth"))
        next_id += 1

    for j in range(n_objects):
        word, alb, rough, metal = MATERIAL_TABLE[int(mat_idx[(1 if with_plane else 0) + j])]
        shape = "sphere" if rng.random() < 0.5 else "box"
        if shape == "sphere":
            size = (float(rng.uniform(0.25, 0.55)),)
            bound = size[0]
            rest_y = size[0]
        else:
            size = tuple(float(s) for s in rng.uniform(0.2, 0.5, size=3))
            bound = float(np.linalg.norm(size))
            rest_y = size[1]
        center = None
        for _ in range(100):
            x, z = rng.uniform(-1.4, 1.4, size=2)
            y = rest_y if with_plane else float(rng.uniform(0.4, 1.1))
            cand = np.array([x, y, z])
            if all(np.linalg.norm(cand - c) >= 0.85 * (bound + br) for c, br in placed):
                center = cand
                break
        if center is None:
            # guaranteed-separated fallback along +x
            center = np.array([1.8 + 1.2 * j, rest_y if with_plane else 0.6, 0.0])
        placed.append((center, bound))
        prims.append(Primitive(
            shape, tuple(float(v) for v in center), size, alb, rough, metal,
            next_id, word, "rough" if rough >= 0.5 else "smooth"))
        next_id += 1

    light = LightSpec(
        position=(float(rng.uniform(-2.0, 2.0)), float(rng.uniform(2.5, 4.0)),
                  float(rng.uniform(-2.0, 2.0))),
        intensity=float(rng.uniform(0.8, 1.5)),
    )
    return SceneSpec(primitives=tuple(prims), light=light, seed=seed)


# ---------------------------------------------------------------------------
# camera + ray casting
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CameraTrajectory:
    pattern: str
    positions: np.ndarray  # [T,3]
    lookats: np.ndarray    # [T,3]
    T: int
    max_step: float = MAX_STEP

    def __post_init__(self):
        require(self.pattern in TRAJECTORY_PATTERNS, f"unknown pattern {self.pattern!r}")
        pos = np.asarray(self.positions, dtype=np.float64)
        look = np.asarray(self.lookats, dtype=np.float64)
        require(pos.shape == (self.T, 3) and look.shape == (self.T, 3),
                f"need {self.T} (position, look-at) pairs")
        require(self.T >= 2, "trajectories need at least 2 frames")
        steps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        require(bool((steps <= self.max_step + 1e-9).all()),
                f"camera step {steps.max():.3f} exceeds max {self.max_step}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "lookats", look)


def _camera_rays(pos: np.ndarray, look: np.ndarray, H: int, W: int,
                 fov_deg: float = FOV_DEG) -> np.ndarray:
    f = _unit(np.asarray(look, dtype=np.float64) - np.asarray(pos, dtype=np.float64))
    up0 = np.array([0.0, 1.0, 0.0])
    if abs(float(f @ up0)) > 0.999:
        up0 = np.array([0.0, 0.0, 1.0])
    r = _unit(np.cross(f, up0))
    u = np.cross(r, f)
    tanv = math.tan(math.radians(fov_deg) / 2.0)
    aspect = W / H
    xs = ((np.arange(W) + 0.5) / W * 2.0 - 1.0) * tanv * aspect
    ys = (1.0 - 2.0 * (np.arange(H) + 0.5) / H) * tanv
    dirs = (f[None, None, :]
            + xs[None, :, None] * r[None, None, :]
            + ys[:, None, None] * u[None, None, :])
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def _intersect_prim(prim: Primitive, origin: np.ndarray, dirs: np.ndarray, far: float):
    """Returns (t, normal) arrays; t = +inf where the ray misses."""
    shape = dirs.shape[:-1]
    t = np.full(shape, np.inf)
    n = np.zeros(shape + (3,))
    o = np.asarray(origin, dtype=np.float64)
    if prim.shape == "sphere":
        c = np.asarray(prim.center)
        r = prim.size[0]
        oc = o - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - r * r)
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        tt = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        tt = np.where(ok, tt, np.inf)
        with np.errstate(invalid="ignore"):  # inf * 0 on missed rays
            hitp = o[None, None, :] + tt[..., None] * dirs
            nn = (hitp - c) / r
        t = np.where(tt <= far, tt, np.inf)
        n = np.where(np.isfinite(t)[..., None], nn, 0.0)
    elif prim.shape == "box":
        c = np.asarray(prim.center)
        half = np.asarray(prim.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (c - half - o) * inv
            t2 = (c + half - o) * inv
        tmin_ax = np.minimum(t1, t2)
        tmax_ax = np.maximum(t1, t2)
        tnear = np.nanmax(tmin_ax, axis=-1)
        tfar_ = np.nanmin(tmax_ax, axis=-1)
        hit = (tnear <= tfar_) & (tnear > _EPS) & (tnear <= far)
        axis = np.argmax(np.where(np.isnan(tmin_ax), -np.inf, tmin_ax), axis=-1)
        sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0])
        nn = np.zeros(shape + (3,))
        np.put_along_axis(nn, axis[..., None], sign[..., None], axis=-1)
        t = np.where(hit, tnear, np.inf)
        n = np.where(hit[..., None], nn, 0.0)
    elif prim.shape == "ground-plane":
        dy = dirs[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = -o[1] / dy
        hit = (dy < -1e-9) & (tt > _EPS) & (tt <= far)
        t = np.where(hit, tt, np.inf)
        n = np.zeros(shape + (3,))
        n[..., 1] = 1.0
        n = np.where(hit[..., None], n, 0.0)
    else:  # pragma: no cover
        raise AssertionError(prim.shape)
    return t, n


def _cast_scene(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Nearest-hit record over all primitives: (t, normal, seg id, albedo,
    roughness, metallic, hit mask).  Misses carry background values."""
    far = scene.far_plane
    shape = dirs.shape[:-1]
    t_best = np.full(shape, np.inf)
    n_best = np.zeros(shape + (3,))
    id_best = np.zeros(shape, dtype=np.int64)
    alb_best = np.zeros(shape + (3,))
    rough_best = np.zeros(shape)
    metal_best = np.zeros(shape)
    for prim in scene.primitives:
        t, n = _intersect_prim(prim, origin, dirs, far)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        n_best = np.where(closer[..., None], n, n_best)
        id_best = np.where(closer, prim.instance_id, id_best)
        alb_best = np.where(closer[..., None], np.asarray(prim.albedo), alb_best)
        rough_best = np.where(closer, prim.roughness, rough_best)
        metal_best = np.where(closer, prim.metallic, metal_best)
    hit = np.isfinite(t_best)
    depth = np.where(hit, t_best, far)
    normal = np.where(hit[..., None], n_best, -dirs)
    albedo = np.where(hit[..., None], alb_best, np.asarray(SKY_ALBEDO))
    rough = np.where(hit, rough_best, 1.0)
    metal = np.where(hit, metal_best, 0.0)
    return depth, normal, id_best, albedo, rough, metal, hit


def _shade(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray, depth, normal,
           albedo, rough, metal, hit) -> np.ndarray:
    hitp = origin[None, None, :] + depth[..., None] * dirs
    lvec = np.asarray(scene.light.position) - hitp
    ldist = np.linalg.norm(lvec, axis=-1)
    l = lvec / ldist[..., None]
    lam = np.maximum(0.0, np.sum(normal * l, axis=-1))
    atten = scene.light.intensity / (1.0 + ATTEN_K * ldist ** 2)
    v = -dirs
    h = l + v
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    h = np.where(hn > 1e-9, h / np.where(hn > 1e-9, hn, 1.0), l)
    spec_dot = np.maximum(0.0, np.sum(normal * h, axis=-1))
    expn = 2.0 / (rough ** 2 + 1e-3)
    spec = (0.04 + 0.96 * metal) * spec_dot ** expn
    rgb = albedo * (lam * atten)[..., None] + spec[..., None]
    rgb = np.clip(rgb, 0.0, 1.0)
    return np.where(hit[..., None], rgb, np.asarray(SKY_ALBEDO))


def render_clip(scene: SceneSpec, traj: CameraTrajectory,
                res: Tuple[int, int]) -> Dict[str, ModalityTensor]:
    """Render all 8 modalities for every frame of the trajectory."""
    H, W = res
    require(H >= 8 and W >= 8, f"resolution must be >= 8x8, got {res}")
    T = traj.T
    depth = np.empty((T, H, W, 1), dtype=np.float64)
    normal = np.empty((T, H, W, 3), dtype=np.float64)
    seg = np.empty((T, H, W, 1), dtype=np.float64)
    albedo = np.empty((T, H, W, 3), dtype=np.float64)
    roughness = np.empty((T, H, W, 1), dtype=np.float64)
    metallic = np.empty((T, H, W, 1), dtype=np.float64)
    rgb = np.empty((T, H, W, 3), dtype=np.float64)
    for f in range(T):
        pos = traj.positions[f]
        dirs = _camera_rays(pos, traj.lookats[f], H, W)
        d, n, ids, alb, rg, mt, hit = _cast_scene(scene, pos, dirs)
        rgb[f] = _shade(scene, pos, dirs, d, n, alb, rg, mt, hit)
        depth[f, ..., 0] = d
        normal[f] = n
        seg[f, ..., 0] = ids
        albedo[f] = alb
        roughness[f, ..., 0] = rg
        metallic[f, ..., 0] = mt
    out = {
        "rgb": ModalityTensor("rgb", rgb.astype(np.float32)),
        "depth": ModalityTensor("depth", depth.astype(np.float32)),
        "normal": ModalityTensor("normal", normal.astype(np.float32)),
        "albedo": ModalityTensor("albedo", albedo.astype(np.float32)),
        "roughness": ModalityTensor("roughness", roughness.astype(np.float32)),
        "metallic": ModalityTensor("metallic", metallic.astype(np.float32)),
        "segmentation": ModalityTensor("segmentation", seg.astype(np.float32)),
    }
    out["canny"] = canny_edges(out["rgb"])
    return out


# ---------------------------------------------------------------------------
# trajectory sampling
# ---------------------------------------------------------------------------

def _scene_focus(scene: Optional[SceneSpec], rng: np.random.Generator) -> np.ndarray:
    if scene is not None:
        solids = [p for p in scene.primitives if p.shape != "ground-plane"]
        if solids:
            c = np.mean([p.center for p in solids], axis=0)
        else:
            c = np.array([0.0, 0.0, 0.0])
    else:
        c = np.array([0.0, 0.5, 0.0])
    jitter = rng.uniform(-0.2, 0.2, size=3) * np.array([1.0, 0.3, 1.0])
    return c + jitter


def _pose_clear_of_primitives(scene: Optional[SceneSpec], pos: np.ndarray,
                              margin: float = 0.12) -> bool:
    if scene is None:
        return True
    if pos[1] < margin:
        return False  # never sink to (or below) the ground plane
    for p in scene.primitives:
        if p.shape == "sphere":
            if np.linalg.norm(pos - np.asarray(p.center)) < p.size[0] + margin:
                return False
        elif p.shape == "box":
            q = np.abs(pos - np.asarray(p.center)) - np.asarray(p.size)
            if float(q.max()) < margin:
                return False
    return True


def _zoom_target(scene: Optional[SceneSpec], rng: np.random.Generator) -> np.ndarray:
    if scene is not None:
        solids = [p for p in scene.primitives if p.shape != "ground-plane"]
        if solids:
            p = solids[int(rng.integers(0, len(solids)))]
            return np.asarray(p.center, dtype=np.float64)
        # all-plane scene: aim at a plane point near the origin
        return np.array([float(rng.uniform(-0.5, 0.5)), 0.0, float(rng.uniform(-0.5, 0.5))])
    return np.array([0.0, 0.5, 0.0])


def _center_pixel_depth(scene: SceneSpec, pos: np.ndarray, look: np.ndarray,
                        probe_res: Tuple[int, int]) -> float:
    H, W = probe_res
    dirs = _camera_rays(pos, look, H, W)
    d = dirs[H // 2, W // 2][None, None, :]
    depth = _cast_scene(scene, pos, d)[0]
    return float(depth[0, 0])


def camera_trajectory(pattern: str, rng: np.random.Generator, T: int,
                      scene: Optional[SceneSpec] = None,
                      probe_res: Optional[Tuple[int, int]] = None) -> CameraTrajectory:
    """Sample one smooth trajectory of the requested pattern.

    With a scene given, poses are rejected while the camera sits inside any
    primitive; zoom additionally re-draws until the center-pixel depth is
    strictly monotone over frames (probed at probe_res, default 32x32).
    """
    require(pattern in TRAJECTORY_PATTERNS,
            f"unknown pattern {pattern!r}; expected one of {TRAJECTORY_PATTERNS}")
    T = check_positive_int(T, "T", minimum=2)
    probe = probe_res or (32, 32)

    for _ in range(80):
        h = float(rng.uniform(*HEIGHT_BAND))
        focus = _scene_focus(scene, rng)
        if pattern == "arc":
            radius = float(rng.uniform(2.2, 3.5))
            th0 = float(rng.uniform(0.0, 2.0 * math.pi))
            span = float(rng.uniform(0.4, 1.0) * min(2.1, _STEP_BUDGET * (T - 1) / radius))
            span *= -1.0 if rng.random() < 0.5 else 1.0
            ths = th0 + np.linspace(0.0, span, T)
            pos = np.stack([focus[0] + radius * np.cos(ths),
                            np.full(T, h),
                            focus[2] + radius * np.sin(ths)], axis=1)
            look = np.tile(focus, (T, 1))
        elif pattern == "linear":
            radius = float(rng.uniform(2.4, 3.4))
            th0 = float(rng.uniform(0.0, 2.0 * math.pi))
            a = np.array([focus[0] + radius * math.cos(th0), h,
                          focus[2] + radius * math.sin(th0)])
            phi = float(rng.uniform(0.0, 2.0 * math.pi))
            length = float(rng.uniform(0.5, 1.0) * min(2.5, _STEP_BUDGET * (T - 1)))
            b = a + length * np.array([math.cos(phi), 0.0, math.sin(phi)])
            pos = a[None, :] + np.linspace(0.0, 1.0, T)[:, None] * (b - a)[None, :]
            look = np.tile(focus, (T, 1))
        elif pattern == "zoom":
            target = _zoom_target(scene, rng)
            th0 = float(rng.uniform(0.0, 2.0 * math.pi))
            d0 = float(rng.uniform(2.5, 3.5))
            start = target + np.array([d0 * math.cos(th0), 0.0, d0 * math.sin(th0)])
            start[1] = h
            axis = _unit(target - start)
            reach = float(np.linalg.norm(target - start))
            closest = 0.6 + (max(p.bound_radius for p in scene.primitives) if scene else 0.0)
            travel = float(rng.uniform(0.6, 1.0) * min(2.0, _STEP_BUDGET * (T - 1)))
            travel = min(travel, reach - closest)
            if travel <= 0.25:
                continue
            if rng.random() < 0.5:  # zoom out instead of in
                offsets = np.linspace(travel, 0.0, T)
            else:
                offsets = np.linspace(0.0, travel, T)
            pos = start[None, :] + offsets[:, None] * axis[None, :]
            look = np.tile(target, (T, 1))
        else:  # orbit
            target = _zoom_target(scene, rng)
            min_r = 1.0 + (max(p.bound_radius for p in scene.primitives) if scene else 0.0)
            radius = float(rng.uniform(min_r, min_r + 1.2))
            th0 = float(rng.uniform(0.0, 2.0 * math.pi))
            span = float(rng.uniform(0.5, 1.0) * min(math.pi, _STEP_BUDGET * (T - 1) / radius))
            span *= -1.0 if rng.random() < 0.5 else 1.0
            ths = th0 + np.linspace(0.0, span, T)
            pos = np.stack([target[0] + radius * np.cos(ths),
                            np.full(T, h),
                            target[2] + radius * np.sin(ths)], axis=1)
            look = np.tile(target, (T, 1))

        if not all(_pose_clear_of_primitives(scene, p) for p in pos):
            continue
        if pattern == "zoom" and scene is not None:
            depths = [_center_pixel_depth(scene, pos[f], look[f], probe) for f in range(T)]
            diffs = np.diff(depths)
            if not ((diffs > 0.01).all() or (diffs < -0.01).all()):
                continue
        return CameraTrajectory(pattern=pattern, positions=pos, lookats=look, T=T)
    raise RuntimeError(f"could not sample a valid {pattern!r} trajectory")


# ---------------------------------------------------------------------------
# canny edges
# ---------------------------------------------------------------------------

def _gaussian_kernel5(sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(-2, 3, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


_GAUSS5 = _gaussian_kernel5()
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _canny_frame(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    gray = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    sm = ndi.correlate(gray, _GAUSS5, mode="nearest")
    gx = ndi.correlate(sm, _SOBEL_X, mode="nearest")
    gy = ndi.correlate(sm, _SOBEL_Y, mode="nearest")
    # /4 normalises so a hard unit step edge peaks at 1.0
    mag = np.hypot(gx, gy) / 4.0
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0

    H, W = mag.shape
    pad = np.zeros((H + 2, W + 2))
    pad[1:-1, 1:-1] = mag

    def shifted(dr, dc):
        return pad[1 + dr:H + 1 + dr, 1 + dc:W + 1 + dc]

    bins = np.zeros_like(mag, dtype=np.int64)
    bins[(ang >= 22.5) & (ang < 67.5)] = 1
    bins[(ang >= 67.5) & (ang < 112.5)] = 2
    bins[(ang >= 112.5) & (ang < 157.5)] = 3
    fwd_offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    fwd = np.zeros_like(mag)
    bwd = np.zeros_like(mag)
    for b, (dr, dc) in fwd_offsets.items():
        sel = bins == b
        fwd[sel] = shifted(dr, dc)[sel]
        bwd[sel] = shifted(-dr, -dc)[sel]
    # strict on the forward side, ties broken once: a two-pixel plateau
    # keeps exactly one response
    keep = (mag > fwd) & (mag >= bwd) & (mag > 0.0)

    strong = keep & (mag >= hi)
    weak = keep & (mag >= lo)
    labels, n_lab = ndi.label(weak, structure=np.ones((3, 3), dtype=np.int64))
    if n_lab == 0:
        return np.zeros_like(mag)
    good = np.unique(labels[strong])
    good = good[good > 0]
    return np.isin(labels, good).astype(np.float64)


def canny_edges(rgb: ModalityTensor, lo: float = 0.1, hi: float = 0.2) -> ModalityTensor:
    """Edge maps from rgb: gray -> 5x5 gaussian (sigma 1) -> sobel ->
    4-direction non-maximum suppression -> double-threshold hysteresis.
    Binary {0,1}, replicated to 3 channels; frames are independent."""
    require(rgb.modality == "rgb" and rgb.space == "native", "canny_edges expects native rgb")
    require(0.0 < lo < hi, f"thresholds must satisfy 0 < lo < hi, got ({lo}, {hi})")
    data = rgb.data.astype(np.float64)
    T = data.shape[0]
    edges = np.stack([_canny_frame(data[f], lo, hi) for f in range(T)], axis=0)
    out = np.repeat(edges[..., None], 3, axis=-1).astype(np.float32)
    return ModalityTensor("canny", out)


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

def synth_caption(scene: SceneSpec, traj: CameraTrajectory) -> str:
    """Deterministic template:
    "<n> <shapes>, <colors>, <finishes>, camera <pattern>, light <bright|dim>"."""
    shapes = " ".join("plane" if p.shape == "ground-plane" else p.shape
                      for p in scene.primitives)
    colors = " ".join(p.color_word for p in scene.primitives)
    finishes = " ".join(p.finish_word for p in scene.primitives)
    light = "bright" if scene.light.intensity >= 1.15 else "dim"
    return (f"{len(scene.primitives)} {shapes}, {colors}, {finishes}, "
            f"camera {traj.pattern}, light {light}")


# ---------------------------------------------------------------------------
# geometric consistency helpers
# ---------------------------------------------------------------------------

_SMOOTH_DEPTH_JUMP = 0.08    # max relative depth step to 4-neighbors
_SMOOTH_NORMAL_DEG = 20.0    # max ground-truth normal swing to 4-neighbors


def fd_normals(depth_frame: np.ndarray, pos: np.ndarray, look: np.ndarray,
               fov_deg: float = FOV_DEG) -> Tuple[np.ndarray, np.ndarray]:
    """Normals from central finite differences of the depth map.

    Depth is the Euclidean ray-hit distance, so the 3-D surface point of
    pixel (i,j) is origin + depth * ray_dir.  Returns (normals, valid mask);
    the 1-pixel border is invalid.  Normals are oriented toward the camera.
    """
    d = np.asarray(depth_frame, dtype=np.float64)
    require(d.ndim == 2, "fd_normals expects a [H,W] depth frame")
    H, W = d.shape
    dirs = _camera_rays(np.asarray(pos), np.asarray(look), H, W, fov_deg)
    P = np.asarray(pos, dtype=np.float64)[None, None, :] + d[..., None] * dirs
    n = np.zeros((H, W, 3))
    dPdx = (P[1:-1, 2:] - P[1:-1, :-2]) * 0.5
    dPdy = (P[2:, 1:-1] - P[:-2, 1:-1]) * 0.5
    cr = np.cross(dPdx, dPdy)
    nrm = np.linalg.norm(cr, axis=-1, keepdims=True)
    cr = np.where(nrm > 1e-12, cr / np.where(nrm > 1e-12, nrm, 1.0), 0.0)
    # orient toward the camera
    flip = np.sum(cr * dirs[1:-1, 1:-1], axis=-1, keepdims=True) > 0.0
    cr = np.where(flip, -cr, cr)
    n[1:-1, 1:-1] = cr
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = nrm[..., 0] > 1e-12
    return n, valid


def smooth_interior_mask(seg_frame: np.ndarray, depth_frame: np.ndarray,
                         normal_frame: np.ndarray) -> np.ndarray:
    """Pixels safely inside one instance: same id across the 3x3 window,
    small relative depth steps, and slowly varying ground-truth normals.
    Finite differences are trustworthy exactly there."""
    seg = np.asarray(seg_frame, dtype=np.float64)
    d = np.asarray(depth_frame, dtype=np.float64)
    n = np.asarray(normal_frame, dtype=np.float64)
    same_id = (ndi.maximum_filter(seg, size=3) == ndi.minimum_filter(seg, size=3))
    mask = same_id & (seg > 0)

    cos_lim = math.cos(math.radians(_SMOOTH_NORMAL_DEG))
    ok_depth = np.ones_like(mask)
    ok_norm = np.ones_like(mask)
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        dn = np.roll(d, (-dr, -dc), axis=(0, 1))
        ok_depth &= np.abs(dn - d) / d <= _SMOOTH_DEPTH_JUMP
        nn = np.roll(n, (-dr, -dc), axis=(0, 1))
        ok_norm &= np.sum(n * nn, axis=-1) >= cos_lim
    mask &= ok_depth & ok_norm
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask


def geometry_consistency_deg(depth: np.ndarray, normal: np.ndarray, seg: np.ndarray,
                             traj: CameraTrajectory,
                             fov_deg: float = FOV_DEG) -> Tuple[float, int]:
    """Mean angle (degrees) between rendered normals and depth-derived
    normals over smooth interior pixels of every frame; also returns the
    pixel count the mean is over."""
    angles = []
    for f in range(depth.shape[0]):
        nd, valid = fd_normals(depth[f, ..., 0], traj.positions[f], traj.lookats[f], fov_deg)
        mask = smooth_interior_mask(seg[f, ..., 0], depth[f, ..., 0], normal[f]) & valid
        if not mask.any():
            continue
        dots = np.clip(np.sum(nd[mask] * normal[f][mask], axis=-1), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(dots)))
    if not angles:
        return float("nan"), 0
    allang = np.concatenate(angles)
    return float(allang.mean()), int(allang.size)


def center_depth_track(depth: np.ndarray) -> np.ndarray:
    """Per-frame depth at the image-center pixel, [T]."""
    T, H, W, _ = depth.shape
    return depth[:, H // 2, W // 2, 0]


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (order-sensitive).
    Used to give every clip / training step its own replayable stream."""
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") >> 1


def make_clip_record(index: int, seed: int, T: int, res: Tuple[int, int],
                     pattern: Optional[str] = None):
    """Render one fully-labeled clip; deterministic in (index, seed)."""
    from .datastore import ClipRecord  # local import keeps module deps one-way

    clip_seed = derive_seed("clip", seed, index)
    rng = np.random.default_rng(clip_seed)
    scene = sample_scene(rng, seed=clip_seed)
    if pattern is None:
        pattern = TRAJECTORY_PATTERNS[index % len(TRAJECTORY_PATTERNS)]
    traj = camera_trajectory(pattern, rng, T, scene=scene, probe_res=res)
    tensors = render_clip(scene, traj, res)
    caption = synth_caption(scene, traj)
    meta = {"seed": clip_seed, "scene": scene_hash(scene), "fps": 16.0}
    return ClipRecord(clip_id=f"clip_{index:05d}", tensors=tensors,
                      caption=caption, meta=meta), scene, traj


def generate_dataset(root: str, n_clips: int, seed: int, T: int = 8,
                     res: Tuple[int, int] = (32, 32),
                     split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                     overwrite: bool = False) -> Tuple[str, ...]:
    """Render n_clips clips under root (trajectory patterns round-robin so
    every pattern is always represented), then write the manifest."""
    from . import datastore

    check_positive_int(n_clips, "n_clips")
    ids = []
    for i in range(n_clips):
        record, _, _ = make_clip_record(i, seed, T, res)
        datastore.write_clip(record, root, overwrite=overwrite)
        ids.append(record.clip_id)
    datastore.build_manifest(root, split_fractions, seed=seed)
    return tuple(ids)
