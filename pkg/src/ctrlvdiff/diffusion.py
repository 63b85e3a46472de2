"""Noise schedules, the masked modality-wise objective, and the staged
training loop (text-only warmup, mixed-role training, self-augmentation).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .codec import LatentCodec
from .datastore import (FORMAT_VERSION, ClipRecord, list_clips, load_manifest,
                        load_named_tensors, read_clip, save_named_tensors,
                        write_clip)
from .denoiser import (Denoiser, DenoiserConfig, init_params, load_arrays,
                       params_to_arrays, roles_to_ids)
from .hmcs import (ModelInput, NoiseSchedule, assign_roles, build_model_input,
                   serialize_roles, stage1_roles)
from .registry import MODALITY_NAMES
from .scenegen import CameraTrajectory, derive_seed, geometry_consistency_deg
from .validation import check_positive_int, require

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("linear-beta", "cosine")


_REFERENCE_STEPS = 1000


# Linear-beta sweep chosen so the 1000-step terminal lands at
# alpha_bar ~ 0.0196, just under the schedule's 0.02 ceiling.  Driving the
# terminal orders of magnitude lower buys nothing at this scale and costs a
# lot: signal recovery from eps predictions divides by sqrt(alpha_bar), so a
# terminal of 1e-5 amplifies the network's prediction floor ~150x at the deep
# end and the reverse chain collapses to the latent mean before conditioning
# can take hold.
_LINEAR_BETA_RANGE = (3.9e-5, 7.8e-3)


def _reference_log_alpha_bar(kind: str) -> np.ndarray:
    if kind == "linear-beta":
        betas = np.linspace(*_LINEAR_BETA_RANGE, _REFERENCE_STEPS, dtype=np.float64)
        return np.cumsum(np.log1p(-betas))
    s = 0.008
    grid = np.arange(1, _REFERENCE_STEPS + 1, dtype=np.float64) / _REFERENCE_STEPS
    f = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
    f0 = math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2
    return np.log(np.maximum(f / f0, 1e-12))


def make_schedule(kind: str, num_steps: int) -> NoiseSchedule:
    """Build a cumulative alpha schedule of any length.

    Both kinds are defined by a canonical 1000-step reference curve
    (linear-beta: per-step beta swept over _LINEAR_BETA_RANGE; cosine:
    squared-cosine with the usual small offset, floored at 1e-12).  Other
    lengths respace the reference in log-signal space, so every schedule
    spans the same near-clean to near-pure-noise range: a short schedule
    trained against directly still ends deep enough that sampling can start
    from N(0,1).
    """
    num_steps = check_positive_int(num_steps, "num_steps", minimum=2)
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    ref = _reference_log_alpha_bar(kind)
    pos = np.linspace(0.0, _REFERENCE_STEPS - 1, num_steps)
    log_ab = np.interp(pos, np.arange(_REFERENCE_STEPS, dtype=np.float64), ref)
    return NoiseSchedule(kind=kind, alpha_bar=np.exp(log_ab))


def reconstruct_x0(x_t, eps, t: int, schedule: NoiseSchedule):
    """Invert the forward noising given the injected noise:
    x0 = (x_t - sqrt(1-abar) * eps) / sqrt(abar)."""
    a = float(schedule.alpha_bar[int(t)])
    require(a > 0.0, "cannot invert at zero signal level")
    return (x_t - math.sqrt(1.0 - a) * eps) / math.sqrt(a)


# ---------------------------------------------------------------------------
# masked modality-wise objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    """Per-step loss breakdown.

    ``contributions`` are the exact addends of ``total`` (sum over
    supervised (sample, modality) mean-squared errors divided by the pair
    count); ``per_modality`` is the more readable per-modality mean over
    the samples where that modality was supervised.  Unsupervised
    modalities carry 0.0 in both and False in ``mask``.
    """

    total: float
    per_modality: Mapping[str, float]
    contributions: Mapping[str, float]
    mask: Mapping[str, bool]


def masked_loss(model, samples: Sequence[ModelInput]):
    """Batch forward pass + masked modality-wise objective.

    Returns (differentiable scalar, LossReport).  Only noisy modalities
    enter the graph, so condition/none projection heads receive exactly
    zero gradient (their ``.grad`` stays None unless another sample in the
    batch supervises them).
    """
    require(len(samples) >= 1, "empty batch")
    dtype = next(model.parameters()).dtype
    stack = torch.from_numpy(np.stack([s.stack for s in samples])).to(dtype)
    roles = torch.from_numpy(np.stack([roles_to_ids(s.roles.roles) for s in samples]))
    ts = torch.tensor([s.t for s in samples])
    out = model(stack, roles, ts, [s.caption for s in samples])

    terms: Dict[str, list] = {m: [] for m in MODALITY_NAMES}
    for b, s in enumerate(samples):
        sup = s.roles.noisy_set
        require(len(sup) >= 1, "sample supervises no modality")
        for m in sup:
            target = torch.from_numpy(np.asarray(s.eps[m])).to(dtype)
            terms[m].append(((out[m][b] - target) ** 2).mean())

    n_pairs = sum(len(v) for v in terms.values())
    total = None
    contributions: Dict[str, float] = {}
    per_modality: Dict[str, float] = {}
    mask: Dict[str, bool] = {}
    for m in MODALITY_NAMES:
        if terms[m]:
            contrib = torch.stack(terms[m]).sum() / n_pairs
            total = contrib if total is None else total + contrib
            contributions[m] = float(contrib.detach())
            per_modality[m] = float(torch.stack(terms[m]).detach().mean())
            mask[m] = True
        else:
            contributions[m] = 0.0
            per_modality[m] = 0.0
            mask[m] = False
    # the report's total is the plain sum of the reported contributions so
    # the breakdown adds up exactly; the differentiable scalar may differ
    # from it in the last float32 bit
    report = LossReport(total=sum(contributions[m] for m in MODALITY_NAMES),
                        per_modality=per_modality,
                        contributions=contributions, mask=mask)
    return total, report


# ---------------------------------------------------------------------------
# training configuration and checkpoints
# ---------------------------------------------------------------------------

STAGES = ("I", "II", "III")
_PREVIOUS_STAGE = {"II": "I", "III": "II"}


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    steps: int
    batch_size: int = 2
    lr: float = 2e-5
    p_t: float = 0.1
    schedule_kind: str = "linear-beta"
    num_steps: int = 1000
    seed: int = 0
    warmup: int = 100
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    checkpoint_every: int = 50
    # stage III pseudo-label filters: two upper bounds and one lower bound
    filter_max_normal_deg: float = 35.0
    filter_max_seg_residual: float = 0.05
    filter_min_psnr: float = 14.0
    augment_steps: int = 10

    def __post_init__(self):
        require(self.stage in STAGES, f"stage must be one of {STAGES}, got {self.stage!r}")
        check_positive_int(self.steps, "steps")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.num_steps, "num_steps", minimum=2)
        check_positive_int(self.checkpoint_every, "checkpoint_every")
        require(self.lr > 0.0, "lr must be positive")
        require(0.0 <= self.p_t <= 1.0, "p_t must be a probability")
        require(self.schedule_kind in SCHEDULE_KINDS,
                f"unknown schedule kind {self.schedule_kind!r}")


def _registry_hash() -> str:
    blob = ",".join(MODALITY_NAMES).encode()
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def save_checkpoint(ckpt_dir: str, model, optimizer, config: TrainConfig,
                    codec: LatentCodec, step: int, last_loss: float,
                    scaler: Optional[LatentScaler] = None) -> str:
    """Atomic checkpoint: meta.json + params/ + optim/ named tensors.
    Carries no machine paths and no timestamps."""
    tmp = ckpt_dir + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    meta = {
        "format_version": FORMAT_VERSION,
        "stage": config.stage,
        "step": int(step),
        "model_config": asdict(model.config),
        "codec": codec.state(),
        "latent_stats": scaler.state() if scaler is not None else None,
        "schedule": {"kind": config.schedule_kind, "num_steps": config.num_steps},
        "train_config": asdict(config),
        "registry_hash": _registry_hash(),
        "last_loss": float(last_loss),
    }
    with open(os.path.join(tmp, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    save_named_tensors(os.path.join(tmp, "params"), params_to_arrays(model))
    if optimizer is not None:
        opt_arrays: Dict[str, np.ndarray] = {}
        for name, p in model.named_parameters():
            state = optimizer.state.get(p)
            if not state:
                continue
            opt_arrays[f"{name}__exp_avg"] = state["exp_avg"].numpy()
            opt_arrays[f"{name}__exp_avg_sq"] = state["exp_avg_sq"].numpy()
            opt_arrays[f"{name}__step"] = np.float32(state["step"].item())
        save_named_tensors(os.path.join(tmp, "optim"), opt_arrays)
    if os.path.exists(ckpt_dir):
        shutil.rmtree(ckpt_dir)
    os.replace(tmp, ckpt_dir)
    return ckpt_dir


def load_checkpoint(ckpt_dir: str) -> Dict:
    with open(os.path.join(ckpt_dir, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    require(meta.get("format_version") == FORMAT_VERSION,
            f"checkpoint format {meta.get('format_version')} != {FORMAT_VERSION}")
    require(meta.get("registry_hash") == _registry_hash(),
            "checkpoint was written under a different modality registry")
    model = Denoiser(DenoiserConfig(**meta["model_config"]))
    load_arrays(model, load_named_tensors(os.path.join(ckpt_dir, "params")))
    stats = meta.get("latent_stats")
    out = {"meta": meta, "model": model,
           "codec": LatentCodec.from_state(meta["codec"]),
           "scaler": LatentScaler.from_state(stats) if stats else None}
    opt_dir = os.path.join(ckpt_dir, "optim")
    out["optim_arrays"] = load_named_tensors(opt_dir) if os.path.isdir(opt_dir) else {}
    return out


def _make_optimizer(model, config: TrainConfig,
                    optim_arrays: Optional[Mapping[str, np.ndarray]] = None):
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=config.weight_decay)
    if optim_arrays:
        for name, p in model.named_parameters():
            key = f"{name}__exp_avg"
            if key not in optim_arrays:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(optim_arrays[f"{name}__step"])),
                "exp_avg": torch.from_numpy(optim_arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(optim_arrays[f"{name}__exp_avg_sq"].copy()),
            }
    return opt


# ---------------------------------------------------------------------------
# the staged training loop
# ---------------------------------------------------------------------------

_CSV_COLUMNS = (["step", "stage", "loss_total"]
                + [f"loss_{m}" for m in MODALITY_NAMES] + ["lr", "wallclock"])


def _append_metrics(path: str, row: Sequence) -> None:
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(_CSV_COLUMNS)
        w.writerow(row)


def _load_sources(sources, codec: LatentCodec):
    """Encode every training clip once; returns {key: (latents, caption)}."""
    cache = {}
    for root, cid in sources:
        rec = read_clip(root, cid)
        lat = {m: z.data.astype(np.float32)
               for m, z in codec.encode_record(rec.tensors).items()}
        cache[(root, cid)] = (lat, rec.caption)
    return cache


def train(config: TrainConfig, root: str, out_dir: str,
          model_config: Optional[DenoiserConfig] = None,
          init_from: Optional[str] = None,
          resume: Optional[str] = None,
          pool_root: Optional[str] = None) -> str:
    """Run one training stage; returns the checkpoint directory.

    ``resume`` continues an interrupted run of the same stage with a
    bit-identical trajectory (per-step derived seeds mean the master seed
    plus the step counter IS the rng state).  ``init_from`` starts this
    stage from the previous stage's parameters with a fresh optimizer.
    Stage III additionally pseudo-labels ``pool_root`` clips before
    fine-tuning; the curated clips land under ``out_dir``/augmented.
    """
    torch.set_num_threads(1)
    if model_config is None:
        model_config = DenoiserConfig()
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    schedule = make_schedule(config.schedule_kind, config.num_steps)

    start_step = 0
    optim_arrays = None
    if resume is not None:
        ck = load_checkpoint(resume)
        require(ck["meta"]["stage"] == config.stage,
                f"resume checkpoint is stage {ck['meta']['stage']}, "
                f"config wants {config.stage}")
        require(ck["meta"]["train_config"] == asdict(config),
                "resume config differs from the checkpoint's; refusing to mix runs")
        model, codec = ck["model"], ck["codec"]
        optim_arrays = ck["optim_arrays"]
        start_step = int(ck["meta"]["step"])
    elif config.stage in _PREVIOUS_STAGE:
        require(init_from is not None,
                f"stage {config.stage} needs init_from = a stage "
                f"{_PREVIOUS_STAGE[config.stage]} checkpoint")
        ck = load_checkpoint(init_from)
        require(ck["meta"]["stage"] == _PREVIOUS_STAGE[config.stage],
                f"stage {config.stage} must start from a stage "
                f"{_PREVIOUS_STAGE[config.stage]} checkpoint, "
                f"got stage {ck['meta']['stage']}")
        require(ck["meta"]["model_config"] == asdict(model_config),
                "model config differs from the init checkpoint's")
        model, codec = ck["model"], ck["codec"]
    else:
        require(init_from is None, "stage I starts fresh; init_from is for later stages")
        model = init_params(model_config)
        codec = LatentCodec(patch=model_config.patch, seed=config.seed)

    manifest = load_manifest(root)
    sources = [(root, cid) for cid in manifest.splits["train"]]
    require(len(sources) >= 1, "train split is empty")

    if config.stage == "III":
        aug_root = os.path.join(out_dir, "augmented")
        if resume is not None and os.path.isdir(aug_root):
            survivors = list_clips(aug_root)
        else:
            require(pool_root is not None, "stage III needs pool_root (unlabeled clips)")
            survivors = self_augment(model, codec, schedule, pool_root, config, aug_root)
        if survivors:
            sources += [(aug_root, cid) for cid in survivors]
        else:
            log.warning("no pseudo-labeled clips survived filtering; "
                        "stage III proceeds on the original data only")

    cache = _load_sources(sources, codec)
    opt = _make_optimizer(model, config, optim_arrays)

    if start_step == 0:
        save_checkpoint(ckpt_dir, model, opt, config, codec, 0, float("nan"))

    csv_path = os.path.join(out_dir, "metrics.csv")
    roles_path = os.path.join(out_dir, "roles.log")
    t0 = time.time()
    model.train()
    for step in range(start_step + 1, config.steps + 1):
        rng = np.random.default_rng(derive_seed(config.seed, config.stage, step))
        # linear warmup into cosine decay toward 10% of peak; a pure
        # function of (step, config) so resumed runs replay bit-identically
        lr_now = config.lr * min(1.0, step / max(1, config.warmup))
        if step > config.warmup and config.steps > config.warmup:
            frac = (step - config.warmup) / (config.steps - config.warmup)
            lr_now *= 0.1 + 0.45 * (1.0 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr_now

        samples = []
        for _ in range(config.batch_size):
            key = sources[int(rng.integers(0, len(sources)))]
            lat, caption = cache[key]
            roles = stage1_roles() if config.stage == "I" else assign_roles(rng, p_t=config.p_t)
            t = int(rng.integers(0, config.num_steps))
            samples.append(build_model_input(lat, roles, t, schedule, rng, caption))

        loss, report = masked_loss(model, samples)
        if not math.isfinite(report.total):
            raise RuntimeError(
                f"non-finite loss at step {step}; last good checkpoint kept at {ckpt_dir}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
        opt.step()

        _append_metrics(csv_path, [step, config.stage, f"{report.total:.8f}"]
                        + [f"{report.per_modality[m]:.8f}" for m in MODALITY_NAMES]
                        + [f"{lr_now:.3e}", f"{time.time() - t0:.3f}"])
        with open(roles_path, "a", encoding="utf-8") as f:
            for s in samples:
                f.write(serialize_roles(s.roles, seed=step) + "\n")

        if step % config.checkpoint_every == 0 or step == config.steps:
            save_checkpoint(ckpt_dir, model, opt, config, codec, step, report.total)
    return ckpt_dir


# ---------------------------------------------------------------------------
# stage III self-augmentation
# ---------------------------------------------------------------------------

def self_augment(model, codec: LatentCodec, schedule: NoiseSchedule,
                 pool_root: str, config: TrainConfig, out_root: str) -> Tuple[str, ...]:
    """Pseudo-label a pool of rgb-only clips and keep the self-consistent ones.

    Three automatic filters: (a) finite-difference normals of the predicted
    depth agree with the predicted normals within ``filter_max_normal_deg``
    (a canonical static camera is assumed since pose is unknown); (b) the
    segmentation palette-snap residual stays under
    ``filter_max_seg_residual``; (c) re-rendering rgb from the 7 predicted
    modalities hits at least ``filter_min_psnr`` dB against the input.
    Survivors are written under ``out_root`` tagged source="pseudo".
    """
    from . import metrics, sampler  # local import: sampler depends on this module

    ids = list_clips(pool_root)
    require(len(ids) >= 1, f"no pool clips under {pool_root!r}")
    survivors = []
    for cid in ids:
        rec = read_clip(pool_root, cid, modalities=("rgb",))
        rgb = rec.tensors["rgb"]
        res = sampler.understand(model, codec, schedule, rgb, rec.caption,
                                 steps=config.augment_steps,
                                 seed=derive_seed(config.seed, "augment", cid))
        pred = res.native

        T = rgb.data.shape[0]
        traj = CameraTrajectory(
            pattern="linear",
            positions=np.tile(np.array([0.0, 1.2, 3.0]), (T, 1)),
            lookats=np.tile(np.array([0.0, 0.5, 0.0]), (T, 1)), T=T)
        angle, n_px = geometry_consistency_deg(
            pred["depth"].data.astype(np.float64),
            pred["normal"].data.astype(np.float64),
            pred["segmentation"].data.astype(np.float64), traj)
        ok_a = (math.isinf(config.filter_max_normal_deg)
                or (n_px > 0 and angle <= config.filter_max_normal_deg))

        residual = float(np.mean(res.seg_residual)) if res.seg_residual is not None else 0.0
        ok_b = residual <= config.filter_max_seg_residual

        rerender = sampler.generate(model, codec, schedule, sampler.GenerationRequest(
            conditions={m: pred[m] for m in MODALITY_NAMES if m != "rgb"},
            caption=rec.caption, targets=("rgb",), steps=config.augment_steps,
            seed=derive_seed(config.seed, "rerender", cid)))
        psnr = metrics.psnr(rerender.native["rgb"].data, rgb.data)
        ok_c = psnr >= config.filter_min_psnr

        log.info("self_augment %s: normal %.1f deg (n=%d) %s, seg residual %.4f %s, "
                 "psnr %.1f dB %s", cid, angle, n_px, "ok" if ok_a else "drop",
                 residual, "ok" if ok_b else "drop", psnr, "ok" if ok_c else "drop")
        if ok_a and ok_b and ok_c:
            tensors = dict(pred)
            tensors["rgb"] = rgb  # the condition echoes through untouched
            write_clip(ClipRecord(clip_id=cid, tensors=tensors, caption=rec.caption,
                                  meta={"source": "pseudo"}),
                       out_root, overwrite=True)
            survivors.append(cid)
    return tuple(survivors)
