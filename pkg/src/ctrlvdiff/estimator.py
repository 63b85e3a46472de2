"""Facade over the pipeline following the fit/predict conventions of
scikit-learn estimators.

The constructor stores hyperparameters verbatim (``get_params`` /
``set_params`` round-trip them, so the object clones the sklearn way);
``fit`` runs one training stage and hangs the fitted state on
underscore-suffixed attributes; ``predict`` is rgb -> the other seven
modalities.  Adoption is deliberately partial: ``fit`` takes a dataset
root rather than an (X, y) pair because clips live on disk, and there is
no scoring grid integration.
"""

from __future__ import annotations

import inspect
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import diffusion, metrics, sampler
from .datastore import list_clips, read_clip
from .denoiser import DenoiserConfig
from .registry import MODALITY_NAMES, ModalityTensor
from .validation import require

__all__ = ["ControllableVideoDiffusion"]


class ControllableVideoDiffusion:
    """One training stage plus the three inference modes behind one object.

    Hyperparameters mirror TrainConfig and DenoiserConfig; ``seed`` feeds
    both (weight init and data order).  ``sample_steps`` is the default
    reverse-diffusion budget for predict/generate/edit.
    """

    def __init__(self, stage: str = "I", steps: int = 200, batch_size: int = 2,
                 lr: float = 2e-5, p_t: float = 0.1,
                 schedule_kind: str = "linear-beta", num_steps: int = 1000,
                 seed: int = 0, warmup: int = 100, checkpoint_every: int = 50,
                 dim: int = 128, depth: int = 4, heads: int = 4,
                 patch: int = 2, max_t: int = 8, max_grid: int = 16,
                 caption_buckets: int = 1024, sample_steps: int = 20,
                 filter_max_normal_deg: float = 35.0,
                 filter_max_seg_residual: float = 0.05,
                 filter_min_psnr: float = 14.0, augment_steps: int = 10):
        self.stage = stage
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.p_t = p_t
        self.schedule_kind = schedule_kind
        self.num_steps = num_steps
        self.seed = seed
        self.warmup = warmup
        self.checkpoint_every = checkpoint_every
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.patch = patch
        self.max_t = max_t
        self.max_grid = max_grid
        self.caption_buckets = caption_buckets
        self.sample_steps = sample_steps
        self.filter_max_normal_deg = filter_max_normal_deg
        self.filter_max_seg_residual = filter_max_seg_residual
        self.filter_min_psnr = filter_min_psnr
        self.augment_steps = augment_steps

    # -- sklearn-style parameter plumbing --------------------------------

    @classmethod
    def _param_names(cls) -> Tuple[str, ...]:
        sig = inspect.signature(cls.__init__)
        return tuple(p for p in sig.parameters if p != "self")

    def get_params(self, deep: bool = True) -> Dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "ControllableVideoDiffusion":
        valid = self._param_names()
        for name, value in params.items():
            require(name in valid, f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    # -- config assembly ---------------------------------------------------

    def _train_config(self) -> diffusion.TrainConfig:
        return diffusion.TrainConfig(
            stage=self.stage, steps=self.steps, batch_size=self.batch_size,
            lr=self.lr, p_t=self.p_t, schedule_kind=self.schedule_kind,
            num_steps=self.num_steps, seed=self.seed, warmup=self.warmup,
            checkpoint_every=self.checkpoint_every,
            filter_max_normal_deg=self.filter_max_normal_deg,
            filter_max_seg_residual=self.filter_max_seg_residual,
            filter_min_psnr=self.filter_min_psnr,
            augment_steps=self.augment_steps)

    def _model_config(self) -> DenoiserConfig:
        return DenoiserConfig(dim=self.dim, depth=self.depth, heads=self.heads,
                              patch=self.patch, max_t=self.max_t,
                              max_grid=self.max_grid,
                              caption_buckets=self.caption_buckets,
                              seed=self.seed)

    # -- training ---------------------------------------------------------

    def fit(self, root: str, out_dir: str, init_from: Optional[str] = None,
            resume: Optional[str] = None,
            pool_root: Optional[str] = None) -> "ControllableVideoDiffusion":
        """Run the configured stage on the dataset under ``root``."""
        ckpt = diffusion.train(self._train_config(), root, out_dir,
                               model_config=self._model_config(),
                               init_from=init_from, resume=resume,
                               pool_root=pool_root)
        self._adopt_checkpoint(ckpt)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt_dir: str) -> "ControllableVideoDiffusion":
        """Rebuild a fitted estimator from a training checkpoint."""
        meta = diffusion.load_checkpoint(ckpt_dir)["meta"]
        tc, mc = meta["train_config"], meta["model_config"]
        est = cls(stage=tc["stage"], steps=tc["steps"],
                  batch_size=tc["batch_size"], lr=tc["lr"], p_t=tc["p_t"],
                  schedule_kind=tc["schedule_kind"], num_steps=tc["num_steps"],
                  seed=tc["seed"], warmup=tc["warmup"],
                  checkpoint_every=tc["checkpoint_every"],
                  dim=mc["dim"], depth=mc["depth"], heads=mc["heads"],
                  patch=mc["patch"], max_t=mc["max_t"],
                  max_grid=mc["max_grid"],
                  caption_buckets=mc["caption_buckets"],
                  filter_max_normal_deg=tc["filter_max_normal_deg"],
                  filter_max_seg_residual=tc["filter_max_seg_residual"],
                  filter_min_psnr=tc["filter_min_psnr"],
                  augment_steps=tc["augment_steps"])
        est._adopt_checkpoint(ckpt_dir)
        return est

    def _adopt_checkpoint(self, ckpt_dir: str) -> None:
        ck = diffusion.load_checkpoint(ckpt_dir)
        self.model_ = ck["model"]
        self.codec_ = ck["codec"]
        sched = ck["meta"]["schedule"]
        self.schedule_ = diffusion.make_schedule(sched["kind"], sched["num_steps"])
        self.checkpoint_dir_ = ckpt_dir
        self.meta_ = ck["meta"]

    def _check_fitted(self) -> None:
        require(hasattr(self, "model_"),
                "estimator is not fitted; call fit() or from_checkpoint()")

    # -- inference ---------------------------------------------------------

    def predict(self, rgb, caption: str = "", steps: Optional[int] = None,
                seed: int = 0) -> Dict[str, ModalityTensor]:
        """rgb clip -> native-space predictions for the other 7 modalities.

        ``rgb`` may be a ModalityTensor or a bare [T,H,W,3] array in [0,1].
        """
        self._check_fitted()
        if not isinstance(rgb, ModalityTensor):
            rgb = ModalityTensor("rgb", np.asarray(rgb, dtype=np.float64))
        res = sampler.understand(self.model_, self.codec_, self.schedule_,
                                 rgb, caption, steps=steps or self.sample_steps,
                                 seed=seed)
        return dict(res.native)

    def generate(self, conditions: Optional[Mapping[str, ModalityTensor]] = None,
                 caption: str = "", targets: Sequence[str] = ("rgb",),
                 steps: Optional[int] = None, seed: int = 0,
                 frames: Optional[int] = None,
                 size: Optional[Tuple[int, int]] = None) -> Dict[str, ModalityTensor]:
        self._check_fitted()
        req = sampler.GenerationRequest(
            conditions=dict(conditions or {}), caption=caption,
            targets=tuple(targets), steps=steps or self.sample_steps,
            seed=seed, frames=frames, size=size)
        return dict(sampler.generate(self.model_, self.codec_, self.schedule_,
                                     req).native)

    def edit(self, clip, edit: Mapping, steps: Optional[int] = None,
             seed: int = 0) -> sampler.SampleResult:
        self._check_fitted()
        return sampler.edit_and_rerender(self.model_, self.codec_,
                                         self.schedule_, clip, edit,
                                         steps=steps or self.sample_steps,
                                         seed=seed)

    def score(self, root: str, clip_ids: Optional[Sequence[str]] = None,
              steps: Optional[int] = None, seed: int = 0) -> float:
        """Mean rgb reconstruction PSNR (dB) from the other 7 modalities
        over the given clips (default: every clip under root).  Higher is
        better, as sklearn expects of a score."""
        self._check_fitted()
        ids = list(clip_ids) if clip_ids is not None else list(list_clips(root))
        require(len(ids) >= 1, "no clips to score")
        vals = []
        for cid in ids:
            rec = read_clip(root, cid)
            conditions = {m: rec.tensors[m] for m in MODALITY_NAMES if m != "rgb"}
            out = self.generate(conditions=conditions, caption=rec.caption,
                                targets=("rgb",), steps=steps, seed=seed)
            vals.append(metrics.psnr(out["rgb"].data, rec.tensors["rgb"].data))
        return float(np.mean(vals))

    def __repr__(self) -> str:
        return (f"{type(self).__name__}(stage={self.stage!r}, "
                f"steps={self.steps}, dim={self.dim}, depth={self.depth})")
