"""Noise-prediction transformer over the channel-concatenated latent stack.

One token per (frame, row, col) cell of the latent grid; all eight
modalities live in that token's channel vector, so attention is full
spatio-temporal and cross-modal mixing happens in the channel projection.
Modality identity, role flags, timestep, and a hashed caption bag are all
injected additively.  Eight per-modality heads read the shared trunk; the
non-rgb heads start as bit-exact copies of the rgb head, and each head adds
its own input slice back through a learnable gain that starts at zero.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, asdict
from typing import Dict, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .hmcs import ROLES, ModelInput
from .registry import MODALITY_NAMES, NUM_MODALITIES
from .validation import require

__all__ = [
    "DenoiserConfig", "Denoiser", "init_params", "predict_eps",
    "count_parameters", "caption_bucket_ids", "gradient_check",
    "params_to_arrays", "load_arrays",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    dim: int = 128
    depth: int = 4
    heads: int = 4
    patch: int = 2
    max_t: int = 8
    max_grid: int = 16
    caption_buckets: int = 1024
    seed: int = 0

    def __post_init__(self):
        require(self.dim >= 2 and self.depth >= 1 and self.heads >= 1,
                f"bad size config {self}")
        require(self.dim % self.heads == 0,
                f"dim {self.dim} not divisible by heads {self.heads}")
        require(self.patch >= 1 and self.max_t >= 1 and self.max_grid >= 1
                and self.caption_buckets >= 1, f"bad size config {self}")

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def slot_channels(self) -> int:
        # latent channels plus the absent-flag channel
        return self.latent_channels + 1


def caption_bucket_ids(caption: str, buckets: int) -> list:
    """Stable hash-bucket ids for a caption's tokens, sorted so the bag is
    order-free down to the floating-point summation."""
    tokens = caption.replace(",", " ").lower().split()
    ids = [int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(),
                          "little") % buckets
           for tok in tokens]
    return sorted(ids)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device)
        / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _trunc_normal_(tensor: torch.Tensor, std: float, g: torch.Generator) -> None:
    with torch.no_grad():
        tensor.normal_(0.0, std, generator=g)
        for _ in range(4):
            bad = tensor.abs() > 2 * std
            if not bad.any():
                break
            fresh = torch.empty_like(tensor).normal_(0.0, std, generator=g)
            tensor[bad] = fresh[bad]
        tensor.clamp_(-2 * std, 2 * std)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, dh).transpose(1, 2)
        k = k.view(b, n, self.heads, dh).transpose(1, 2)
        v = v.view(b, n, self.heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        return x + self.mlp(self.norm2(x))


class Denoiser(nn.Module):
    """Predicts the injected noise for every modality's latent slice."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        dim, slot = config.dim, config.slot_channels
        in_ch = NUM_MODALITIES * slot
        self.token_proj = nn.Linear(in_ch, dim)
        self.modality_embed = nn.Parameter(torch.zeros(NUM_MODALITIES, slot))
        self.role_embed = nn.Parameter(torch.zeros(len(ROLES), slot))
        self.pos_time = nn.Parameter(torch.zeros(config.max_t, dim))
        self.pos_row = nn.Parameter(torch.zeros(config.max_grid, dim))
        self.pos_col = nn.Parameter(torch.zeros(config.max_grid, dim))
        self.time_mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                      nn.Linear(4 * dim, dim))
        self.caption_embed = nn.Parameter(torch.zeros(config.caption_buckets, dim))
        self.blocks = nn.ModuleList(
            [_Block(dim, config.heads) for _ in range(config.depth)])
        self.head_norms = nn.ModuleList(
            [nn.LayerNorm(dim) for _ in MODALITY_NAMES])
        self.head_projs = nn.ModuleList(
            [nn.Linear(dim, config.latent_channels) for _ in MODALITY_NAMES])
        # learnable pass-through from each modality's own input slice to its
        # prediction, starting at zero.  At high noise the target is mostly
        # the slice itself; routing that identity through attention costs the
        # trunk ~1% relative error, which 1/sqrt(alpha_bar) amplification
        # turns into reverse-chain collapse.  The gain lets heads learn only
        # the correction on top of the slice.
        self.skip_gain = nn.Parameter(torch.zeros(NUM_MODALITIES))

    def _caption_vector(self, captions: Sequence[str],
                        dtype: torch.dtype) -> torch.Tensor:
        rows = []
        for cap in captions:
            ids = caption_bucket_ids(cap, self.config.caption_buckets)
            if ids:
                rows.append(self.caption_embed[ids].mean(dim=0))
            else:
                rows.append(torch.zeros(self.config.dim, dtype=dtype,
                                        device=self.caption_embed.device))
        return torch.stack(rows).to(dtype)

    def forward(self, stack: torch.Tensor, roles: torch.Tensor,
                t: torch.Tensor, captions: Sequence[str]) -> Dict[str, torch.Tensor]:
        cfg = self.config
        slot = cfg.slot_channels
        require(stack.ndim == 5, f"stack must be [B,T,H',W',C], got {tuple(stack.shape)}")
        b, tt, hh, ww, cc = stack.shape
        require(cc == NUM_MODALITIES * slot,
                f"stack has {cc} channels, registry layout needs {NUM_MODALITIES * slot}")
        require(tt <= cfg.max_t and hh <= cfg.max_grid and ww <= cfg.max_grid,
                f"grid {tt}x{hh}x{ww} exceeds configured max "
                f"{cfg.max_t}x{cfg.max_grid}x{cfg.max_grid}")
        require(roles.shape == (b, NUM_MODALITIES), f"roles must be [B,{NUM_MODALITIES}]")
        require(len(captions) == b, "one caption per batch element")

        # modality identity and role flags, added onto each 13-channel slice
        add = (self.modality_embed.reshape(1, -1)
               + self.role_embed[roles].reshape(b, -1))
        x = stack + add[:, None, None, None, :]

        n = tt * hh * ww
        tok = self.token_proj(x.reshape(b, n, cc))
        pos = (self.pos_time[:tt, None, None, :]
               + self.pos_row[None, :hh, None, :]
               + self.pos_col[None, None, :ww, :]).reshape(1, n, cfg.dim)
        temb = self.time_mlp(sinusoidal_embedding(t.to(tok.dtype), cfg.dim))
        cap = self._caption_vector(captions, tok.dtype)
        tok = tok + pos + temb[:, None, :] + cap[:, None, :]

        for blk in self.blocks:
            tok = blk(tok)

        body = stack.reshape(b, tt, hh, ww, NUM_MODALITIES, slot)
        out = {}
        for i, name in enumerate(MODALITY_NAMES):
            eps = self.head_projs[i](self.head_norms[i](tok))
            eps = eps.reshape(b, tt, hh, ww, cfg.latent_channels)
            out[name] = eps + self.skip_gain[i] * body[..., i, :cfg.latent_channels]
        return out


def _seeded_init(model: Denoiser, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Linear):
            _trunc_normal_(module.weight, 0.02, g)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    for p in (model.modality_embed, model.role_embed, model.pos_time,
              model.pos_row, model.pos_col, model.caption_embed):
        _trunc_normal_(p, 0.02, g)
    # every non-rgb head starts as an exact copy of the rgb head
    with torch.no_grad():
        for i in range(1, NUM_MODALITIES):
            model.head_projs[i].weight.copy_(model.head_projs[0].weight)
            model.head_projs[i].bias.copy_(model.head_projs[0].bias)
            model.head_norms[i].weight.copy_(model.head_norms[0].weight)
            model.head_norms[i].bias.copy_(model.head_norms[0].bias)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def init_params(config: DenoiserConfig) -> Denoiser:
    """Deterministic seeded construction; same config -> byte-identical
    parameters."""
    model = Denoiser(config)
    _seeded_init(model, config.seed)
    log.info("denoiser %s: %d parameters", asdict(config), count_parameters(model))
    return model


def roles_to_ids(roles: Mapping[str, str]) -> np.ndarray:
    require(set(roles.keys()) == set(MODALITY_NAMES),
            "model inputs need a role for every registry modality")
    return np.array([ROLES.index(roles[m]) for m in MODALITY_NAMES], dtype=np.int64)


def predict_eps(model: Denoiser, sample: ModelInput) -> Dict[str, np.ndarray]:
    """Single-sample forward pass; numpy in, numpy out."""
    dtype = next(model.parameters()).dtype
    stack = torch.from_numpy(np.asarray(sample.stack)).to(dtype)[None]
    roles = torch.from_numpy(roles_to_ids(sample.roles.roles))[None]
    t = torch.tensor([sample.t])
    model.eval()
    with torch.no_grad():
        out = model(stack, roles, t, [sample.caption])
    return {m: out[m][0].numpy() for m in out}


def params_to_arrays(model: nn.Module) -> Dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().astype(np.float32)
            for name, p in model.named_parameters()}


def load_arrays(model: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    names = {n for n, _ in model.named_parameters()}
    require(names == set(arrays.keys()),
            f"parameter names mismatch: missing {sorted(names - set(arrays))[:3]}, "
            f"extra {sorted(set(arrays) - names)[:3]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            a = torch.from_numpy(np.asarray(arrays[name]))
            require(tuple(a.shape) == tuple(p.shape),
                    f"{name}: shape {tuple(a.shape)} != {tuple(p.shape)}")
            p.copy_(a.to(p.dtype))


def gradient_check(model: Denoiser, stack: np.ndarray, roles: np.ndarray,
                   t: np.ndarray, captions: Sequence[str],
                   n_per_tensor: int = 4, h: float = None,
                   floor: float = None, seed: int = 0) -> Dict[str, float]:
    """Central-difference check of autograd gradients.

    Probes up to ``n_per_tensor`` random entries of every parameter tensor
    against (L(th+h) - L(th-h)) / 2h for a fixed quadratic probe loss.
    Returns per-tensor max relative error plus an "overall" entry.

    Step and denominator floor default per dtype: float64 gets h=1e-4 with
    floor 1e-8; float32 needs h=1e-2 (smaller steps drown in rounding of
    the loss difference) and a 5e-3 floor, because rounding the O(10) probe
    loss to f32 leaves ~5e-5 of absolute noise on the difference quotient,
    which would read as tens of percent against near-zero gradient entries.
    """
    dtype = next(model.parameters()).dtype
    if h is None:
        h = 1e-4 if dtype == torch.float64 else 1e-2
    if floor is None:
        floor = 1e-8 if dtype == torch.float64 else 5e-3
    stack_t = torch.from_numpy(stack).to(dtype)
    roles_t = torch.from_numpy(roles)
    t_t = torch.from_numpy(t)

    gen = np.random.default_rng(seed)
    targets = None

    def loss_value() -> torch.Tensor:
        nonlocal targets
        out = model(stack_t, roles_t, t_t, captions)
        if targets is None:
            targets = {m: torch.from_numpy(
                gen.normal(size=tuple(out[m].shape))).to(dtype) for m in out}
        return sum(((out[m] - targets[m]) ** 2).mean() for m in out)

    model.zero_grad(set_to_none=True)
    loss_value().backward()
    analytic = {n: p.grad.detach().clone() for n, p in model.named_parameters()}

    report: Dict[str, float] = {}
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.data.reshape(-1)
            k = min(n_per_tensor, flat.numel())
            idx = gen.choice(flat.numel(), size=k, replace=False)
            errs = []
            for i in idx:
                orig = flat[i].item()
                step = h * max(1.0, abs(orig))
                flat[i] = orig + step
                up = loss_value().item()
                flat[i] = orig - step
                down = loss_value().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                an = analytic[name].reshape(-1)[i].item()
                errs.append(abs(an - fd) / max(abs(an), abs(fd), floor))
            report[name] = max(errs)
            worst = max(worst, report[name])
    report["overall"] = worst
    return report
