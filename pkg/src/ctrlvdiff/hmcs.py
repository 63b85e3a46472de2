"""Per-sample role assignment and the forward noising process.

Each training sample assigns every modality one of three roles:

* ``condition`` - clean latent fed to the network, never supervised.
* ``none``      - absent: zeroed latent plus a flag channel set to 1.
* ``noisy``     - diffusion target: noised forward, supervised.

The sampler draws a condition count k uniform on {1 .. N-1}, picks the
condition set without replacement, optionally drops d further modalities
(d capped so at least one noisy target always remains), and with
probability ``p_t`` demotes every condition to noisy so the sample trains
pure text-to-video.  All remaining modalities are noisy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .registry import MODALITY_NAMES, NUM_MODALITIES
from .validation import check_probability, require

ROLE_CONDITION = "condition"
ROLE_NONE = "none"
ROLE_NOISY = "noisy"
ROLES = (ROLE_CONDITION, ROLE_NONE, ROLE_NOISY)


@dataclass(frozen=True)
class RoleAssignment:
    """One sample's modality -> role map plus the draws that produced it."""

    roles: Mapping[str, str]
    text_only: bool
    k: int
    d: int
    p_t: float

    def __post_init__(self):
        n = len(self.roles)
        require(n >= 2, f"role map needs >= 2 modalities, got {n}")
        for mod, role in self.roles.items():
            require(role in ROLES, f"unknown role {role!r} for {mod}")
        noisy = [m for m, r in self.roles.items() if r == ROLE_NOISY]
        cond = [m for m, r in self.roles.items() if r == ROLE_CONDITION]
        require(len(noisy) >= 1, "every assignment needs at least one noisy modality")
        if self.text_only:
            require(not cond, "text-only assignments cannot carry conditions")
        else:
            require(1 <= self.k <= n - 1, f"k={self.k} outside [1, {n - 1}]")

    @property
    def condition_set(self) -> Tuple[str, ...]:
        return tuple(m for m, r in self.roles.items() if r == ROLE_CONDITION)

    @property
    def none_set(self) -> Tuple[str, ...]:
        return tuple(m for m, r in self.roles.items() if r == ROLE_NONE)

    @property
    def noisy_set(self) -> Tuple[str, ...]:
        return tuple(m for m, r in self.roles.items() if r == ROLE_NOISY)


def assign_roles(rng: np.random.Generator, n_modalities: int = NUM_MODALITIES,
                 p_t: float = 0.1) -> RoleAssignment:
    """Draw one role assignment.

    Draw order is fixed (k, condition set, d, dropout set, text-only coin)
    so a given generator state always reproduces the same assignment.
    """
    require(2 <= n_modalities <= NUM_MODALITIES,
            f"n_modalities must lie in [2, {NUM_MODALITIES}], got {n_modalities}")
    p_t = check_probability(p_t, "p_t")
    names = MODALITY_NAMES[:n_modalities]

    k = int(rng.integers(1, n_modalities))  # uniform on {1 .. N-1}
    cond_idx = rng.choice(n_modalities, size=k, replace=False)
    remaining = np.setdiff1d(np.arange(n_modalities), cond_idx)

    # d is capped at N-1-k so the noisy set is never empty
    d_max = n_modalities - 1 - k
    if d_max >= 1:
        d = int(rng.integers(1, d_max + 1))
        none_idx = rng.choice(remaining, size=d, replace=False)
    else:
        d = 0
        none_idx = np.empty(0, dtype=np.int64)

    text_only = bool(rng.random() < p_t)

    roles: Dict[str, str] = {name: ROLE_NOISY for name in names}
    for i in none_idx:
        roles[names[int(i)]] = ROLE_NONE
    if not text_only:
        for i in cond_idx:
            roles[names[int(i)]] = ROLE_CONDITION
    return RoleAssignment(roles=roles, text_only=text_only, k=k, d=d, p_t=p_t)


def stage1_roles(n_modalities: int = NUM_MODALITIES) -> RoleAssignment:
    """The text-to-video assignment: every modality noisy, no conditions."""
    names = MODALITY_NAMES[:n_modalities]
    return RoleAssignment(
        roles={name: ROLE_NOISY for name in names},
        text_only=True, k=0, d=0, p_t=1.0)


def serialize_roles(ra: RoleAssignment, seed: Optional[int] = None) -> str:
    """One-line text record used in training logs."""
    parts = [f"seed={seed if seed is not None else '-'}",
             f"text_only={int(ra.text_only)}", f"k={ra.k}", f"d={ra.d}",
             f"p_t={ra.p_t}"]
    parts += [f"{m}:{ra.roles[m]}" for m in ra.roles]
    return " ".join(parts)


def parse_roles(line: str) -> RoleAssignment:
    fields = line.split()
    meta = {}
    roles: Dict[str, str] = {}
    for tok in fields:
        if "=" in tok:
            key, val = tok.split("=", 1)
            meta[key] = val
        elif ":" in tok:
            mod, role = tok.split(":", 1)
            roles[mod] = role
        else:
            raise ValueError(f"unparseable role token {tok!r}")
    return RoleAssignment(
        roles=roles, text_only=bool(int(meta["text_only"])),
        k=int(meta["k"]), d=int(meta["d"]), p_t=float(meta["p_t"]))


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention curve: alpha_bar[t] in (0,1], strictly
    decreasing in t.  The training-default constructions (see
    diffusion.make_schedule) start >= 0.999 and end <= 0.02; the validator
    only enforces the structural part so short test schedules stay legal."""

    kind: str
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        require(ab.ndim == 1 and ab.size >= 2, "alpha_bar must be a 1-D array, length >= 2")
        require(bool((ab > 0.0).all() and (ab <= 1.0).all()), "alpha_bar must lie in (0, 1]")
        require(bool((np.diff(ab) < 0.0).all()), "alpha_bar must be strictly decreasing")
        # endpoint contract: training must cover both near-clean and
        # near-pure-noise signal levels, or sampling starts off-distribution
        require(float(ab[0]) >= 0.999, f"alpha_bar[0] = {ab[0]} < 0.999")
        require(float(ab[-1]) <= 0.02, f"alpha_bar[-1] = {ab[-1]} > 0.02")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def num_steps(self) -> int:
        return int(self.alpha_bar.size)


def apply_forward_noise(x, t: int, eps, schedule: NoiseSchedule):
    """sqrt(abar_t) * x + sqrt(1 - abar_t) * eps, elementwise.

    Works on numpy arrays and torch tensors alike; the endpoints are exact
    (abar=1 returns x bitwise)."""
    require(0 <= int(t) < schedule.num_steps,
            f"step {t} outside schedule of length {schedule.num_steps}")
    require(tuple(x.shape) == tuple(eps.shape),
            f"shape mismatch: x {tuple(x.shape)} vs eps {tuple(eps.shape)}")
    a = float(schedule.alpha_bar[int(t)])
    return math.sqrt(a) * x + math.sqrt(1.0 - a) * eps


@dataclass(frozen=True)
class ModelInput:
    """Channel-concatenated latent stack plus everything the denoiser and
    the masked loss need to know about how it was built.

    ``stack`` is [T, H', W', sum(C_m + 1)]: per modality, its latent slice
    followed by one absent-flag channel (1 iff role none), in registry
    order.  ``eps`` keeps the exact noise injected per noisy modality so
    the loss can compare predictions against it.
    """

    stack: np.ndarray
    roles: RoleAssignment
    t: int
    caption: str
    latent_channels: int
    eps: Mapping[str, np.ndarray]


def build_model_input(
    latents: Mapping[str, np.ndarray],
    roles: RoleAssignment,
    t: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    caption: str = "",
) -> ModelInput:
    """Assemble one sample's input stack.

    condition -> clean latent; noisy -> forward-noised at step t with fresh
    gaussian noise; none -> zeros (flag channel carries the absence).
    Noise is drawn in registry order, so (generator state, roles, t) fully
    determine the stack.
    """
    names = tuple(roles.roles.keys())
    shapes = {m: tuple(z.shape) for m, z in latents.items()}
    require(len(set(shapes.values())) <= 1, f"latent grids disagree: {shapes}")
    present = next(iter(latents.values()), None)
    require(present is not None, "at least one latent required")
    tt, hh, ww, cc = present.shape

    slices = []
    eps_by_mod: Dict[str, np.ndarray] = {}
    for name in names:
        role = roles.roles[name]
        flag = np.zeros((tt, hh, ww, 1), dtype=np.float32)
        if role == ROLE_NONE:
            body = np.zeros((tt, hh, ww, cc), dtype=np.float32)
            flag[...] = 1.0
        else:
            if name not in latents:
                raise ValueError(f"missing latent for {name} with role {role}")
            z = np.asarray(latents[name], dtype=np.float32)
            if role == ROLE_CONDITION:
                body = z
            else:
                eps = rng.standard_normal(z.shape).astype(np.float32)
                body = np.asarray(apply_forward_noise(z, t, eps, schedule), dtype=np.float32)
                eps_by_mod[name] = eps
        slices.append(body)
        slices.append(flag)
    stack = np.concatenate(slices, axis=-1)
    return ModelInput(stack=stack, roles=roles, t=int(t), caption=caption,
                      latent_channels=int(cc), eps=eps_by_mod)
