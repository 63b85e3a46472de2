"""Exactly invertible latent codec.

Clips enter in the shared color space and leave as a latent grid: a
space-to-depth rearrangement with patch ``p`` followed by one fixed
orthonormal channel-mixing matrix shared by every modality.  The map is
linear and norm preserving, so reconstruction error downstream is
attributable to the denoiser, never to the representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Sequence

import numpy as np

from .registry import MODALITY_NAMES, ModalityTensor, to_color_space
from .validation import check_positive_int, require

__all__ = ["LatentTensor", "LatentCodec", "LatentScaler", "space_to_depth",
           "depth_to_space"]


@dataclass(frozen=True)
class LatentTensor:
    data: np.ndarray  # [T, H/p, W/p, 3p^2] float64
    patch: int
    modality: str

    def __post_init__(self):
        require(self.data.ndim == 4, f"latents are [T,H',W',C], got {self.data.shape}")
        c = 3 * self.patch * self.patch
        require(self.data.shape[-1] == c,
                f"latent channels {self.data.shape[-1]} != 3p^2 = {c}")


def space_to_depth(x: np.ndarray, p: int) -> np.ndarray:
    """[T,H,W,C] -> [T,H/p,W/p,C*p*p]; inverse of depth_to_space."""
    t, h, w, c = x.shape
    require(h % p == 0 and w % p == 0, f"H,W = ({h},{w}) not divisible by patch {p}")
    y = x.reshape(t, h // p, p, w // p, p, c)
    y = y.transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(t, h // p, w // p, p * p * c)


def depth_to_space(y: np.ndarray, p: int) -> np.ndarray:
    t, hp, wp, cpp = y.shape
    require(cpp % (p * p) == 0, f"channels {cpp} not divisible by p^2 = {p * p}")
    c = cpp // (p * p)
    x = y.reshape(t, hp, wp, p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, hp * p, wp * p, c)


def _orthonormal(dim: int, seed: int) -> np.ndarray:
    """Seeded orthonormal matrix, canonical sign (positive R diagonal)."""
    g = np.random.default_rng(seed).normal(size=(dim, dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))[None, :]


class LatentCodec:
    """Shared invertible clip <-> latent map.

    One mixing matrix for all modalities; ``identity=True`` freezes it to I
    (with patch 1 that makes the latent equal the input, handy in tests).
    The seed is persisted in checkpoints so latents replay exactly.
    """

    def __init__(self, patch: int = 2, seed: int = 0, identity: bool = False):
        check_positive_int(patch, "patch")
        self.patch = patch
        self.seed = int(seed)
        self.identity = bool(identity)
        dim = 3 * patch * patch
        self.mix = np.eye(dim) if identity else _orthonormal(dim, self.seed)

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch * self.patch

    def encode(self, x: ModalityTensor) -> LatentTensor:
        require(x.space == "color", f"encode expects color space, got {x.space!r}")
        y = space_to_depth(x.data.astype(np.float64), self.patch)
        return LatentTensor(y @ self.mix, self.patch, x.modality)

    def decode_raw(self, z: LatentTensor) -> np.ndarray:
        """The exact linear inverse, [T,H,W,3] float64, no range handling.
        Zero maps to zero and linear combinations decode to the same
        combinations of the decodes."""
        require(z.patch == self.patch,
                f"latent patch {z.patch} != codec patch {self.patch}")
        return depth_to_space(z.data @ self.mix.T, self.patch)

    def decode(self, z: LatentTensor) -> ModalityTensor:
        """decode_raw wrapped as a color-space tensor.

        Color space is strictly [0,1], so float noise sitting within 1e-9
        of a boundary is snapped onto it; anything further out (a latent
        that never came from a real clip) is rejected rather than clipped.
        """
        x = self.decode_raw(z)
        require(x.min() > -1e-9 and x.max() < 1.0 + 1e-9,
                f"{z.modality}: decoded values span [{x.min():.3g}, {x.max():.3g}], "
                "not a color-space clip (use decode_raw for free-form latents)")
        return ModalityTensor(z.modality, np.clip(x, 0.0, 1.0), "color")

    def decode_array(self, data: np.ndarray, modality: str) -> np.ndarray:
        """decode_raw for a bare [T,H',W',3p^2] array (sampler output slice)."""
        return self.decode_raw(LatentTensor(np.asarray(data, dtype=np.float64),
                                            self.patch, modality))

    def encode_record(self, tensors: Dict[str, ModalityTensor]) -> Dict[str, LatentTensor]:
        """Encode native-space clip tensors; conversion aux rides along on
        the intermediate color tensors and is NOT preserved here -- callers
        needing exact native round trips keep the color tensors themselves."""
        out = {}
        for mod, t in tensors.items():
            color = to_color_space(t) if t.space == "native" else t
            out[mod] = self.encode(color)
        return out

    def state(self) -> Dict:
        return {"patch": self.patch, "seed": self.seed, "identity": self.identity}

    @classmethod
    def from_state(cls, state: Dict) -> "LatentCodec":
        return cls(patch=int(state["patch"]), seed=int(state["seed"]),
                   identity=bool(state.get("identity", False)))


class LatentScaler:
    """Per-(modality, channel) affine map to roughly unit-variance latents.

    Raw latents are whatever the mixing matrix makes of [0,1] colors:
    channel spreads span an order of magnitude and most modalities carry a
    large constant component.  The noising process treats every channel as
    unit variance, so feeding it raw latents buries the weak channels (and
    any conditioning signal they carry) under the injected noise.  Fitted
    once on the first training stage's clips, persisted in checkpoints, and
    applied at every encode/decode boundary; the codec itself stays exactly
    norm preserving.
    """

    # spread below this is treated as informationless: dividing by a
    # near-zero std would amplify sampler noise into decode garbage
    MIN_STD = 0.05

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        require(mean.ndim == 2 and mean.shape == std.shape
                and mean.shape[0] == len(MODALITY_NAMES),
                f"scaler stats must be [{len(MODALITY_NAMES)}, channels] pairs, "
                f"got {mean.shape} and {std.shape}")
        require(bool(np.all(std > 0.0)), "scaler stds must be positive")
        self.mean = mean
        self.std = std
        self._row = {m: i for i, m in enumerate(MODALITY_NAMES)}

    @classmethod
    def from_latents(cls, latents: Mapping[str, Sequence[np.ndarray]]) -> "LatentScaler":
        """Fit from per-modality collections of [T,H',W',C] latent arrays."""
        means, stds = [], []
        for m in MODALITY_NAMES:
            arrays = latents.get(m)
            require(arrays is not None and len(arrays) >= 1,
                    f"no latents to fit a scaler for {m!r}")
            flat = np.concatenate(
                [np.asarray(z, dtype=np.float64).reshape(-1, np.shape(z)[-1])
                 for z in arrays], axis=0)
            means.append(flat.mean(axis=0))
            stds.append(np.maximum(flat.std(axis=0), cls.MIN_STD))
        return cls(np.stack(means), np.stack(stds))

    def scale(self, modality: str, z: np.ndarray) -> np.ndarray:
        require(modality in self._row, f"unknown modality {modality!r}")
        i = self._row[modality]
        return (np.asarray(z, dtype=np.float64) - self.mean[i]) / self.std[i]

    def unscale(self, modality: str, z: np.ndarray) -> np.ndarray:
        require(modality in self._row, f"unknown modality {modality!r}")
        i = self._row[modality]
        return np.asarray(z, dtype=np.float64) * self.std[i] + self.mean[i]

    def state(self) -> Dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_state(cls, state: Dict) -> "LatentScaler":
        return cls(np.asarray(state["mean"]), np.asarray(state["std"]))
