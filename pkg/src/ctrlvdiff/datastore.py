"""On-disk clip format, manifests, and train/val/test splits.

One directory per clip::

    <root>/<clip_id>/
        rgb.tensor ... canny.tensor   raw float32 payload, 32-byte header
        caption.txt                   UTF-8
        meta.json                     clip_id, shape, fps, seed, scene hash

The ``.tensor`` header is normative and bit-exact: magic ``MMV1``, four
little-endian u32 dims (T, H, W, C), one u32 modality id, 8 reserved zero
bytes.  Files for non-modality tensors (checkpoint parameters) use the
sentinel id 0xFFFFFFFF.  All writes go through a temp path plus atomic
rename, so concurrent writers to one clip id cannot interleave and
readers never observe partial files.

No artifact written here embeds an absolute path or a wall-clock value;
two runs with identical seeds produce byte-identical trees.
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .registry import MODALITY_IDS, MODALITY_NAMES, ModalityTensor
from .validation import require

MAGIC = b"MMV1"
HEADER_LEN = 32
SENTINEL_ID = 0xFFFFFFFF
FORMAT_VERSION = 1

# all file opens go through this alias so tests can audit access patterns
_open = open


def write_tensor(path: str, arr: np.ndarray, tensor_id: int) -> None:
    """Write one [T,H,W,C] float32 tensor with the fixed 32-byte header."""
    a = np.ascontiguousarray(arr, dtype=np.float32)
    require(a.ndim == 4, f"tensor files hold [T,H,W,C] arrays, got ndim={a.ndim}")
    header = MAGIC + struct.pack("<5I", *a.shape, tensor_id) + b"\x00" * 8
    assert len(header) == HEADER_LEN
    tmp = path + ".tmp"
    with _open(tmp, "wb") as f:
        f.write(header)
        f.write(a.astype("<f4").tobytes())
    os.replace(tmp, path)


def read_tensor(path: str) -> Tuple[np.ndarray, int]:
    with _open(path, "rb") as f:
        header = f.read(HEADER_LEN)
        require(len(header) == HEADER_LEN, f"{path}: truncated header")
        require(header[:4] == MAGIC,
                f"{path}: bad magic {header[:4]!r}, expected {MAGIC!r}")
        t, h, w, c, tensor_id = struct.unpack("<5I", header[4:24])
        require(header[24:] == b"\x00" * 8, f"{path}: reserved header bytes not zero")
        payload = f.read()
    expected = t * h * w * c * 4
    require(len(payload) == expected,
            f"{path}: payload {len(payload)} bytes, header promises {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c).astype(np.float32)
    return arr, tensor_id


@dataclass
class ClipRecord:
    """One clip: per-modality native tensors, caption, metadata.

    ``tensors`` may hold a subset after a partial read; writing demands
    all eight.
    """

    clip_id: str
    tensors: Dict[str, ModalityTensor]
    caption: str
    meta: Dict = field(default_factory=dict)

    def frame_shape(self) -> Tuple[int, int, int]:
        shapes = {m: t.data.shape[:3] for m, t in self.tensors.items()}
        require(len(set(shapes.values())) == 1, f"modality [T,H,W] disagree: {shapes}")
        return next(iter(shapes.values()))


def write_clip(record: ClipRecord, root: str, overwrite: bool = False,
               fps: float = 16.0) -> str:
    """Persist one clip; returns its directory.  Atomic via temp-dir rename."""
    require(bool(record.caption.strip()), "caption must be non-empty")
    missing = [m for m in MODALITY_NAMES if m not in record.tensors]
    require(not missing, f"clip {record.clip_id}: missing modalities {missing}")
    t, h, w = record.frame_shape()

    final_dir = os.path.join(root, record.clip_id)
    if os.path.exists(final_dir):
        if not overwrite:
            raise ValueError(f"clip {record.clip_id!r} already exists (pass overwrite=True)")
        shutil.rmtree(final_dir)
    os.makedirs(root, exist_ok=True)
    tmp_dir = os.path.join(root, f".tmp.{record.clip_id}")
    if os.path.exists(tmp_dir):
        shutil.rmtree(tmp_dir)
    os.makedirs(tmp_dir)
    try:
        for mod in MODALITY_NAMES:
            tensor = record.tensors[mod]
            require(tensor.space == "native", f"{mod}: clips persist native-space tensors")
            write_tensor(os.path.join(tmp_dir, f"{mod}.tensor"),
                         tensor.data, MODALITY_IDS[mod])
        with _open(os.path.join(tmp_dir, "caption.txt"), "w", encoding="utf-8") as f:
            f.write(record.caption)
        meta = {
            "clip_id": record.clip_id,
            "shape": [int(t), int(h), int(w)],
            "fps": float(record.meta.get("fps", fps)),
            "seed": record.meta.get("seed"),
            "scene": record.meta.get("scene"),
            "source": record.meta.get("source", "rendered"),
            "format_version": FORMAT_VERSION,
        }
        with _open(os.path.join(tmp_dir, "meta.json"), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp_dir, final_dir)
    except Exception:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    return final_dir


def read_clip(root: str, clip_id: str,
              modalities: Optional[Sequence[str]] = None) -> ClipRecord:
    """Load a clip, optionally only a modality subset.

    Only the requested tensor files are opened.  Headers are validated
    against meta.json; mismatches reject with the offending modality named.
    """
    clip_dir = os.path.join(root, clip_id)
    require(os.path.isdir(clip_dir), f"no clip directory {clip_dir!r}")
    wanted = tuple(modalities) if modalities is not None else MODALITY_NAMES
    unknown = [m for m in wanted if m not in MODALITY_IDS]
    require(not unknown, f"unknown modalities requested: {unknown}")

    with _open(os.path.join(clip_dir, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    with _open(os.path.join(clip_dir, "caption.txt"), "r", encoding="utf-8") as f:
        caption = f.read()
    mt, mh, mw = meta["shape"]

    tensors: Dict[str, ModalityTensor] = {}
    for mod in wanted:
        path = os.path.join(clip_dir, f"{mod}.tensor")
        if not os.path.exists(path):
            raise ValueError(f"clip {clip_id!r}: missing modality file {mod}.tensor")
        arr, tensor_id = read_tensor(path)
        require(tensor_id == MODALITY_IDS[mod],
                f"{mod}.tensor: header modality id {tensor_id} != {MODALITY_IDS[mod]}")
        require(arr.shape[:3] == (mt, mh, mw),
                f"{mod}.tensor: header shape {arr.shape[:3]} != meta {(mt, mh, mw)}")
        tensors[mod] = ModalityTensor(mod, arr, "native")
    return ClipRecord(clip_id=clip_id, tensors=tensors, caption=caption, meta=meta)


def list_clips(root: str) -> Tuple[str, ...]:
    if not os.path.isdir(root):
        return ()
    ids = [d for d in os.listdir(root)
           if not d.startswith(".") and os.path.isfile(os.path.join(root, d, "meta.json"))]
    return tuple(sorted(ids))


@dataclass(frozen=True)
class Manifest:
    clip_ids: Tuple[str, ...]
    splits: Mapping[str, Tuple[str, ...]]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        require(tuple(sorted(self.clip_ids)) == tuple(self.clip_ids),
                "manifest clip ids must be sorted")
        allocated = [c for name in ("train", "val", "test") for c in self.splits[name]]
        require(len(allocated) == len(set(allocated)), "splits must be disjoint")
        require(set(allocated) == set(self.clip_ids), "splits must exhaust the clip ids")


def build_manifest(root: str, split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> Manifest:
    """Seeded shuffle + cumulative-floor split; writes manifest.json at root."""
    fr = tuple(float(x) for x in split_fractions)
    require(len(fr) == 3 and all(f >= 0 for f in fr), "need 3 non-negative fractions")
    require(abs(sum(fr) - 1.0) <= 1e-9, f"fractions must sum to 1, got {sum(fr)}")
    ids = list_clips(root)
    require(len(ids) >= 1, f"no clips found under {root!r}")

    perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    n = len(ids)
    i1 = int(np.floor(fr[0] * n))
    i2 = int(np.floor((fr[0] + fr[1]) * n))
    splits = {
        "train": tuple(sorted(perm[:i1])),
        "val": tuple(sorted(perm[i1:i2])),
        "test": tuple(sorted(perm[i2:])),
    }
    manifest = Manifest(clip_ids=ids, splits=splits)
    payload = {
        "root": ".",  # self-relative: artifacts never embed absolute paths
        "clip_ids": list(ids),
        "splits": {k: list(v) for k, v in splits.items()},
        "format_version": FORMAT_VERSION,
        "seed": seed,
    }
    tmp = os.path.join(root, "manifest.json.tmp")
    with _open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(root, "manifest.json"))
    return manifest


def load_manifest(root: str) -> Manifest:
    with _open(os.path.join(root, "manifest.json"), "r", encoding="utf-8") as f:
        payload = json.load(f)
    return Manifest(
        clip_ids=tuple(payload["clip_ids"]),
        splits={k: tuple(v) for k, v in payload["splits"].items()},
        format_version=payload["format_version"],
    )


# ---------------------------------------------------------------------------
# named-tensor directories (checkpoint storage)
# ---------------------------------------------------------------------------

def save_named_tensors(dir_path: str, tensors: Mapping[str, np.ndarray]) -> None:
    """Store arbitrary-rank float arrays as .tensor files (leading dims
    padded to rank 4) plus a shapes.json with the true shapes."""
    os.makedirs(dir_path, exist_ok=True)
    shapes = {}
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float32)
        require(a.ndim <= 4, f"{name}: rank {a.ndim} > 4 unsupported")
        shapes[name] = list(a.shape)
        padded = a.reshape((1,) * (4 - a.ndim) + a.shape)
        write_tensor(os.path.join(dir_path, f"{name}.tensor"), padded, SENTINEL_ID)
    tmp = os.path.join(dir_path, "shapes.json.tmp")
    with _open(tmp, "w", encoding="utf-8") as f:
        json.dump(shapes, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(dir_path, "shapes.json"))


def load_named_tensors(dir_path: str) -> Dict[str, np.ndarray]:
    with _open(os.path.join(dir_path, "shapes.json"), "r", encoding="utf-8") as f:
        shapes = json.load(f)
    out = {}
    for name, shape in shapes.items():
        arr, tensor_id = read_tensor(os.path.join(dir_path, f"{name}.tensor"))
        require(tensor_id == SENTINEL_ID, f"{name}: expected sentinel tensor id")
        out[name] = arr.reshape(shape)
    return out
