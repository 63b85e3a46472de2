"""Command-line entrypoint: one subcommand per pipeline phase.

Every artifact-producing run writes the merged effective config to
``config.echo`` and opens ``run.log`` in its output directory before any
work starts, so runs can be audited and replayed.  Config precedence is
CLI flag > ``--set`` override > config/request file > ``CTRLVDIFF_SEED``
env default > built-in default.  Exit codes: 0 success, 1 validation
error (bad flags, bad config, contract violations), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import os
import sys
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import metrics, sampler, scenegen
from .datastore import read_clip, read_tensor, write_tensor, list_clips
from .estimator import ControllableVideoDiffusion
from .registry import (MODALITY_IDS, MODALITY_NAMES, ModalityTensor,
                       to_color_space)
from .validation import require

log = logging.getLogger(__name__)

_TRAIN_KEYS = ("stage", "steps", "batch_size", "lr", "p_t", "schedule_kind",
               "num_steps", "seed", "warmup", "checkpoint_every",
               "filter_max_normal_deg", "filter_max_seg_residual",
               "filter_min_psnr", "augment_steps")
_MODEL_KEYS = ("dim", "depth", "heads", "patch", "max_t", "max_grid",
               "caption_buckets")
# sections whose contents are validated downstream, not against defaults
_FREE_SECTIONS = ("conditions", "edit")

# metric family -> modalities the eval command must load
_FAMILY_NEEDS = {"depth": ("depth",), "normal": ("normal",),
                 "seg": ("segmentation",), "rgb": ("rgb",),
                 "temporal": ("rgb",)}


class _UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as exit-1 usage errors instead of
    calling sys.exit(2)."""

    def error(self, message):
        raise _UsageError(message, self.format_usage())


# ---------------------------------------------------------------------------
# config merging
# ---------------------------------------------------------------------------

def _default_seed() -> int:
    env = os.environ.get("CTRLVDIFF_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"CTRLVDIFF_SEED must be an integer, got {env!r}")


def _merge_into(base: Dict, incoming: Mapping, path: str = "",
                free: bool = False) -> None:
    """Recursive dict merge; keys unknown to the defaults tree are rejected
    so typos in config files surface instead of silently doing nothing.
    Inside a free section (validated downstream) any key is accepted."""
    for key, value in incoming.items():
        where = f"{path}{key}"
        if key not in base:
            require(free, f"unknown config key {where!r}")
            base[key] = value
            continue
        if isinstance(base[key], dict) and isinstance(value, Mapping):
            _merge_into(base[key], value, where + ".",
                        free or key in _FREE_SECTIONS)
        else:
            base[key] = value


def _parse_literal(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_sets(cfg: Dict, sets: Sequence[str]) -> None:
    for item in sets:
        require("=" in item, f"--set expects dotted.key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        node = cfg
        free = False
        for k in keys[:-1]:
            require(isinstance(node, dict), f"{dotted!r} descends into a leaf")
            if k not in node:
                require(free, f"unknown config key {dotted!r}")
                node[k] = {}
            free = free or k in _FREE_SECTIONS
            node = node[k]
        require(isinstance(node, dict), f"{dotted!r} descends into a leaf")
        require(keys[-1] in node or free, f"unknown config key {dotted!r}")
        node[keys[-1]] = _parse_literal(raw)


def _load_config_file(path: Optional[str]) -> Dict:
    if path is None:
        return {}
    require(os.path.isfile(path), f"config file not found: {path!r}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"config file {path!r} is not valid JSON: {e}")
    require(isinstance(data, dict), f"config file {path!r} must hold an object")
    return data


def _effective(defaults: Dict, file_cfg: Mapping, sets: Sequence[str],
               flags: Mapping) -> Dict:
    cfg = copy.deepcopy(defaults)
    _merge_into(cfg, file_cfg)
    _apply_sets(cfg, sets or [])
    for dotted, value in flags.items():
        if value is None:
            continue
        node = cfg
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return cfg


@contextlib.contextmanager
def _run_artifacts(out_dir: str, effective: Mapping):
    """Write config.echo and open run.log before any work happens."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as f:
        json.dump(effective, f, indent=2, sort_keys=True)
        f.write("\n")
    handler = logging.FileHandler(os.path.join(out_dir, "run.log"),
                                  mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(
        "%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg = logging.getLogger("ctrlvdiff")
    old_level = pkg.level
    pkg.setLevel(logging.INFO)
    pkg.addHandler(handler)
    try:
        yield
    finally:
        pkg.removeHandler(handler)
        handler.close()
        pkg.setLevel(old_level)


def _load_fitted(ckpt: str) -> ControllableVideoDiffusion:
    require(os.path.isdir(ckpt), f"checkpoint directory not found: {ckpt!r}")
    return ControllableVideoDiffusion.from_checkpoint(ckpt)


def _write_result(out_dir: str, native: Mapping[str, ModalityTensor],
                  info: Dict) -> None:
    for mod, tensor in native.items():
        write_tensor(os.path.join(out_dir, f"{mod}.tensor"),
                     tensor.data, MODALITY_IDS[mod])
    with open(os.path.join(out_dir, "result.json"), "w", encoding="utf-8") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    defaults = {"clips": None, "seed": _default_seed(), "frames": 8,
                "res": [32, 32], "splits": [0.8, 0.1, 0.1],
                "overwrite": False, "out": None}
    flags = {"clips": args.clips, "seed": args.seed, "frames": args.frames,
             "res": _parse_res(args.res), "splits": _parse_splits(args.splits),
             "overwrite": True if args.overwrite else None, "out": args.out}
    cfg = _effective(defaults, {}, args.set, flags)
    require(cfg["clips"] is not None, "gen-data needs --clips")
    require(cfg["out"] is not None, "gen-data needs --out")
    echo = {"subcommand": "gen-data", **cfg}
    with _run_artifacts(cfg["out"], echo):
        ids = scenegen.generate_dataset(
            cfg["out"], n_clips=int(cfg["clips"]), seed=int(cfg["seed"]),
            T=int(cfg["frames"]), res=tuple(int(v) for v in cfg["res"]),
            split_fractions=tuple(float(v) for v in cfg["splits"]),
            overwrite=bool(cfg["overwrite"]))
        log.info("rendered %d clips under %s", len(ids), cfg["out"])
    print(f"wrote {len(ids)} clips + manifest to {cfg['out']}")
    return 0


def _train_defaults() -> Dict:
    est = ControllableVideoDiffusion().get_params()
    train = {k: est[k] for k in _TRAIN_KEYS}
    train["seed"] = _default_seed()
    model = {k: est[k] for k in _MODEL_KEYS}
    return {"train": train, "model": model,
            "sampling": {"sample_steps": est["sample_steps"]}}


def _cmd_train(args) -> int:
    require(args.data is not None, "train needs --data (dataset root)")
    require(args.out is not None, "train needs --out")
    file_cfg = _load_config_file(args.config)
    cfg = _effective(_train_defaults(), file_cfg, args.set,
                     {"train.stage": args.stage, "train.seed": args.seed})
    echo = {"subcommand": "train", "config_file": args.config,
            "data": args.data, "out": args.out, "init_from": args.init_from,
            "resume": args.resume, "pool": args.pool, **cfg}
    with _run_artifacts(args.out, echo):
        params = {**cfg["train"], **cfg["model"], **cfg["sampling"]}
        est = ControllableVideoDiffusion(**params)
        est.fit(args.data, args.out, init_from=args.init_from,
                resume=args.resume, pool_root=args.pool)
    print(f"checkpoint: {est.checkpoint_dir_}")
    return 0


def _cmd_generate(args) -> int:
    defaults = {"request": {"conditions": {}, "caption": "",
                            "targets": ["rgb"], "steps": 20,
                            "seed": _default_seed(), "frames": None,
                            "size": None, "out": None}}
    file_cfg = {"request": _load_config_file(args.request)}
    cfg = _effective(defaults, file_cfg, args.set,
                     {"request.steps": args.steps, "request.seed": args.seed,
                      "request.out": args.out})
    req_cfg = cfg["request"]
    out_dir = req_cfg["out"]
    require(out_dir is not None, "generate needs an output directory "
            "(request file \"out\" or --out)")
    echo = {"subcommand": "generate", "request_file": args.request,
            "ckpt": args.ckpt, **cfg}
    with _run_artifacts(out_dir, echo):
        est = _load_fitted(args.ckpt)
        conditions = {}
        for mod, clip_path in dict(req_cfg["conditions"]).items():
            require(mod in MODALITY_NAMES, f"unknown condition modality {mod!r}")
            clip_path = os.path.normpath(str(clip_path))
            rec = read_clip(os.path.dirname(clip_path),
                            os.path.basename(clip_path), modalities=(mod,))
            conditions[mod] = rec.tensors[mod]
        request = sampler.GenerationRequest(
            conditions=conditions, caption=str(req_cfg["caption"]),
            targets=tuple(req_cfg["targets"]), steps=int(req_cfg["steps"]),
            seed=int(req_cfg["seed"]),
            frames=None if req_cfg["frames"] is None else int(req_cfg["frames"]),
            size=None if req_cfg["size"] is None else tuple(int(v) for v in req_cfg["size"]))
        result = sampler.generate(est.model_, est.codec_, est.schedule_, request)
        _write_result(out_dir, result.native,
                      {"targets": list(request.targets), "steps": request.steps,
                       "seed": request.seed, "seg_residual": result.seg_residual})
        log.info("generated %s -> %s", ",".join(request.targets), out_dir)
    print(f"generated {', '.join(request.targets)} in {out_dir}")
    return 0


def _cmd_understand(args) -> int:
    require(args.clip is not None, "understand needs --clip")
    require(args.out is not None, "understand needs --out")
    clip_path = os.path.normpath(args.clip)
    defaults = {"clip": clip_path, "caption": None, "steps": 20,
                "seed": _default_seed(), "out": args.out}
    cfg = _effective(defaults, {}, args.set,
                     {"caption": args.caption, "steps": args.steps,
                      "seed": args.seed})
    echo = {"subcommand": "understand", "ckpt": args.ckpt, **cfg}
    with _run_artifacts(args.out, echo):
        est = _load_fitted(args.ckpt)
        rec = read_clip(os.path.dirname(clip_path), os.path.basename(clip_path),
                        modalities=("rgb",))
        caption = cfg["caption"] if cfg["caption"] is not None else rec.caption
        result = sampler.understand(est.model_, est.codec_, est.schedule_,
                                    rec.tensors["rgb"], caption,
                                    steps=int(cfg["steps"]), seed=int(cfg["seed"]))
        _write_result(args.out, result.native,
                      {"clip": clip_path, "steps": int(cfg["steps"]),
                       "seed": int(cfg["seed"]),
                       "seg_residual": result.seg_residual})
        log.info("understood %s -> %s", clip_path, args.out)
    print(f"wrote {len(result.native)} predicted modalities to {args.out}")
    return 0


def _cmd_edit(args) -> int:
    require(args.clip is not None, "edit needs --clip")
    require(args.out is not None, "edit needs --out")
    require(args.edit is not None, "edit needs --edit (JSON edit file)")
    edit_spec = _load_config_file(args.edit)
    clip_path = os.path.normpath(args.clip)
    defaults = {"clip": clip_path, "steps": 20, "seed": _default_seed(),
                "out": args.out, "edit": edit_spec}
    cfg = _effective(defaults, {}, args.set,
                     {"steps": args.steps, "seed": args.seed})
    echo = {"subcommand": "edit", "ckpt": args.ckpt, "edit_file": args.edit,
            **cfg}
    with _run_artifacts(args.out, echo):
        est = _load_fitted(args.ckpt)
        rec = read_clip(os.path.dirname(clip_path), os.path.basename(clip_path))
        result = sampler.edit_and_rerender(est.model_, est.codec_,
                                           est.schedule_, rec, cfg["edit"],
                                           steps=int(cfg["steps"]),
                                           seed=int(cfg["seed"]))
        _write_result(args.out, result.native,
                      {"clip": clip_path, "kind": cfg["edit"].get("kind"),
                       "steps": int(cfg["steps"]), "seed": int(cfg["seed"]),
                       "seg_residual": result.seg_residual})
        log.info("edit %s on %s -> %s", cfg["edit"].get("kind"), clip_path,
                 args.out)
    print(f"edited clip written to {args.out}")
    return 0


def _read_pred_tensors(pred_dir: str, clip_id: str,
                       needed: Sequence[str]) -> Dict[str, ModalityTensor]:
    out = {}
    clip_dir = os.path.join(pred_dir, clip_id)
    for mod in needed:
        path = os.path.join(clip_dir, f"{mod}.tensor")
        require(os.path.isfile(path),
                f"prediction for clip {clip_id!r} lacks {mod}.tensor")
        arr, tensor_id = read_tensor(path)
        require(tensor_id == MODALITY_IDS[mod],
                f"{path}: modality id {tensor_id} != {MODALITY_IDS[mod]}")
        out[mod] = ModalityTensor(mod, arr.astype(np.float64), "native")
    return out


def _cmd_eval(args) -> int:
    require(args.pred is not None, "eval needs --pred")
    require(args.gt is not None, "eval needs --gt")
    mflag = None
    if args.metrics:
        mflag = [p.strip() for p in args.metrics.split(",") if p.strip()]
    out_dir = args.out or os.path.join(args.pred, "eval")
    defaults = {"pred": args.pred, "gt": args.gt,
                "metrics": list(metrics.FAMILIES), "seg_k": None,
                "out": out_dir}
    cfg = _effective(defaults, {}, args.set,
                     {"metrics": mflag, "seg_k": args.seg_k})
    echo = {"subcommand": "eval", **cfg}
    with _run_artifacts(out_dir, echo):
        families = tuple(cfg["metrics"])
        bad = [fam for fam in families if fam not in metrics.FAMILIES]
        require(not bad, f"unknown metric families {bad}; "
                f"choose from {list(metrics.FAMILIES)}")
        needed = sorted({m for fam in families for m in _FAMILY_NEEDS[fam]})
        require(os.path.isdir(args.pred), f"no prediction dir {args.pred!r}")
        ids = sorted(
            d for d in os.listdir(args.pred)
            if not d.startswith(".")
            and any(os.path.isfile(os.path.join(args.pred, d, f"{m}.tensor"))
                    for m in MODALITY_NAMES))
        require(len(ids) >= 1, f"no prediction clips under {args.pred!r}")
        per_clip = {}
        for cid in ids:
            gt_rec = read_clip(args.gt, cid, modalities=needed)
            pred = _read_pred_tensors(args.pred, cid, needed)
            per_clip[cid] = metrics.evaluate_clip(
                pred, gt_rec.tensors, families=families,
                seg_k=None if cfg["seg_k"] is None else int(cfg["seg_k"]))
        report = metrics.aggregate(per_clip)
        csv_path = os.path.join(out_dir, "metrics.csv")
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["clip_id", "metric", "value"])
            for cid in sorted(per_clip):
                for name in sorted(per_clip[cid]):
                    writer.writerow([cid, name, repr(per_clip[cid][name])])
        width = max(len(n) for n in report.scalars)
        lines = [f"{'metric':<{width}}  mean over {len(ids)} clips"]
        lines += [f"{n:<{width}}  {v:.6f}" for n, v in sorted(report.scalars.items())]
        summary = "\n".join(lines)
        log.info("eval summary:\n%s", summary)
    print(summary)
    print(f"per-clip rows: {csv_path}")
    return 0


def _parse_res(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    parts = text.lower().split("x")
    require(len(parts) == 2, f"--res expects HxW, got {text!r}")
    return [int(p) for p in parts]


def _parse_splits(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    parts = [float(p) for p in text.split(",")]
    require(len(parts) == 3, f"--splits expects three fractions, got {text!r}")
    return parts


def _cmd_inspect(args) -> int:
    clip_path = os.path.normpath(args.clip)
    if not os.path.isdir(clip_path):
        raise RuntimeError(f"unreadable clip: {clip_path!r} is not a directory")
    rows = []
    tensors: Dict[str, np.ndarray] = {}
    for mod in MODALITY_NAMES:
        path = os.path.join(clip_path, f"{mod}.tensor")
        if not os.path.isfile(path):
            rows.append((mod, None))
            continue
        try:
            arr, tensor_id = read_tensor(path)
        except ValueError as e:
            raise RuntimeError(f"unreadable clip: {e}")
        tensors[mod] = arr
        rows.append((mod, (tensor_id, arr)))
    if not tensors:
        raise RuntimeError(f"unreadable clip: no modality tensors under {clip_path!r}")

    lines = [f"clip: {clip_path}"]
    caption_path = os.path.join(clip_path, "caption.txt")
    if os.path.isfile(caption_path):
        with open(caption_path, "r", encoding="utf-8") as f:
            lines.append(f"caption: {f.read().strip()}")
    header = f"{'modality':<14}{'id':>3}  {'shape':<20}{'min':>12}{'max':>12}{'mean':>12}"
    lines.append(header)
    for mod, payload in rows:
        if payload is None:
            lines.append(f"{mod:<14} ABSENT")
            continue
        tensor_id, arr = payload
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{mod:<14}{tensor_id:>3}  {shape:<20}"
                     f"{arr.min():>12.5g}{arr.max():>12.5g}{arr.mean():>12.5g}")
    text = "\n".join(lines)
    print(text)

    if args.export_grid:
        _export_grid(tensors, args.export_grid)
        print(f"grid: {args.export_grid}")
    if args.out:
        echo = {"subcommand": "inspect", "clip": clip_path,
                "export_grid": args.export_grid, "out": args.out}
        with _run_artifacts(args.out, echo):
            log.info("inspect report:\n%s", text)
    return 0


def _export_grid(tensors: Mapping[str, np.ndarray], path: str) -> None:
    """Contact sheet, one modality per row, one frame per column, using the
    shared color-space renderings.  Absent modalities render mid-gray."""
    from PIL import Image

    shapes = {arr.shape[:3] for arr in tensors.values()}
    require(len(shapes) == 1, f"modality frame shapes disagree: {shapes}")
    t, h, w = next(iter(shapes))
    grid = np.full((len(MODALITY_NAMES) * h, t * w, 3), 0.5)
    for row, mod in enumerate(MODALITY_NAMES):
        if mod not in tensors:
            continue
        native = ModalityTensor(mod, tensors[mod].astype(np.float64), "native")
        color = to_color_space(native).data
        for col in range(t):
            grid[row * h:(row + 1) * h, col * w:(col + 1) * w] = color[col]
    img = Image.fromarray(np.round(grid * 255.0).astype(np.uint8))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img.save(path)


# ---------------------------------------------------------------------------
# parser + dispatch
# ---------------------------------------------------------------------------

def _add_common(p: _Parser) -> None:
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one effective-config entry (dotted key)")
    p.add_argument("--seed", type=int, default=None,
                   help="global seed (default: $CTRLVDIFF_SEED or 0)")


def _build_parser() -> _Parser:
    parser = _Parser(prog="ctrlvdiff",
                     description="controllable multimodal video diffusion")
    sub = parser.add_subparsers(dest="cmd", metavar="SUBCOMMAND",
                                parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="render a synthetic clip dataset")
    p.add_argument("--clips", type=int)
    p.add_argument("--out")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--res", default=None, help="frame size as HxW")
    p.add_argument("--splits", default=None, help="train,val,test fractions")
    p.add_argument("--overwrite", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--stage", choices=("I", "II", "III"), default=None)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--out", help="run directory")
    p.add_argument("--init-from", default=None, help="previous-stage checkpoint")
    p.add_argument("--resume", default=None, help="checkpoint to continue")
    p.add_argument("--pool", default=None, help="unlabeled clips for stage III")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="sample target modalities")
    p.add_argument("--request", default=None, help="JSON request file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("understand", help="predict 7 modalities from rgb")
    p.add_argument("--clip", help="clip directory holding rgb.tensor")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--caption", default=None)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_understand)

    p = sub.add_parser("edit", help="edit conditions and re-render rgb")
    p.add_argument("--clip", help="clip directory")
    p.add_argument("--edit", help="JSON edit file (kind + payload)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", help="directory of per-clip prediction dirs")
    p.add_argument("--gt", help="dataset root with ground truth")
    p.add_argument("--metrics", default=None,
                   help=f"comma list from {','.join(metrics.FAMILIES)}")
    p.add_argument("--seg-k", type=int, default=None)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("inspect", help="summarize a clip's modalities")
    p.add_argument("clip", help="clip directory")
    p.add_argument("--export-grid", default=None, metavar="PNG",
                   help="write a modalities-by-frames contact sheet")
    p.add_argument("--out", default=None,
                   help="optional artifact directory for config.echo/run.log")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as e:
        print(e.usage, file=sys.stderr, end="")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
