import csv
import json
import os
import shutil

import numpy as np
import pytest
from PIL import Image

from ctrlvdiff.cli import main
from ctrlvdiff.datastore import list_clips, read_tensor
from ctrlvdiff.registry import MODALITY_NAMES

TRAIN_CFG = {
    "train": {"steps": 4, "batch_size": 1, "lr": 1e-3, "num_steps": 20,
              "warmup": 2, "checkpoint_every": 2},
    "model": {"dim": 16, "depth": 1, "heads": 2, "max_t": 2, "max_grid": 4},
}


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("data"))
    code = main(["gen-data", "--clips", "3", "--seed", "3", "--out", root,
                 "--frames", "2", "--res", "8x8", "--splits", "1.0,0.0,0.0"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def train_run(tmp_path_factory, data_root):
    base = tmp_path_factory.mktemp("run")
    cfg_path = str(base / "cfg.json")
    with open(cfg_path, "w") as f:
        json.dump(TRAIN_CFG, f)
    out = str(base / "stage1")
    code = main(["train", "--config", cfg_path, "--stage", "I",
                 "--data", data_root, "--out", out, "--seed", "0"])
    assert code == 0
    return {"out": out, "ckpt": os.path.join(out, "checkpoint"),
            "cfg_path": cfg_path}


class TestUsage:
    def test_unknown_subcommand_exits_1_with_usage(self, capsys):
        assert main(["frobnicate"]) == 1
        err = capsys.readouterr().err
        assert "usage" in err.lower()

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["gen-data", "--bogus", "3"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "SUBCOMMAND" in capsys.readouterr().out

    def test_no_arguments_exits_1(self, capsys):
        assert main([]) == 1


class TestGenData:
    def test_writes_clips_manifest_and_run_artifacts(self, data_root):
        assert len(list_clips(data_root)) == 3
        for name in ("manifest.json", "config.echo", "run.log"):
            assert os.path.isfile(os.path.join(data_root, name)), name

    def test_config_echo_is_sorted_json(self, data_root):
        with open(os.path.join(data_root, "config.echo")) as f:
            echo = json.load(f)
        assert echo["subcommand"] == "gen-data"
        assert echo["clips"] == 3 and echo["seed"] == 3
        assert echo["res"] == [8, 8]

    def test_env_seed_is_the_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CTRLVDIFF_SEED", "11")
        out = str(tmp_path / "d")
        assert main(["gen-data", "--clips", "1", "--out", out,
                     "--frames", "2", "--res", "8x8"]) == 0
        with open(os.path.join(out, "config.echo")) as f:
            assert json.load(f)["seed"] == 11

    def test_invalid_env_seed_is_a_validation_error(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("CTRLVDIFF_SEED", "eleven")
        assert main(["gen-data", "--clips", "1",
                     "--out", str(tmp_path / "d")]) == 1
        assert "CTRLVDIFF_SEED" in capsys.readouterr().err

    def test_missing_out_is_a_validation_error(self, capsys):
        assert main(["gen-data", "--clips", "1"]) == 1


class TestTrain:
    def test_produces_checkpoint_and_echo(self, train_run):
        assert os.path.isdir(train_run["ckpt"])
        with open(os.path.join(train_run["out"], "config.echo")) as f:
            echo = json.load(f)
        assert echo["train"]["steps"] == 4
        assert echo["model"]["dim"] == 16
        assert echo["subcommand"] == "train"
        assert os.path.isfile(os.path.join(train_run["out"], "run.log"))

    def test_set_override_beats_config_file(self, tmp_path, data_root,
                                            train_run):
        out = str(tmp_path / "short")
        code = main(["train", "--config", train_run["cfg_path"], "--stage", "I",
                     "--data", data_root, "--out", out, "--seed", "0",
                     "--set", "train.steps=2"])
        assert code == 0
        with open(os.path.join(out, "config.echo")) as f:
            assert json.load(f)["train"]["steps"] == 2
        with open(os.path.join(out, "checkpoint", "meta.json")) as f:
            assert json.load(f)["step"] == 2

    def test_seed_flag_beats_config_file(self, tmp_path, data_root, train_run):
        cfg = dict(TRAIN_CFG)
        cfg["train"] = {**TRAIN_CFG["train"], "steps": 1, "seed": 5}
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as f:
            json.dump(cfg, f)
        out = str(tmp_path / "run")
        assert main(["train", "--config", cfg_path, "--stage", "I",
                     "--data", data_root, "--out", out, "--seed", "7"]) == 0
        with open(os.path.join(out, "config.echo")) as f:
            assert json.load(f)["train"]["seed"] == 7

    def test_unknown_config_key_rejected(self, tmp_path, data_root, capsys):
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as f:
            json.dump({"train": {"stepz": 4}}, f)
        assert main(["train", "--config", cfg_path, "--data", data_root,
                     "--out", str(tmp_path / "o")]) == 1
        assert "stepz" in capsys.readouterr().err

    def test_stage_two_without_checkpoint_is_stage_order_error(
            self, tmp_path, data_root, train_run, capsys):
        assert main(["train", "--config", train_run["cfg_path"],
                     "--stage", "II", "--data", data_root,
                     "--out", str(tmp_path / "s2")]) == 1
        err = capsys.readouterr().err
        assert "stage" in err and "checkpoint" in err

    def test_stage_two_from_stage_one_checkpoint(self, tmp_path, data_root,
                                                 train_run):
        out = str(tmp_path / "s2")
        assert main(["train", "--config", train_run["cfg_path"],
                     "--stage", "II", "--data", data_root, "--out", out,
                     "--seed", "0", "--set", "train.steps=2",
                     "--init-from", train_run["ckpt"]]) == 0
        with open(os.path.join(out, "checkpoint", "meta.json")) as f:
            assert json.load(f)["stage"] == "II"


class TestGenerate:
    def _request(self, data_root, out_dir, seed=0):
        cid = list_clips(data_root)[0]
        return {"conditions": {"depth": os.path.join(data_root, cid)},
                "caption": "a scene", "targets": ["rgb"], "steps": 3,
                "seed": seed, "out": out_dir}

    def test_writes_target_tensor_and_result(self, tmp_path, data_root,
                                             train_run):
        out = str(tmp_path / "gen")
        req_path = str(tmp_path / "req.json")
        with open(req_path, "w") as f:
            json.dump(self._request(data_root, out), f)
        assert main(["generate", "--request", req_path,
                     "--ckpt", train_run["ckpt"]]) == 0
        arr, tensor_id = read_tensor(os.path.join(out, "rgb.tensor"))
        assert arr.shape == (2, 8, 8, 3) and tensor_id == 0
        with open(os.path.join(out, "result.json")) as f:
            assert json.load(f)["targets"] == ["rgb"]
        assert os.path.isfile(os.path.join(out, "config.echo"))

    def test_repeat_runs_are_byte_identical(self, tmp_path, data_root,
                                            train_run):
        req_path = str(tmp_path / "req.json")
        blobs = []
        for sub in ("a", "b"):
            out = str(tmp_path / sub)
            with open(req_path, "w") as f:
                json.dump(self._request(data_root, out, seed=5), f)
            assert main(["generate", "--request", req_path,
                         "--ckpt", train_run["ckpt"]]) == 0
            with open(os.path.join(out, "rgb.tensor"), "rb") as f:
                blobs.append(f.read())
        assert blobs[0] == blobs[1]

    def test_out_flag_overrides_request_file(self, tmp_path, data_root,
                                             train_run):
        out_file = str(tmp_path / "from_file")
        out_flag = str(tmp_path / "from_flag")
        req_path = str(tmp_path / "req.json")
        with open(req_path, "w") as f:
            json.dump(self._request(data_root, out_file), f)
        assert main(["generate", "--request", req_path,
                     "--ckpt", train_run["ckpt"], "--out", out_flag]) == 0
        assert os.path.isfile(os.path.join(out_flag, "rgb.tensor"))
        assert not os.path.exists(os.path.join(out_file, "rgb.tensor"))

    def test_missing_out_everywhere_rejected(self, tmp_path, data_root,
                                             train_run, capsys):
        req = self._request(data_root, "unused")
        del req["out"]
        req_path = str(tmp_path / "req.json")
        with open(req_path, "w") as f:
            json.dump(req, f)
        assert main(["generate", "--request", req_path,
                     "--ckpt", train_run["ckpt"]]) == 1

    def test_missing_checkpoint_rejected(self, tmp_path, data_root, capsys):
        req_path = str(tmp_path / "req.json")
        with open(req_path, "w") as f:
            json.dump(self._request(data_root, str(tmp_path / "g")), f)
        assert main(["generate", "--request", req_path,
                     "--ckpt", str(tmp_path / "nope")]) == 1
        assert "checkpoint" in capsys.readouterr().err


class TestUnderstand:
    def test_writes_seven_modalities(self, tmp_path, data_root, train_run):
        cid = list_clips(data_root)[0]
        out = str(tmp_path / "und")
        assert main(["understand", "--clip", os.path.join(data_root, cid),
                     "--ckpt", train_run["ckpt"], "--out", out,
                     "--steps", "2"]) == 0
        found = sorted(n[:-len(".tensor")] for n in os.listdir(out)
                       if n.endswith(".tensor"))
        assert found == sorted(m for m in MODALITY_NAMES if m != "rgb")
        with open(os.path.join(out, "result.json")) as f:
            assert json.load(f)["seg_residual"] is not None


class TestEdit:
    def test_relight_writes_rgb(self, tmp_path, data_root, train_run):
        cid = list_clips(data_root)[0]
        edit_path = str(tmp_path / "edit.json")
        with open(edit_path, "w") as f:
            json.dump({"kind": "relight",
                       "payload": {"caption": "under red light"}}, f)
        out = str(tmp_path / "edited")
        assert main(["edit", "--clip", os.path.join(data_root, cid),
                     "--edit", edit_path, "--ckpt", train_run["ckpt"],
                     "--out", out, "--steps", "2"]) == 0
        arr, _ = read_tensor(os.path.join(out, "rgb.tensor"))
        assert arr.shape == (2, 8, 8, 3)

    def test_unknown_kind_rejected(self, tmp_path, data_root, train_run,
                                   capsys):
        cid = list_clips(data_root)[0]
        edit_path = str(tmp_path / "edit.json")
        with open(edit_path, "w") as f:
            json.dump({"kind": "repaint", "payload": {}}, f)
        assert main(["edit", "--clip", os.path.join(data_root, cid),
                     "--edit", edit_path, "--ckpt", train_run["ckpt"],
                     "--out", str(tmp_path / "e")]) == 1
        assert "repaint" in capsys.readouterr().err


class TestEval:
    @pytest.fixture()
    def perfect_pred(self, tmp_path, data_root):
        pred = tmp_path / "pred"
        pred.mkdir()
        for cid in list_clips(data_root):
            shutil.copytree(os.path.join(data_root, cid), str(pred / cid))
        return str(pred)

    def test_exactly_the_requested_metric_rows(self, perfect_pred, data_root,
                                               tmp_path):
        out = str(tmp_path / "ev")
        assert main(["eval", "--pred", perfect_pred, "--gt", data_root,
                     "--metrics", "depth,normal", "--out", out]) == 0
        with open(os.path.join(out, "metrics.csv")) as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = list(reader)
        assert header == ["clip_id", "metric", "value"]
        families = {r[1].split("/")[0] for r in rows}
        assert families == {"depth", "normal"}
        n_clips = len(list_clips(data_root))
        # 4 depth rows + 5 normal rows per clip
        assert len(rows) == n_clips * 9

    def test_perfect_predictions_score_perfectly(self, perfect_pred,
                                                 data_root, tmp_path, capsys):
        out = str(tmp_path / "ev")
        assert main(["eval", "--pred", perfect_pred, "--gt", data_root,
                     "--metrics", "depth,rgb", "--out", out]) == 0
        stdout = capsys.readouterr().out
        assert "rgb/psnr" in stdout
        with open(os.path.join(out, "metrics.csv")) as f:
            next(f)
            values = {}
            for cid, name, value in csv.reader(f):
                values.setdefault(name, []).append(float(value))
        assert all(v == 1.0 for v in values["depth/delta1"])
        assert all(v == 100.0 for v in values["rgb/psnr"])

    def test_unknown_family_rejected(self, perfect_pred, data_root, tmp_path,
                                     capsys):
        assert main(["eval", "--pred", perfect_pred, "--gt", data_root,
                     "--metrics", "vibes", "--out", str(tmp_path / "e")]) == 1
        assert "vibes" in capsys.readouterr().err

    def test_default_out_is_under_pred(self, perfect_pred, data_root):
        assert main(["eval", "--pred", perfect_pred, "--gt", data_root,
                     "--metrics", "depth"]) == 0
        assert os.path.isfile(os.path.join(perfect_pred, "eval", "metrics.csv"))


class TestInspect:
    def test_full_clip_reports_eight_rows(self, data_root, capsys):
        cid = list_clips(data_root)[0]
        assert main(["inspect", os.path.join(data_root, cid)]) == 0
        out = capsys.readouterr().out
        for mod in MODALITY_NAMES:
            assert mod in out
        assert "ABSENT" not in out

    def test_missing_modality_marked_absent_exit_0(self, tmp_path, data_root,
                                                   capsys):
        cid = list_clips(data_root)[0]
        clip = tmp_path / "partial"
        shutil.copytree(os.path.join(data_root, cid), str(clip))
        os.remove(str(clip / "roughness.tensor"))
        assert main(["inspect", str(clip)]) == 0
        out = capsys.readouterr().out
        assert "ABSENT" in out
        assert any("roughness" in line and "ABSENT" in line
                   for line in out.splitlines())

    def test_not_a_clip_exits_2(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["inspect", str(empty)]) == 2
        assert main(["inspect", str(tmp_path / "missing")]) == 2

    def test_corrupt_tensor_exits_2(self, tmp_path, data_root, capsys):
        cid = list_clips(data_root)[0]
        clip = tmp_path / "corrupt"
        shutil.copytree(os.path.join(data_root, cid), str(clip))
        with open(str(clip / "rgb.tensor"), "wb") as f:
            f.write(b"not a tensor")
        assert main(["inspect", str(clip)]) == 2

    def test_export_grid_layout(self, tmp_path, data_root):
        cid = list_clips(data_root)[0]
        png = str(tmp_path / "grid.png")
        assert main(["inspect", os.path.join(data_root, cid),
                     "--export-grid", png]) == 0
        img = Image.open(png)
        # 2 frames of 8x8 -> 8 modality rows x 2 frame columns
        assert img.size == (2 * 8, 8 * 8)
