import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from sparsedet import cli
from sparsedet.config import RunConfig, config_hash, load_config, save_config, set_key
from sparsedet.errors import ConfigError


class TestConfig:
    def test_defaults_valid(self):
        cfg = load_config()
        assert cfg.model.sir_layers == 3
        assert cfg.model.sir2_layers == 6
        assert cfg.train.loss_weights == (1.0,) * 6

    def test_file_and_overrides_layering(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# comment\ntrain.steps = 77\nmodel.voxel_size = 0.5\n")
        cfg = load_config(p, overrides=["train.steps=99", "seed=5"])
        assert cfg.train.steps == 99  # flag beats file
        assert cfg.model.voxel_size == 0.5
        assert cfg.seed == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["model.does_not_exist=1"])
        with pytest.raises(ConfigError):
            load_config(None, overrides=["nosuchsection.steps=1"])

    def test_tuple_parsing(self):
        cfg = load_config(None, overrides=["model.group_radius=0.5,0.5,0.25,0.25"])
        assert cfg.model.group_radius == (0.5, 0.5, 0.25, 0.25)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["train.steps=abc"])

    def test_validation(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["model.voxel_size=0"])
        with pytest.raises(ConfigError):
            load_config(None, overrides=["train.loss_weights=1,1"])

    def test_hash_stable_and_sensitive(self, tmp_path):
        a = load_config()
        b = load_config()
        assert config_hash(a) == config_hash(b)
        set_key(b, "train.steps", "123")
        assert config_hash(a) != config_hash(b)

    def test_save_load_roundtrip(self, tmp_path):
        cfg = load_config(None, overrides=["train.steps=42", "data.range_m=30"])
        p = tmp_path / "c.cfg"
        save_config(cfg, p)
        back = load_config(p)
        assert config_hash(back) == config_hash(cfg)


TINY = [
    "data.num_scenes=6", "data.holdout_scenes=2", "data.point_budget=250",
    "data.range_m=24", "data.boxes_min=2", "data.boxes_max=3",
    "model.encoder_channels=16", "model.encoder_vfe_hidden=8", "model.vote_hidden=16",
    "model.sir_channels=16", "model.sir2_channels=16", "model.head_hidden=16",
    "model.sir_layers=2", "model.sir2_layers=2", "model.fg_threshold=0.2",
    "train.steps=6", "train.checkpoint_every=3",
]


def run_cli(argv):
    return cli.main(argv)


def tiny_args(extra):
    out = []
    for kv in TINY:
        out.extend(["--set", kv])
    return extra + out


class TestCliPipeline:
    def test_full_pipeline(self, tmp_path):
        data = str(tmp_path / "data")
        run = str(tmp_path / "run")
        assert run_cli(tiny_args(["gen-data", "--out", data])) == 0
        assert os.path.isfile(os.path.join(data, "manifest.json"))
        assert len(os.listdir(os.path.join(data, "train"))) == 6
        assert len(os.listdir(os.path.join(data, "val"))) == 2

        assert run_cli(tiny_args(["train", "--data", data, "--out", run])) == 0
        ckpt = os.path.join(run, "ckpt_000006.bin")
        assert os.path.isfile(ckpt)
        assert os.path.isfile(os.path.join(run, "metrics.jsonl"))

        report = str(tmp_path / "eval.json")
        assert run_cli(tiny_args(["eval", "--checkpoint", ckpt, "--data", data,
                                  "--out", report])) == 0
        payload = json.loads(open(report).read())
        assert "report" in payload and "provenance" in payload
        assert os.path.isfile(str(tmp_path / "eval_pr.csv"))

        inspect_out = str(tmp_path / "inspect.json")
        scene = os.path.join(data, "val", "00000.fsds")
        assert run_cli(tiny_args(["inspect", "--checkpoint", ckpt, "--scene", scene,
                                  "--out", inspect_out])) == 0
        dump = json.loads(open(inspect_out).read())
        assert len(dump["group_ids"]) == dump["scene"]["points"]
        assert "proposals" in dump and "detections" in dump

    def test_gen_data_deterministic(self, tmp_path):
        hashes = []
        for run in range(2):
            out = str(tmp_path / f"d{run}")
            assert run_cli(tiny_args(["gen-data", "--out", out])) == 0
            h = hashlib.sha256()
            for split in ("train", "val"):
                for name in sorted(os.listdir(os.path.join(out, split))):
                    h.update(name.encode())
                    h.update(open(os.path.join(out, split, name), "rb").read())
            h.update(open(os.path.join(out, "manifest.json"), "rb").read())
            hashes.append(h.hexdigest())
        assert hashes[0] == hashes[1]

    def test_config_error_exit_code(self, tmp_path):
        rc = run_cli(["gen-data", "--out", str(tmp_path / "x"), "--set", "bogus.key=1"])
        assert rc == cli.EXIT_CONFIG

    def test_data_error_exit_code(self, tmp_path):
        rc = run_cli(["train", "--data", str(tmp_path / "missing"), "--out",
                      str(tmp_path / "run")])
        assert rc == cli.EXIT_DATA

    def test_eval_warns_on_hash_mismatch(self, tmp_path, capsys):
        data = str(tmp_path / "data")
        run = str(tmp_path / "run")
        assert run_cli(tiny_args(["gen-data", "--out", data])) == 0
        assert run_cli(tiny_args(["train", "--data", data, "--out", run])) == 0
        ckpt = os.path.join(run, "ckpt_000006.bin")
        report = str(tmp_path / "r.json")
        # evaluate under a DIFFERENT config -> must warn but still run
        rc = run_cli(tiny_args(["eval", "--checkpoint", ckpt, "--data", data,
                                "--out", report]) + ["--set", "train.steps=7"])
        assert rc == 0
        assert "does not match" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_error_exit_code(self, tmp_path):
        import numpy as np

        from sparsedet import synth

        data = tmp_path / "data"
        (data / "train").mkdir(parents=True)
        scene = synth.generate(synth.SceneSpec(point_budget=200, range_m=20.0), seed=0)
        scene.pc.intensity[0] = np.inf
        synth.save_scene(scene, data / "train" / "00000.fsds")
        rc = run_cli(tiny_args(["train", "--data", str(data), "--out",
                                str(tmp_path / "run")]))
        assert rc == cli.EXIT_NUMERIC
        # partial outputs were cleaned up
        assert not os.path.exists(tmp_path / "run" / "metrics.jsonl")

    def test_console_entrypoint(self):
        proc = subprocess.run(
            [sys.executable, "-m", "sparsedet.cli", "--version"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "sparsedet" in proc.stdout

    @pytest.mark.slow
    def test_smoke_pipeline_budget(self, tmp_path):
        # gen-data, 200 training steps, eval and bench within ten minutes
        import time

        t0 = time.perf_counter()
        data = str(tmp_path / "data")
        run = str(tmp_path / "run")
        small = ["--set", "data.num_scenes=40", "--set", "data.holdout_scenes=8",
                 "--set", "train.steps=200", "--set", "train.checkpoint_every=200",
                 "--set", "bench.repeats=2"]
        assert run_cli(["gen-data", "--out", data] + small) == 0
        assert run_cli(["train", "--data", data, "--out", run] + small) == 0
        assert run_cli(["eval", "--checkpoint", os.path.join(run, "ckpt_000200.bin"),
                        "--data", data, "--out", str(tmp_path / "e.json")] + small) == 0
        assert run_cli(["bench", "--out", str(tmp_path / "bench")] + small) == 0
        elapsed = time.perf_counter() - t0
        assert elapsed < 600, f"smoke pipeline took {elapsed:.0f}s"


class TestThreadCap:
    def test_default_serial(self, monkeypatch):
        import sparsedet

        monkeypatch.delenv("FSD_THREADS", raising=False)
        assert sparsedet.thread_cap() == 1
        monkeypatch.setenv("FSD_THREADS", "4")
        assert sparsedet.thread_cap() == 4
        monkeypatch.setenv("FSD_THREADS", "junk")
        assert sparsedet.thread_cap() == 1

    def test_gen_data_identical_across_thread_caps(self, tmp_path, monkeypatch):
        hashes = []
        for cap in ("1", "2"):
            monkeypatch.setenv("FSD_THREADS", cap)
            out = str(tmp_path / f"cap{cap}")
            assert run_cli(tiny_args(["gen-data", "--out", out])) == 0
            h = hashlib.sha256()
            for name in sorted(os.listdir(os.path.join(out, "train"))):
                h.update(open(os.path.join(out, "train", name), "rb").read())
            hashes.append(h.hexdigest())
        assert hashes[0] == hashes[1]
