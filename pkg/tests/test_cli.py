"""CLI subcommands, exit codes, file outputs, and run configuration."""

import csv
import json

import pytest

from max360iq.cli import (EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main)
from max360iq.config import ConfigError, load_run_config

TINY_SET = [
    "backbone.stem_channels=2", "backbone.stage_dims=[2,2,4,4]",
    "backbone.heads=1", "backbone.mbconv_expansion=2.0",
    "backbone.se_ratio=0.5", "backbone.mlp_ratio=2.0",
    "head.gru_hidden=3", "head.fc1_dim=3", "head.dropout=0.0",
    "train.k=2", "train.batch_size=4", "train.epochs=5",
    "train.max_steps=25", "train.lr=0.003",
]


def _set_flags(extra=()):
    out = []
    for item in list(TINY_SET) + list(extra):
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    rc = main(["synth", "--out", str(out), "--scenes", "5", "--levels", "2",
               "--width", "64", "--height", "32", "--seed", "0"])
    assert rc == EXIT_OK
    return out / "manifest.csv"


@pytest.fixture(scope="module")
def nonuniform_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds_nu")
    rc = main(["synth", "--out", str(out), "--scenes", "2", "--levels", "1",
               "--mode", "nonuniform", "--width", "64", "--height", "32"])
    assert rc == EXIT_OK
    return out / "manifest.csv"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--manifest", str(dataset), "--out", str(out),
               "--ratio", "0.6"] + _set_flags())
    assert rc == EXIT_OK
    return out


class TestSynth:
    def test_writes_manifest(self, dataset):
        assert dataset.exists()
        # 5 scenes x 2 distortions x 2 levels entries + header + columns
        assert len(dataset.read_text().splitlines()) == 22

    def test_deterministic(self, tmp_path):
        for sub in ("a", "b"):
            main(["synth", "--out", str(tmp_path / sub), "--scenes", "2",
                  "--levels", "1", "--width", "64", "--height", "32"])
        assert (tmp_path / "a/manifest.csv").read_bytes() == \
            (tmp_path / "b/manifest.csv").read_bytes()


class TestExtract:
    def test_equator_seven_files_per_image(self, dataset, tmp_path):
        rc = main(["extract", "--manifest", str(dataset), "--out",
                   str(tmp_path), "--k", "7", "--size", "16"])
        assert rc == EXIT_OK
        pngs = list(tmp_path.glob("*.png"))
        sidecars = list(tmp_path.glob("*.json"))
        assert len(pngs) == 20 * 7  # 20 images x K
        assert len(sidecars) == 20

    def test_scanpath_mode_four_conditions(self, nonuniform_dataset, tmp_path):
        rc = main(["extract", "--manifest", str(nonuniform_dataset), "--out",
                   str(tmp_path), "--k", "7", "--size", "16",
                   "--mode", "scanpath"])
        assert rc == EXIT_OK
        per_image = {}
        for p in tmp_path.glob("*.png"):
            per_image.setdefault(p.name.rsplit("_", 2)[0], []).append(p)
        assert all(len(v) == 28 for v in per_image.values())  # 4 x 7

    def test_scanpath_mode_without_scanpaths_fails(self, dataset, tmp_path):
        rc = main(["extract", "--manifest", str(dataset), "--out",
                   str(tmp_path), "--mode", "scanpath"])
        assert rc == EXIT_DATA

    def test_missing_manifest(self, tmp_path):
        rc = main(["extract", "--manifest", str(tmp_path / "nope.csv"),
                   "--out", str(tmp_path)])
        assert rc == EXIT_DATA

    def test_sidecar_lists_centers(self, dataset, tmp_path):
        main(["extract", "--manifest", str(dataset), "--out", str(tmp_path),
              "--k", "3", "--size", "16"])
        sidecar = json.loads(next(tmp_path.glob("*.json")).read_text())
        assert sidecar["k"] == 3
        assert len(sidecar["centers"]) == 3


class TestTrain:
    def test_outputs(self, trained):
        assert (trained / "last.ckpt").exists()
        assert (trained / "run_config.json").exists()
        log = [json.loads(l) for l in
               (trained / "train_log.jsonl").read_text().splitlines()]
        assert log and "loss" in log[0]
        assert (trained / "training.png").exists()

    def test_no_figures_flag(self, dataset, tmp_path):
        rc = main(["train", "--manifest", str(dataset), "--out",
                   str(tmp_path), "--ratio", "0.6", "--no-figures"]
                  + _set_flags())
        assert rc == EXIT_OK
        assert not (tmp_path / "training.png").exists()

    def test_bad_config_key(self, dataset, tmp_path):
        rc = main(["train", "--manifest", str(dataset), "--out",
                   str(tmp_path), "--set", "train.nonsense=1"])
        assert rc == EXIT_DATA


class TestPredictEval:
    def test_predict_then_eval(self, trained, dataset, tmp_path):
        preds = tmp_path / "preds.csv"
        scores = tmp_path / "scores.json"
        rc = main(["predict", "--checkpoint", str(trained / "last.ckpt"),
                   "--manifest", str(dataset), "--out", str(preds),
                   "--image-scores", str(scores)])
        assert rc == EXIT_OK
        with preds.open() as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 20
        assert len(json.loads(scores.read_text())) == 20

        report = tmp_path / "report.json"
        scatter = tmp_path / "scatter.csv"
        rc = main(["eval", "--predictions", str(preds), "--out-report",
                   str(report), "--out-scatter", str(scatter)])
        assert rc == EXIT_OK
        rep = json.loads(report.read_text())
        assert {"plcc", "srcc", "rmse", "theta", "n"} <= set(rep)
        with scatter.open() as f:
            srows = list(csv.DictReader(f))
        assert len(srows) == 20
        assert "mapped_pred" in srows[0]
        assert report.with_suffix(".png").exists()

    def test_eval_missing_file(self, tmp_path):
        rc = main(["eval", "--predictions", str(tmp_path / "nope.csv"),
                   "--out-report", str(tmp_path / "r.json")])
        assert rc == EXIT_DATA

    def test_eval_constant_predictions_numeric_error(self, tmp_path):
        p = tmp_path / "preds.csv"
        p.write_text("image_id,condition,pred,mos\n"
                     + "".join(f"i{i},,1.0,{i}\n" for i in range(6)))
        rc = main(["eval", "--predictions", str(p), "--out-report",
                   str(tmp_path / "r.json")])
        assert rc == EXIT_NUMERIC

    def test_no_tmp_files_left(self, trained, dataset, tmp_path):
        preds = tmp_path / "p.csv"
        main(["predict", "--checkpoint", str(trained / "last.ckpt"),
              "--manifest", str(dataset), "--out", str(preds)])
        assert not list(tmp_path.glob("*.tmp"))


class TestGradcheck:
    def test_corrupt_backward_nonzero_exit(self, capsys):
        from max360iq import ndgrad
        orig_relu = ndgrad.relu
        try:
            rc = main(["gradcheck", "--seeds", "1", "--end-to-end-seeds", "0",
                       "--corrupt-backward"])
        finally:
            ndgrad.relu = orig_relu
        assert rc == EXIT_NUMERIC
        out = capsys.readouterr().out
        assert "FAIL" in out


class TestSweepK:
    def test_csv_shape(self, dataset, tmp_path):
        out = tmp_path / "sweep.csv"
        rc = main(["sweep-k", "--manifest", str(dataset), "--out", str(out),
                   "--k-list", "1,2", "--ratio", "0.6", "--no-figures"]
                  + _set_flags())
        assert rc == EXIT_OK
        with out.open() as f:
            rows = list(csv.DictReader(f))
        assert [r["k"] for r in rows] == ["1", "2"]
        assert all({"plcc", "srcc", "rmse"} <= set(r) for r in rows)


class TestUsage:
    def test_unknown_command(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_missing_required_flag(self):
        assert main(["extract"]) == EXIT_USAGE

    def test_help_exits_ok(self):
        assert main(["--help"]) == EXIT_OK


class TestRunConfig:
    def test_defaults(self):
        run = load_run_config()
        assert run.train.lr == 1e-4
        assert run.backbone.stage_dims == (8, 16, 32, 64)
        assert run.head.use_gru

    def test_file_plus_overrides(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"train": {"lr": 0.01},
                                   "head": {"use_gru": False}}))
        run = load_run_config(cfg, ["train.lr=0.5", "backbone.window=2"])
        assert run.train.lr == 0.5  # override beats file
        assert not run.head.use_gru
        assert run.backbone.window == 2

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            load_run_config(None, ["train.velocity=1"])

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="section"):
            load_run_config(None, ["motor.lr=1"])

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            load_run_config(None, ["train.lr"])

    def test_round_trips_to_dict(self):
        d = load_run_config().to_dict()
        assert set(d) == {"train", "backbone", "head"}
