import csv
import json

import numpy as np
import pytest

from conftest import DESK
from hgan.cli import EXIT_CHECK, EXIT_DATA, EXIT_OK, EXIT_USAGE, RunConfig, main
from hgan.graph import ConfigError
from hgan.ingest import read_blob


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--groups", "8", "--seed", "7", "--out", str(root / "d")]) == EXIT_OK
    cfg = {**DESK, "epochs": 4, "batch_size": 8, "train_manifest": "d/manifest.json",
           "val_manifest": "d/manifest.json", "output_dir": "run"}
    (root / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "c.json")]) == EXIT_OK
    return root


def test_pipeline_eval(pipeline, capsys):
    ck = str(pipeline / "run" / "checkpoint")
    assert main(["eval", "--checkpoint", ck, "--config", str(pipeline / "c.json")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Rsum" in out
    report = json.loads((pipeline / "run" / "report.json").read_text())
    assert report["rsum"] == pytest.approx(sum(report[k] for k in list(report)[:6]))
    rows = list(csv.reader((pipeline / "run" / "report.csv").read_text().splitlines()))
    assert rows[0][-1] == "rsum"


def test_eval_reuses_checkpoint_config(pipeline, tmp_path):
    ck = str(pipeline / "run" / "checkpoint")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "report.json").exists()


def test_ablate_s1_s2(pipeline, tmp_path):
    from hgan.align import LossConfig
    from hgan.evalkit import evaluate
    from hgan.ingest import load_dataset
    from hgan.train import load_checkpoint

    ck = pipeline / "run" / "checkpoint"
    assert main(["eval", "--checkpoint", str(ck), "--ablate", "s1,s2", "--out", str(tmp_path)]) == EXIT_OK
    model, _, _ = load_checkpoint(ck)
    ref = evaluate(model, load_dataset(pipeline / "d" / "manifest.json"), LossConfig(enable_s1=False, enable_s2=False))
    assert json.loads((tmp_path / "report.json").read_text())["rsum"] == pytest.approx(ref.rsum)


def test_bad_ablate(pipeline):
    assert main(["eval", "--checkpoint", str(pipeline / "run" / "checkpoint"), "--ablate", "s3"]) == EXIT_USAGE


def test_embed(pipeline, tmp_path):
    assert main(["embed", "--checkpoint", str(pipeline / "run" / "checkpoint"), "--out", str(tmp_path)]) == EXIT_OK
    assert read_blob(tmp_path / "images_V.hgt").shape == (8, DESK["D"])
    assert read_blob(tmp_path / "captions_T.hgt").shape == (40, DESK["D"])
    index = json.loads((tmp_path / "index.json").read_text())
    assert len(index["caption_image"]) == 40


def test_word_sim(pipeline, tmp_path):
    out = tmp_path / "w.csv"
    assert main(["word-sim", "--checkpoint", str(pipeline / "run" / "checkpoint"), "--caption", "3",
                 "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == ["token", "similarity"]
    assert sum(float(r[1]) for r in rows[1:]) == pytest.approx(1.0, abs=1e-6)


def test_word_sim_label_mismatch(pipeline):
    assert main(["word-sim", "--checkpoint", str(pipeline / "run" / "checkpoint"), "--tokens", "a,b"]) == EXIT_USAGE


def test_train_outputs_reproducible(pipeline, tmp_path):
    assert main(["train", "--config", str(pipeline / "c.json"), "--out", str(tmp_path)]) == EXIT_OK
    a = (pipeline / "run" / "metrics.csv").read_text().splitlines()
    b = (tmp_path / "metrics.csv").read_text().splitlines()
    assert a[0].startswith("# generated") and a[1:] == b[1:]


def test_set_override(pipeline, tmp_path):
    assert main(["train", "--config", str(pipeline / "c.json"), "--out", str(tmp_path),
                 "--set", "epochs=1", "--set", "mfa_only=true"]) == EXIT_OK
    header = json.loads((tmp_path / "checkpoint" / "checkpoint.json").read_text())
    assert header["model"]["mfa_only"] is True and header["epoch"] == 0


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--tol", "1e-4"]) == EXIT_OK
    assert "grad-check passed" in capsys.readouterr().out


def test_grad_check_failure_exit(capsys):
    assert main(["grad-check", "--tol", "1e-14"]) == EXIT_CHECK


class TestErrors:
    def test_missing_required_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == EXIT_USAGE

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", "x", "--bogus"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope")]) == EXIT_DATA

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_DATA

    def test_corrupt_blob(self, pipeline, tmp_path):
        import shutil

        shutil.copytree(pipeline / "d", tmp_path / "d")
        (tmp_path / "d" / "captions" / "g0000_c0.hgt").write_bytes(b"HGT1\x02")
        (tmp_path / "c.json").write_text(json.dumps({**DESK, "epochs": 1, "train_manifest": "d/manifest.json"}))
        assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_contradictory_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"use_local": False, "enable_s1": True}))
        assert main(["train", "--config", str(tmp_path / "c.json")]) == EXIT_USAGE

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"lerning_rate": 1}))
        assert main(["train", "--config", str(tmp_path / "c.json")]) == EXIT_USAGE


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig.from_dict({"epochs": 3, "mfa_only": True, "output_dir": "/tmp/x"})
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_mfa_only_forbids_training_rearrangement(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"mfa_only": True, "train_rearrangement": True})

    def test_paths_relative_to_config(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train_manifest": "m.json"}))
        assert RunConfig.load(tmp_path / "c.json").train_manifest == str(tmp_path / "m.json")

    def test_published_defaults(self):
        t = RunConfig().train
        assert (t.base_lr, t.decay, t.decay_every, t.warmup_fraction, t.M, t.D) == (2e-4, 0.1, 6, 0.1, 2, 1024)
        assert np.isclose(t.margin, 0.2)
