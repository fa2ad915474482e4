"""End-to-end runs of the command-line pipeline on tiny synthetic data.

Module-scoped fixtures run each stage once (synth -> pretrain ->
evaluate/transfer/sweep, plus prepare on generated EDF files); the tests
assert on the written artifacts.  Heavier stages use a deliberately tiny
model and a coarse spectrogram so the whole chain stays fast.
"""
from __future__ import annotations

import json
import os

import numpy as np
import pytest

from edfgen import write_edf
from sleeptransfer import autodiff
from sleeptransfer.cli import main
from sleeptransfer.features import load_feature_set
from sleeptransfer.recordings import load_recordings
from sleeptransfer.training import read_curve_csv
from sleeptransfer.transfer import file_sha256, load_pretrained

# coarse frames keep the epoch images tiny: 6 frames x 33 bins
TINY_STFT = {"win_len_s": 0.64, "hop_s": 5.0, "n_fft": 64}
TINY_MODEL = {"L": 3, "n_filters": 3, "epb_hidden": 3, "attention_size": 3,
              "spb_hidden": 3, "output_size": 6, "dropout": 0.0}
TINY_TRAIN = {"lr": 3e-3, "batch_size": 4, "max_steps": 12, "eval_every": 6,
              "max_passes": 60, "seed": 1}


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f)
    return str(path)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def manifest_of(out_dir):
    return read_json(os.path.join(out_dir, "run_manifest.json"))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def synth_config(ws):
    biology = {"n_subjects": 3, "epochs_per_subject": 40, "persistence": 0.5}
    return write_json(ws / "synth.json", {
        "seed": 7,
        "domains": [
            {"name": "src", "seed": 7, **biology},
            {"name": "tgt", "seed": 8, "gain": 1.6, "tilt_db": -6.0,
             "noise_level": 0.4, **biology},
        ],
    })


@pytest.fixture(scope="module")
def synth_out(ws, synth_config):
    out = str(ws / "synth_out")
    assert main(["synth", "--config", synth_config, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def pretrain_out(ws, synth_out):
    config = write_json(ws / "pretrain.json", {
        "seed": 1,
        "channels": ["EEG"],
        "stft": TINY_STFT,
        "model": dict(TINY_MODEL),
        "val_subjects": 1,
        "train": dict(TINY_TRAIN),
    })
    out = str(ws / "pretrain_out")
    assert main(["pretrain", "--config", config,
                 "--data", os.path.join(synth_out, "src.rec"),
                 "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def evaluate_out(ws, synth_out, pretrain_out):
    out = str(ws / "evaluate_out")
    assert main(["evaluate",
                 "--checkpoint", os.path.join(pretrain_out, "model.ckpt"),
                 "--data", os.path.join(synth_out, "tgt.rec"),
                 "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def transfer_out(ws, synth_out, pretrain_out):
    config = write_json(ws / "transfer.json", {
        "checkpoint": os.path.join(pretrain_out, "model.ckpt"),
        "strategy": "SOFTMAX_ONLY",
        "split": {"test": ["tgt-s02"], "val": ["tgt-s01"]},
        "train": dict(TINY_TRAIN, seed=2, max_steps=8, eval_every=4),
    })
    out = str(ws / "transfer_out")
    assert main(["transfer", "--config", config,
                 "--data", os.path.join(synth_out, "tgt.rec"),
                 "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def sweep_out(ws, synth_out, pretrain_out):
    config = write_json(ws / "sweep.json", {
        "checkpoint": os.path.join(pretrain_out, "model.ckpt"),
        "strategy": "ALL",
        "counts": [1, 2],
        "seed": 3,
        "split": {"test": ["tgt-s02"]},
        "train": dict(TINY_TRAIN, seed=3, max_steps=8, eval_every=4),
    })
    out = str(ws / "sweep_out")
    assert main(["sweep", "--config", config,
                 "--data", os.path.join(synth_out, "tgt.rec"),
                 "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def edf_dir(ws):
    """Two fake overnight files: one trims at the lights markers, the
    other splits at a MOVEMENT epoch."""
    d = ws / "edfdata"
    d.mkdir()
    rng = np.random.default_rng(5)

    def signal(n_epochs):
        return {"name": "EEG", "samples": rng.normal(size=n_epochs * 30 * 128) * 40,
                "rate": 128}

    (d / "a.edf").write_bytes(write_edf([signal(8)]))
    write_json(d / "a.json", {
        "subject": "sA", "standard": "AASM", "epoch_len_s": 30,
        "hypnogram": ["W", "W", "N1", "N2", "N3", "N2", "REM", "W"],
        "lights_off_epoch": 1, "lights_on_epoch": 7,
    })
    (d / "b.edf").write_bytes(write_edf([signal(8)]))
    write_json(d / "b.json", {
        "subject": "sB", "standard": "AASM", "epoch_len_s": 30,
        "hypnogram": ["W", "N1", "N2", "MOVEMENT", "N2", "N3", "REM", "W"],
    })
    return str(d)


@pytest.fixture(scope="module")
def prepare_out(ws, edf_dir):
    out = str(ws / "prepare_out")
    assert main(["prepare", "--data", edf_dir, "--out", out]) == 0
    return out


class TestSynth:
    def test_writes_domains_and_manifest(self, synth_out):
        for name in ("src.rec", "src.rec.json", "tgt.rec", "tgt.rec.json",
                     "run_manifest.json"):
            assert os.path.exists(os.path.join(synth_out, name))
        recs = load_recordings(os.path.join(synth_out, "src.rec"))
        assert [r.subject_id for r in recs] == ["src-s00", "src-s01", "src-s02"]
        assert all(r.n_epochs == 40 for r in recs)
        manifest = manifest_of(synth_out)
        assert manifest["command"] == "synth"
        assert set(manifest["output_hashes"]) == {
            "src.rec", "src.rec.json", "tgt.rec", "tgt.rec.json"}

    def test_rerun_and_thread_count_leave_outputs_identical(self, ws, synth_config,
                                                            synth_out):
        again = str(ws / "synth_again")
        threaded = str(ws / "synth_threaded")
        assert main(["synth", "--config", synth_config, "--out", again]) == 0
        assert main(["synth", "--config", synth_config, "--out", threaded,
                     "--jobs", "2"]) == 0
        base = manifest_of(synth_out)["output_hashes"]
        assert manifest_of(again)["output_hashes"] == base
        assert manifest_of(threaded)["output_hashes"] == base

    def test_no_domains_is_a_user_error(self, ws, capsys):
        config = write_json(ws / "empty_synth.json", {"domains": []})
        assert main(["synth", "--config", config, "--out", str(ws / "x1")]) == 1
        assert "no domains" in capsys.readouterr().err

    def test_duplicate_domain_names_rejected(self, ws):
        spec = {"name": "dup", "n_subjects": 1, "epochs_per_subject": 5, "seed": 0}
        config = write_json(ws / "dup_synth.json", {"domains": [spec, dict(spec)]})
        assert main(["synth", "--config", config, "--out", str(ws / "x2")]) == 1

    def test_internal_errors_exit_two(self, ws, synth_config, monkeypatch, capsys):
        def boom(spec):
            raise RuntimeError("wires crossed")
        monkeypatch.setattr("sleeptransfer.cli.generate_domain", boom)
        assert main(["synth", "--config", synth_config, "--out", str(ws / "x3")]) == 2
        assert "internal error" in capsys.readouterr().err


class TestArgumentHandling:
    def test_version_exits_zero(self, capsys):
        assert main(["--version"]) == 0
        capsys.readouterr()

    def test_unknown_command_is_a_user_error(self, capsys):
        assert main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_missing_required_flag_is_a_user_error(self, capsys):
        assert main(["pretrain"]) == 1
        capsys.readouterr()

    def test_missing_config_file_is_a_user_error(self, tmp_path, capsys):
        rc = main(["synth", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err

    def test_malformed_config_is_a_user_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["synth", "--config", str(bad),
                     "--out", str(tmp_path / "out")]) == 1
        assert "not valid JSON" in capsys.readouterr().err

    def test_default_out_lands_under_cache_env(self, ws, monkeypatch):
        cache = ws / "cachehome"
        monkeypatch.setenv("SLEEPTRANSFER_CACHE", str(cache))
        spec = {"name": "tiny", "n_subjects": 1, "epochs_per_subject": 4, "seed": 0}
        config = write_json(ws / "cache_synth.json", {"domains": [spec]})
        assert main(["synth", "--config", config]) == 0
        assert os.path.exists(cache / "synth" / "tiny.rec")


class TestPrepare:
    def test_builds_canonical_cache_and_features(self, prepare_out):
        recs = load_recordings(os.path.join(prepare_out, "recordings.bin"))
        assert [(r.id, r.subject_id, r.n_epochs) for r in recs] == [
            ("a", "sA", 6), ("b-r0", "sB", 3), ("b-r1", "sB", 4)]
        # lights-on trim: epochs [1, 7) of the scored grid
        assert list(recs[0].labels) == [0, 1, 2, 3, 2, 4]
        fs = load_feature_set(os.path.join(prepare_out, "features_spectrogram.bin"))
        assert fs.inputs.shape == (13, 29, 129, 1)
        assert fs.channel_names == ("EEG",)

    def test_manifest_hashes_every_input_file(self, prepare_out, edf_dir):
        manifest = manifest_of(prepare_out)
        hashed = set(manifest["input_hashes"])
        for stem in ("a", "b"):
            assert os.path.join(edf_dir, stem + ".edf") in hashed
            assert os.path.join(edf_dir, stem + ".json") in hashed

    def test_missing_sidecar_is_a_user_error(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        (tmp_path / "solo.edf").write_bytes(write_edf(
            [{"name": "EEG", "samples": rng.normal(size=3 * 30 * 128), "rate": 128}]))
        assert main(["prepare", "--data", str(tmp_path),
                     "--out", str(tmp_path / "out")]) == 1
        assert "sidecar" in capsys.readouterr().err

    def test_directory_without_edfs_is_a_user_error(self, tmp_path, capsys):
        assert main(["prepare", "--data", str(tmp_path),
                     "--out", str(tmp_path / "out")]) == 1
        capsys.readouterr()


class TestPretrain:
    def test_writes_checkpoint_stats_and_curves(self, pretrain_out):
        model, stats = load_pretrained(os.path.join(pretrain_out, "model.ckpt"))
        assert stats is not None
        assert model.config.L == 3
        rows = read_curve_csv(os.path.join(pretrain_out, "curves.csv"))
        assert any(split == "val" and metric == "accuracy"
                   for _, split, metric, _ in rows)
        manifest = manifest_of(pretrain_out)
        assert manifest["command"] == "pretrain"
        assert "model.ckpt.stats.json" in manifest["output_hashes"]

    def test_provenance_names_channels_and_frames(self, pretrain_out):
        ckpt = read_json(os.path.join(pretrain_out, "model.ckpt.json"))
        prov = ckpt["provenance"]
        assert prov["channels"] == ["EEG"]
        assert prov["stft"]["n_fft"] == 64
        assert len(prov["train_subjects"]) == 2 and len(prov["val_subjects"]) == 1
        assert set(prov["train_subjects"]).isdisjoint(prov["val_subjects"])

    def test_rerun_is_bit_identical(self, ws, synth_out):
        autodiff.set_default_dtype(np.float32)
        config = write_json(ws / "pretrain_again.json", {
            "seed": 1, "channels": ["EEG"], "stft": TINY_STFT,
            "model": dict(TINY_MODEL), "val_subjects": 1,
            "train": dict(TINY_TRAIN, max_steps=6),
        })
        outs = [str(ws / "pt_a"), str(ws / "pt_b")]
        for out in outs:
            assert main(["pretrain", "--config", config,
                         "--data", os.path.join(synth_out, "src.rec"),
                         "--out", out]) == 0
        a, b = (manifest_of(o) for o in outs)
        assert a["output_hashes"] == b["output_hashes"]
        assert a["input_hashes"] == b["input_hashes"]

    def test_too_large_validation_holdout_is_a_user_error(self, ws, synth_out, capsys):
        config = write_json(ws / "pretrain_bad_val.json", {
            "channels": ["EEG"], "stft": TINY_STFT, "model": dict(TINY_MODEL),
            "val_subjects": 9, "train": dict(TINY_TRAIN),
        })
        assert main(["pretrain", "--config", config,
                     "--data", os.path.join(synth_out, "src.rec"),
                     "--out", str(ws / "x4")]) == 1
        capsys.readouterr()


class TestEvaluate:
    def test_writes_metrics_and_predictions(self, evaluate_out):
        metrics = read_json(os.path.join(evaluate_out, "metrics.json"))
        assert 0.0 <= metrics["accuracy"] <= 1.0
        assert set(metrics) >= {"accuracy", "macro_f1", "kappa", "confusion"}
        with open(os.path.join(evaluate_out, "predictions.csv")) as f:
            lines = f.read().strip().splitlines()
        assert len(lines) == 1 + 3 * 40
        assert lines[0].startswith("epoch_index,true,predicted,p_W")

    def test_subject_filter_restricts_rows(self, ws, synth_out, pretrain_out):
        autodiff.set_default_dtype(np.float32)
        out = str(ws / "evaluate_one")
        assert main(["evaluate",
                     "--checkpoint", os.path.join(pretrain_out, "model.ckpt"),
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--subjects", "tgt-s01", "--out", out]) == 0
        with open(os.path.join(out, "predictions.csv")) as f:
            assert len(f.read().strip().splitlines()) == 1 + 40

    def test_runs_on_prepared_recordings(self, ws, prepare_out, pretrain_out):
        autodiff.set_default_dtype(np.float32)
        out = str(ws / "evaluate_prepared")
        assert main(["evaluate",
                     "--checkpoint", os.path.join(pretrain_out, "model.ckpt"),
                     "--data", prepare_out, "--out", out]) == 0
        with open(os.path.join(out, "predictions.csv")) as f:
            assert len(f.read().strip().splitlines()) == 1 + 13

    def test_missing_checkpoint_is_a_user_error(self, ws, synth_out, capsys):
        assert main(["evaluate", "--checkpoint", str(ws / "ghost.ckpt"),
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--out", str(ws / "x5")]) == 1
        capsys.readouterr()

    def test_unknown_subject_is_a_user_error(self, ws, synth_out, pretrain_out, capsys):
        assert main(["evaluate",
                     "--checkpoint", os.path.join(pretrain_out, "model.ckpt"),
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--subjects", "tgt-s99", "--out", str(ws / "x6")]) == 1
        assert "tgt-s99" in capsys.readouterr().err


class TestTransfer:
    def test_writes_report_and_finetuned_checkpoint(self, transfer_out):
        report = read_json(os.path.join(transfer_out, "transfer_report.json"))
        assert report["strategy"] == "SOFTMAX_ONLY"
        assert report["steps"] > 0
        for key in ("metrics_before", "metrics_after"):
            assert 0.0 <= report[key]["accuracy"] <= 1.0
        assert set(report["checkpoint_hashes"]) == {"source", "finetuned"}
        assert os.path.exists(os.path.join(transfer_out, "finetuned.ckpt"))
        rows = read_curve_csv(os.path.join(transfer_out, "curves.csv"))
        assert rows, "finetuning should log training curves"

    def test_direct_transfer_trains_nothing(self, ws, synth_out, pretrain_out):
        autodiff.set_default_dtype(np.float32)
        config = write_json(ws / "transfer_none.json", {
            "checkpoint": os.path.join(pretrain_out, "model.ckpt"),
            "strategy": "NONE",
            "split": {"test": ["tgt-s02"]},
            "train": dict(TINY_TRAIN),
        })
        out = str(ws / "transfer_none_out")
        assert main(["transfer", "--config", config,
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--out", out]) == 0
        report = read_json(os.path.join(out, "transfer_report.json"))
        assert report["steps"] == 0
        assert report["metrics_before"] == report["metrics_after"]

    def test_overlapping_split_is_a_user_error(self, ws, synth_out, pretrain_out, capsys):
        config = write_json(ws / "transfer_overlap.json", {
            "checkpoint": os.path.join(pretrain_out, "model.ckpt"),
            "strategy": "ALL",
            "split": {"train": ["tgt-s00", "tgt-s02"], "test": ["tgt-s02"]},
            "train": dict(TINY_TRAIN),
        })
        assert main(["transfer", "--config", config,
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--out", str(ws / "x7")]) == 1
        assert "reuses subjects" in capsys.readouterr().err

    def test_unknown_strategy_is_a_user_error(self, ws, synth_out, pretrain_out, capsys):
        config = write_json(ws / "transfer_badstrat.json", {
            "checkpoint": os.path.join(pretrain_out, "model.ckpt"),
            "strategy": "EVERYTHING",
            "split": {"test": ["tgt-s02"]},
        })
        assert main(["transfer", "--config", config,
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--out", str(ws / "x8")]) == 1
        assert "EVERYTHING" in capsys.readouterr().err


class TestSweep:
    def test_writes_padded_curves_per_cohort(self, sweep_out):
        sweep = read_json(os.path.join(sweep_out, "sweep.json"))
        assert sweep["counts"] == [1, 2]
        assert set(sweep["accuracy"]) == {"1", "2"}
        assert len(sweep["accuracy"]["1"]) == len(sweep["accuracy"]["2"]) \
            == len(sweep["steps"])
        assert set(sweep["final_accuracy"]) == {"1", "2"}
        assert len(sweep["subject_order"]) == 2
        rows = read_curve_csv(os.path.join(sweep_out, "sweep_curves.csv"))
        assert len(rows) == 2 * len(sweep["steps"])
        assert {split for _, split, _, _ in rows} == {"test@1", "test@2"}

    def test_count_beyond_pool_is_a_user_error(self, ws, synth_out, pretrain_out, capsys):
        config = write_json(ws / "sweep_big.json", {
            "checkpoint": os.path.join(pretrain_out, "model.ckpt"),
            "counts": [5],
            "split": {"test": ["tgt-s02"]},
            "train": dict(TINY_TRAIN),
        })
        assert main(["sweep", "--config", config,
                     "--data", os.path.join(synth_out, "tgt.rec"),
                     "--out", str(ws / "x9")]) == 1
        assert "pool has 2" in capsys.readouterr().err
