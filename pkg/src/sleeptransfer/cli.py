"""Command-line pipeline: data preparation through transfer experiments.

Every subcommand writes its outputs plus a run manifest into --out.  The
manifest records the resolved configuration, the seed, the package
version, the repository state, and content hashes of all inputs and
outputs, so a rerun in the same state can be checked for bit-identical
results by comparing manifests.

Exit codes: 0 success, 1 user error (bad arguments, configs, or files),
2 internal error.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, models
from .features import (
    RAW,
    SPECTROGRAM,
    build_feature_set,
    fit_normalization,
    load_feature_set,
    save_feature_set,
    stft_frame_count,
)
from .inference import compute_metrics, predict_recording, write_predictions_csv
from .recordings import canonicalize, load_recordings, read_edf, save_recordings
from .synthdomain import DomainSpec, generate_domain, mismatch_ladder
from .training import TrainConfig, train, write_curve_csv
from .transfer import (
    TransferScenario,
    file_sha256,
    frozen_groups_for,
    load_pretrained,
    normalized_for_model,
    run_transfer,
    save_pretrained,
    save_stats,
    subject_count_sweep,
)

CACHE_ENV = "SLEEPTRANSFER_CACHE"


class CliError(Exception):
    """User-facing problem: bad flags, configs, or input files."""


def cache_dir() -> str:
    return os.environ.get(CACHE_ENV, os.path.expanduser("~/.cache/sleeptransfer"))


def _load_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path} is not valid JSON: {e}") from None


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(out_dir: str, command: str, config: dict, seed: int,
                    inputs: list, outputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "package_version": __version__,
        "git_describe": _git_describe(),
        "input_hashes": {p: file_sha256(p) for p in sorted(set(inputs))},
        "output_hashes": {p: file_sha256(os.path.join(out_dir, p))
                          for p in sorted(outputs)},
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _out_dir(args) -> str:
    out = args.out or os.path.join(cache_dir(), args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _train_config(d: dict) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise CliError(f"unknown training options: {sorted(unknown)}")
    return TrainConfig(**d).validate()


def _model_config(d: dict, n_channels: int, stft: dict) -> models.ModelConfig:
    d = dict(d)
    kind = d.pop("kind", models.SEQSLEEPNET)
    d.setdefault("n_channels", n_channels)
    if kind == models.SEQSLEEPNET:
        d.setdefault("frame_count", stft_frame_count(
            3000, 100.0, stft["win_len_s"], stft["hop_s"]))
        d.setdefault("n_bins", stft["n_fft"] // 2 + 1)
        factory = models.seqsleepnet_config
    elif kind == models.DEEPSLEEPNET:
        factory = models.deepsleepnet_config
    else:
        raise CliError(f"unknown model kind {kind!r}")
    try:
        return factory(**d)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad model config: {e}") from None


def _feature_kind(config: models.ModelConfig) -> str:
    return SPECTROGRAM if config.kind == models.SEQSLEEPNET else RAW


def _split_subjects(roster, val_spec, seed: int) -> tuple:
    roster = sorted(roster)
    if isinstance(val_spec, int):
        if not 0 <= val_spec < len(roster):
            raise CliError(f"cannot hold out {val_spec} validation subjects from {len(roster)}")
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(roster), size=val_spec, replace=False) if val_spec else []
        val = sorted(roster[i] for i in idx)
    else:
        val = sorted(val_spec)
        missing = set(val) - set(roster)
        if missing:
            raise CliError(f"validation subjects not in data: {sorted(missing)}")
    return [s for s in roster if s not in set(val)], val


def _load_recordings_arg(path: str) -> list:
    if os.path.isdir(path):
        path = os.path.join(path, "recordings.bin")
    if not os.path.exists(path):
        raise CliError(f"recordings not found: {path}")
    return load_recordings(path), path


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    config = _load_json(args.config)
    out = _out_dir(args)
    specs = [DomainSpec.from_dict(d) for d in config.get("domains", [])]
    ladder = config.get("ladder")
    if ladder:
        base = DomainSpec.from_dict(ladder["base"])
        specs.extend(mismatch_ladder(base, int(ladder["levels"])))
    if not specs:
        raise CliError("synth config names no domains")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise CliError(f"duplicate domain names: {names}")

    def render(spec):
        save_recordings(os.path.join(out, f"{spec.name}.rec"), generate_domain(spec))
        return f"{spec.name}.rec"

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        written = list(pool.map(render, specs))
    outputs = sorted(written + [w + ".json" for w in written])
    _write_manifest(out, "synth", config, config.get("seed", 0), [args.config], outputs)
    print(f"wrote {len(specs)} domains to {out}")
    return 0


def cmd_prepare(args) -> int:
    config = _load_json(args.config) if args.config else {}
    out = _out_dir(args)
    data_dir = args.data
    if not os.path.isdir(data_dir):
        raise CliError(f"data directory not found: {data_dir}")
    stems = sorted(f[:-4] for f in os.listdir(data_dir) if f.endswith(".edf"))
    if not stems:
        raise CliError(f"no .edf files in {data_dir}")
    runs = []
    inputs = [args.config] if args.config else []
    for stem in stems:
        edf_path = os.path.join(data_dir, stem + ".edf")
        sidecar_path = os.path.join(data_dir, stem + ".json")
        if not os.path.exists(sidecar_path):
            raise CliError(f"missing label sidecar for {stem}: {sidecar_path}")
        inputs.extend([edf_path, sidecar_path])
        sidecar = _load_json(sidecar_path)
        rec = read_edf(edf_path, rec_id=stem)
        rec.subject = sidecar.get("subject", stem)
        try:
            runs.extend(canonicalize(rec, sidecar))
        except (ValueError, KeyError) as e:
            raise CliError(f"cannot canonicalize {stem}: {e}") from None
    save_recordings(os.path.join(out, "recordings.bin"), runs)

    channels = config.get("channels") or list(runs[0].channel_names())
    stft = dict({"win_len_s": 2.0, "hop_s": 1.0, "n_fft": 256}, **config.get("stft", {}))
    fs = build_feature_set(runs, SPECTROGRAM, channels, stft_params=stft)
    save_feature_set(fs, os.path.join(out, "features_spectrogram.bin"))

    outputs = ["recordings.bin", "recordings.bin.json",
               "features_spectrogram.bin", "features_spectrogram.bin.json"]
    _write_manifest(out, "prepare", {"channels": channels, "stft": stft}, 0,
                    inputs, outputs)
    print(f"prepared {len(runs)} recording runs from {len(stems)} files into {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_json(args.config)
    out = _out_dir(args)
    recs, rec_path = _load_recordings_arg(args.data)
    seed = int(config.get("seed", 0))
    stft = dict({"win_len_s": 2.0, "hop_s": 1.0, "n_fft": 256}, **config.get("stft", {}))
    channels = config.get("channels") or list(recs[0].channel_names())
    model_config = _model_config(config.get("model", {}), len(channels), stft)
    kind = _feature_kind(model_config)

    roster = {r.subject_id for r in recs}
    train_subjects, val_subjects = _split_subjects(
        roster, config.get("val_subjects", 0), seed)
    if not train_subjects:
        raise CliError("no training subjects left after the validation holdout")

    full = build_feature_set(recs, kind, channels, stft_params=stft)
    train_fs = full.for_subjects(train_subjects, split_tag="train")
    stats = None
    if kind == SPECTROGRAM:
        stats = fit_normalization(train_fs.inputs, train_fs.split_tag)
    model = models.build_model(model_config, rng=seed)
    train_in = normalized_for_model(train_fs, model_config, stats)
    val_in = None
    if val_subjects:
        val_in = normalized_for_model(full.for_subjects(val_subjects, "val"),
                                      model_config, stats)

    result = train(model, train_in, _train_config(config.get("train", {})),
                   val_set=val_in)
    provenance = {"channels": channels, "stft": stft, "seed": seed,
                  "data": file_sha256(rec_path),
                  "train_subjects": train_subjects, "val_subjects": val_subjects}
    save_pretrained(model, os.path.join(out, "model.ckpt"), stats=stats,
                    provenance=provenance)
    write_curve_csv(result.curve, os.path.join(out, "curves.csv"))

    outputs = ["model.ckpt", "model.ckpt.json", "curves.csv"]
    if stats is not None:
        outputs.append("model.ckpt.stats.json")
    _write_manifest(out, "pretrain", config, seed, [args.config, rec_path], outputs)
    best = "" if result.best_val_accuracy is None else \
        f", best val accuracy {result.best_val_accuracy:.3f}"
    print(f"pretrained for {result.steps} steps{best}; checkpoint in {out}")
    return 0


def _featurize_for_checkpoint(recs, ckpt_path: str, channels=None):
    model, stats = load_pretrained(ckpt_path)
    manifest, _ = models.read_checkpoint(ckpt_path)
    prov = manifest.get("provenance") or {}
    channels = list(channels or prov.get("channels") or ())
    if not channels:
        raise CliError("checkpoint does not record channels; pass them explicitly")
    if len(channels) != model.config.n_channels:
        raise CliError(f"model wants {model.config.n_channels} channels, got {channels}")
    stft = prov.get("stft") or {"win_len_s": 2.0, "hop_s": 1.0, "n_fft": 256}
    fs = build_feature_set(recs, _feature_kind(model.config), channels, stft_params=stft)
    return model, stats, normalized_for_model(fs, model.config, stats), channels, stft


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    recs, rec_path = _load_recordings_arg(args.data)
    if args.subjects:
        wanted = set(args.subjects.split(","))
        recs = [r for r in recs if r.subject_id in wanted]
        missing = wanted - {r.subject_id for r in recs}
        if missing:
            raise CliError(f"subjects not in data: {sorted(missing)}")
    wanted_channels = args.channels.split(",") if args.channels else None
    model, _, fs, channels, _ = _featurize_for_checkpoint(recs, args.checkpoint, wanted_channels)

    slices = fs.recording_slices()

    def score(slc):
        a, b = slc
        return predict_recording(model, fs.inputs[a:b])

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        preds = list(pool.map(score, slices))
    true = np.concatenate([fs.labels[a:b] for a, b in slices])
    pred = np.concatenate([p.labels for p in preds])
    posteriors = np.concatenate([p.posteriors for p in preds])
    report = compute_metrics(true, pred)

    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
    write_predictions_csv(os.path.join(out, "predictions.csv"), true, pred, posteriors)
    _write_manifest(out, "evaluate",
                    {"checkpoint": args.checkpoint, "subjects": args.subjects,
                     "channels": channels}, 0,
                    [args.checkpoint, rec_path], ["metrics.json", "predictions.csv"])
    print(f"accuracy {report.accuracy:.3f}, macro F1 {report.macro_f1:.3f}, "
          f"kappa {report.kappa:.3f} over {len(true)} epochs; reports in {out}")
    return 0


def _three_way_split(config: dict, roster, seed: int) -> tuple:
    split = config.get("split")
    if not split or "test" not in split:
        raise CliError("transfer config needs a split with a test subject list")
    test = sorted(split["test"])
    val = sorted(split.get("val", []))
    explicit_train = split.get("train")
    taken = set(test) | set(val)
    train_subjects = sorted(explicit_train) if explicit_train is not None else \
        sorted(s for s in roster if s not in taken)
    for name, subset in (("train", train_subjects), ("val", val), ("test", test)):
        missing = set(subset) - set(roster)
        if missing:
            raise CliError(f"{name} subjects not in data: {sorted(missing)}")
    overlap = (set(train_subjects) & set(test)) | (set(val) & set(test)) | \
        (set(train_subjects) & set(val))
    if overlap:
        raise CliError(f"split reuses subjects: {sorted(overlap)}")
    if not train_subjects or not test:
        raise CliError("split needs non-empty train and test subject lists")
    return train_subjects, val, test


def cmd_transfer(args) -> int:
    config = _load_json(args.config)
    out = _out_dir(args)
    ckpt = config.get("checkpoint")
    if not ckpt or not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}")
    recs, rec_path = _load_recordings_arg(args.data or config.get("data", ""))
    strategy = config.get("strategy", "ALL")
    frozen_groups_for(strategy)  # validates the name early

    scenario = None
    channels = None
    if config.get("scenario"):
        scenario = TransferScenario(
            name=config["scenario"].get("name", "scenario"),
            source_channels=tuple(config["scenario"]["source_channels"]),
            target_channels=tuple(config["scenario"]["target_channels"])).validate()
        channels = list(scenario.target_channels)
    model, stats, fs, channels, stft = _featurize_for_checkpoint(recs, ckpt, channels)
    seed = int(config.get("train", {}).get("seed", 0))
    train_subjects, val, test = _three_way_split(config, fs.subject_set(), seed)

    finetuned = os.path.join(out, "finetuned.ckpt")
    train_cfg = _train_config(config.get("train", {}))
    report = run_transfer(
        ckpt, strategy,
        fs.for_subjects(train_subjects, "train"),
        fs.for_subjects(test, "test"),
        train_cfg,
        val_set=fs.for_subjects(val, "val") if val else None,
        scenario=scenario,
        scratch_seed=seed,
        out_checkpoint=finetuned,
        out_provenance={"channels": channels, "stft": stft})

    outputs = ["transfer_report.json", "curves.csv", "finetuned.ckpt", "finetuned.ckpt.json"]
    if stats is not None:
        # the source-domain stats keep following the weights they trained
        save_stats(finetuned, stats)
        outputs.append("finetuned.ckpt.stats.json")
    with open(os.path.join(out, "transfer_report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)
    write_curve_csv(report.curve or [], os.path.join(out, "curves.csv"))
    _write_manifest(out, "transfer", config, train_cfg.seed, [args.config, ckpt, rec_path],
                    outputs)
    print(f"{strategy}: accuracy {report.metrics_before.accuracy:.3f} -> "
          f"{report.metrics_after.accuracy:.3f} after {report.steps} steps; "
          f"report in {out}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_json(args.config)
    out = _out_dir(args)
    ckpt = config.get("checkpoint")
    if not ckpt or not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}")
    recs, rec_path = _load_recordings_arg(args.data or config.get("data", ""))
    counts = config.get("counts")
    if not counts:
        raise CliError("sweep config needs a counts list")
    strategy = config.get("strategy", "ALL")
    seed = int(config.get("seed", 0))
    model, _, fs, _, _ = _featurize_for_checkpoint(recs, ckpt)
    train_subjects, val, test = _three_way_split(config, fs.subject_set(), seed)

    sweep = subject_count_sweep(
        ckpt, strategy,
        fs.for_subjects(train_subjects, "train"),
        fs.for_subjects(test, "test"),
        counts, _train_config(config.get("train", {})),
        val_set=fs.for_subjects(val, "val") if val else None,
        seed=seed)

    with open(os.path.join(out, "sweep.json"), "w") as f:
        json.dump(sweep, f, indent=1, sort_keys=True, default=float)
    rows = []
    for n in sweep["counts"]:
        for step, acc in zip(sweep["steps"], sweep["accuracy"][n]):
            rows.append((step, f"test@{n}", "accuracy", acc))
    write_curve_csv(rows, os.path.join(out, "sweep_curves.csv"))
    _write_manifest(out, "sweep", config, seed, [args.config, ckpt, rec_path],
                    ["sweep.json", "sweep_curves.csv"])
    finals = ", ".join(f"{n}: {sweep['final_accuracy'][n]:.3f}" for n in sweep["counts"])
    print(f"final test accuracy by cohort size: {finals}; curves in {out}")
    return 0


# ------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sleeptransfer",
        description="Sequence-to-sequence sleep staging with transfer between domains.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, data=False):
        p.add_argument("--config", required=config_required,
                       help="JSON configuration file")
        if data:
            p.add_argument("--data", help="recordings cache file or directory")
        p.add_argument("--out", help=f"output directory (default: under ${CACHE_ENV})")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker threads for independent units")

    p = sub.add_parser("synth", help="generate synthetic domains")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="ingest and canonicalize a dataset directory")
    common(p, config_required=False)
    p.add_argument("--data", required=True, help="directory of .edf files with .json sidecars")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("pretrain", help="train a model on a source domain")
    common(p, data=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("transfer", help="adapt a checkpoint to a target domain")
    common(p, data=True)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("evaluate", help="score a checkpoint on recordings")
    common(p, config_required=False, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subjects", help="comma-separated subject filter")
    p.add_argument("--channels", help="comma-separated channel override")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="finetune on growing subject cohorts")
    common(p, data=True)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.fn(args)
    except (CliError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
