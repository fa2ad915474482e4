"""Transfer between acquisition domains: freezing strategies, finetuning,
and the subject-count sweep.

A pretrained checkpoint travels together with the normalization statistics
fit on its source training split; target data is normalized with those
source statistics both for direct transfer and during finetuning, keeping
the model's input interface fixed across domains.  Refitting statistics on
the target would silently absorb exactly the acquisition mismatch that
transfer is supposed to overcome.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import models
from .features import (
    SPECTROGRAM,
    FeatureSet,
    NormalizationStats,
    apply_normalization,
)
from .inference import EvalReport, compute_metrics, predict_feature_set
from .models import EPB, SOFTMAX, SPB, Model, build_model, config_from_dict
from .training import TrainConfig, TrainResult, train

ALL = "ALL"
EPB_SOFTMAX = "EPB_SOFTMAX"
SPB_SOFTMAX = "SPB_SOFTMAX"
SOFTMAX_ONLY = "SOFTMAX_ONLY"
NONE = "NONE"
SCRATCH = "SCRATCH"
STRATEGIES = (ALL, EPB_SOFTMAX, SPB_SOFTMAX, SOFTMAX_ONLY, NONE, SCRATCH)

_FROZEN = {
    ALL: frozenset(),
    EPB_SOFTMAX: frozenset({SPB}),
    SPB_SOFTMAX: frozenset({EPB}),
    SOFTMAX_ONLY: frozenset({EPB, SPB}),
    NONE: frozenset({EPB, SPB, SOFTMAX}),
    SCRATCH: frozenset(),
}


def frozen_groups_for(strategy: str) -> frozenset:
    """Which parameter groups a finetuning strategy keeps fixed."""
    if strategy not in _FROZEN:
        raise ValueError(f"unknown finetuning strategy {strategy!r}; expected one of {STRATEGIES}")
    return _FROZEN[strategy]


@dataclass(frozen=True)
class TransferScenario:
    """Channel routing between source and target domains."""

    name: str
    source_channels: tuple
    target_channels: tuple

    def validate(self) -> "TransferScenario":
        if not self.source_channels or not self.target_channels:
            raise ValueError("scenario needs source and target channels")
        if len(self.source_channels) != len(self.target_channels):
            raise ValueError(
                f"scenario {self.name!r} maps {len(self.source_channels)} source channels "
                f"onto {len(self.target_channels)} target channels; counts must match")
        return self

    def to_dict(self) -> dict:
        return {"name": self.name,
                "source_channels": list(self.source_channels),
                "target_channels": list(self.target_channels)}


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stats_path(checkpoint_path: str) -> str:
    return checkpoint_path + ".stats.json"


def save_stats(checkpoint_path: str, stats: NormalizationStats) -> None:
    """Normalization sidecar; it travels with the checkpoint it belongs to."""
    with open(stats_path(checkpoint_path), "w") as f:
        json.dump(stats.to_dict(), f, indent=1, sort_keys=True)


def save_pretrained(model: Model, path: str, stats: NormalizationStats | None = None,
                    provenance: dict | None = None) -> None:
    """Checkpoint plus the source-fitted normalization statistics."""
    models.save_checkpoint(model, path, provenance=provenance)
    if stats is not None:
        save_stats(path, stats)


def load_pretrained(path: str) -> tuple:
    """Returns (model, stats or None)."""
    model = models.load_checkpoint(path)
    stats = None
    if os.path.exists(stats_path(path)):
        with open(stats_path(path)) as f:
            stats = NormalizationStats.from_dict(json.load(f))
    return model, stats


def normalized_for_model(fs: FeatureSet, config: models.ModelConfig,
                         stats: NormalizationStats | None) -> FeatureSet:
    """Applies the checkpoint's statistics where the model expects them."""
    if config.kind != models.SEQSLEEPNET or fs.kind != SPECTROGRAM:
        return fs
    if stats is None:
        raise ValueError("spectrogram model inputs need normalization statistics")
    return fs.with_inputs(apply_normalization(fs.inputs, stats).astype(np.float32))


@dataclass
class TransferReport:
    strategy: str
    scenario: TransferScenario | None
    metrics_before: EvalReport
    metrics_after: EvalReport
    steps: int
    seed: int
    checkpoint_hashes: dict
    best_val_accuracy: float | None = None
    curve: list | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "scenario": None if self.scenario is None else self.scenario.to_dict(),
            "metrics_before": self.metrics_before.to_dict(),
            "metrics_after": self.metrics_after.to_dict(),
            "steps": self.steps,
            "seed": self.seed,
            "checkpoint_hashes": self.checkpoint_hashes,
            "best_val_accuracy": self.best_val_accuracy,
        }


def _evaluate(model: Model, test_set: FeatureSet) -> EvalReport:
    true, pred = predict_feature_set(model, test_set)
    return compute_metrics(true, pred)


def run_transfer(checkpoint_path: str, strategy: str, train_set: FeatureSet,
                 test_set: FeatureSet, config: TrainConfig,
                 val_set: FeatureSet | None = None,
                 scenario: TransferScenario | None = None,
                 scratch_seed: int = 0,
                 out_checkpoint: str | None = None,
                 out_provenance: dict | None = None) -> TransferReport:
    """Adapts a pretrained model to target-domain data.

    Inputs must already be normalized for the checkpoint (see
    normalized_for_model).  SCRATCH reads only the architecture from the
    checkpoint and reinitializes every parameter from scratch_seed; NONE
    freezes everything and runs no optimization, so metrics_before equals
    metrics_after and the report doubles as a direct-transfer evaluation.
    The optimizer always starts fresh: no moment estimates survive from
    pretraining.
    """
    frozen = frozen_groups_for(strategy)
    if scenario is not None:
        scenario.validate()
        if tuple(test_set.channel_names) != tuple(scenario.target_channels):
            raise ValueError(f"test set channels {test_set.channel_names} do not match "
                             f"scenario target channels {scenario.target_channels}")
    if strategy == SCRATCH:
        manifest, _ = models.read_checkpoint(checkpoint_path)
        model = build_model(config_from_dict(manifest["config"]), rng=scratch_seed)
    else:
        model = models.load_checkpoint(checkpoint_path)

    hashes = {"source": file_sha256(checkpoint_path)}
    metrics_before = _evaluate(model, test_set)

    if strategy == NONE:
        result = TrainResult(steps=0)
        metrics_after = metrics_before
    else:
        result = train(model, train_set, config, val_set=val_set, frozen_groups=frozen)
        metrics_after = _evaluate(model, test_set)

    if out_checkpoint is not None:
        provenance = dict(out_provenance or {})
        provenance.update({"finetuned_from": hashes["source"], "strategy": strategy})
        models.save_checkpoint(model, out_checkpoint, provenance=provenance)
        hashes["finetuned"] = file_sha256(out_checkpoint)

    return TransferReport(strategy=strategy, scenario=scenario,
                          metrics_before=metrics_before, metrics_after=metrics_after,
                          steps=result.steps, seed=config.seed,
                          checkpoint_hashes=hashes,
                          best_val_accuracy=result.best_val_accuracy,
                          curve=result.curve)


def pad_curves(curves: list) -> list:
    """Pads value series to the longest length by repeating the last value."""
    if not curves:
        raise ValueError("no curves to pad")
    for c in curves:
        if len(c) == 0:
            raise ValueError("cannot pad an empty curve")
    longest = max(len(c) for c in curves)
    return [list(c) + [c[-1]] * (longest - len(c)) for c in curves]


def subject_count_sweep(checkpoint_path: str, strategy: str, pool: FeatureSet,
                        test_set: FeatureSet, counts, config: TrainConfig,
                        val_set: FeatureSet | None = None, seed: int = 0) -> dict:
    """Finetunes on nested subsets of target subjects of growing size.

    The subject order is one seeded shuffle of the pool roster; count N
    takes its first N names, so smaller cohorts are strict subsets of
    larger ones.  Test accuracy is tracked on the evaluation cadence;
    curves that stop early are padded with their final value so runs stay
    comparable across counts.
    """
    counts = sorted(set(int(c) for c in counts))
    if not counts or counts[0] < 1:
        raise ValueError("counts must be positive")
    roster = sorted(pool.subject_set())
    if counts[-1] > len(roster):
        raise ValueError(f"sweep asks for {counts[-1]} subjects but the pool has {len(roster)}")
    order = [roster[i] for i in np.random.default_rng(seed).permutation(len(roster))]

    frozen = frozen_groups_for(strategy)
    curves = {}
    final_accuracy = {}
    steps_axis = {}
    for n in counts:
        subset = pool.for_subjects(order[:n], split_tag="train")
        if strategy == SCRATCH:
            manifest, _ = models.read_checkpoint(checkpoint_path)
            model = build_model(config_from_dict(manifest["config"]), rng=seed)
        else:
            model = models.load_checkpoint(checkpoint_path)
        result = train(model, subset, config, val_set=val_set,
                       frozen_groups=frozen, extra_eval=("test", test_set))
        rows = [(s, v) for s, split, metric, v in result.curve
                if split == "test" and metric == "accuracy"]
        steps_axis[n] = [s for s, _ in rows]
        curves[n] = [v for _, v in rows]
        final_accuracy[n] = _evaluate(model, test_set).accuracy

    padded = pad_curves([curves[n] for n in counts])
    longest_steps = max(steps_axis.values(), key=len)
    return {
        "counts": counts,
        "steps": longest_steps,
        "accuracy": {n: padded[i] for i, n in enumerate(counts)},
        "raw_lengths": {n: len(curves[n]) for n in counts},
        "final_accuracy": final_accuracy,
        "subject_order": order,
    }
