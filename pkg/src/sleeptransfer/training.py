"""Sequence-level training: Adam, the optimization loop, learning curves.

The sampling unit is a length-L window of consecutive epochs from one
recording (hop 1), so one recording of n epochs contributes n - L + 1
training sequences.  Validation accuracy is tracked on a fixed cadence of
optimizer steps; the parameters with the best validation accuracy are the
ones that survive training.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import models
from .autodiff import Tensor
from .features import RAW, SPECTROGRAM, FeatureSet
from .models import GROUPS, Model, one_hot, sequence_loss


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_passes: int = 10
    max_steps: int | None = None
    eval_every: int = 100
    early_stop_patience: int = 50
    l2_lambda: float | None = None     # None: take the model's value
    grad_clip: float | None = None
    mean_over_batch: bool = True
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0 or self.batch_size < 1 or self.max_passes < 1:
            raise ValueError("lr, batch_size, and max_passes must be positive")
        if self.eval_every < 1 or self.early_stop_patience < 1:
            raise ValueError("eval_every and early_stop_patience must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive when set")
        return self

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Adam:
    """Adam with bias correction and per-parameter step counts.

    Frozen parameters are skipped entirely: their values, moments, and
    step counters never change, which keeps freezing bitwise-checkable.
    """

    def __init__(self, named_tensors, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.entries = list(named_tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {name: {"m": np.zeros_like(t.data), "v": np.zeros_like(t.data), "t": 0}
                      for name, t in self.entries}

    def step(self, frozen: frozenset = frozenset()) -> None:
        for name, p in self.entries:
            if name in frozen:
                continue
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            s = self.state[name]
            s["t"] += 1
            s["m"] = self.beta1 * s["m"] + (1.0 - self.beta1) * g
            s["v"] = self.beta2 * s["v"] + (1.0 - self.beta2) * g * g
            m_hat = s["m"] / (1.0 - self.beta1 ** s["t"])
            v_hat = s["v"] / (1.0 - self.beta2 ** s["t"])
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(named_tensors, max_norm: float, frozen: frozenset = frozenset()) -> float:
    """Global-norm clipping over unfrozen gradients; returns the norm."""
    total = 0.0
    live = [(n, t) for n, t in named_tensors if n not in frozen and t.grad is not None]
    for _, t in live:
        total += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, t in live:
            t.grad = t.grad * scale
    return norm


def check_feature_set(config: models.ModelConfig, fs: FeatureSet) -> None:
    """Input shape contract between a model and a feature set."""
    if config.kind == models.SEQSLEEPNET:
        if fs.kind != SPECTROGRAM:
            raise ValueError(f"{config.kind} consumes spectrogram features, got {fs.kind!r}")
        expected = (config.frame_count, config.n_bins, config.n_channels)
        if fs.inputs.shape[1:] != expected:
            raise ValueError(f"feature shape {fs.inputs.shape[1:]} does not match "
                             f"model input {expected}")
    else:
        if fs.kind != RAW:
            raise ValueError(f"{config.kind} consumes raw features, got {fs.kind!r}")
        expected = (config.epoch_len, config.n_channels)
        if fs.inputs.shape[1:] != expected:
            raise ValueError(f"feature shape {fs.inputs.shape[1:]} does not match "
                             f"model input {expected}")


def sequence_starts(fs: FeatureSet, seq_len: int) -> np.ndarray:
    """Indices i such that epochs [i, i + L) lie inside one recording."""
    if seq_len < 1:
        raise ValueError("sequence length must be positive")
    starts = []
    for a, b in fs.recording_slices():
        starts.extend(range(a, b - seq_len + 1))
    return np.asarray(starts, dtype=np.int64)


def _batch(fs: FeatureSet, starts, seq_len: int):
    x = np.stack([fs.inputs[s:s + seq_len] for s in starts])
    y = np.stack([fs.labels[s:s + seq_len] for s in starts])
    return x, y


def evaluate_accuracy(model: Model, fs: FeatureSet, batch_size: int = 32) -> float:
    """Plain argmax accuracy over non-overlapping windows plus a tail
    window per recording; the fast evaluation used during training."""
    check_feature_set(model.config, fs)
    seq_len = model.config.L
    pred = np.full(fs.n_epochs, -1, dtype=np.int64)
    windows = []
    for a, b in fs.recording_slices():
        if b - a < seq_len:
            continue
        ws = list(range(a, b - seq_len + 1, seq_len))
        if ws[-1] != b - seq_len:
            ws.append(b - seq_len)
        windows.extend(ws)
    if not windows:
        raise ValueError(f"no recording holds a full window of {seq_len} epochs")
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        x, _ = _batch(fs, chunk, seq_len)
        probs = model.forward(Tensor(x)).data
        labels = np.argmax(probs, axis=-1)
        for j, s in enumerate(chunk):
            pred[s:s + seq_len] = labels[j]
    covered = pred >= 0
    return float(np.mean(pred[covered] == fs.labels[covered]))


@dataclass
class TrainResult:
    steps: int
    curve: list = field(default_factory=list)   # (step, split, metric, value)
    best_val_accuracy: float | None = None
    best_step: int | None = None
    stopped_early: bool = False
    final_train_loss: float | None = None


def train(model: Model, train_set: FeatureSet, config: TrainConfig,
          val_set: FeatureSet | None = None,
          frozen_groups: frozenset = frozenset(),
          extra_eval: tuple | None = None) -> TrainResult:
    """Optimizes the model in place, keeping the best-validation weights.

    Early stopping needs a validation set: training halts after
    early_stop_patience evaluations without a new best validation
    accuracy, and the best parameters (and normalizer statistics) are
    restored before returning.  Without a validation set the loop just
    runs its step budget.  All randomness (batch order, dropout) descends
    from config.seed, so identical calls produce identical results.
    """
    config.validate()
    check_feature_set(model.config, train_set)
    unknown = set(frozen_groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}; expected subset of {GROUPS}")
    if val_set is not None:
        overlap = train_set.subject_set() & val_set.subject_set()
        if overlap:
            raise ValueError(f"train and validation sets share subjects: {sorted(overlap)}")
        check_feature_set(model.config, val_set)

    seq_len = model.config.L
    starts = sequence_starts(train_set, seq_len)
    if len(starts) == 0:
        raise ValueError(f"training set has no full window of {seq_len} epochs")
    if len(starts) < 2 or config.batch_size < 2:
        # Batch statistics in the sequence-level recurrence need at least
        # two sequences per batch.
        raise ValueError("training needs a batch of at least 2 sequences")

    l2 = model.config.l2_lambda if config.l2_lambda is None else config.l2_lambda
    frozen = frozenset(frozen_groups)
    frozen_names = frozenset(name for name, p in model.store.params() if p.group in frozen)

    named = list(model.store.named_tensors())
    l2_tensors = [t for _, t in named]
    adam = Adam(named, lr=config.lr)
    root = np.random.SeedSequence(config.seed)
    shuffle_rng, dropout_rng = [np.random.default_rng(s) for s in root.spawn(2)]

    result = TrainResult(steps=0)
    best = None   # (accuracy, step, params snapshot, buffer snapshot)
    evals_since_best = 0
    loss_window = []
    step = 0
    stop = False

    for _ in range(config.max_passes):
        if stop:
            break
        order = shuffle_rng.permutation(starts)
        for i in range(0, len(order), config.batch_size):
            chunk = order[i:i + config.batch_size]
            if len(chunk) < 2:
                continue  # a lone trailing sequence cannot feed batch statistics
            x, y = _batch(train_set, chunk, seq_len)
            probs = model.forward(Tensor(x), train=True, rng=dropout_rng,
                                  frozen_groups=frozen)
            loss = sequence_loss(probs, one_hot(y, model.config.n_classes),
                                 l2_params=l2_tensors, l2_lambda=l2,
                                 mean_over_batch=config.mean_over_batch)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss at step {step + 1}")
            model.store.zero_grads()
            loss.backward()
            if config.grad_clip is not None:
                clip_gradients(named, config.grad_clip, frozen_names)
            adam.step(frozen_names)
            step += 1
            loss_window.append(float(loss.data))

            if step % config.eval_every == 0:
                result.curve.append((step, "train", "loss", float(np.mean(loss_window))))
                loss_window = []
                if extra_eval is not None:
                    tag, extra_set = extra_eval
                    result.curve.append((step, tag, "accuracy",
                                         evaluate_accuracy(model, extra_set, config.batch_size)))
                if val_set is not None:
                    acc = evaluate_accuracy(model, val_set, config.batch_size)
                    result.curve.append((step, "val", "accuracy", acc))
                    if best is None or acc > best[0]:
                        best = (acc, step,
                                {n: t.data.copy() for n, t in named},
                                {n: b.array.copy() for n, b in model.store.buffers()})
                        evals_since_best = 0
                    else:
                        evals_since_best += 1
                        if evals_since_best >= config.early_stop_patience:
                            result.stopped_early = True
                            stop = True
                            break
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
                break

    result.steps = step
    if loss_window:
        result.final_train_loss = float(np.mean(loss_window))
    elif result.curve:
        train_rows = [r for r in result.curve if r[1] == "train"]
        if train_rows:
            result.final_train_loss = train_rows[-1][3]
    if best is not None:
        result.best_val_accuracy, result.best_step = best[0], best[1]
        for name, t in named:
            t.data = best[2][name].copy()
        for name, b in model.store.buffers():
            b.array[...] = best[3][name]
    return result


def write_curve_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "split", "metric", "value"])
        for step, split, metric, value in rows:
            w.writerow([step, split, metric, repr(float(value))])


def read_curve_csv(path: str) -> list:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["step", "split", "metric", "value"]:
            raise ValueError(f"unexpected curve header {header}")
        return [(int(s), split, metric, float(v)) for s, split, metric, v in r]
