"""Whole-recording scoring, posterior fusion, metrics, cross-validation.

A sequence model emits one posterior per epoch per window.  Sliding the
window one epoch at a time gives every interior epoch up to L independent
decisions; fusing them is what makes sequence-to-sequence scoring beat
single-window scoring at the edges of ambiguous stretches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .features import FeatureSet
from .models import LOG_FLOOR, Model
from .recordings import N_CLASSES, STAGES
from .training import check_feature_set


def contribution_count(epoch: int, n_epochs: int, seq_len: int) -> int:
    """Number of hop-1 windows of length L that cover a given epoch."""
    if not 0 <= epoch < n_epochs:
        raise ValueError(f"epoch {epoch} outside recording of {n_epochs}")
    if n_epochs < seq_len:
        raise ValueError(f"recording of {n_epochs} epochs is shorter than a window of {seq_len}")
    return min(epoch + 1, n_epochs - epoch, seq_len, n_epochs - seq_len + 1)


def aggregate(posteriors: np.ndarray, additive: bool = False) -> tuple:
    """Fuses the posteriors covering one epoch into a single decision.

    Multiplicative fusion averages floored log posteriors and
    renormalizes (a normalized product); feeding k copies of one
    posterior returns that posterior unchanged, so repeated agreement
    does not artificially sharpen anything.  The additive variant is a
    plain mean.  Ties break toward the lowest class index.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError(f"expected [k, n_classes] posteriors, got shape {np.shape(posteriors)}")
    if additive:
        fused = p.mean(axis=0)
    else:
        log_mean = np.log(np.maximum(p, LOG_FLOOR)).mean(axis=0)
        fused = np.exp(log_mean - log_mean.max())
    fused = fused / fused.sum()
    return fused, int(np.argmax(fused))


@dataclass
class HypnogramPrediction:
    """Per-epoch fused posteriors and decisions for one recording."""

    posteriors: np.ndarray       # [n, n_classes]
    labels: np.ndarray           # [n]
    counts: np.ndarray           # [n] windows fused per epoch


def predict_recording(model: Model, inputs: np.ndarray, batch_size: int = 32,
                      additive: bool = False) -> HypnogramPrediction:
    """Scores every epoch of one recording with the hop-1 window ensemble.

    inputs: [n, ...] model-ready epochs of a single recording (already
    normalized where the model expects it).  A recording shorter than the
    model's window length is an error.
    """
    seq_len = model.config.L
    n = inputs.shape[0]
    if n < seq_len:
        raise ValueError(f"recording has {n} epochs but the model needs windows of {seq_len}")
    votes = [[] for _ in range(n)]
    starts = list(range(n - seq_len + 1))
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        x = np.stack([inputs[s:s + seq_len] for s in chunk])
        probs = model.forward(Tensor(x)).data
        for j, s in enumerate(chunk):
            for l in range(seq_len):
                votes[s + l].append(probs[j, l])
    posteriors = np.empty((n, N_CLASSES))
    labels = np.empty(n, dtype=np.int64)
    counts = np.empty(n, dtype=np.int64)
    for e in range(n):
        posteriors[e], labels[e] = aggregate(np.asarray(votes[e]), additive=additive)
        counts[e] = len(votes[e])
    return HypnogramPrediction(posteriors=posteriors, labels=labels, counts=counts)


def predict_feature_set(model: Model, fs: FeatureSet, batch_size: int = 32,
                        additive: bool = False) -> tuple:
    """Ensemble predictions over every recording in a feature set.

    Returns (true, predicted) label arrays over all epochs; recordings
    shorter than the model window are an error, matching the
    single-recording contract.
    """
    check_feature_set(model.config, fs)
    true_parts, pred_parts = [], []
    for a, b in fs.recording_slices():
        pred = predict_recording(model, fs.inputs[a:b], batch_size=batch_size,
                                 additive=additive)
        true_parts.append(fs.labels[a:b])
        pred_parts.append(pred.labels)
    if not true_parts:
        raise ValueError("feature set holds no recordings")
    return np.concatenate(true_parts), np.concatenate(pred_parts)


# ------------------------------------------------------------------ metrics

@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    kappa: float
    per_class_f1: np.ndarray     # [n_classes]
    confusion: np.ndarray        # [n_classes, n_classes], rows = true

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "per_class_f1": {STAGES[i]: float(v) for i, v in enumerate(self.per_class_f1)},
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(true: np.ndarray, pred: np.ndarray,
                     n_classes: int = N_CLASSES) -> np.ndarray:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError("true and predicted labels must be 1-D and equal length")
    if len(true) == 0:
        raise ValueError("cannot score an empty label set")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = float(np.trace(cm) / total)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    f1 = np.zeros(cm.shape[0])
    for k in range(cm.shape[0]):
        denom = support[k] + predicted[k]
        # Zero-support classes that are never predicted score 0 by convention.
        f1[k] = 0.0 if denom == 0 else 2.0 * tp[k] / denom
    p_o = accuracy
    p_e = float(np.sum(support * predicted) / (total * total))
    if 1.0 - p_e < 1e-15:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return EvalReport(accuracy=accuracy, macro_f1=float(f1.mean()), kappa=float(kappa),
                      per_class_f1=f1, confusion=cm)


def compute_metrics(true: np.ndarray, pred: np.ndarray,
                    n_classes: int = N_CLASSES) -> EvalReport:
    return metrics_from_confusion(confusion_matrix(true, pred, n_classes))


# ----------------------------------------------------------- cross-validation

@dataclass(frozen=True)
class FoldSpec:
    train_subjects: tuple
    val_subjects: tuple
    test_subjects: tuple

    def validate(self) -> "FoldSpec":
        parts = [set(self.train_subjects), set(self.val_subjects), set(self.test_subjects)]
        if not self.train_subjects or not self.test_subjects:
            raise ValueError("a fold needs train and test subjects")
        for i in range(3):
            for j in range(i + 1, 3):
                shared = parts[i] & parts[j]
                if shared:
                    raise ValueError(f"fold splits share subjects: {sorted(shared)}")
        return self


def make_folds(subjects, test_size: int = 1, n_val: int = 0, seed: int = 0) -> list:
    """Leave-test_size-out folds over a subject roster.

    test_size 1 gives leave-one-subject-out; 20 subjects -> 20 folds.
    22 subjects with test_size 2 -> 11 folds.  Validation subjects are
    drawn from the remaining pool with a seeded generator, so a fold list
    is reproducible from (roster, sizes, seed).
    """
    subjects = list(subjects)
    if len(set(subjects)) != len(subjects):
        raise ValueError("duplicate subjects in roster")
    if test_size < 1 or len(subjects) % test_size != 0:
        raise ValueError(f"{len(subjects)} subjects do not split into test groups of {test_size}")
    if n_val < 0 or n_val > len(subjects) - test_size - 1:
        raise ValueError(f"cannot reserve {n_val} validation subjects out of {len(subjects)}")
    rng = np.random.default_rng(seed)
    folds = []
    for i in range(0, len(subjects), test_size):
        test = tuple(subjects[i:i + test_size])
        pool = [s for s in subjects if s not in test]
        val_idx = rng.choice(len(pool), size=n_val, replace=False) if n_val else []
        val = tuple(pool[j] for j in sorted(val_idx))
        trainees = tuple(s for s in pool if s not in set(val))
        folds.append(FoldSpec(train_subjects=trainees, val_subjects=val,
                              test_subjects=test).validate())
    return folds


def check_fold_cover(folds, subjects) -> None:
    """Test sets must tile the roster: pairwise disjoint, union covers."""
    seen = []
    for f in folds:
        f.validate()
        seen.extend(f.test_subjects)
    if len(seen) != len(set(seen)):
        raise ValueError("fold test sets overlap")
    if set(seen) != set(subjects):
        raise ValueError("fold test sets do not cover the subject roster")


def cross_validate(folds, run_fold) -> tuple:
    """Pools per-fold test predictions into one report.

    run_fold(fold) -> (true, predicted) over that fold's test epochs.
    Pooled accuracy is total correct over total epochs, and the pooled
    confusion is the sum of fold confusions; per-fold reports ride along.
    """
    if not folds:
        raise ValueError("no folds to run")
    fold_reports = []
    pooled = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for fold in folds:
        true, pred = run_fold(fold)
        cm = confusion_matrix(true, pred)
        fold_reports.append(metrics_from_confusion(cm))
        pooled += cm
    return metrics_from_confusion(pooled), fold_reports


# ------------------------------------------------------------------- export

def write_predictions_csv(path: str, true: np.ndarray, pred: np.ndarray,
                          posteriors: np.ndarray) -> None:
    true = np.asarray(true)
    pred = np.asarray(pred)
    posteriors = np.asarray(posteriors)
    if not (len(true) == len(pred) == posteriors.shape[0]):
        raise ValueError("prediction export arrays must agree in length")
    header = ["epoch_index", "true", "predicted"] + [f"p_{s}" for s in STAGES]
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for i in range(len(true)):
            probs = ",".join(repr(float(v)) for v in posteriors[i])
            f.write(f"{i},{STAGES[true[i]]},{STAGES[pred[i]]},{probs}\n")
