"""Scoring whole nights: overlapped windows, vote fusion, and honest metrics.

A sequence model scores L epochs at a time, so sliding it one epoch per hop
gives most epochs L independent opinions.  This demo trains a small stager,
scores a held-out night, and unpacks how the votes are fused, how agreement
is measured, and how leave-one-subject-out evaluation pools its folds.
"""
import numpy as np

from sleeptransfer.features import SPECTROGRAM, build_feature_set, fit_normalization
from sleeptransfer.inference import (aggregate, check_fold_cover, compute_metrics,
                                     contribution_count, cross_validate, make_folds,
                                     predict_recording)
from sleeptransfer.models import build_model, seqsleepnet_config
from sleeptransfer.recordings import StageLabel
from sleeptransfer.synthdomain import DomainSpec, generate_domain
from sleeptransfer.training import TrainConfig, train
from sleeptransfer.transfer import normalized_for_model

STFT = {"win_len_s": 0.64, "hop_s": 5.0, "n_fft": 64}

recs = generate_domain(DomainSpec(name="night", n_subjects=4, epochs_per_subject=50,
                                  seed=31, persistence=0.85))
fs = build_feature_set(recs, SPECTROGRAM, ["EEG"], stft_params=STFT)
subjects = sorted(fs.subject_set())
train_fs = fs.for_subjects(subjects[:3], "train")
stats = fit_normalization(train_fs.inputs, "train")

cfg = seqsleepnet_config(L=3, n_channels=1, frame_count=6, n_bins=33, n_filters=8,
                         epb_hidden=8, attention_size=8, spb_hidden=8,
                         output_size=16, dropout=0.0)
model = build_model(cfg, rng=0)
train(model, normalized_for_model(train_fs, cfg, stats),
      TrainConfig(lr=3e-3, batch_size=16, max_steps=300, max_passes=60,
                  eval_every=10 ** 9, seed=0))

held_out = fs.for_subjects(subjects[3:], "test")
a, b = held_out.recording_slices()[0]
inputs = normalized_for_model(held_out, cfg, stats).inputs[a:b]
night = predict_recording(model, inputs)
n = len(night.labels)
print(f"scored a {n}-epoch night with L={cfg.L} windows at hop 1")
print("votes fused per epoch (ramps up, plateaus at L, ramps down):")
print("  " + " ".join(str(c) for c in night.counts[:6]) + " ... "
      + " ".join(str(c) for c in night.counts[-6:]))
expected = [contribution_count(e, n, cfg.L) for e in range(n)]
print(f"  matches the closed-form profile: {list(night.counts) == expected}")

print("\nfusion is a renormalized product of the votes' posteriors:")
votes = np.array([[0.60, 0.20, 0.10, 0.05, 0.05],
                  [0.50, 0.30, 0.10, 0.05, 0.05],
                  [0.10, 0.60, 0.20, 0.05, 0.05]])
fused, label = aggregate(votes)
rows = [f"    vote {i}: " + " ".join(f"{v:.2f}" for v in row)
        for i, row in enumerate(votes)]
print("\n".join(rows))
print("    fused : " + " ".join(f"{v:.2f}" for v in fused)
      + f"  -> {StageLabel(label).name}")
same, _ = aggregate(np.tile(fused, (5, 1)))
print(f"  five identical opinions change nothing: {np.allclose(same, fused)}")

true = held_out.labels[a:b]
report = compute_metrics(true, night.labels)
print(f"\nheld-out night: accuracy {report.accuracy:.3f}, "
      f"macro F1 {report.macro_f1:.3f}, kappa {report.kappa:.3f}")
print("confusion (rows true, cols predicted): W N1 N2 N3 REM")
for stage, row in zip(StageLabel, report.confusion):
    print(f"  {stage.name:>3} " + " ".join(f"{v:3d}" for v in row))

folds = make_folds(subjects, test_size=1, n_val=1, seed=0)
check_fold_cover(folds, subjects)
print(f"\nleave-one-subject-out over {len(subjects)} subjects -> {len(folds)} folds, "
      "every subject tested exactly once")


def run_fold(fold):
    te = fs.for_subjects(fold.test_subjects, "test")
    inp = normalized_for_model(te, cfg, stats).inputs
    return te.labels, predict_recording(model, inp).labels


pooled, per_fold = cross_validate(folds, run_fold)
print("per-fold accuracy: " + " ".join(f"{r.accuracy:.3f}" for r in per_fold))
print(f"pooled accuracy {pooled.accuracy:.3f} (epochs pooled before scoring, "
      "so long nights weigh more than short ones)")
print("note: one model scores every fold here to show the bookkeeping; a real "
      "protocol retrains per fold, exactly what the cli transfer/evaluate loop does")
