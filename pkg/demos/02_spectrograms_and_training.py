"""From raw epochs to a trained sequence-to-sequence stager.

Featurizes a synthetic cohort into log-power spectrogram images, fits
normalization statistics on the training subjects only, builds the
filterbank + attention biGRU network, and trains it with held-out-subject
validation.  Watch the validation accuracy climb past the 20% chance floor.
"""
from sleeptransfer.features import SPECTROGRAM, build_feature_set, fit_normalization
from sleeptransfer.models import build_model, seqsleepnet_config
from sleeptransfer.synthdomain import DomainSpec, generate_domain
from sleeptransfer.training import TrainConfig, evaluate_accuracy, sequence_starts, train
from sleeptransfer.transfer import normalized_for_model

STFT = {"win_len_s": 0.64, "hop_s": 5.0, "n_fft": 64}   # quick desk-scale frames

recs = generate_domain(DomainSpec(name="lab", n_subjects=6, epochs_per_subject=60,
                                  seed=11, persistence=0.85))
fs = build_feature_set(recs, SPECTROGRAM, ["EEG"], stft_params=STFT)
n, t, f, c = fs.inputs.shape
print(f"featurized {len(recs)} recordings into {n} epoch images of "
      f"[{t} frames x {f} bins x {c} channel] log power")

subjects = sorted(fs.subject_set())
train_fs = fs.for_subjects(subjects[:4], "train")
val_fs = fs.for_subjects(subjects[4:], "val")
print(f"subject-disjoint split: train={subjects[:4]} val={subjects[4:]}")

# statistics come from the training subjects alone and travel with the model
stats = fit_normalization(train_fs.inputs, "train")
print(f"normalization stats per (bin, channel): mean grid {stats.mean.shape}, "
      f"global input std {float(train_fs.inputs.std()):.2f} -> 1.0 after scaling")

cfg = seqsleepnet_config(L=3, n_channels=1, frame_count=t, n_bins=f, n_filters=8,
                         epb_hidden=8, attention_size=8, spb_hidden=8,
                         output_size=16, dropout=0.1)
model = build_model(cfg, rng=0)
by_group = {}
for name, p in model.store.params():
    by_group[p.group] = by_group.get(p.group, 0) + p.tensor.data.size
print("parameters by group: " + ", ".join(f"{g}={n}" for g, n in sorted(by_group.items())))
print(f"{len(sequence_starts(train_fs, cfg.L))} training windows of L={cfg.L} epochs")

result = train(model,
               normalized_for_model(train_fs, cfg, stats),
               TrainConfig(lr=3e-3, batch_size=16, max_steps=400, max_passes=50,
                           eval_every=50, early_stop_patience=6, seed=0),
               val_set=normalized_for_model(val_fs, cfg, stats))

print(f"\ntrained {result.steps} steps; best validation accuracy "
      f"{result.best_val_accuracy:.3f} at step {result.best_step}"
      + (" (stopped early)" if result.stopped_early else ""))
print("validation curve:")
for step, split, metric, value in result.curve:
    if split == "val" and metric == "accuracy":
        print(f"  step {step:>4}  {value:.3f}  {'#' * int(round(40 * value))}")

final = evaluate_accuracy(model, normalized_for_model(val_fs, cfg, stats))
print(f"\nmodel left at its best-validation snapshot: held-out accuracy {final:.3f} "
      f"vs 0.2 chance")
