"""From an EDF file on disk to canonical, model-ready recordings.

Polysomnography arrives messy: varied sampling rates, two scoring standards,
20 s or 30 s scoring grids, movement epochs, and lights-on padding.  This demo
writes a tiny EDF, then walks it through every normalization the toolkit
applies before features are ever computed: token mapping, exclusion splits,
epoch-length conversion, in-bed trimming, and resampling to the 100 Hz grid.
"""
import os
import tempfile

import numpy as np

from sleeptransfer.features import RAW, build_feature_set
from sleeptransfer.recordings import (Channel, Recording, StageLabel, canonicalize,
                                      check_canonical, expand_epochs_20_to_30,
                                      map_stages, read_edf, resample_to_100hz,
                                      trim_to_in_bed)


def tiny_edf(samples: np.ndarray, rate: int) -> bytes:
    """Single-channel EDF bytes, unit gain, one record per second."""
    n_rec = len(samples) // rate
    pad = lambda v, w: str(v).encode().ljust(w)
    head = b"".join([pad(0, 8), pad("demo subject", 80), pad("demo night", 80),
                     pad("01.01.24", 8), pad("23.00.00", 8), pad(512, 8),
                     pad("", 44), pad(n_rec, 8), pad(1, 8), pad(1, 4)])
    sig = b"".join([pad("EEG", 16), pad("demo", 80), pad("uV", 8),
                    pad(-2048.0, 8), pad(2047.0, 8), pad(-2048, 8), pad(2047, 8),
                    pad("", 80), pad(rate, 8), pad("", 32)])
    data = np.round(samples).astype("<i2").tobytes()
    return head + sig + data


workdir = tempfile.mkdtemp(prefix="sleeptransfer_demo_")
rate = 128                                       # not the canonical rate on purpose
n_epochs, epoch_len = 12, 20.0                   # scored on the older 20 s grid
rng = np.random.default_rng(3)
path = os.path.join(workdir, "night.edf")
with open(path, "wb") as f:
    f.write(tiny_edf(rng.normal(scale=60.0, size=int(n_epochs * epoch_len * rate)), rate))
rec = read_edf(path)
print(f"read {path}: channel {rec.channels[0].name!r} at "
      f"{rec.channels[0].sample_rate_hz:.0f} Hz, "
      f"{len(rec.channels[0].samples)} samples")

# scored with 1968 rules: stage 4 folds into N3, MOVEMENT is unscorable
tokens = ["W", "W", "1", "2", "3", "MOVEMENT", "4", "R", "R", "W", "W", "W"]
labels, excluded = map_stages(tokens, "RK")
print(f"\nhypnogram {tokens}")
print("maps to    " + str([StageLabel(v).name for v in labels])
      + f" with epoch(s) {list(excluded)} excluded")

sidecar = {"hypnogram": tokens, "standard": "RK", "epoch_len_s": epoch_len,
           "lights_off_epoch": 1, "lights_on_epoch": 11}
runs = canonicalize(rec, sidecar)
print(f"\ncanonicalize with lights off at epoch 1, on at 11 -> {len(runs)} runs "
      "(the movement epoch splits the night; windows never bridge the gap)")
for r in runs:
    check_canonical(r)
    print(f"  {r.id}: {r.n_epochs} epochs of {r.epoch_len_s:.0f} s at "
          f"{r.channels[0].sample_rate_hz:.0f} Hz, stages "
          f"{[StageLabel(v).name for v in r.labels]}")

# the same conversions are exposed piecemeal for custom pipelines
demo = Recording("byhand", [Channel("EEG", np.arange(5 * 2000, dtype=np.float64), 100.0)],
                 labels=np.array([0, 1, 2, 3, 4]), epoch_len_s=20.0)
wide = expand_epochs_20_to_30(demo)
print(f"\n20 s -> 30 s by itself: {demo.n_epochs} epochs become {wide.n_epochs}, "
      "each new epoch borrowing 5 s from both neighbors (boundary epochs drop)")
trimmed = trim_to_in_bed(wide, 1, 3)
print(f"in-bed trim keeps epochs [1, 3): labels {trimmed.labels.tolist()}")
tone = Channel("EEG", np.sin(2 * np.pi * 8.0 * np.arange(6000) / 200.0), 200.0)
down = resample_to_100hz(tone)
print(f"resampling an 8 Hz tone from 200 Hz: {len(tone.samples)} -> "
      f"{len(down.samples)} samples, amplitude preserved to "
      f"{abs(np.sqrt(2 * np.mean(down.samples[300:-300] ** 2)) - 1.0):.1%}")

fs = build_feature_set(runs, RAW, ["EEG"])
print(f"\ncanonical runs featurize directly: raw inputs {fs.inputs.shape} "
      "(epochs x samples x channels), ready for the raw-signal model family")
