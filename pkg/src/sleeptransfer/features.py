"""Model input preparation: spectral images, normalization, feature caches.

Raw-signal models consume 30 s epochs directly; spectral models consume
log-power short-time Fourier images.  Both paths go through a FeatureSet,
a flat per-epoch array store that keeps subject and recording identity
alongside the inputs so splits and sequence sampling stay honest.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _blobs

POWER_FLOOR = 1e-12
STD_FLOOR = 1e-6

SPECTROGRAM = "spectrogram"
RAW = "raw"


@dataclass
class EpochImage:
    """Log-power time-frequency image for one epoch, shaped [T, F, C]."""

    data: np.ndarray
    win_len_s: float
    hop_s: float

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


def stft_frame_count(n_samples: int, sample_rate: float, win_len_s: float = 2.0,
                     hop_s: float = 1.0) -> int:
    win = int(round(win_len_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if n_samples < win:
        raise ValueError(f"signal of {n_samples} samples is shorter than one {win}-sample window")
    return (n_samples - win) // hop + 1


def stft_log_power(samples: np.ndarray, sample_rate: float = 100.0,
                   win_len_s: float = 2.0, hop_s: float = 1.0,
                   n_fft: int = 256) -> EpochImage:
    """Hamming-windowed log power spectrogram of one epoch.

    samples: [n] or [n, C].  Output image is [T, F, C] with
    T = (n - win) // hop + 1 and F = n_fft // 2 + 1.  Power is floored at
    1e-12 before the log so silent channels stay finite.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected [n] or [n, channels] samples, got shape {x.shape}")
    win = int(round(win_len_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if win < 2:
        raise ValueError("analysis window must cover at least 2 samples")
    if n_fft < win:
        raise ValueError(f"n_fft={n_fft} is smaller than the {win}-sample analysis window")
    n = x.shape[0]
    n_frames = stft_frame_count(n, sample_rate, win_len_s, hop_s)
    window = np.hamming(win)
    # [T, win, C]: explicit frame slicing, one rfft per batch of frames.
    frames = np.stack([x[t * hop:t * hop + win] for t in range(n_frames)])
    spec = np.fft.rfft(frames * window[None, :, None], n=n_fft, axis=1)
    power = np.maximum(spec.real ** 2 + spec.imag ** 2, POWER_FLOOR)
    return EpochImage(data=np.log(power), win_len_s=win_len_s, hop_s=hop_s)


def stack_channels(per_channel: list) -> np.ndarray:
    """Stacks per-channel arrays along a new trailing axis.

    Caller fixes the channel order (EEG before EOG before EMG by
    convention); all inputs must share a shape.
    """
    if not per_channel:
        raise ValueError("no channels to stack")
    arrays = [np.asarray(a) for a in per_channel]
    shape = arrays[0].shape
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape != shape:
            raise ValueError(f"channel 0 has shape {shape} but channel {i} has shape {a.shape}")
    return np.stack(arrays, axis=-1)


@dataclass
class NormalizationStats:
    """Per-(frequency bin, channel) mean and standard deviation.

    Fit over every frame of every training image; the split tag is part of
    the fitting contract so statistics can never silently come from
    validation or test data.
    """

    mean: np.ndarray  # [F, C]
    std: np.ndarray   # [F, C]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   std=np.asarray(d["std"], dtype=np.float64))


def fit_normalization(images: np.ndarray, split_tag: str) -> NormalizationStats:
    """Fits frame-pooled mean/std over a stack of images [N, T, F, C].

    Refuses any split tag other than "train": normalizing with statistics
    from evaluation data is the classic leak this guard exists to stop.
    """
    if split_tag != "train":
        raise ValueError(f"normalization statistics must be fit on the train split, got tag {split_tag!r}")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected images shaped [N, T, F, C], got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 images to fit normalization statistics")
    mean = x.mean(axis=(0, 1))
    std = x.std(axis=(0, 1))
    return NormalizationStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def apply_normalization(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    x = np.asarray(images)
    if x.shape[-2:] != stats.mean.shape:
        raise ValueError(f"images with bins/channels {x.shape[-2:]} do not match "
                         f"statistics of shape {stats.mean.shape}")
    return (x - stats.mean) / stats.std


def invert_normalization(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    x = np.asarray(images)
    if x.shape[-2:] != stats.mean.shape:
        raise ValueError(f"images with bins/channels {x.shape[-2:]} do not match "
                         f"statistics of shape {stats.mean.shape}")
    return x * stats.std + stats.mean


@dataclass
class FeatureSet:
    """Per-epoch model inputs with provenance.

    inputs: [N, T, F, C] log-power images (kind "spectrogram") or
            [N, n_samples, C] raw signal (kind "raw"), float32.
    labels: [N] int64 stage indices.
    subject_index / recording_index: [N] int64, indexing into `subjects`
    and a flat recording counter.  Epochs of one recording are stored
    contiguously and in temporal order; sequence sampling depends on it.
    """

    kind: str
    inputs: np.ndarray
    labels: np.ndarray
    subject_index: np.ndarray
    recording_index: np.ndarray
    subjects: tuple
    channel_names: tuple
    split_tag: str = "all"
    epoch_len_s: float = 30.0
    stft: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.inputs.shape[0]
        if not (len(self.labels) == len(self.subject_index) == len(self.recording_index) == n):
            raise ValueError("inputs, labels, and index arrays must agree in length")
        if self.kind not in (SPECTROGRAM, RAW):
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @property
    def n_epochs(self) -> int:
        return self.inputs.shape[0]

    def subject_of(self, epoch: int) -> str:
        return self.subjects[self.subject_index[epoch]]

    def subject_set(self) -> set:
        return {self.subjects[i] for i in np.unique(self.subject_index)}

    def recording_slices(self) -> list:
        """Contiguous [start, stop) ranges, one per recording, in order."""
        if self.n_epochs == 0:
            return []
        idx = self.recording_index
        bounds = np.flatnonzero(np.diff(idx)) + 1
        starts = np.concatenate([[0], bounds])
        stops = np.concatenate([bounds, [len(idx)]])
        return [(int(a), int(b)) for a, b in zip(starts, stops)]

    def for_subjects(self, subjects, split_tag: str | None = None) -> "FeatureSet":
        """Row subset containing exactly the named subjects, order preserved."""
        wanted = set(subjects)
        unknown = wanted - set(self.subjects)
        if unknown:
            raise ValueError(f"unknown subjects: {sorted(unknown)}")
        keep_ids = {i for i, s in enumerate(self.subjects) if s in wanted}
        mask = np.isin(self.subject_index, sorted(keep_ids))
        return FeatureSet(
            kind=self.kind,
            inputs=self.inputs[mask],
            labels=self.labels[mask],
            subject_index=self.subject_index[mask],
            recording_index=self.recording_index[mask],
            subjects=self.subjects,
            channel_names=self.channel_names,
            split_tag=self.split_tag if split_tag is None else split_tag,
            epoch_len_s=self.epoch_len_s,
            stft=dict(self.stft),
        )

    def with_inputs(self, inputs: np.ndarray) -> "FeatureSet":
        out = FeatureSet(kind=self.kind, inputs=inputs, labels=self.labels,
                         subject_index=self.subject_index,
                         recording_index=self.recording_index,
                         subjects=self.subjects, channel_names=self.channel_names,
                         split_tag=self.split_tag, epoch_len_s=self.epoch_len_s,
                         stft=dict(self.stft))
        return out


DEFAULT_STFT = {"win_len_s": 2.0, "hop_s": 1.0, "n_fft": 256}


def build_feature_set(recs, kind: str, channels, split_tag: str = "all",
                      stft_params: dict | None = None) -> FeatureSet:
    """Turns canonical recordings into model-ready per-epoch inputs.

    channels fixes both the subset and the order of channels taken from
    every recording; a recording missing one of them is an error.
    """
    from .recordings import SAMPLES_PER_EPOCH, check_canonical

    if not recs:
        raise ValueError("no recordings to featurize")
    channels = tuple(channels)
    params = dict(DEFAULT_STFT, **(stft_params or {}))
    subjects = []
    inputs, labels, subj_idx, rec_idx = [], [], [], []
    for r, rec in enumerate(recs):
        check_canonical(rec)
        missing = set(channels) - set(rec.channel_names())
        if missing:
            raise ValueError(f"recording {rec.id!r} lacks channels {sorted(missing)}")
        if rec.subject_id not in subjects:
            subjects.append(rec.subject_id)
        by_name = {c.name: c for c in rec.channels}
        per_epoch = []
        for e in range(rec.n_epochs):
            lo, hi = e * SAMPLES_PER_EPOCH, (e + 1) * SAMPLES_PER_EPOCH
            if kind == SPECTROGRAM:
                imgs = [stft_log_power(by_name[name].samples[lo:hi], **params).data[:, :, 0]
                        for name in channels]
            elif kind == RAW:
                imgs = [by_name[name].samples[lo:hi] for name in channels]
            else:
                raise ValueError(f"unknown feature kind {kind!r}")
            per_epoch.append(stack_channels(imgs))
        inputs.append(np.stack(per_epoch))
        labels.append(rec.labels)
        subj_idx.append(np.full(rec.n_epochs, subjects.index(rec.subject_id)))
        rec_idx.append(np.full(rec.n_epochs, r))
    return FeatureSet(
        kind=kind,
        inputs=np.concatenate(inputs).astype(np.float32),
        labels=np.concatenate(labels).astype(np.int64),
        subject_index=np.concatenate(subj_idx).astype(np.int64),
        recording_index=np.concatenate(rec_idx).astype(np.int64),
        subjects=tuple(subjects),
        channel_names=channels,
        split_tag=split_tag,
        stft=params if kind == SPECTROGRAM else {},
    )


def save_feature_set(fs: FeatureSet, path: str) -> None:
    meta = {
        "kind": fs.kind,
        "subjects": list(fs.subjects),
        "channel_names": list(fs.channel_names),
        "split_tag": fs.split_tag,
        "epoch_len_s": fs.epoch_len_s,
        "stft": fs.stft,
    }
    _blobs.save_arrays(path, {
        "inputs": fs.inputs.astype(np.float32),
        "labels": fs.labels.astype(np.int64),
        "subject_index": fs.subject_index.astype(np.int64),
        "recording_index": fs.recording_index.astype(np.int64),
    }, meta)


def load_feature_set(path: str) -> FeatureSet:
    meta, arrays = _blobs.load_arrays(path)
    return FeatureSet(
        kind=meta["kind"],
        inputs=arrays["inputs"],
        labels=arrays["labels"],
        subject_index=arrays["subject_index"],
        recording_index=arrays["recording_index"],
        subjects=tuple(meta["subjects"]),
        channel_names=tuple(meta["channel_names"]),
        split_tag=meta["split_tag"],
        epoch_len_s=meta["epoch_len_s"],
        stft=meta["stft"],
    )
