"""Polysomnography ingestion and canonicalization.

Everything downstream consumes one canonical form: labeled recordings at
100 Hz whose per-channel sample count is exactly n_epochs * 3000 with 30 s
epochs.  This module gets raw EDF signals and scored hypnograms into that
form: stage-token mapping (both scoring standards), movement/unknown
exclusion with recording splits at the gaps, lights-off/on trimming, the
20 s -> 30 s epoch expansion, and polyphase resampling.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly

from . import _blobs

STAGES = ("W", "N1", "N2", "N3", "REM")
N_CLASSES = 5
CANONICAL_RATE_HZ = 100.0
CANONICAL_EPOCH_LEN_S = 30.0
SAMPLES_PER_EPOCH = 3000


class StageLabel(IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    def one_hot(self) -> np.ndarray:
        v = np.zeros(N_CLASSES)
        v[self.value] = 1.0
        return v


# Rechtschaffen & Kales scoring: numeric stages, with stage 4 merged into N3.
RK_TOKEN_MAP = {
    "W": StageLabel.W, "1": StageLabel.N1, "2": StageLabel.N2,
    "3": StageLabel.N3, "4": StageLabel.N3,
    "N1": StageLabel.N1, "N2": StageLabel.N2, "N3": StageLabel.N3,
    "N4": StageLabel.N3, "R": StageLabel.REM, "REM": StageLabel.REM,
}
AASM_TOKEN_MAP = {
    "W": StageLabel.W, "N1": StageLabel.N1, "N2": StageLabel.N2,
    "N3": StageLabel.N3, "R": StageLabel.REM, "REM": StageLabel.REM,
}
EXCLUDED_TOKENS = ("MOVEMENT", "UNKNOWN")
STANDARDS = ("AASM", "RK")


@dataclass
class Channel:
    name: str
    samples: np.ndarray       # 1-D float
    sample_rate_hz: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"channel {self.name!r} samples must be 1-D")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"channel {self.name!r} has non-positive sample rate")


@dataclass
class Recording:
    id: str
    channels: list
    labels: np.ndarray | None = None
    epoch_len_s: float = CANONICAL_EPOCH_LEN_S
    subject: str | None = None

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def subject_id(self) -> str:
        return self.subject if self.subject is not None else self.id

    @property
    def n_epochs(self) -> int:
        if self.labels is None:
            raise ValueError(f"recording {self.id!r} has no labels")
        return len(self.labels)

    def channel_names(self) -> tuple:
        return tuple(c.name for c in self.channels)

    def epoch_capacity(self) -> int:
        """Whole epochs the shortest channel can hold."""
        caps = []
        for c in self.channels:
            spe = samples_per_epoch(c.sample_rate_hz, self.epoch_len_s)
            caps.append(len(c.samples) // spe)
        if not caps:
            raise ValueError(f"recording {self.id!r} has no channels")
        return min(caps)

    def signal_matrix(self) -> np.ndarray:
        """[n_samples, C] view of a uniform-rate recording."""
        lengths = {len(c.samples) for c in self.channels}
        rates = {c.sample_rate_hz for c in self.channels}
        if len(lengths) != 1 or len(rates) != 1:
            raise ValueError(f"recording {self.id!r} channels differ in rate or length")
        return np.stack([c.samples for c in self.channels], axis=1)


def samples_per_epoch(rate_hz: float, epoch_len_s: float) -> int:
    spe = rate_hz * epoch_len_s
    if abs(spe - round(spe)) > 1e-9:
        raise ValueError(f"{epoch_len_s} s epochs do not hold a whole number of samples at {rate_hz} Hz")
    return int(round(spe))


# ---------------------------------------------------------------- EDF input

def _header_int(raw: bytes, name: str) -> int:
    text = raw.decode("ascii", errors="replace").strip()
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"malformed EDF header field {name!r}: {text!r}") from None


def _header_float(raw: bytes, name: str) -> float:
    text = raw.decode("ascii", errors="replace").strip()
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"malformed EDF header field {name!r}: {text!r}") from None


def parse_edf(data: bytes, rec_id: str = "") -> Recording:
    """Parses a plain EDF byte string into an unlabeled Recording.

    Digital values are mapped to physical units by the per-signal linear
    calibration; equal physical or digital min/max is a hard error rather
    than a silent flat channel.
    """
    if len(data) < 256:
        raise ValueError("EDF header truncated: fewer than 256 bytes")
    n_records = _header_int(data[236:244], "number of data records")
    record_len_s = _header_float(data[244:252], "data record duration")
    n_signals = _header_int(data[252:256], "number of signals")
    if n_records < 0:
        raise ValueError(f"malformed EDF header field 'number of data records': {n_records}")
    if n_signals <= 0:
        raise ValueError(f"malformed EDF header field 'number of signals': {n_signals}")
    if record_len_s <= 0:
        raise ValueError(f"malformed EDF header field 'data record duration': {record_len_s}")

    header_len = 256 + 256 * n_signals
    if len(data) < header_len:
        raise ValueError("EDF signal header truncated")

    def field_block(offset: int, width: int, idx: int) -> bytes:
        start = 256 + offset * n_signals + width * idx
        return data[start:start + width]

    labels, phys_min, phys_max, dig_min, dig_max, spr = [], [], [], [], [], []
    for i in range(n_signals):
        labels.append(field_block(0, 16, i).decode("ascii", errors="replace").strip())
        phys_min.append(_header_float(field_block(16 + 80 + 8, 8, i), f"physical minimum of signal {i}"))
        phys_max.append(_header_float(field_block(16 + 80 + 16, 8, i), f"physical maximum of signal {i}"))
        dig_min.append(_header_int(field_block(16 + 80 + 24, 8, i), f"digital minimum of signal {i}"))
        dig_max.append(_header_int(field_block(16 + 80 + 32, 8, i), f"digital maximum of signal {i}"))
        spr.append(_header_int(field_block(16 + 80 + 40 + 80, 8, i), f"samples per record of signal {i}"))
        if spr[-1] <= 0:
            raise ValueError(f"malformed EDF header field 'samples per record of signal {i}': {spr[-1]}")

    record_samples = sum(spr)
    expected = header_len + n_records * record_samples * 2
    if len(data) < expected:
        raise ValueError(f"EDF data truncated: expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise ValueError(f"EDF has {len(data) - expected} trailing bytes beyond the declared records")

    raw = np.frombuffer(data, dtype="<i2", offset=header_len)
    raw = raw.reshape(n_records, record_samples)
    channels = []
    col = 0
    for i in range(n_signals):
        if phys_min[i] == phys_max[i]:
            raise ValueError(f"signal {labels[i]!r} has equal physical minimum and maximum; "
                             "calibration is undefined")
        if dig_min[i] == dig_max[i]:
            raise ValueError(f"signal {labels[i]!r} has equal digital minimum and maximum; "
                             "calibration is undefined")
        digital = raw[:, col:col + spr[i]].reshape(-1).astype(np.float64)
        col += spr[i]
        gain = (phys_max[i] - phys_min[i]) / (dig_max[i] - dig_min[i])
        physical = (digital - dig_min[i]) * gain + phys_min[i]
        channels.append(Channel(name=labels[i], samples=physical,
                                sample_rate_hz=spr[i] / record_len_s))
    return Recording(id=rec_id, channels=channels, labels=None)


def read_edf(path: str, rec_id: str | None = None) -> Recording:
    with open(path, "rb") as f:
        data = f.read()
    if rec_id is None:
        rec_id = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return parse_edf(data, rec_id)


# ------------------------------------------------------------- stage labels

def parse_hypnogram(text: str, standard: str) -> list:
    """Whitespace-separated stage tokens, one per scored epoch."""
    if standard not in STANDARDS:
        raise ValueError(f"unknown scoring standard {standard!r}; expected one of {STANDARDS}")
    tokens = text.split()
    if not tokens:
        raise ValueError("hypnogram contains no stage tokens")
    return tokens


def map_stages(tokens: list, standard: str) -> tuple:
    """Maps stage tokens to labels, collecting excluded epoch indices.

    Returns (labels, excluded): labels are the kept epochs' stage indices
    in order, excluded the original-grid indices of MOVEMENT/UNKNOWN
    epochs so that matching signal segments can be dropped in lockstep.
    """
    if standard not in STANDARDS:
        raise ValueError(f"unknown scoring standard {standard!r}; expected one of {STANDARDS}")
    table = RK_TOKEN_MAP if standard == "RK" else AASM_TOKEN_MAP
    labels = []
    excluded = []
    for i, tok in enumerate(tokens):
        if tok in EXCLUDED_TOKENS:
            excluded.append(i)
        elif tok in table:
            labels.append(int(table[tok]))
        else:
            raise ValueError(f"unrecognized stage token {tok!r} at epoch {i} "
                             f"under the {standard} standard")
    return np.asarray(labels, dtype=np.int64), excluded


def _slice_epochs(rec: Recording, start: int, stop: int) -> Recording:
    channels = []
    for c in rec.channels:
        spe = samples_per_epoch(c.sample_rate_hz, rec.epoch_len_s)
        channels.append(Channel(c.name, c.samples[start * spe:stop * spe], c.sample_rate_hz))
    labels = None if rec.labels is None else rec.labels[start:stop]
    return replace(rec, channels=channels, labels=labels)


def trim_to_in_bed(rec: Recording, lights_off_epoch: int | None,
                   lights_on_epoch: int | None, n_epochs: int | None = None) -> Recording:
    """Keeps the in-bed epoch range [lights_off, lights_on).

    Either marker may be None (no trim on that side).  Markers index the
    recording's current epoch grid.
    """
    if n_epochs is None:
        n_epochs = rec.n_epochs if rec.labels is not None else rec.epoch_capacity()
    off = 0 if lights_off_epoch is None else lights_off_epoch
    on = n_epochs if lights_on_epoch is None else lights_on_epoch
    if not (0 <= off < on <= n_epochs):
        raise ValueError(f"lights markers [{off}, {on}) out of range for {n_epochs} epochs")
    return _slice_epochs(rec, off, on)


def apply_hypnogram(rec: Recording, tokens: list, standard: str) -> list:
    """Labels a recording, dropping excluded epochs and splitting at gaps.

    MOVEMENT/UNKNOWN epochs are removed together with their signal
    segments; each remaining contiguous run becomes its own Recording so
    no sequence ever spans a discontinuity.
    """
    capacity = rec.epoch_capacity()
    if len(tokens) > capacity:
        raise ValueError(f"hypnogram has {len(tokens)} epochs but the signal holds only {capacity}")
    label_by_index = {}
    labels, excluded = map_stages(tokens, standard)
    kept = [i for i in range(len(tokens)) if i not in set(excluded)]
    for idx, lab in zip(kept, labels):
        label_by_index[idx] = lab

    runs = []
    run = []
    for i in range(len(tokens)):
        if i in label_by_index:
            run.append(i)
        elif run:
            runs.append(run)
            run = []
    if run:
        runs.append(run)
    if not runs:
        raise ValueError(f"recording {rec.id!r} has no scoreable epochs")

    out = []
    for k, epoch_ids in enumerate(runs):
        piece = _slice_epochs(rec, epoch_ids[0], epoch_ids[-1] + 1)
        piece.labels = np.asarray([label_by_index[i] for i in epoch_ids], dtype=np.int64)
        if len(runs) > 1:
            piece = replace(piece, id=f"{rec.id}-r{k}",
                            subject=rec.subject_id, labels=piece.labels)
        out.append(piece)
    return out


def expand_epochs_20_to_30(rec: Recording) -> Recording:
    """Re-grids 20 s epochs onto 30 s windows: epoch k keeps its label and
    takes the signal [20k - 5 s, 20k + 25 s).

    The first and last epochs lack the needed context and are dropped, so
    n epochs become n - 2.  Adjacent output epochs share 10 s of source
    signal; that duplication is inherent to the re-gridding.
    """
    if rec.epoch_len_s != 20.0:
        raise ValueError(f"expansion applies to 20 s epochs, got {rec.epoch_len_s} s")
    n = rec.n_epochs if rec.labels is not None else rec.epoch_capacity()
    if n < 3:
        raise ValueError(f"recording {rec.id!r} has {n} epochs; expansion needs at least 3")
    channels = []
    for c in rec.channels:
        spe20 = samples_per_epoch(c.sample_rate_hz, 20.0)
        spe5 = samples_per_epoch(c.sample_rate_hz, 5.0)
        segments = [c.samples[k * spe20 - spe5:k * spe20 + spe20 + spe5]
                    for k in range(1, n - 1)]
        channels.append(Channel(c.name, np.concatenate(segments), c.sample_rate_hz))
    labels = None if rec.labels is None else rec.labels[1:n - 1]
    return replace(rec, channels=channels, labels=labels, epoch_len_s=30.0)


# --------------------------------------------------------------- resampling

def resample_to_100hz(channel: Channel) -> Channel:
    """Polyphase resampling to 100 Hz with a Kaiser(8.0) anti-alias window."""
    rate = channel.sample_rate_hz
    if rate == CANONICAL_RATE_HZ:
        return Channel(channel.name, channel.samples.copy(), CANONICAL_RATE_HZ)
    ratio = Fraction(CANONICAL_RATE_HZ / rate).limit_denominator(10000)
    up, down = ratio.numerator, ratio.denominator
    out = resample_poly(channel.samples, up, down, window=("kaiser", 8.0))
    return Channel(channel.name, out, CANONICAL_RATE_HZ)


def resample_recording(rec: Recording) -> Recording:
    return replace(rec, channels=[resample_to_100hz(c) for c in rec.channels])


# ------------------------------------------------------------ canonical form

def check_canonical(rec: Recording) -> Recording:
    """Asserts the canonical invariant and returns the recording."""
    if rec.labels is None:
        raise ValueError(f"recording {rec.id!r} is not canonical: no labels")
    if rec.epoch_len_s != CANONICAL_EPOCH_LEN_S:
        raise ValueError(f"recording {rec.id!r} is not canonical: {rec.epoch_len_s} s epochs")
    if np.any(rec.labels < 0) or np.any(rec.labels >= N_CLASSES):
        raise ValueError(f"recording {rec.id!r} has stage labels outside 0..4")
    expected = rec.n_epochs * SAMPLES_PER_EPOCH
    for c in rec.channels:
        if c.sample_rate_hz != CANONICAL_RATE_HZ:
            raise ValueError(f"recording {rec.id!r} channel {c.name!r} is at "
                             f"{c.sample_rate_hz} Hz, not {CANONICAL_RATE_HZ}")
        if len(c.samples) != expected:
            raise ValueError(f"recording {rec.id!r} channel {c.name!r} has {len(c.samples)} "
                             f"samples; canonical form needs {expected}")
    return rec


def canonicalize(rec: Recording, sidecar: dict) -> list:
    """Full pipeline from a raw recording plus its label sidecar.

    Sidecar keys: hypnogram (token list or whitespace-separated string),
    standard ("AASM" | "RK"), epoch_len_s, and optional lights_off_epoch /
    lights_on_epoch.  Returns one canonical Recording per contiguous run.
    """
    standard = sidecar["standard"]
    epoch_len = float(sidecar.get("epoch_len_s", CANONICAL_EPOCH_LEN_S))
    hyp = sidecar["hypnogram"]
    tokens = parse_hypnogram(hyp, standard) if isinstance(hyp, str) else list(hyp)
    if not tokens:
        raise ValueError("hypnogram contains no stage tokens")
    rec = replace(rec, epoch_len_s=epoch_len)

    capacity = rec.epoch_capacity()
    if len(tokens) > capacity:
        raise ValueError(f"hypnogram has {len(tokens)} epochs but the signal holds only {capacity}")
    rec = _slice_epochs(rec, 0, len(tokens))

    off = sidecar.get("lights_off_epoch")
    on = sidecar.get("lights_on_epoch")
    if off is not None or on is not None:
        rec = trim_to_in_bed(rec, off, on, n_epochs=len(tokens))
        tokens = tokens[0 if off is None else off:len(tokens) if on is None else on]

    if epoch_len == 20.0:
        rec = expand_epochs_20_to_30(rec)
        tokens = tokens[1:-1]
    elif epoch_len != CANONICAL_EPOCH_LEN_S:
        raise ValueError(f"unsupported epoch length {epoch_len} s; expected 20 or 30")

    runs = apply_hypnogram(rec, tokens, standard)
    return [check_canonical(resample_recording(r)) for r in runs]


# ------------------------------------------------------------------ sampling

@dataclass
class EpochSequence:
    """A window of L consecutive epochs from one recording."""

    data: np.ndarray      # [L, 3000, C]
    labels: np.ndarray    # [L]
    start: int            # index of the first epoch within the recording
    recording_id: str


def sample_sequences(rec: Recording, seq_len: int, hop: int = 1) -> list:
    """All length-L epoch windows at the given hop.

    Yields floor((n - L) / hop) + 1 sequences; a recording shorter than L
    epochs yields none.
    """
    if seq_len < 1 or hop < 1:
        raise ValueError("sequence length and hop must be positive")
    check_canonical(rec)
    n = rec.n_epochs
    if n < seq_len:
        return []
    matrix = rec.signal_matrix()
    out = []
    for s in range(0, n - seq_len + 1, hop):
        data = matrix[s * SAMPLES_PER_EPOCH:(s + seq_len) * SAMPLES_PER_EPOCH]
        out.append(EpochSequence(
            data=data.reshape(seq_len, SAMPLES_PER_EPOCH, -1),
            labels=rec.labels[s:s + seq_len],
            start=s,
            recording_id=rec.id,
        ))
    return out


# --------------------------------------------------------------- disk cache

def save_recordings(path: str, recs: list) -> None:
    """Canonical recording cache: one flat blob plus a JSON manifest."""
    arrays = {}
    meta_recs = []
    for i, rec in enumerate(recs):
        check_canonical(rec)
        arrays[f"rec{i}.signal"] = rec.signal_matrix().astype(np.float32)
        arrays[f"rec{i}.labels"] = rec.labels.astype(np.int64)
        meta_recs.append({
            "id": rec.id,
            "subject": rec.subject_id,
            "channel_names": list(rec.channel_names()),
            "epoch_len_s": rec.epoch_len_s,
        })
    _blobs.save_arrays(path, arrays, {"kind": "recordings", "recordings": meta_recs})


def load_recordings(path: str) -> list:
    meta, arrays = _blobs.load_arrays(path)
    if meta.get("kind") != "recordings":
        raise ValueError(f"{path} is not a recording cache")
    out = []
    for i, m in enumerate(meta["recordings"]):
        signal = arrays[f"rec{i}.signal"].astype(np.float64)
        channels = [Channel(name, signal[:, c], CANONICAL_RATE_HZ)
                    for c, name in enumerate(m["channel_names"])]
        out.append(check_canonical(Recording(
            id=m["id"], channels=channels, labels=arrays[f"rec{i}.labels"],
            epoch_len_s=m["epoch_len_s"], subject=m["subject"],
        )))
    return out
