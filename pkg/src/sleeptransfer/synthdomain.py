"""Synthetic sleep domains with controllable acquisition mismatch.

Each domain draws stage sequences from a sticky Markov chain and renders
every epoch as filtered noise whose spectral envelope depends on the
stage.  Band templates are chosen for class separability, with only loose
physiological plausibility (slow-wave power in N3, mixed bands in W).
A device model (gain, spectral tilt, additive sensor noise) sits between
the "biology" and the recorded signal, so a ladder of increasingly
mismatched targets can be built from one base domain.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .recordings import (
    CANONICAL_RATE_HZ,
    N_CLASSES,
    SAMPLES_PER_EPOCH,
    Channel,
    Recording,
    check_canonical,
)

# Band edges in Hz; templates give relative power per band and class.
BAND_EDGES_HZ = (0.5, 4.0, 8.0, 13.0, 20.0, 50.0)

DEFAULT_TEMPLATES = (
    # delta theta alpha sigma beta
    (0.6, 1.0, 2.6, 1.4, 1.0),   # W: alpha-dominant, busy high end
    (1.0, 2.2, 1.0, 0.5, 0.35),  # N1: theta rises, alpha fades
    (1.6, 1.4, 0.7, 1.9, 0.2),   # N2: sigma-band activity stands out
    (4.5, 1.1, 0.4, 0.3, 0.1),   # N3: slow waves dominate
    (1.0, 2.4, 0.8, 0.7, 0.55),  # REM: theta-heavy, low sigma
)

DEFAULT_PRIORS = (0.18, 0.12, 0.38, 0.17, 0.15)


@dataclass(frozen=True)
class DomainSpec:
    """Everything needed to regenerate a domain bit for bit."""

    name: str
    n_subjects: int
    epochs_per_subject: int
    seed: int
    class_priors: tuple = DEFAULT_PRIORS
    templates: tuple = DEFAULT_TEMPLATES
    persistence: float = 0.85
    channel_names: tuple = ("EEG",)
    channel_gains: tuple | None = None
    gain: float = 1.0
    tilt_db: float = 0.0
    noise_level: float = 0.0

    def validate(self) -> "DomainSpec":
        if self.n_subjects < 1 or self.epochs_per_subject < 1:
            raise ValueError("domain needs at least one subject and one epoch")
        p = np.asarray(self.class_priors, dtype=np.float64)
        if p.shape != (N_CLASSES,):
            raise ValueError(f"class priors must have {N_CLASSES} entries")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
            raise ValueError(f"degenerate class priors {self.class_priors}: "
                             "must be non-negative and sum to 1")
        if len(self.templates) != N_CLASSES:
            raise ValueError(f"need one band template per class, got {len(self.templates)}")
        n_bands = len(BAND_EDGES_HZ) - 1
        for i, t in enumerate(self.templates):
            if len(t) != n_bands or any(v <= 0 for v in t):
                raise ValueError(f"template for class {i} must have {n_bands} positive band powers")
        if not 0.0 <= self.persistence < 1.0:
            raise ValueError("persistence must be in [0, 1)")
        if self.gain <= 0:
            raise ValueError("device gain must be positive")
        if self.noise_level < 0:
            raise ValueError("noise level must be non-negative")
        if self.channel_gains is not None and len(self.channel_gains) != len(self.channel_names):
            raise ValueError("channel_gains must match channel_names in length")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_priors"] = list(self.class_priors)
        d["templates"] = [list(t) for t in self.templates]
        d["channel_names"] = list(self.channel_names)
        d["channel_gains"] = None if self.channel_gains is None else list(self.channel_gains)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("class_priors", "channel_names", "channel_gains"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("templates") is not None:
            d["templates"] = tuple(tuple(t) for t in d["templates"])
        return cls(**d).validate()


def transition_matrix(priors, persistence: float) -> np.ndarray:
    """Sticky chain: stay put with probability `persistence`, otherwise
    redraw from the priors.  Its stationary distribution is exactly the
    priors: pi P = p*pi + (1-p)*(pi 1)pi = pi."""
    pi = np.asarray(priors, dtype=np.float64)
    return persistence * np.eye(len(pi)) + (1.0 - persistence) * np.outer(np.ones(len(pi)), pi)


def sample_stage_sequence(rng: np.random.Generator, priors, persistence: float,
                          n_epochs: int) -> np.ndarray:
    p = transition_matrix(priors, persistence)
    labels = np.empty(n_epochs, dtype=np.int64)
    labels[0] = rng.choice(N_CLASSES, p=np.asarray(priors, dtype=np.float64))
    for t in range(1, n_epochs):
        labels[t] = rng.choice(N_CLASSES, p=p[labels[t - 1]])
    return labels


def _band_envelope(template, n_samples: int, rate_hz: float) -> np.ndarray:
    """Piecewise-constant amplitude envelope over rfft bins, normalized so
    the in-band mean power is 1 before device effects."""
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / rate_hz)
    power = np.zeros_like(freqs)
    for (lo, hi), p in zip(zip(BAND_EDGES_HZ[:-1], BAND_EDGES_HZ[1:]), template):
        power[(freqs >= lo) & (freqs < hi)] = p
    in_band = power > 0
    power[in_band] /= power[in_band].mean()
    return np.sqrt(power)


def _device_response(n_samples: int, rate_hz: float, gain: float, tilt_db: float) -> np.ndarray:
    """Linear-in-frequency dB tilt from DC to Nyquist, times a flat gain."""
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / rate_hz)
    tilt = 10.0 ** (tilt_db * (freqs / (rate_hz / 2.0)) / 20.0)
    return gain * tilt


def synthesize_epoch(rng: np.random.Generator, envelope: np.ndarray,
                     device: np.ndarray, noise_level: float,
                     n_samples: int = SAMPLES_PER_EPOCH) -> np.ndarray:
    white = rng.standard_normal(n_samples)
    shaped = np.fft.irfft(np.fft.rfft(white) * envelope * device, n=n_samples)
    if noise_level > 0:
        shaped = shaped + noise_level * rng.standard_normal(n_samples)
    return shaped


def generate_domain(spec: DomainSpec) -> list:
    """One canonical recording per subject, reproducible bit for bit."""
    spec.validate()
    envelopes = [_band_envelope(t, SAMPLES_PER_EPOCH, CANONICAL_RATE_HZ)
                 for t in spec.templates]
    device = _device_response(SAMPLES_PER_EPOCH, CANONICAL_RATE_HZ, spec.gain, spec.tilt_db)
    ch_gains = spec.channel_gains or (1.0,) * len(spec.channel_names)
    out = []
    for s in range(spec.n_subjects):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, s)))
        labels = sample_stage_sequence(rng, spec.class_priors, spec.persistence,
                                       spec.epochs_per_subject)
        per_channel = [np.empty(spec.epochs_per_subject * SAMPLES_PER_EPOCH)
                       for _ in spec.channel_names]
        for e, lab in enumerate(labels):
            lo = e * SAMPLES_PER_EPOCH
            for c, g in enumerate(ch_gains):
                per_channel[c][lo:lo + SAMPLES_PER_EPOCH] = g * synthesize_epoch(
                    rng, envelopes[lab], device, spec.noise_level)
        subject = f"{spec.name}-s{s:02d}"
        channels = [Channel(name, samples, CANONICAL_RATE_HZ)
                    for name, samples in zip(spec.channel_names, per_channel)]
        out.append(check_canonical(Recording(id=subject, channels=channels,
                                             labels=labels, subject=subject)))
    return out


# Per-level device deltas for the mismatch ladder.
LADDER_GAIN_STEP = 1.3
LADDER_TILT_STEP_DB = -4.0
LADDER_NOISE_STEP = 0.35


def mismatch_ladder(base: DomainSpec, levels: int) -> list:
    """Target specs at increasing acquisition mismatch from `base`.

    Level 0 is the base spec itself; level k multiplies the gain by
    1.3**k, tilts the response by -4k dB across the band, and adds
    sensor noise with standard deviation 0.35k.
    """
    if levels < 1:
        raise ValueError("ladder needs at least one level")
    base.validate()
    out = []
    for k in range(levels):
        if k == 0:
            out.append(base)
            continue
        out.append(dataclasses.replace(
            base,
            name=f"{base.name}-L{k}",
            gain=base.gain * LADDER_GAIN_STEP ** k,
            tilt_db=base.tilt_db + LADDER_TILT_STEP_DB * k,
            noise_level=base.noise_level + LADDER_NOISE_STEP * k,
        ))
    return out


def transfer_distance(a: DomainSpec, b: DomainSpec) -> float:
    """Scalar mismatch between two device models; zero iff identical."""
    return (abs(np.log(b.gain / a.gain))
            + abs(b.tilt_db - a.tilt_db) / 4.0
            + abs(b.noise_level - a.noise_level))
