"""The two staging networks and their shared parameter plumbing.

Both networks follow the same three-part shape: an epoch block turns each
30-second epoch into a feature vector (shared weights across the L epochs
of a sequence), a sequence block mixes information across epochs with a
bidirectional RNN, and one shared softmax head classifies every position.
Every parameter is tagged with the group it belongs to (EPB, SPB, SOFTMAX),
which is what the transfer strategies freeze against.

Checkpoints are a flat binary blob of the raw arrays plus a JSON manifest
mapping each name to its offset, shape, dtype, and group.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff
from .autodiff import Tensor, concat, dropout
from .layers import (
    AttentionHead,
    CnnBranchPair,
    Dense,
    Filterbank,
    RnnCell,
    birnn_forward,
    birnn_output,
    glorot_uniform,
)

EPB = "EPB"
SPB = "SPB"
SOFTMAX = "SOFTMAX"
GROUPS = (EPB, SPB, SOFTMAX)

SEQSLEEPNET = "SeqSleepNetPlus"
DEEPSLEEPNET = "DeepSleepNetPlus"

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-size networks."""

    kind: str
    L: int = 20
    n_channels: int = 1
    n_classes: int = 5
    l2_lambda: float = 1e-4
    residual_enabled: bool = False
    dropout: float = 0.25
    # spectrogram-input network (SeqSleepNetPlus)
    frame_count: int = 29
    n_bins: int = 129
    n_filters: int = 32
    epb_hidden: int = 64
    attention_size: int = 64
    recurrent_batchnorm: bool = True
    # raw-input network (DeepSleepNetPlus)
    epoch_len: int = 3000
    b1_kernels: tuple = (50, 8, 8, 8)
    b1_strides: tuple = (6, 1, 1, 1)
    b1_filters: tuple = (64, 128, 128, 128)
    b1_pools: tuple = (8, 4)
    b2_kernels: tuple = (400, 6, 6, 6)
    b2_strides: tuple = (50, 1, 1, 1)
    b2_filters: tuple = (64, 128, 128, 128)
    b2_pools: tuple = (4, 2)
    # sequence block and head
    spb_hidden: int = 64
    spb_layers: int = 1
    output_size: int = 64

    def validate(self) -> None:
        if self.kind not in (SEQSLEEPNET, DEEPSLEEPNET):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == SEQSLEEPNET and self.residual_enabled:
            raise ValueError("the spectrogram network has no residual connection")
        if self.kind == DEEPSLEEPNET and not self.residual_enabled:
            raise ValueError("the raw-signal network requires the residual connection")
        if self.L < 1 or self.n_channels < 1 or self.n_classes < 2:
            raise ValueError("L, n_channels must be >= 1 and n_classes >= 2")
        if self.spb_layers < 1:
            raise ValueError("the sequence block needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")


def seqsleepnet_config(**overrides) -> ModelConfig:
    base = dict(kind=SEQSLEEPNET, residual_enabled=False)
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def deepsleepnet_config(**overrides) -> ModelConfig:
    base = dict(
        kind=DEEPSLEEPNET,
        residual_enabled=True,
        recurrent_batchnorm=False,
        spb_hidden=512,
        spb_layers=2,
        output_size=1024,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a config from its JSON form (lists come back as tuples)."""
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in d:
            continue
        v = d[f.name]
        kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    cfg = ModelConfig(**kwargs)
    cfg.validate()
    return cfg


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class Param:
    tensor: Tensor
    group: str


@dataclass
class Buffer:
    array: np.ndarray
    group: str


class ParameterStore:
    """Ordered name -> parameter/buffer maps with group tags.

    Groups partition everything: each entry belongs to exactly one of
    EPB, SPB, SOFTMAX.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, Buffer] = {}

    def add_param(self, name: str, tensor: Tensor, group: str) -> None:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate store entry {name!r}")
        self._params[name] = Param(tensor, group)

    def add_buffer(self, name: str, array: np.ndarray, group: str) -> None:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate store entry {name!r}")
        self._buffers[name] = Buffer(array, group)

    def params(self):
        return self._params.items()

    def buffers(self):
        return self._buffers.items()

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def tensors(self, exclude_groups=()) -> list:
        return [p.tensor for p in self._params.values() if p.group not in exclude_groups]

    def named_tensors(self, exclude_groups=()) -> list:
        return [(n, p.tensor) for n, p in self._params.items() if p.group not in exclude_groups]

    def groups_present(self) -> set:
        return {p.group for p in self._params.values()}

    def n_params(self) -> int:
        return sum(p.tensor.data.size for p in self._params.values())

    def zero_all(self) -> None:
        for p in self._params.values():
            p.tensor.data = np.zeros_like(p.tensor.data)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.zero_grad()


class Model:
    """A config, its parameter store, and the forward pass."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.store = ParameterStore()
        if config.kind == SEQSLEEPNET:
            self._assemble_spectrogram(rng)
        else:
            self._assemble_raw(rng)
        self._register_blocks()

    # -- assembly ---------------------------------------------------------

    def _assemble_spectrogram(self, rng) -> None:
        c = self.config
        self.filterbanks = [Filterbank(rng, c.n_bins, c.n_filters) for _ in range(c.n_channels)]
        epb_in = c.n_filters * c.n_channels
        self.epb_fwd = RnnCell(rng, "gru", epb_in, c.epb_hidden, c.recurrent_batchnorm)
        self.epb_bwd = RnnCell(rng, "gru", epb_in, c.epb_hidden, c.recurrent_batchnorm)
        self.attention = AttentionHead(rng, 2 * c.epb_hidden, c.attention_size)
        self.cnn = None
        self._epoch_feature_size = 2 * c.epb_hidden
        self._assemble_sequence_block(rng)

    def _assemble_raw(self, rng) -> None:
        c = self.config
        self.filterbanks = None
        self.epb_fwd = self.epb_bwd = self.attention = None
        self.cnn = CnnBranchPair(
            rng,
            c.n_channels,
            branch1=dict(kernels=c.b1_kernels, strides=c.b1_strides,
                         filters=c.b1_filters, pools=c.b1_pools),
            branch2=dict(kernels=c.b2_kernels, strides=c.b2_strides,
                         filters=c.b2_filters, pools=c.b2_pools),
        )
        self._epoch_feature_size = self.cnn.feature_size(c.epoch_len)
        self._assemble_sequence_block(rng)

    def _assemble_sequence_block(self, rng) -> None:
        c = self.config
        cell_kind = "gru" if c.kind == SEQSLEEPNET else "lstm"
        rbn = c.recurrent_batchnorm if c.kind == SEQSLEEPNET else False
        self.spb_cells = []
        in_size = self._epoch_feature_size
        for _ in range(c.spb_layers):
            fwd = RnnCell(rng, cell_kind, in_size, c.spb_hidden, rbn)
            bwd = RnnCell(rng, cell_kind, in_size, c.spb_hidden, rbn)
            self.spb_cells.append((fwd, bwd))
            in_size = 2 * c.spb_hidden
        self.w_ho = glorot_uniform(rng, 2 * c.spb_hidden, c.output_size,
                                   (2 * c.spb_hidden, c.output_size))
        self.b_o = Tensor(np.zeros(c.output_size), requires_grad=True)
        self.residual_fc = (
            Dense(rng, self._epoch_feature_size, c.output_size)
            if c.residual_enabled else None
        )
        self.head = Dense(rng, c.output_size, c.n_classes)

    def _register_blocks(self) -> None:
        def register(prefix, obj, group):
            for k, v in obj.named_params():
                self.store.add_param(f"{prefix}.{k}", v, group)
            for k, v in obj.named_buffers():
                self.store.add_buffer(f"{prefix}.{k}", v, group)

        if self.filterbanks is not None:
            for i, fb in enumerate(self.filterbanks):
                register(f"epb.filterbank{i}", fb, EPB)
            register("epb.fwd", self.epb_fwd, EPB)
            register("epb.bwd", self.epb_bwd, EPB)
            register("epb.att", self.attention, EPB)
        else:
            register("epb.cnn", self.cnn, EPB)
        for i, (fwd, bwd) in enumerate(self.spb_cells):
            register(f"spb.l{i}.fwd", fwd, SPB)
            register(f"spb.l{i}.bwd", bwd, SPB)
        self.store.add_param("spb.out.w", self.w_ho, SPB)
        self.store.add_param("spb.out.b", self.b_o, SPB)
        if self.residual_fc is not None:
            register("spb.residual", self.residual_fc, SPB)
        register("softmax", self.head, SOFTMAX)

    # -- forward ----------------------------------------------------------

    def epoch_features(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        """Epoch block on a flat batch of epochs: [N, ...] -> [N, feat]."""
        if self.cnn is not None:
            return self.cnn.forward(x, train=train, update_stats=update_stats)
        if x.shape[-1] != self.config.n_channels:
            raise ValueError(
                f"expected {self.config.n_channels} channels, got {x.shape[-1]}"
            )
        per_channel = [fb.forward(x[:, :, :, i]) for i, fb in enumerate(self.filterbanks)]
        mixed = per_channel[0] if len(per_channel) == 1 else concat(per_channel, axis=-1)
        h_f, h_b = birnn_forward(mixed, self.epb_fwd, self.epb_bwd,
                                 train=train, update_stats=update_stats)
        return self.attention.forward(concat([h_b, h_f], axis=-1))

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                frozen_groups=frozenset()) -> Tensor:
        """Map input sequences to per-epoch class distributions [B, L, K].

        Input is [B, L, T, F, C] spectrograms or [B, L, n, C] raw signal.
        Frozen groups run in eval mode (no dropout-independent batch
        statistics, no running-stat updates), so their parameters and
        buffers stay untouched even on a training pass.
        """
        c = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if train and c.dropout > 0 and rng is None:
            raise ValueError("training forward needs an rng for dropout")
        epb_train = train and EPB not in frozen_groups
        spb_train = train and SPB not in frozen_groups

        b, seq_len = x.shape[0], x.shape[1]
        flat = x.reshape((b * seq_len,) + x.shape[2:])
        feats = self.epoch_features(flat, train=epb_train, update_stats=epb_train)
        if train and c.dropout > 0:
            feats = dropout(feats, c.dropout, rng)
        feats = feats.reshape(b, seq_len, feats.shape[-1])

        h = feats
        for fwd, bwd in self.spb_cells:
            h_f, h_b = birnn_forward(h, fwd, bwd, train=spb_train, update_stats=spb_train)
            h = concat([h_b, h_f], axis=-1)
        o = birnn_output(h_f, h_b, self.w_ho, self.b_o)
        if self.residual_fc is not None:
            o = o + self.residual_fc.forward(feats)
        if train and c.dropout > 0:
            o = dropout(o, c.dropout, rng)
        return self.head.forward(o).softmax(axis=-1)


def build_model(config: ModelConfig, rng=0) -> Model:
    """Assemble a model; ``rng`` is a Generator or an int seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return Model(config, rng)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels out of range for {n_classes} classes")
    out = np.zeros(labels.shape + (n_classes,), dtype=autodiff.get_default_dtype())
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def sequence_loss(yhat: Tensor, y: np.ndarray, l2_params=(), l2_lambda: float = 0.0,
                  mean_over_batch: bool = True) -> Tensor:
    """Sequence cross-entropy plus L2 penalty.

    loss = -(1/L) * sum_n sum_l y_l . log(yhat_l)  +  (lambda/2) * sum ||w||^2

    ``mean_over_batch`` additionally divides the data term by the batch
    size N, which keeps effective step sizes independent of batch size;
    switch it off to get the bare sum over sequences.  The log is floored
    at 1e-12 so an exactly-zero predicted probability cannot blow up.
    """
    y = np.asarray(y)
    if yhat.shape != y.shape:
        raise ValueError(f"prediction shape {yhat.shape} != target shape {y.shape}")
    n, seq_len = y.shape[0], y.shape[1]
    data_term = -(Tensor(y) * yhat.log(floor=LOG_FLOOR)).sum() / float(seq_len)
    if mean_over_batch:
        data_term = data_term / float(n)
    loss = data_term
    if l2_lambda > 0:
        reg = None
        for w in l2_params:
            s = (w * w).sum()
            reg = s if reg is None else reg + s
        if reg is not None:
            loss = loss + (l2_lambda / 2.0) * reg
    return loss


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(model: Model, path: str, provenance: dict | None = None) -> None:
    """Write parameters and buffers as a flat blob + JSON manifest.

    The manifest (at ``path + '.json'``) maps every entry name to its byte
    offset, shape, dtype, group, and kind, and embeds the full config, its
    hash, and caller-supplied provenance (source domain, step counts, ...).
    """
    entries = {}
    chunks = []
    offset = 0
    for name, p in list(model.store.params()) + list(model.store.buffers()):
        arr = p.tensor.data if isinstance(p, Param) else p.array
        raw = np.ascontiguousarray(arr).tobytes()
        entries[name] = {
            "offset": offset,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "group": p.group,
            "kind": "param" if isinstance(p, Param) else "buffer",
        }
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": 1,
        "config": asdict(model.config),
        "config_hash": config_hash(model.config),
        "provenance": provenance or {},
        "entries": entries,
    }
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def read_checkpoint(path: str) -> tuple[dict, dict]:
    """Return (manifest, name -> array) without building a model."""
    with open(path + ".json") as f:
        manifest = json.load(f)
    with open(path, "rb") as f:
        blob = f.read()
    arrays = {}
    for name, e in manifest["entries"].items():
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[name] = np.frombuffer(
            blob, dtype=dt, count=count, offset=e["offset"]
        ).reshape(e["shape"]).copy()
    return manifest, arrays


def load_parameters(model: Model, path: str) -> dict:
    """Fill an existing model from a checkpoint, bitwise.

    The checkpoint's config hash may differ (finetuning on another domain
    is the point), but every entry must exist with an identical shape;
    otherwise the incompatible names are listed in the error.  Returns the
    checkpoint manifest.
    """
    manifest, arrays = read_checkpoint(path)
    problems = []
    for name, p in list(model.store.params()) + list(model.store.buffers()):
        target = p.tensor.data if isinstance(p, Param) else p.array
        if name not in arrays:
            problems.append(f"{name}: missing from checkpoint")
        elif tuple(arrays[name].shape) != target.shape:
            problems.append(
                f"{name}: checkpoint shape {tuple(arrays[name].shape)} != model shape {target.shape}"
            )
    extra = set(arrays) - {n for n, _ in model.store.params()} - {n for n, _ in model.store.buffers()}
    problems.extend(f"{name}: not in model" for name in sorted(extra))
    if problems:
        raise ValueError("incompatible checkpoint:\n  " + "\n  ".join(problems))
    for name, p in model.store.params():
        p.tensor.data = arrays[name].copy()
    for name, b in model.store.buffers():
        b.array[...] = arrays[name]
    return manifest


def load_checkpoint(path: str) -> Model:
    """Rebuild the model a checkpoint describes and load its values."""
    manifest, _ = read_checkpoint(path)
    config = config_from_dict(manifest["config"])
    if config_hash(config) != manifest["config_hash"]:
        raise ValueError("checkpoint manifest config hash does not match its config")
    model = build_model(config, rng=0)
    load_parameters(model, path)
    return model
