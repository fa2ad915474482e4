"""Neural building blocks for the two staging networks.

Every layer is a plain parameter container with a pure ``forward``; graphs
are built on the fly by the autodiff ops.  Layers expose ``named_params``
and ``named_buffers`` so the model assembly can collect them into a single
store with group tags.  Nothing here knows about groups or freezing: a
frozen block is simply run with ``train=False`` by its owner.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, batchnorm, concat, conv1d, maxpool1d, stack


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)


class Dense:
    """Affine map on the last axis: x @ w + b."""

    def __init__(self, rng, n_in: int, n_out: int, bias: bool = True):
        self.w = glorot_uniform(rng, n_in, n_out, (n_in, n_out))
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out

    def named_params(self):
        items = [("w", self.w)]
        if self.b is not None:
            items.append(("b", self.b))
        return items

    def named_buffers(self):
        return []


class BatchNorm:
    """Batch normalization over caller-chosen axes with running buffers."""

    def __init__(self, size: int, beta: bool = True, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(size), requires_grad=True)
        self.beta = Tensor(np.zeros(size), requires_grad=True) if beta else None
        self.running_mean = np.zeros(size, dtype=self.gamma.dtype)
        self.running_var = np.ones(size, dtype=self.gamma.dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, axes: tuple, train: bool, update_stats: bool = True) -> Tensor:
        return batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            axes=axes, momentum=self.momentum, eps=self.eps,
            train=train, update_stats=update_stats,
        )

    def named_params(self):
        items = [("gamma", self.gamma)]
        if self.beta is not None:
            items.append(("beta", self.beta))
        return items

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Filterbank:
    """Learned spectral filterbank for one input channel.

    Stores an unconstrained weight [F x M]; the effective mixing matrix is
    its elementwise sigmoid, which keeps every filter coefficient in (0, 1)
    and in particular non-negative.
    """

    def __init__(self, rng, n_bins: int, n_filters: int):
        self.n_bins = n_bins
        self.n_filters = n_filters
        self.weight = Tensor(rng.normal(0.0, 1.0, (n_bins, n_filters)), requires_grad=True)

    def effective_weight(self) -> Tensor:
        return self.weight.sigmoid()

    def forward(self, x: Tensor) -> Tensor:
        """Map [..., T, F] spectra to [..., T, M] filter outputs."""
        if x.shape[-1] != self.n_bins:
            raise ValueError(
                f"filterbank expects {self.n_bins} frequency bins, got {x.shape[-1]}"
            )
        return x @ self.effective_weight()

    def named_params(self):
        return [("weight", self.weight)]

    def named_buffers(self):
        return []


class RnnCell:
    """GRU or LSTM step function, optionally with recurrent batchnorm.

    Gate layout within the fused weight matrices: GRU (z, r, n) with
    h' = (1 - z) * h + z * n, LSTM (i, f, g, o) with the forget bias
    initialized to one so early training does not flush the cell state.
    Recurrent batchnorm normalizes the input and recurrent pre-activation
    paths separately (scale only, the cell bias provides the shift); batch
    statistics are per time step while both paths share one running
    accumulator across the sequence.
    """

    def __init__(self, rng, kind: str, input_size: int, hidden_size: int,
                 recurrent_batchnorm: bool = False):
        if kind not in ("gru", "lstm"):
            raise ValueError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.input_size = input_size
        self.hidden_size = hidden_size
        gates = 3 if kind == "gru" else 4
        self.w_x = glorot_uniform(rng, input_size, hidden_size, (input_size, gates * hidden_size))
        self.w_h = glorot_uniform(rng, hidden_size, hidden_size, (hidden_size, gates * hidden_size))
        b = np.zeros(gates * hidden_size)
        if kind == "lstm":
            b[hidden_size : 2 * hidden_size] = 1.0
        self.b = Tensor(b, requires_grad=True)
        self.bn_x = BatchNorm(gates * hidden_size, beta=False) if recurrent_batchnorm else None
        self.bn_h = BatchNorm(gates * hidden_size, beta=False) if recurrent_batchnorm else None

    def initial_state(self, batch_size: int):
        h = Tensor(np.zeros((batch_size, self.hidden_size)))
        if self.kind == "gru":
            return h
        return (h, Tensor(np.zeros((batch_size, self.hidden_size))))

    def step(self, x: Tensor, state, train: bool = False, update_stats: bool = True):
        """Advance one time step; returns (output h, new state)."""
        hs = self.hidden_size
        h = state if self.kind == "gru" else state[0]
        px = x @ self.w_x
        ph = h @ self.w_h
        if self.bn_x is not None:
            px = self.bn_x.forward(px, axes=(0,), train=train, update_stats=update_stats)
            ph = self.bn_h.forward(ph, axes=(0,), train=train, update_stats=update_stats)
        if self.kind == "gru":
            z = (px[:, :hs] + ph[:, :hs] + self.b[:hs]).sigmoid()
            r = (px[:, hs : 2 * hs] + ph[:, hs : 2 * hs] + self.b[hs : 2 * hs]).sigmoid()
            n = (px[:, 2 * hs :] + r * ph[:, 2 * hs :] + self.b[2 * hs :]).tanh()
            h_new = (1.0 - z) * h + z * n
            return h_new, h_new
        c = state[1]
        pre = px + ph + self.b
        i = pre[:, :hs].sigmoid()
        f = pre[:, hs : 2 * hs].sigmoid()
        g = pre[:, 2 * hs : 3 * hs].tanh()
        o = pre[:, 3 * hs :].sigmoid()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        return h_new, (h_new, c_new)

    def named_params(self):
        items = [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]
        for tag, bn in (("bn_x", self.bn_x), ("bn_h", self.bn_h)):
            if bn is not None:
                items.extend((f"{tag}.{k}", v) for k, v in bn.named_params())
        return items

    def named_buffers(self):
        items = []
        for tag, bn in (("bn_x", self.bn_x), ("bn_h", self.bn_h)):
            if bn is not None:
                items.extend((f"{tag}.{k}", v) for k, v in bn.named_buffers())
        return items


def birnn_forward(x: Tensor, fwd: RnnCell, bwd: RnnCell,
                  train: bool = False, update_stats: bool = True):
    """Run two cells over [B, T, F] in opposite directions.

    Returns (H_f, H_b), each [B, T, hidden]: H_f[t] has consumed x[0..t],
    H_b[t] has consumed x[t..T-1].  Initial states are zero.
    """
    if x.ndim != 3:
        raise ValueError(f"birnn expects [batch, time, features], got shape {x.shape}")
    b, t_len, _ = x.shape
    if t_len == 0:
        raise ValueError("birnn on an empty sequence")
    state = fwd.initial_state(b)
    h_f = []
    for t in range(t_len):
        h, state = fwd.step(x[:, t], state, train=train, update_stats=update_stats)
        h_f.append(h)
    state = bwd.initial_state(b)
    h_b = [None] * t_len
    for t in reversed(range(t_len)):
        h, state = bwd.step(x[:, t], state, train=train, update_stats=update_stats)
        h_b[t] = h
    return stack(h_f, axis=1), stack(h_b, axis=1)


def birnn_output(h_f: Tensor, h_b: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Combine per-step states into outputs: w @ (h_b ++ h_f) + b.

    The backward state leads in the concatenation; ``w`` is [2*hidden, out].
    """
    return concat([h_b, h_f], axis=-1) @ w + b


class AttentionHead:
    """Additive attention pooling over time.

    Scores each step by u . tanh(w @ h + b), softmaxes the scores over the
    time axis, and returns the weighted sum of the states.
    """

    def __init__(self, rng, dim: int, attention_size: int):
        self.w = glorot_uniform(rng, dim, attention_size, (dim, attention_size))
        self.b = Tensor(np.zeros(attention_size), requires_grad=True)
        self.u = glorot_uniform(rng, attention_size, 1, (attention_size, 1))

    def weights(self, h: Tensor) -> Tensor:
        """Attention distribution over time for states [B, T, D] -> [B, T]."""
        scores = ((h @ self.w + self.b).tanh() @ self.u)[:, :, 0]
        return scores.softmax(axis=-1)

    def forward(self, h: Tensor) -> Tensor:
        a = self.weights(h)
        return (a.reshape(a.shape + (1,)) * h).sum(axis=1)

    def named_params(self):
        return [("w", self.w), ("b", self.b), ("u", self.u)]

    def named_buffers(self):
        return []


class ConvLayer:
    """1d convolution weights (bias lives in the batchnorm that follows)."""

    def __init__(self, rng, kernel: int, c_in: int, c_out: int, stride: int = 1):
        self.w = he_normal(rng, kernel * c_in, (kernel, c_in, c_out))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.w, stride=self.stride, padding="same")

    def named_params(self):
        return [("w", self.w)]

    def named_buffers(self):
        return []


class CnnBranch:
    """Four conv+batchnorm+ReLU layers with pooling after the first and last."""

    def __init__(self, rng, in_channels: int, kernels, strides, filters, pools):
        if not (len(kernels) == len(strides) == len(filters) == 4):
            raise ValueError("a branch takes exactly 4 conv layer specs")
        if len(pools) != 2:
            raise ValueError("a branch takes exactly 2 pooling sizes")
        self.convs = []
        self.bns = []
        c_prev = in_channels
        for k, s, c in zip(kernels, strides, filters):
            self.convs.append(ConvLayer(rng, k, c_prev, c, stride=s))
            self.bns.append(BatchNorm(c))
            c_prev = c
        self.pools = tuple(pools)
        self.first_kernel = kernels[0]

    def forward(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = conv.forward(x)
            x = bn.forward(x, axes=(0, 1), train=train, update_stats=update_stats)
            x = x.relu()
            if i == 0:
                x = maxpool1d(x, self.pools[0])
            elif i == len(self.convs) - 1:
                x = maxpool1d(x, self.pools[1])
        return x

    def named_params(self):
        items = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            items.extend((f"conv{i}.{k}", v) for k, v in conv.named_params())
            items.extend((f"bn{i}.{k}", v) for k, v in bn.named_params())
        return items

    def named_buffers(self):
        items = []
        for i, bn in enumerate(self.bns):
            items.extend((f"bn{i}.{k}", v) for k, v in bn.named_buffers())
        return items


class CnnBranchPair:
    """Fine- and coarse-resolution conv branches over one raw epoch.

    The two branches see the same [B, n, C] signal, differ in kernel and
    stride scale, and their outputs are flattened and concatenated into the
    per-epoch feature vector.
    """

    def __init__(self, rng, in_channels: int, branch1: dict, branch2: dict):
        self.branch1 = CnnBranch(rng, in_channels, **branch1)
        self.branch2 = CnnBranch(rng, in_channels, **branch2)
        self.min_input_len = max(self.branch1.first_kernel, self.branch2.first_kernel)

    def forward(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        if x.shape[1] < self.min_input_len:
            raise ValueError(
                f"epoch length {x.shape[1]} is below the receptive-field "
                f"minimum {self.min_input_len}"
            )
        outs = []
        for branch in (self.branch1, self.branch2):
            y = branch.forward(x, train=train, update_stats=update_stats)
            outs.append(y.reshape(y.shape[0], y.shape[1] * y.shape[2]))
        return concat(outs, axis=-1)

    def feature_size(self, n: int) -> int:
        """Output width for input length n, by the same shape arithmetic
        the forward pass performs."""
        total = 0
        for br in (self.branch1, self.branch2):
            t = n
            for i, conv in enumerate(br.convs):
                t = -(-t // conv.stride)
                if i == 0:
                    t = -(-t // br.pools[0])
                elif i == len(br.convs) - 1:
                    t = -(-t // br.pools[1])
            total += t * br.convs[-1].w.shape[2]
        return total

    def named_params(self):
        items = []
        for tag, br in (("branch1", self.branch1), ("branch2", self.branch2)):
            items.extend((f"{tag}.{k}", v) for k, v in br.named_params())
        return items

    def named_buffers(self):
        items = []
        for tag, br in (("branch1", self.branch1), ("branch2", self.branch2)):
            items.extend((f"{tag}.{k}", v) for k, v in br.named_buffers())
        return items
