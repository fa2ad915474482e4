"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray and remembers how it was produced.  Calling
``backward()`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into every tensor that requires them.
Gradients add up across calls until ``zero_grad`` resets them, which is what
lets one batch contribute through several graph paths.

The op set is deliberately small: arithmetic, matmul, shape surgery,
reductions, the usual nonlinearities, and the three structured ops the
models need (conv1d, maxpool1d, batchnorm).  Everything is float32 by
default; tests flip the default to float64 so finite-difference checks are
not drowned in rounding noise.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

_DEFAULT_DTYPE = np.float32
_CHECK_FINITE = False


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_check_finite(enabled: bool) -> None:
    """Debug switch: raise at the op that first produces a non-finite value."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """An ndarray plus the closure that routes gradients to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite value produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        out._op = op
        return out

    def backward(self) -> None:
        """Backpropagate from a scalar.  Raises on non-scalar calls."""
        if self.data.shape != ():
            raise ValueError(
                f"backward() needs a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that requires no gradient")

        # Iterative depth-first topological sort; recursion would overflow
        # on the thousands-of-nodes graphs an unrolled RNN builds.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is None:
                continue
            node._backward_fn(node.grad)
            if _CHECK_FINITE:
                for p in node._parents:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise FloatingPointError(
                            f"non-finite gradient out of op '{node._op}'"
                        )

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data ** 2), other.shape)
                )

        return Tensor._from_op(out_data, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return _as_tensor(other, self.dtype) / self

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul expects operands with ndim >= 2")
        out_data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "matmul")

    # -- shape ops -----------------------------------------------------------

    def __getitem__(self, key):
        out_data = self.data[key].copy()

        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            self._accumulate(full)

        return Tensor._from_op(out_data, (self,), backward, "getitem")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            self._accumulate(g.reshape(old))

        return Tensor._from_op(out_data, (self,), backward, "reshape")

    def transpose(self, axes):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out_data = np.transpose(self.data, axes)

        def backward(g):
            self._accumulate(np.transpose(g, inverse))

        return Tensor._from_op(out_data, (self,), backward, "transpose")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            self._accumulate(_spread(g, self.shape, axis, keepdims))

        return Tensor._from_op(out_data, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else _axis_count(self.shape, axis)

        def backward(g):
            self._accumulate(_spread(g, self.shape, axis, keepdims) / count)

        return Tensor._from_op(out_data, (self,), backward, "mean")

    # -- nonlinearities ---------------------------------------------------------

    def sigmoid(self):
        y = expit(self.data)

        def backward(g):
            self._accumulate(g * y * (1.0 - y))

        return Tensor._from_op(y, (self,), backward, "sigmoid")

    def tanh(self):
        y = np.tanh(self.data)

        def backward(g):
            self._accumulate(g * (1.0 - y * y))

        return Tensor._from_op(y, (self,), backward, "tanh")

    def relu(self):
        mask = self.data > 0

        def backward(g):
            self._accumulate(g * mask)

        return Tensor._from_op(self.data * mask, (self,), backward, "relu")

    def exp(self):
        y = np.exp(self.data)

        def backward(g):
            self._accumulate(g * y)

        return Tensor._from_op(y, (self,), backward, "exp")

    def log(self, floor: float | None = None):
        """Natural log; with ``floor`` the input is clamped below first and
        the clamped region gets zero gradient."""
        if floor is None:
            x = self.data
            mask = None
        else:
            mask = self.data >= floor
            x = np.maximum(self.data, floor)
        y = np.log(x)

        def backward(g):
            gx = g / x
            if mask is not None:
                gx = gx * mask
            self._accumulate(gx)

        return Tensor._from_op(y, (self,), backward, "log")

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            self._accumulate(y * (g - dot))

        return Tensor._from_op(y, (self,), backward, "softmax")


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _axis_count(shape: tuple, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape).copy()
    if not keepdims:
        if isinstance(axis, int):
            axis = (axis,)
        axis = tuple(a % len(shape) for a in axis)
        for a in sorted(axis):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


# -- free functions ------------------------------------------------------------


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def stack(tensors: list, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._from_op(out_data, tuple(tensors), backward, "stack")


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-p) so eval is identity."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = (rng.random(x.shape) >= p) * scale

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(x.data * mask, (x,), backward, "dropout")


def _pad_amount(n: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (out_len, pad_left, pad_right) for a 1d sliding op."""
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k - n, 0)
        left = total // 2
        return out, left, total - left
    if padding == "valid":
        if n < k:
            raise ValueError(f"input length {n} shorter than window {k}")
        return (n - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Correlate ``x`` [B, T, C_in] with ``w`` [K, C_in, C_out].

    'same' padding pads so the output covers ceil(T / stride) positions,
    splitting the pad evenly with the extra sample on the right.
    """
    b, n, c_in = x.shape
    k, wc_in, c_out = w.shape
    if wc_in != c_in:
        raise ValueError(f"conv1d channel mismatch: input {c_in}, kernel {wc_in}")
    out_len, pad_l, pad_r = _pad_amount(n, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]
    # windows: [B, out_len, C_in, K] -> columns [B*out_len, K*C_in]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(
        b * out_len, k * c_in
    )
    w2 = w.data.reshape(k * c_in, c_out)
    out_data = (cols @ w2).reshape(b, out_len, c_out)

    def backward(g):
        g2 = g.reshape(b * out_len, c_out)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(k, c_in, c_out))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            span = (out_len - 1) * stride
            for kk in range(k):
                gxp[:, kk : kk + span + 1 : stride] += g @ w.data[kk].T
            x._accumulate(gxp[:, pad_l : pad_l + n])

    return Tensor._from_op(out_data, (x, w), backward, "conv1d")


def maxpool1d(x: Tensor, size: int, stride: int | None = None, padding: str = "same") -> Tensor:
    """Max over time windows of ``x`` [B, T, C]; pads with -inf when 'same'."""
    stride = stride or size
    b, n, c = x.shape
    out_len, pad_l, pad_r = _pad_amount(n, size, stride, padding)

    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r), (0, 0)), constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(xp, size, axis=1)[:, ::stride]
    idx = windows.argmax(axis=-1)  # [B, out_len, C]
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros((b, n + pad_l + pad_r, c), dtype=g.dtype)
        bi, ti, ci = np.indices(idx.shape, sparse=True)
        np.add.at(gxp, (bi, ti * stride + idx, ci), g)
        x._accumulate(gxp[:, pad_l : pad_l + n])

    return Tensor._from_op(out_data, (x,), backward, "maxpool1d")


def batchnorm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    axes: tuple,
    momentum: float = 0.1,
    eps: float = 1e-5,
    train: bool = True,
    update_stats: bool = True,
) -> Tensor:
    """Normalize ``x`` over ``axes``, with affine rescale when gamma/beta given.

    Training mode normalizes by batch statistics and, when ``update_stats``,
    folds them into the running buffers in place (the buffers never join the
    graph).  Eval mode normalizes by the running buffers, so a frozen layer
    is a fixed affine map.  Variance is biased (ddof=0) in both the batch
    statistic and the running buffer.
    """
    axes = tuple(a % x.ndim for a in axes)
    count = _axis_count(x.shape, axes)
    stat_shape = tuple(1 if a in axes else s for a, s in enumerate(x.shape))

    if train:
        if count < 2:
            raise ValueError(f"batchnorm needs at least 2 samples per statistic, got {count}")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(running_mean.shape)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(running_var.shape)
    else:
        mu = running_mean.reshape(stat_shape).astype(x.dtype)
        var = running_var.reshape(stat_shape).astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat
    if gamma is not None:
        out_data = out_data * gamma.data.reshape(stat_shape)
    if beta is not None:
        out_data = out_data + beta.data.reshape(stat_shape)

    def backward(g):
        if gamma is not None and gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes).reshape(gamma.shape))
        if beta is not None and beta.requires_grad:
            beta._accumulate(g.sum(axis=axes).reshape(beta.shape))
        if not x.requires_grad:
            return
        gxhat = g if gamma is None else g * gamma.data.reshape(stat_shape)
        if train:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            x._accumulate(inv_std / count * (count * gxhat - s1 - xhat * s2))
        else:
            x._accumulate(gxhat * inv_std)

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return Tensor._from_op(out_data, parents, backward, "batchnorm")


def gradcheck(fn, tensors: list, eps: float = 1e-5, atol: float = 1e-3) -> float:
    """Compare analytic gradients of scalar ``fn(*tensors)`` against central
    differences.  Returns the worst relative error over all checked entries.

    The relative error denominator is floored at ``atol`` so near-zero
    gradients compare absolutely rather than blowing up the ratio.
    """
    for t in tensors:
        t.zero_grad()
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*tensors).data)
            flat[i] = orig - eps
            lo = float(fn(*tensors).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * eps)
        numeric = numeric.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
