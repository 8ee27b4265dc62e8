"""Acoustic model: input 1-D convolution, residual blocks of
conv -> batchnorm -> PReLU, stacked bidirectional LSTMs, dense softmax.

Forward and backward passes are written by hand in numpy (float64). Batches
are ``(B, T, C)`` arrays with per-example lengths; every layer keeps padded
frames at zero so that a padded example sees exactly the zero padding a lone
"same"-padded example would see.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
PRELU_INIT = 0.25
FORGET_BIAS_INIT = 1.0


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 52
    conv_channels: int = 64
    kernel_size: int = 3
    stride: int = 1
    residual_blocks: int = 5
    convs_per_block: int = 2
    bilstm_layers: int = 2
    hidden_size: int = 200
    dropout_rate: float = 0.25
    vocab_size: int = 66

    def __post_init__(self):
        for f in fields(self):
            if f.name == "dropout_rate":
                continue
            minimum = 0 if f.name in ("residual_blocks", "bilstm_layers") else 1
            if getattr(self, f.name) < minimum:
                raise ValueError(f"{f.name} must be >= {minimum}")
        if self.residual_blocks and self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must cover pad, unk and blank")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown network config key {key!r}")
            kwargs[key] = float(value) if key == "dropout_rate" else int(value)
        return cls(**kwargs)


def count_params(config: NetworkConfig) -> int:
    """Trainable scalars of the model built from `config`."""
    k, n, H = config.kernel_size, config.conv_channels, config.hidden_size
    total = k * config.input_dim * n + n
    # each conv unit: kernel + bias, batchnorm gamma/beta, per-channel PReLU slope
    total += config.residual_blocks * config.convs_per_block * (k * n * n + n + 2 * n + n)
    width = n
    for _ in range(config.bilstm_layers):
        total += 2 * 4 * H * (width + H + 1)
        width = 2 * H
    total += width * config.vocab_size + config.vocab_size
    return total


# ---------------------------------------------------------------------------
# parameters


class Parameter:
    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class ParameterStore(OrderedDict):
    """Named parameters with gradient accumulators and Adam moment buffers."""

    def add(self, name: str, value) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = self[name] = Parameter(value)
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad.fill(0.0)

    def count(self) -> int:
        return sum(p.value.size for p in self.values())


def _uniform(rng, shape, fan_in):
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# stateless forward functions


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _same_padding(T, k, stride):
    # left pad fixed at (k-1)//2 so output t is centred on input t*stride
    # whatever the padded length; padding a batch then cannot shift frames
    T_out = -(-T // stride)
    left = (k - 1) // 2
    right = max((T_out - 1) * stride + k - T - left, 0)
    return T_out, left, right


def _im2col(x, k, stride):
    B, T, C = x.shape
    T_out, left, right = _same_padding(T, k, stride)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    span = stride * (T_out - 1) + 1
    cols = np.concatenate([xp[:, j:j + span:stride, :] for j in range(k)], axis=-1)
    return cols, (T, left, right, T_out)


def conv1d_forward(x, weights, bias, stride: int = 1):
    """"Same"-padded cross-correlation along time.

    `x` is ``(T, Cin)`` or ``(B, T, Cin)``; `weights` is ``(k, Cin, Cout)``.
    Output length is ``ceil(T / stride)``.
    """
    xb, single = _as_batch(x)
    k, cin, cout = weights.shape
    if xb.shape[-1] != cin:
        raise ValueError(f"input has {xb.shape[-1]} channels, kernel expects {cin}")
    cols, _ = _im2col(xb, k, stride)
    y = cols @ weights.reshape(k * cin, cout) + bias
    return y[0] if single else y


def batchnorm_forward(x, gamma, beta, mode: str = "train", running_mean=None, running_var=None,
                      mask=None):
    """Per-channel normalization; train mode uses statistics of the unmasked frames."""
    xb, single = _as_batch(x)
    if mask is None:
        mask = np.ones(xb.shape[:2] + (1,))
    if mode == "train":
        n = mask.sum()
        mean = (xb * mask).sum(axis=(0, 1)) / n
        var = (((xb - mean) * mask) ** 2).sum(axis=(0, 1)) / n
    elif mode == "infer":
        if running_mean is None or running_var is None:
            raise RuntimeError("batchnorm running statistics are unset; run a training step first")
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    y = (gamma * (xb - mean) / np.sqrt(var + BN_EPS) + beta) * mask
    return y[0] if single else y


def prelu_forward(x, slope):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, slope * x)


def lstm_step(x_t, h_prev, c_prev, W, U, b):
    """One LSTM update with gate layout ``[input, forget, cell, output]`` along the 4H axis.

    Returns ``(h_t, c_t)``.
    """
    h, c, _ = _lstm_cell(x_t @ W + b, h_prev, c_prev, U)
    return h, c


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_cell(xw_t, h_prev, c_prev, U):
    z = xw_t + h_prev @ U
    H = U.shape[0]
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (i, f, g, o, tc)


def softmax(logits, axis: int = -1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def dense_softmax_forward(x, weights, bias):
    return softmax(np.asarray(x, dtype=np.float64) @ weights + bias)


def length_mask(lengths, T):
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)[..., None]


def reverse_padded(x, lengths):
    """Reverse each sequence within its own length; padding stays at the end.

    The map is an involution, so it also routes gradients back.
    """
    B, T = x.shape[:2]
    t = np.arange(T)[None, :]
    lengths = np.asarray(lengths)[:, None]
    idx = np.where(t < lengths, lengths - 1 - t, t)
    return x[np.arange(B)[:, None], idx]


# ---------------------------------------------------------------------------
# layers with cached activations


class Conv1d:
    def __init__(self, params, name, k, cin, cout, stride, rng):
        self.stride = stride
        self.weight = params.add(f"{name}.weight", _uniform(rng, (k, cin, cout), k * cin))
        self.bias = params.add(f"{name}.bias", np.zeros(cout))
        self._cache = None

    def forward(self, x):
        k, cin, cout = self.weight.shape
        cols, geom = _im2col(x, k, self.stride)
        self._cache = (cols, geom)
        return cols @ self.weight.value.reshape(k * cin, cout) + self.bias.value

    def backward(self, dy):
        cols, (T, left, right, T_out) = self._cache
        k, cin, cout = self.weight.shape
        self.weight.grad += np.einsum("btc,btd->cd", cols, dy).reshape(k, cin, cout)
        self.bias.grad += dy.sum(axis=(0, 1))
        dcols = dy @ self.weight.value.reshape(k * cin, cout).T
        B = dy.shape[0]
        dxp = np.zeros((B, T + left + right, cin))
        span = self.stride * (T_out - 1) + 1
        for j in range(k):
            dxp[:, j:j + span:self.stride, :] += dcols[..., j * cin:(j + 1) * cin]
        return dxp[:, left:left + T, :]


class BatchNorm:
    def __init__(self, params, name, channels):
        self.name = name
        self.gamma = params.add(f"{name}.gamma", np.ones(channels))
        self.beta = params.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = None
        self.running_var = None
        self._cache = None

    def forward(self, x, mask, train):
        if train:
            n = mask.sum()
            mean = (x * mask).sum(axis=(0, 1)) / n
            xc = (x - mean) * mask
            var = (xc ** 2).sum(axis=(0, 1)) / n
            if self.running_mean is None:
                self.running_mean, self.running_var = mean.copy(), var.copy()
            else:
                self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean
                self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
        else:
            if self.running_mean is None:
                raise RuntimeError(
                    f"{self.name}: running statistics are unset; run a training step first"
                )
            mean, var = self.running_mean, self.running_var
            xc = (x - mean) * mask
            n = None
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        self._cache = (xhat, inv, mask, n)
        return (self.gamma.value * xhat + self.beta.value) * mask

    def backward(self, dy):
        xhat, inv, mask, n = self._cache
        dy = dy * mask
        self.gamma.grad += (dy * xhat).sum(axis=(0, 1))
        self.beta.grad += dy.sum(axis=(0, 1))
        dxhat = dy * self.gamma.value
        if n is None:
            return dxhat * inv
        return (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 1))
            - xhat * (dxhat * xhat).sum(axis=(0, 1))
        ) * mask


class PReLU:
    def __init__(self, params, name, channels):
        self.slope = params.add(f"{name}.slope", np.full(channels, PRELU_INIT))
        self._x = None

    def forward(self, x):
        self._x = x
        return np.where(x > 0, x, self.slope.value * x)

    def backward(self, dy):
        x = self._x
        pos = x > 0
        self.slope.grad += np.where(pos, 0.0, dy * x).sum(axis=(0, 1))
        return np.where(pos, dy, dy * self.slope.value)


class ResidualBlock:
    """``G(x) + x`` where G is a stack of conv -> batchnorm -> PReLU units."""

    def __init__(self, params, name, channels, k, units, rng):
        self.units = [
            (
                Conv1d(params, f"{name}.conv{j}", k, channels, channels, 1, rng),
                BatchNorm(params, f"{name}.bn{j}", channels),
                PReLU(params, f"{name}.prelu{j}", channels),
            )
            for j in range(units)
        ]

    def branch_forward(self, x, mask, train):
        h = x
        for conv, bn, act in self.units:
            h = act.forward(bn.forward(conv.forward(h), mask, train))
        return h

    def branch_backward(self, dy):
        for conv, bn, act in reversed(self.units):
            dy = conv.backward(bn.backward(act.backward(dy)))
        return dy

    def forward(self, x, mask, train):
        g = self.branch_forward(x, mask, train)
        if g.shape != x.shape:
            raise ValueError(f"residual branch shape {g.shape} differs from input {x.shape}")
        return g + x

    def backward(self, dy):
        return self.branch_backward(dy) + dy


class LSTMDirection:
    def __init__(self, params, name, input_size, hidden, rng):
        self.hidden = hidden
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = FORGET_BIAS_INIT
        self.W = params.add(f"{name}.W", _uniform(rng, (input_size, 4 * hidden), 3 * hidden))
        self.U = params.add(f"{name}.U", _uniform(rng, (hidden, 4 * hidden), 3 * hidden))
        self.b = params.add(f"{name}.b", b)
        self._cache = None

    def forward(self, x):
        B, T, _ = x.shape
        H = self.hidden
        U = self.U.value
        xw = x @ self.W.value + self.b.value
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        out = np.empty((B, T, H))
        steps = []
        for t in range(T):
            h_prev, c_prev = h, c
            h, c, gates = _lstm_cell(xw[:, t], h_prev, c_prev, U)
            steps.append((h_prev, c_prev, gates))
            out[:, t] = h
        self._cache = (x, steps)
        return out

    def backward(self, dy):
        x, steps = self._cache
        B, T, _ = x.shape
        H = self.hidden
        U = self.U.value
        dxw = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        dU = np.zeros_like(U)
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, (i, f, g, o, tc) = steps[t]
            dh = dy[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    dh * tc * o * (1.0 - o),
                ],
                axis=-1,
            )
            dU += h_prev.T @ dz
            dh_next = dz @ U.T
            dc_next = dc * f
            dxw[:, t] = dz
        self.U.grad += dU
        self.W.grad += np.einsum("btc,btg->cg", x, dxw)
        self.b.grad += dxw.sum(axis=(0, 1))
        return dxw @ self.W.value.T


class BiLSTM:
    def __init__(self, params, name, input_size, hidden, dropout_rate, rng):
        self.fwd = LSTMDirection(params, f"{name}.fwd", input_size, hidden, rng)
        self.bwd = LSTMDirection(params, f"{name}.bwd", input_size, hidden, rng)
        self.dropout_rate = dropout_rate
        self._cache = None

    def forward(self, x, lengths, mask, train, rng):
        out_f = self.fwd.forward(x)
        out_b = reverse_padded(self.bwd.forward(reverse_padded(x, lengths)), lengths)
        out = np.concatenate([out_f, out_b], axis=-1) * mask
        keep = None
        if train and self.dropout_rate > 0:
            keep = (rng.random(out.shape) >= self.dropout_rate) / (1.0 - self.dropout_rate)
            out = out * keep
        self._cache = (lengths, mask, keep)
        return out

    def backward(self, dy):
        lengths, mask, keep = self._cache
        dy = dy * mask
        if keep is not None:
            dy = dy * keep
        H = self.fwd.hidden
        dx = self.fwd.backward(dy[..., :H])
        dx += reverse_padded(self.bwd.backward(reverse_padded(dy[..., H:], lengths)), lengths)
        return dx


def bilstm_forward(x, layer: BiLSTM, mode: str = "infer", lengths=None, rng=None):
    """Run one bidirectional layer on ``(T, C)`` or ``(B, T, C)`` input."""
    xb, single = _as_batch(x)
    B, T, _ = xb.shape
    if lengths is None:
        lengths = np.full(B, T)
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng()
    out = layer.forward(xb, np.asarray(lengths), length_mask(lengths, T), train, rng)
    return out[0] if single else out


class Dense:
    def __init__(self, params, name, cin, cout, rng):
        self.weight = params.add(f"{name}.weight", _uniform(rng, (cin, cout), cin))
        self.bias = params.add(f"{name}.bias", np.zeros(cout))
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        self.weight.grad += np.einsum("btc,btv->cv", self._x, dy)
        self.bias.grad += dy.sum(axis=(0, 1))
        return dy @ self.weight.value.T


# ---------------------------------------------------------------------------
# full model


class AcousticModel:
    """Conv front end, residual blocks, BiLSTM stack and dense output layer.

    ``forward_batch`` returns logits; ``forward`` returns the posterior matrix
    of a single utterance. ``backward`` consumes the gradient w.r.t. the logits
    of the most recent ``forward_batch`` call and accumulates into
    ``self.params``.
    """

    def __init__(self, config: NetworkConfig = NetworkConfig(), seed: int = 0):
        self.config = config
        self.params = ParameterStore()
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng(seed)
        c = config
        self.input_conv = Conv1d(self.params, "input_conv", c.kernel_size, c.input_dim,
                                 c.conv_channels, c.stride, init)
        self.blocks = [
            ResidualBlock(self.params, f"block{i}", c.conv_channels, c.kernel_size,
                          c.convs_per_block, init)
            for i in range(c.residual_blocks)
        ]
        self.rnns = []
        width = c.conv_channels
        for layer in range(c.bilstm_layers):
            self.rnns.append(BiLSTM(self.params, f"bilstm{layer}", width, c.hidden_size,
                                    c.dropout_rate, init))
            width = 2 * c.hidden_size
        self.dense = Dense(self.params, "dense", width, c.vocab_size, init)
        self.optimizer_steps = 0
        self._cached = False

    def batchnorms(self):
        for block in self.blocks:
            for _, bn, _ in block.units:
                yield bn

    def output_lengths(self, lengths):
        return -(-np.asarray(lengths) // self.config.stride)

    def forward_batch(self, x, lengths=None, mode: str = "infer", rng=None):
        """Logits ``(B, T', V)`` for a zero-padded batch ``(B, T, input_dim)``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.config.input_dim:
            raise ValueError(
                f"expected (B, T, {self.config.input_dim}) features, got shape {x.shape}"
            )
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
        train = mode == "train"
        rng = self.rng if rng is None else rng

        in_mask = length_mask(lengths, T)
        h = self.input_conv.forward(x * in_mask)
        out_lengths = self.output_lengths(lengths)
        mask = length_mask(out_lengths, h.shape[1])
        h = h * mask
        for block in self.blocks:
            h = block.forward(h, mask, train)
        for rnn in self.rnns:
            h = rnn.forward(h, out_lengths, mask, train, rng)
        logits = self.dense.forward(h)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits")
        self._mask = mask
        self._in_mask = in_mask
        self._cached = True
        return logits

    def backward(self, dlogits):
        """Accumulate parameter gradients; returns the gradient w.r.t. the input features."""
        if not self._cached:
            raise RuntimeError("backward called without a cached forward pass")
        d = self.dense.backward(np.asarray(dlogits, dtype=np.float64) * self._mask)
        for rnn in reversed(self.rnns):
            d = rnn.backward(d)
        for block in reversed(self.blocks):
            d = block.backward(d * self._mask)
        d = self.input_conv.backward(d * self._mask)
        self._cached = False
        return d * self._in_mask

    def forward(self, features, mode: str = "infer", rng=None):
        """Posterior matrix ``(T', V)`` for one utterance."""
        frames = getattr(features, "frames", features)
        logits = self.forward_batch(np.asarray(frames)[None], mode=mode, rng=rng)
        return softmax(logits[0])

    def state_arrays(self):
        """Parameters and batchnorm running statistics, in a stable order."""
        out = OrderedDict((name, p.value) for name, p in self.params.items())
        for bn in self.batchnorms():
            if bn.running_mean is not None:
                out[f"{bn.name}.running_mean"] = bn.running_mean
                out[f"{bn.name}.running_var"] = bn.running_var
        return out

    def load_state_arrays(self, arrays) -> None:
        arrays = dict(arrays)
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            value = np.asarray(arrays.pop(name), dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match model {p.shape}")
            p.value[...] = value
        for bn in self.batchnorms():
            mean = arrays.pop(f"{bn.name}.running_mean", None)
            var = arrays.pop(f"{bn.name}.running_var", None)
            if (mean is None) != (var is None):
                raise ValueError(f"{bn.name}: running mean and variance must be stored together")
            if mean is not None:
                if mean.shape != bn.gamma.shape or var.shape != bn.gamma.shape:
                    raise ValueError(f"{bn.name}: running statistics have the wrong shape")
                bn.running_mean = np.asarray(mean, dtype=np.float64).copy()
                bn.running_var = np.asarray(var, dtype=np.float64).copy()
        if arrays:
            raise KeyError(f"unexpected arrays in state: {sorted(arrays)}")
