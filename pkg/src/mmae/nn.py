"""Small dense-network engine with hand-written reverse mode.

Networks are fixed stacks of ``Dense -> BatchNorm -> ReLU`` blocks closed by
a plain ``Dense`` layer. A forward pass returns a :class:`Tape` holding what
the backward pass needs; each tape can be consumed once.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .exceptions import (
    BatchTooSmallError,
    CheckpointError,
    NumericsError,
    ShapeError,
    TapeError,
    ValidationError,
)

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode):
    if mode not in (TRAIN, EVAL):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")


class Dense:
    kind = 1

    def __init__(self, in_dim: int, out_dim: int, rng=None, dtype=np.float64):
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        if rng is None:
            self.weights = np.zeros((self.in_dim, self.out_dim), dtype=dtype)
        else:
            # He-uniform
            limit = np.sqrt(6.0 / self.in_dim)
            self.weights = rng.uniform(-limit, limit, size=(self.in_dim, self.out_dim)).astype(dtype)
        self.bias = np.zeros(self.out_dim, dtype=dtype)

    def parameters(self):
        return [self.weights, self.bias]

    def forward(self, x, mode, update_stats=True):
        return x @ self.weights + self.bias, x

    def backward(self, grad, cache):
        x = cache
        return grad @ self.weights.T, [x.T @ grad, grad.sum(axis=0)]


class BatchNorm:
    kind = 2

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        if not 0.0 < momentum < 1.0:
            raise ValidationError("momentum must lie in (0, 1)")
        if not eps > 0:
            raise ValidationError("eps must be > 0")
        self.dim = int(dim)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = np.ones(self.dim, dtype=dtype)
        self.beta = np.zeros(self.dim, dtype=dtype)
        self.running_mean = np.zeros(self.dim, dtype=dtype)
        self.running_var = np.ones(self.dim, dtype=dtype)

    @property
    def in_dim(self):
        return self.dim

    out_dim = in_dim

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, mode, update_stats=True):
        if mode == TRAIN:
            n = x.shape[0]
            if n < 2:
                raise BatchTooSmallError("batch norm in train mode needs at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                m = self.momentum
                # running variance tracks the unbiased estimate
                self.running_mean *= 1.0 - m
                self.running_mean += m * mean
                self.running_var *= 1.0 - m
                self.running_var += m * var * (n / (n - 1))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        return self.gamma * x_hat + self.beta, (mode, x_hat, inv_std)

    def backward(self, grad, cache):
        mode, x_hat, inv_std = cache
        grad_gamma = (grad * x_hat).sum(axis=0)
        grad_beta = grad.sum(axis=0)
        g_hat = grad * self.gamma
        if mode == TRAIN:
            n = grad.shape[0]
            grad_x = (inv_std / n) * (
                n * g_hat - g_hat.sum(axis=0) - x_hat * (g_hat * x_hat).sum(axis=0)
            )
        else:
            grad_x = g_hat * inv_std
        return grad_x, [grad_gamma, grad_beta]


class ReLU:
    kind = 3

    def __init__(self, dim: int):
        self.dim = int(dim)

    @property
    def in_dim(self):
        return self.dim

    out_dim = in_dim

    def parameters(self):
        return []

    def forward(self, x, mode, update_stats=True):
        return np.maximum(x, 0.0), x

    def backward(self, grad, cache):
        return grad * (cache > 0), []


def relu(x):
    return np.maximum(x, 0.0)


class Tape:
    """Forward intermediates for one :class:`Mlp` call."""

    __slots__ = ("owner", "mode", "caches", "in_shape", "out_shape", "consumed")

    def __init__(self, owner, mode, in_shape):
        self.owner = owner
        self.mode = mode
        self.caches = []
        self.in_shape = in_shape
        self.out_shape = None
        self.consumed = False

    @property
    def relu_inputs(self) -> list:
        return [c for layer, c in zip(self.owner.layers, self.caches) if isinstance(layer, ReLU)]


class Mlp:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Every hidden block is Dense, BatchNorm (optional), ReLU; the last layer is
    a bare Dense so outputs are unbounded.
    """

    def __init__(self, sizes: Sequence[int], rng=None, batch_norm: bool = True,
                 dtype=np.float64, bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValidationError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        self.dtype = np.dtype(dtype)
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.layers.append(Dense(a, b, rng, dtype))
            if i < len(sizes) - 2:
                if batch_norm:
                    self.layers.append(BatchNorm(b, bn_momentum, bn_eps, dtype))
                self.layers.append(ReLU(b))

    @classmethod
    def from_layers(cls, layers) -> "Mlp":
        self = cls.__new__(cls)
        self.layers = list(layers)
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        dense = [l for l in self.layers if isinstance(l, Dense)]
        self.sizes = [dense[0].in_dim] + [l.out_dim for l in dense]
        self.dtype = dense[0].weights.dtype
        return self

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> List[np.ndarray]:
        return [b for l in self.layers if isinstance(l, BatchNorm) for b in (l.running_mean, l.running_var)]

    def forward(self, x, mode=TRAIN, update_stats=True):
        _check_mode(mode)
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape (B, {self.in_dim}), got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        tape = Tape(self, mode, x.shape)
        h = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            h, cache = layer.forward(h, mode, update_stats)
            tape.caches.append(cache)
        tape.out_shape = h.shape
        return h, tape

    __call__ = forward

    def backward(self, tape: Tape, grad_y):
        if tape.owner is not self:
            raise TapeError("tape was recorded by a different network")
        if tape.consumed:
            raise TapeError("tape has already been consumed")
        grad = np.asarray(grad_y)
        if grad.shape != tape.out_shape:
            raise TapeError(f"grad shape {grad.shape} does not match output shape {tape.out_shape}")
        tape.consumed = True
        grads = []
        for layer, cache in zip(reversed(self.layers), reversed(tape.caches)):
            grad, layer_grads = layer.backward(grad, cache)
            grads[:0] = layer_grads
        return grad, grads

    def predict(self, x):
        return self.forward(x, EVAL)[0]


def mlp_forward(m: Mlp, x, mode=TRAIN):
    return m.forward(x, mode)


def mlp_backward(m: Mlp, tape: Tape, grad_y):
    return m.backward(tape, grad_y)


def mse_loss(pred, target):
    """Per-element mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def sse_loss(pred, target):
    """Squared error summed over features, averaged over rows."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = diff.shape[0]
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[list] = None
    v: Optional[list] = None


def adam_step(params: list, grads: list, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads have different lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError("non-finite gradient; Adam step aborted")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: Optional[tuple]
    n_checked: int
    n_skipped: int
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_err < self.tolerance)


def _crosses_kink(base, plus, minus) -> bool:
    for p0, pp, pm in zip(base, plus, minus):
        moved = pp != pm
        if not moved.any():
            continue
        a, b, c = p0[moved], pp[moved], pm[moved]
        if (a == 0).any() or (b == 0).any() or (c == 0).any():
            return True
        if ((b > 0) != (c > 0)).any() or ((a > 0) != (b > 0)).any():
            return True
    return False


def check_gradients(evaluate: Callable, params: list, analytic: list, h: float = 1e-5,
                    tolerance: float = 1e-4, abs_floor: float = 1e-5,
                    names: Optional[list] = None) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``evaluate``.

    ``evaluate()`` returns ``(loss, relu_inputs)`` for the current contents of
    ``params``. Entries whose perturbation moves a ReLU input onto or across
    zero are skipped. The relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValidationError("finite-difference step must lie in [1e-6, 1e-4]")
    _, base_kinks = evaluate()
    worst, worst_at = 0.0, None
    checked = skipped = 0
    for pi, (p, g) in enumerate(zip(params, analytic)):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus, k_plus = evaluate()
            flat[j] = orig - h
            f_minus, k_minus = evaluate()
            flat[j] = orig
            if _crosses_kink(base_kinks, k_plus, k_minus):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(gflat[j] - numeric) / max(abs(gflat[j]), abs(numeric), abs_floor)
            checked += 1
            if err > worst or worst_at is None:
                worst = err
                worst_at = ((names[pi] if names else pi), j)
    return GradCheckReport(worst, worst_at, checked, skipped, tolerance)


def grad_check(m: Mlp, x, target, h: float = 1e-5, tolerance: float = 1e-4,
               mode=TRAIN) -> GradCheckReport:
    """Check ``mlp_backward`` of ``mse(forward(x), target)`` against finite differences."""
    if m.dtype != np.float64:
        raise ValidationError("gradient checks require a float64 network")
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    y, tape = m.forward(x, mode, update_stats=False)
    _, grad_y = mse_loss(y, target)
    _, grads = m.backward(tape, grad_y)

    def evaluate():
        out, t = m.forward(x, mode, update_stats=False)
        return mse_loss(out, target)[0], t.relu_inputs

    return check_gradients(evaluate, m.parameters(), grads, h, tolerance, names=parameter_names(m))


def parameter_names(m: Mlp, prefix: str = "") -> list:
    names = []
    for i, layer in enumerate(m.layers):
        if isinstance(layer, Dense):
            names += [f"{prefix}layer{i}.weights", f"{prefix}layer{i}.bias"]
        elif isinstance(layer, BatchNorm):
            names += [f"{prefix}layer{i}.gamma", f"{prefix}layer{i}.beta"]
    return names


# ---------------------------------------------------------------------------
# Binary parameter layout
#
#   mlp   := u32 layer_count, layer*
#   layer := u8 kind, body
#   dense := u32 in, u32 out, f64[in*out] weights (row-major), f64[out] bias
#   bn    := u32 dim, f64 momentum, f64 eps, f64[dim] gamma, beta, running_mean, running_var
#   relu  := u32 dim
#
# All integers and floats little-endian.


def _pack_array(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def write_mlp(fh, m: Mlp) -> None:
    fh.write(struct.pack("<I", len(m.layers)))
    for layer in m.layers:
        fh.write(struct.pack("<B", layer.kind))
        if isinstance(layer, Dense):
            fh.write(struct.pack("<II", layer.in_dim, layer.out_dim))
            fh.write(_pack_array(layer.weights))
            fh.write(_pack_array(layer.bias))
        elif isinstance(layer, BatchNorm):
            fh.write(struct.pack("<Idd", layer.dim, layer.momentum, layer.eps))
            for a in (layer.gamma, layer.beta, layer.running_mean, layer.running_var):
                fh.write(_pack_array(a))
        else:
            fh.write(struct.pack("<I", layer.dim))


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("unexpected end of file")
    return data


def _read_array(fh, shape, dtype):
    count = int(np.prod(shape))
    return np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape).astype(dtype)


def read_mlp(fh, dtype=np.float64) -> Mlp:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    layers = []
    for _ in range(count):
        (kind,) = struct.unpack("<B", _read_exact(fh, 1))
        if kind == Dense.kind:
            a, b = struct.unpack("<II", _read_exact(fh, 8))
            layer = Dense(a, b, None, dtype)
            layer.weights = _read_array(fh, (a, b), dtype)
            layer.bias = _read_array(fh, (b,), dtype)
        elif kind == BatchNorm.kind:
            dim, momentum, eps = struct.unpack("<Idd", _read_exact(fh, 20))
            layer = BatchNorm(dim, momentum, eps, dtype)
            layer.gamma = _read_array(fh, (dim,), dtype)
            layer.beta = _read_array(fh, (dim,), dtype)
            layer.running_mean = _read_array(fh, (dim,), dtype)
            layer.running_var = _read_array(fh, (dim,), dtype)
        elif kind == ReLU.kind:
            (dim,) = struct.unpack("<I", _read_exact(fh, 4))
            layer = ReLU(dim)
        else:
            raise CheckpointError(f"unknown layer kind {kind}")
        layers.append(layer)
    try:
        return Mlp.from_layers(layers)
    except (ShapeError, IndexError) as exc:
        raise CheckpointError(f"inconsistent layer stack: {exc}") from None
