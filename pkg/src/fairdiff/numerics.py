"""Numerical substrate: a small tanh MLP with hand-written backprop, Adam,
and a splittable counter-based random number generator.

Everything is float64. Weight matrices are stored ``(fan_in, fan_out)`` so a
layer computes ``x @ W + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, ParseError, ShapeError

# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------
#
# Generator: SplitMix64 in counter form. Draw number c (c = 1, 2, ...) of a
# stream with 64-bit key k is
#
#     mix64(k + c * 0x9E3779B97F4A7C15)        (mod 2**64)
#
# where mix64 is the SplitMix64 xorshift-multiply finalizer. A uniform in
# [0, 1) takes the top 53 bits. Keys are derived by hashing (seed, stream) and
# split children hash (parent key, index), so splitting never consumes draws.
# Gaussians use the Marsaglia polar method on consecutive uniform pairs.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STREAM_SALT = 0xD1B54A32D192ED03
_SPLIT_SALT = 0x8CB92BA72F3D8DD7
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(_mix64(np.array([value & _MASK64], dtype=np.uint64))[0])


def _uniform_rows(keys: np.ndarray, counters: np.ndarray, k: int) -> np.ndarray:
    steps = np.arange(1, k + 1, dtype=np.uint64)
    idx = counters[:, None] + steps[None, :]
    bits = _mix64(keys[:, None] + idx * _GOLDEN)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _gaussian_rows(keys: np.ndarray, counters: np.ndarray, k: int) -> np.ndarray:
    """Polar-method normals, row by row; advances ``counters`` in place.

    Each row draws fixed-size chunks of candidate pairs until it has enough
    accepted pairs, so a row's output depends only on its own key/counter.
    """
    n = keys.shape[0]
    pairs = (k + 1) // 2
    chunk = pairs + pairs // 3 + 4
    out = np.empty((n, 2 * pairs))
    filled = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    while active.size:
        u = _uniform_rows(keys[active], counters[active], 2 * chunk)
        counters[active] += np.uint64(2 * chunk)
        v = 2.0 * u.reshape(active.size, chunk, 2) - 1.0
        s = v[..., 0] ** 2 + v[..., 1] ** 2
        ok = (s > 0.0) & (s < 1.0)
        safe = np.where(ok, s, 0.5)
        factor = np.sqrt(-2.0 * np.log(safe) / safe)
        rank = np.cumsum(ok, axis=1) - 1 + filled[active, None]
        take = ok & (rank < pairs)
        rows, cols = np.nonzero(take)
        dest = rank[rows, cols]
        src_rows = active[rows]
        out[src_rows, 2 * dest] = v[rows, cols, 0] * factor[rows, cols]
        out[src_rows, 2 * dest + 1] = v[rows, cols, 1] * factor[rows, cols]
        filled[active] = np.minimum(filled[active] + ok.sum(axis=1), pairs)
        active = active[filled[active] < pairs]
    return out[:, :k]


class Rng:
    """One reproducible random stream.

    Identical (seed, stream, split path, call sequence) gives bit-identical
    draws on every platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        key = _mix_int(_mix_int(self.seed) ^ _mix_int(self.stream * _STREAM_SALT + 1))
        self._key = np.array([key], dtype=np.uint64)
        self._counter = np.zeros(1, dtype=np.uint64)

    @classmethod
    def _from_key(cls, key: int, seed: int, stream: int) -> "Rng":
        r = cls.__new__(cls)
        r.seed, r.stream = seed, stream
        r._key = np.array([key], dtype=np.uint64)
        r._counter = np.zeros(1, dtype=np.uint64)
        return r

    @property
    def key(self) -> int:
        return int(self._key[0])

    def split(self, index: int) -> "Rng":
        """Child stream keyed by ``index``; independent of draws made so far."""
        child = _mix_int(self.key ^ _mix_int((int(index) * _SPLIT_SALT + 0x51ED27) & _MASK64))
        return Rng._from_key(child, self.seed, self.stream)

    def uniform(self, size: int | None = None):
        k = 1 if size is None else int(size)
        out = _uniform_rows(self._key, self._counter, k)[0]
        self._counter += np.uint64(k)
        return float(out[0]) if size is None else out

    def gaussian(self, size: int | None = None):
        k = 1 if size is None else int(size)
        out = _gaussian_rows(self._key, self._counter, k)[0]
        return float(out[0]) if size is None else out


class RngBank:
    """``n`` independent streams ``base.split(0) ... base.split(n-1)`` drawn in
    lock-step. Row ``i`` of every draw equals what ``base.split(i)`` would
    produce on its own under the same call sequence."""

    def __init__(self, base: Rng, n: int):
        children = [base.split(i) for i in range(n)]
        self.keys = np.array([c.key for c in children], dtype=np.uint64)
        self.counters = np.zeros(n, dtype=np.uint64)

    def __len__(self):
        return self.keys.shape[0]

    def uniform(self, k: int) -> np.ndarray:
        out = _uniform_rows(self.keys, self.counters, k)
        self.counters += np.uint64(k)
        return out

    def gaussian(self, k: int) -> np.ndarray:
        return _gaussian_rows(self.keys, self.counters, k)


def rng_uniform(r: Rng) -> float:
    return r.uniform()


def rng_gaussian(r: Rng) -> float:
    return r.gaussian()


def rng_split(r: Rng, index: int) -> Rng:
    return r.split(index)


def permutation(r: Rng, n: int) -> np.ndarray:
    """Uniform random permutation of ``range(n)`` (Fisher-Yates)."""
    perm = np.arange(n)
    u = r.uniform(max(n - 1, 0))
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class Mlp:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.sizes}")
        if self.hidden_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("parameter count does not match layer sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} "
                                 f"incompatible with sizes {self.sizes}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: Rng, hidden_activation: str = "tanh") -> "Mlp":
        """Xavier-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            u = rng.uniform(fan_in * fan_out).reshape(fan_in, fan_out)
            weights.append((2.0 * u - 1.0) * bound)
            biases.append(np.zeros(fan_out))
        return cls(tuple(sizes), weights, biases, hidden_activation)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(self.sizes, list(params[0::2]), list(params[1::2]), self.hidden_activation)

    def copy(self) -> "Mlp":
        return self.with_params([p.copy() for p in self.params])

    def _act(self, h):
        return np.tanh(h) if self.hidden_activation == "tanh" else h

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"input shape {x.shape} does not match input size {self.sizes[0]}")
        return x

    def _forward_cache(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = self._act(h)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        """Accepts one vector ``(in,)`` or a batch ``(n, in)``."""
        return self._forward_cache(self._check_input(x))[-1]

    def backward(self, x, upstream) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(upstream * forward(x))``.

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
        :attr:`params`. Batched inputs sum parameter gradients over rows.
        """
        x = self._check_input(x)
        upstream = np.asarray(upstream, dtype=np.float64)
        out_shape = x.shape[:-1] + (self.sizes[-1],)
        if upstream.shape != out_shape:
            raise ShapeError(f"upstream gradient shape {upstream.shape}, expected {out_shape}")
        single = x.ndim == 1
        acts = self._forward_cache(x[None, :] if single else x)
        delta = upstream[None, :] if single else upstream
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0 and self.hidden_activation == "tanh":
                delta = delta * (1.0 - acts[i] ** 2)
        return grads, (delta[0] if single else delta)


def mlp_forward(m: Mlp, x) -> np.ndarray:
    return m.forward(x)


def mlp_backward(m: Mlp, x, upstream):
    return m.backward(x, upstream)


# checkpoint text format ----------------------------------------------------

CKPT_MAGIC = "MLPCKPT v1"


def _fmt(values) -> str:
    return " ".join("%.17g" % v for v in np.ravel(values))


def mlp_to_lines(m: Mlp) -> list[str]:
    lines = [CKPT_MAGIC, " ".join(str(s) for s in m.sizes)]
    lines += [_fmt(p) for p in m.params]
    return lines


def mlp_from_lines(lines: Sequence[str], start: int = 0) -> tuple[Mlp, int]:
    """Parse an MLP block; returns the model and the index after it."""
    if len(lines) < start + 2 or lines[start].strip() != CKPT_MAGIC:
        raise ParseError(f"expected {CKPT_MAGIC!r}", line=start + 1)
    try:
        sizes = tuple(int(s) for s in lines[start + 1].split())
    except ValueError as exc:
        raise ParseError(f"bad layer sizes: {exc}", line=start + 2) from None
    params = []
    pos = start + 2
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            if pos >= len(lines):
                raise ParseError("truncated checkpoint", line=pos + 1)
            try:
                vals = np.array([float(v) for v in lines[pos].split()])
            except ValueError as exc:
                raise ParseError(str(exc), line=pos + 1) from None
            if vals.size != int(np.prod(shape)):
                raise ParseError(f"expected {int(np.prod(shape))} values, got {vals.size}",
                                 line=pos + 1)
            params.append(vals.reshape(shape))
            pos += 1
    m = Mlp(sizes, params[0::2], params[1::2])
    return m, pos


def save_mlp(m: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(mlp_to_lines(m)) + "\n")


def load_mlp(path) -> Mlp:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    return mlp_from_lines(lines)[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``;
    inputs are not modified."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ShapeError("params, grads and moments differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
