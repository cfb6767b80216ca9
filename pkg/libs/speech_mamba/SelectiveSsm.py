"""
This file implements the selective state space model (S6) at the core of every Mamba block.

Per time step the input decides the step size delta and the input/output
projections B and C. The continuous diagonal system is discretised with a
zero-order hold for A and a simplified Euler rule for B:

    A_bar = exp(delta * A)        B_bar = delta * B
    h_t   = A_bar_t * h_{t-1} + B_bar_t * x_t
    y_t   = <C_t, h_t> + D * x_t

The recurrence is evaluated either step by step or with a work-efficient
associative scan. The scan's backward pass recomputes the hidden states
instead of keeping them from the forward pass.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import tensorflow as tf

from libs.speech_mamba.Errors import ConfigError, NonFiniteError, ShapeError
from libs.speech_mamba.NeuralCore import (
    ParameterLayer,
    as_tensor,
    get_rng,
    linear,
    softplus,
)

logger = logging.getLogger(__name__ + ".py")

# softplus underflows to 0 for very negative inputs; delta never drops below this.
DELTA_FLOOR = float(np.finfo(np.float32).tiny)


@dataclass(frozen=True)
class SsmConfig:
    """Sizes of one selective SSM.

    Args:
        d_inner: channels entering the SSM
        state_dim: hidden state size N per channel
        dt_rank: rank of the delta projection, ceil(d_inner / 16) when None
        dt_min, dt_max: range of the initial step size
    """

    d_inner: int
    state_dim: int = 256
    dt_rank: Optional[int] = None
    dt_min: float = 0.001
    dt_max: float = 0.1

    def __post_init__(self):
        if self.dt_rank is None:
            object.__setattr__(self, "dt_rank", math.ceil(self.d_inner / 16))
        if self.d_inner < 1:
            raise ConfigError("d_inner must be >= 1")
        if self.state_dim < 1:
            raise ConfigError("state_dim must be >= 1")
        if self.dt_rank < 1:
            raise ConfigError("dt_rank must be >= 1")
        if not 0 < self.dt_min < self.dt_max:
            raise ConfigError("need 0 < dt_min < dt_max")


@dataclass
class SsmParams:
    """Trainable SSM quantities. A is stored as -exp(log_a) so it stays negative."""

    log_a: tf.Tensor  # [d_inner, N]
    d_skip: tf.Tensor  # [d_inner]
    w_delta_down: tf.Tensor  # [d_inner, dt_rank]
    w_delta_up: tf.Tensor  # [dt_rank, d_inner]
    b_delta: tf.Tensor  # [d_inner]
    w_b: tf.Tensor  # [d_inner, N]
    w_c: tf.Tensor  # [d_inner, N]

    @property
    def a(self) -> tf.Tensor:
        return -tf.exp(as_tensor(self.log_a))


class ScanElement(NamedTuple):
    """One lane of the linear recurrence: multiplicative carry a, additive carry b."""

    a: object
    b: object


def combine(earlier: ScanElement, later: ScanElement) -> ScanElement:
    """Associative (not commutative) operator of h_t = a_t h_{t-1} + b_t."""
    return ScanElement(earlier.a * later.a, later.a * earlier.b + later.b)


def _rebuild(template, items):
    if hasattr(template, "_fields"):
        return type(template)(*items)
    return tuple(items)


def _slice(elems, start, stop, step, axis):
    index = [slice(None)] * elems[0].shape.rank
    index[axis] = slice(start, stop, step)
    return _rebuild(elems, [elem[tuple(index)] for elem in elems])


def _interleave(even, odd, axis):
    if even.shape[axis] == odd.shape[axis] + 1:
        index = [slice(None)] * even.shape.rank
        index[axis] = slice(0, -1)
        head = _interleave(even[tuple(index)], odd, axis)
        index[axis] = slice(-1, None)
        return tf.concat([head, even[tuple(index)]], axis)
    stacked = tf.stack([even, odd], axis=axis + 1)
    shape = tf.shape(even)
    merged = tf.concat([shape[:axis], [2 * shape[axis]], shape[axis + 1 :]], axis=0)
    return tf.reshape(stacked, merged)


def associative_scan(fn: Callable, elems, axis: int = 1):
    """Inclusive scan of a tuple of tensors along `axis`.

    Pairs neighbours, scans the half-length sequence recursively and fills
    in the even positions. Work is O(T), depth O(log T), any length is
    accepted. Output position t only reads elements 0..t.
    """
    length = int(elems[0].shape[axis])
    if length < 2:
        return elems
    reduced = fn(_slice(elems, 0, -1, 2, axis), _slice(elems, 1, None, 2, axis))
    odd = associative_scan(fn, reduced, axis)
    if length % 2 == 0:
        even = fn(_slice(odd, 0, -1, None, axis), _slice(elems, 2, None, 2, axis))
    else:
        even = fn(odd, _slice(elems, 2, None, 2, axis))
    first = _slice(elems, 0, 1, None, axis)
    even = _rebuild(elems, [tf.concat([f, e], axis) for f, e in zip(first, even)])
    return _rebuild(elems, [_interleave(e, o, axis) for e, o in zip(even, odd)])


def scan_combine_count(length: int) -> int:
    """Number of combine applications associative_scan performs per lane."""
    if length < 2:
        return 0
    half = length // 2
    return half + scan_combine_count(half) + (length - 1) // 2


def selective_ssm_flops(batch: int, length: int, cfg: SsmConfig) -> int:
    """Floating point operation estimate of one selective_ssm_forward call."""
    lanes = batch * cfg.d_inner * cfg.state_dim
    tokens = batch * length
    projections = 2 * tokens * cfg.d_inner * (cfg.dt_rank + 2 * cfg.state_dim)
    projections += 2 * tokens * cfg.dt_rank * cfg.d_inner
    discretize = 4 * length * lanes
    scan = 3 * scan_combine_count(length) * lanes
    readout = 2 * length * lanes + 2 * tokens * cfg.d_inner
    return projections + discretize + scan + readout


def init_ssm_parameters(cfg: SsmConfig, rng: np.random.Generator) -> dict:
    """Initial values: A_n = -(n+1), D = 1, softplus(b_delta) in [dt_min, dt_max]."""
    d_inner, state, rank = cfg.d_inner, cfg.state_dim, cfg.dt_rank
    proj_limit = 1.0 / math.sqrt(d_inner)
    dt = np.exp(
        rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=d_inner)
    )
    dt = np.maximum(dt, 1e-4)
    return {
        "log_a": np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (d_inner, 1))),
        "d_skip": np.ones(d_inner),
        "w_delta_down": rng.uniform(-proj_limit, proj_limit, size=(d_inner, rank)),
        "w_delta_up": rng.uniform(-(rank**-0.5), rank**-0.5, size=(rank, d_inner)),
        "b_delta": dt + np.log(-np.expm1(-dt)),
        "w_b": rng.uniform(-proj_limit, proj_limit, size=(d_inner, state)),
        "w_c": rng.uniform(-proj_limit, proj_limit, size=(d_inner, state)),
    }


def selective_projections(x, p: SsmParams):
    """Input dependent delta [B,T,d_inner], B [B,T,N] and C [B,T,N]."""
    x = as_tensor(x)
    if x.shape.rank != 3 or x.shape[-1] != p.w_b.shape[0]:
        raise ShapeError(f"SSM input {x.shape} does not match d_inner {p.w_b.shape[0]}")
    low_rank = linear(x, p.w_delta_down)
    delta = softplus(linear(low_rank, p.w_delta_up, p.b_delta)) + DELTA_FLOOR
    b_sel = linear(x, p.w_b)
    c_sel = linear(x, p.w_c)
    return delta, b_sel, c_sel


def discretize(a, b_sel, delta):
    """Zero-order hold for A, Euler rule for B.

    Args:
        a: [d_inner, N], strictly negative
        b_sel: [B, T, N]
        delta: [B, T, d_inner], positive

    Returns:
        (A_bar, B_bar), both [B, T, d_inner, N]
    """
    a = as_tensor(a)
    b_sel = as_tensor(b_sel, a.dtype)
    delta = as_tensor(delta, a.dtype)
    if not bool(tf.reduce_all(a < 0)):
        raise ConfigError("SSM matrix A must be strictly negative")
    a_bar = tf.exp(delta[..., None] * a)
    b_bar = delta[..., None] * b_sel[:, :, None, :]
    if not bool(tf.reduce_all(tf.math.is_finite(a_bar))):
        raise NonFiniteError("discretised A is not finite")
    return a_bar, b_bar


def ssm_scan_sequential(a_bar, b_bar, c_sel, x, d_skip) -> tf.Tensor:
    """Step by step evaluation of the recurrence, h_0 = 0."""
    a_bar = as_tensor(a_bar)
    b_bar, c_sel, x, d_skip = (as_tensor(t, a_bar.dtype) for t in (b_bar, c_sel, x, d_skip))
    hidden = tf.zeros_like(a_bar[:, 0])
    outputs = []
    for step in range(int(a_bar.shape[1])):
        hidden = a_bar[:, step] * hidden + b_bar[:, step] * x[:, step, :, None]
        outputs.append(tf.reduce_sum(hidden * c_sel[:, step, None, :], axis=-1))
    return tf.stack(outputs, axis=1) + x * d_skip


def _hidden_states(a_bar, b_bar, x):
    drive = b_bar * x[..., None]
    return associative_scan(combine, ScanElement(a_bar, drive), axis=1).b


def _readout(hidden, c_sel, x, d_skip):
    return tf.einsum("btdn,btn->btd", hidden, c_sel) + x * d_skip


@tf.custom_gradient
def _parallel_scan(a_bar, b_bar, c_sel, x, d_skip):
    y = _readout(_hidden_states(a_bar, b_bar, x), c_sel, x, d_skip)

    def grad(dy):
        hidden = _hidden_states(a_bar, b_bar, x)
        # adjoint_t = C_t dy_t + A_bar_{t+1} adjoint_{t+1}, scanned back to front
        drive = dy[..., None] * c_sel[:, :, None, :]
        a_next = tf.concat([a_bar[:, 1:], tf.ones_like(a_bar[:, :1])], axis=1)
        reversed_scan = associative_scan(
            combine,
            ScanElement(tf.reverse(a_next, [1]), tf.reverse(drive, [1])),
            axis=1,
        )
        adjoint = tf.reverse(reversed_scan.b, [1])
        previous = tf.concat([tf.zeros_like(hidden[:, :1]), hidden[:, :-1]], axis=1)
        d_a_bar = adjoint * previous
        d_b_bar = adjoint * x[..., None]
        d_c = tf.einsum("btd,btdn->btn", dy, hidden)
        d_x = tf.reduce_sum(adjoint * b_bar, axis=-1) + dy * d_skip
        d_d = tf.reduce_sum(dy * x, axis=[0, 1])
        return d_a_bar, d_b_bar, d_c, d_x, d_d

    return y, grad


def ssm_scan_parallel(a_bar, b_bar, c_sel, x, d_skip) -> tf.Tensor:
    """Associative-scan evaluation of the recurrence; same result as the sequential form."""
    a_bar = as_tensor(a_bar)
    b_bar, c_sel, x, d_skip = (as_tensor(t, a_bar.dtype) for t in (b_bar, c_sel, x, d_skip))
    return _parallel_scan(a_bar, b_bar, c_sel, x, d_skip)


def selective_ssm_forward(x, p: SsmParams, parallel: bool = True) -> tf.Tensor:
    """projections -> discretize -> scan; [B,T,d_inner] in and out."""
    x = as_tensor(x)
    delta, b_sel, c_sel = selective_projections(x, p)
    a_bar, b_bar = discretize(p.a, b_sel, delta)
    scan = ssm_scan_parallel if parallel else ssm_scan_sequential
    return scan(a_bar, b_bar, c_sel, x, as_tensor(p.d_skip, x.dtype))


def hidden_state_bound(a_bar, b_bar, x) -> float:
    """Upper bound max|B_bar x| / (1 - max A_bar) of every hidden state entry.

    Returns inf when some A_bar rounds to 1 (tiny step sizes in float32), where no
    finite geometric bound exists.
    """
    a_bar = np.asarray(a_bar, dtype=np.float64)
    drive = np.abs(np.asarray(b_bar) * np.asarray(x)[..., None])
    gap = 1.0 - a_bar.max()
    if not gap > 0.0:
        return float("inf")
    return float(drive.max() / gap)


class SelectiveSsm(ParameterLayer):
    """Layer owning one set of SsmParams."""

    def __init__(self, cfg: SsmConfig, name=None, dtype=None):
        super().__init__(name=name, dtype=dtype)
        self.config = cfg
        for key, values in init_ssm_parameters(cfg, get_rng()).items():
            self.new_weight(key, values)

    def params(self) -> SsmParams:
        return SsmParams(
            log_a=self.log_a,
            d_skip=self.d_skip,
            w_delta_down=self.w_delta_down,
            w_delta_up=self.w_delta_up,
            b_delta=self.b_delta,
            w_b=self.w_b,
            w_c=self.w_c,
        )

    def call(self, x, parallel=True):
        return selective_ssm_forward(x, self.params(), parallel=parallel)
