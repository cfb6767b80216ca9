"""
This file provides the dense tensor primitives shared by all networks of the toolkit.

Tensors are TensorFlow tensors; reverse-mode gradients come from tf.GradientTape.
The functions here are stateless. Trainable state lives in ParameterLayer
subclasses, which register every weight under a canonical dotted name.
"""
import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from libs.speech_mamba.Errors import (
    ConfigError,
    MaskError,
    NonFiniteError,
    ShapeError,
    VocabularyError,
)

logger = logging.getLogger(__name__ + ".py")

# Logit used for masked attention / impossible CTC states. exp(MASK_VALUE - m) is exactly 0.
MASK_VALUE = -1e30

_RNG = np.random.default_rng(0)


def set_seed(seed: int):
    """Seeds numpy, python, TensorFlow and the generator used for init and dropout."""
    global _RNG
    _RNG = np.random.default_rng(int(seed))
    np.random.seed(int(seed))
    random.seed(int(seed))
    tf.random.set_seed(int(seed))


def get_rng() -> np.random.Generator:
    """Returns the module generator drawing initial weights and dropout masks."""
    return _RNG


def as_tensor(x, dtype=None) -> tf.Tensor:
    """Converts arrays, variables and python numbers to a tensor.

    Numpy and python input takes `dtype` or the Keras floatx; tensors keep their
    dtype unless `dtype` is given.
    """
    if isinstance(x, (np.ndarray, np.generic, float, int, list, tuple)):
        target = tf.as_dtype(dtype or tf.keras.backend.floatx())
        return tf.constant(np.asarray(x, dtype=target.as_numpy_dtype))
    tensor = tf.convert_to_tensor(x)
    if dtype is not None and tensor.dtype != tf.as_dtype(dtype):
        tensor = tf.cast(tensor, dtype)
    return tensor


@dataclass(frozen=True)
class AttentionConfig:
    """Multi-head attention hyper parameters."""

    model_dim: int = 512
    num_heads: int = 8
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ConfigError(f"dropout_p {self.dropout_p} outside [0, 1]")


@dataclass
class AttentionWeights:
    """Projection weights of one attention module; kernels are [d, d]."""

    w_q: tf.Tensor
    b_q: tf.Tensor
    w_k: tf.Tensor
    b_k: tf.Tensor
    w_v: tf.Tensor
    b_v: tf.Tensor
    w_o: tf.Tensor
    b_o: tf.Tensor


def matmul(a, b) -> tf.Tensor:
    """Matrix product over the last two axes with broadcast batch axes."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.shape.rank < 2 or b.shape.rank < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    try:
        tf.broadcast_static_shape(a.shape[:-2], b.shape[:-2])
    except ValueError as err:
        raise ShapeError(
            f"matmul batch dimensions not broadcastable: {a.shape} and {b.shape}"
        ) from err
    return tf.linalg.matmul(a, b)


def linear(x, kernel, bias=None) -> tf.Tensor:
    """Applies x @ kernel (+ bias) on the last axis."""
    y = matmul(x, kernel)
    if bias is not None:
        y = y + bias
    return y


def silu(x) -> tf.Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    return x * tf.sigmoid(x)


def softplus(x) -> tf.Tensor:
    return tf.nn.softplus(as_tensor(x))


def rms_norm(x, gain, eps: float = 1e-8) -> tf.Tensor:
    """Root mean square normalisation over the last axis."""
    x = as_tensor(x)
    gain = as_tensor(gain, x.dtype)
    if gain.shape.rank != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm gain {gain.shape} does not match input {x.shape}")
    if eps <= 0:
        raise ConfigError("rms_norm eps must be positive")
    mean_square = tf.reduce_mean(tf.square(x), axis=-1, keepdims=True)
    return x * tf.math.rsqrt(mean_square + eps) * gain


def layer_norm(x, gain, bias, eps: float = 1e-5) -> tf.Tensor:
    """Mean/variance normalisation over the last axis (Transformer baseline)."""
    x = as_tensor(x)
    if gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"layer_norm gain {gain.shape} does not match input {x.shape}")
    mean = tf.reduce_mean(x, axis=-1, keepdims=True)
    variance = tf.reduce_mean(tf.square(x - mean), axis=-1, keepdims=True)
    return (x - mean) * tf.math.rsqrt(variance + eps) * gain + bias


def softmax(x, axis: int = -1) -> tf.Tensor:
    """Max-shifted softmax."""
    x = as_tensor(x)
    shifted = x - tf.stop_gradient(tf.reduce_max(x, axis=axis, keepdims=True))
    exps = tf.exp(shifted)
    return exps / tf.reduce_sum(exps, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> tf.Tensor:
    x = as_tensor(x)
    shifted = x - tf.stop_gradient(tf.reduce_max(x, axis=axis, keepdims=True))
    return shifted - tf.math.log(tf.reduce_sum(tf.exp(shifted), axis=axis, keepdims=True))


def causal_depthwise_conv1d(x, kernel, bias) -> tf.Tensor:
    """Per-channel causal convolution.

    Args:
        x: [B, T, C] input
        kernel: [C, W] taps, tap W-1 multiplies the current step
        bias: [C]

    Returns:
        [B, T, C]; output t only reads inputs t-W+1 .. t.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x.dtype)
    if kernel.shape.rank != 2 or kernel.shape[0] != x.shape[-1]:
        raise ShapeError(f"conv kernel {kernel.shape} does not match channels of {x.shape}")
    width = int(kernel.shape[1])
    if width < 1:
        raise ShapeError("conv kernel width must be >= 1")
    steps = int(x.shape[1])
    padded = tf.pad(x, [[0, 0], [width - 1, 0], [0, 0]])
    y = tf.zeros_like(x) + bias
    for tap in range(width):
        y = y + kernel[:, tap] * padded[:, tap : tap + steps, :]
    return y


def make_padding_mask(key_lengths, num_queries: int, num_keys: int) -> np.ndarray:
    """Boolean [B, Tq, Tk] mask that is True on keys inside each length."""
    key_lengths = np.asarray(key_lengths, dtype=np.int64)
    keys = np.arange(num_keys)[None, :] < key_lengths[:, None]
    return np.broadcast_to(keys[:, None, :], (len(key_lengths), num_queries, num_keys)).copy()


def make_causal_mask(steps: int) -> np.ndarray:
    """Boolean [T, T] lower triangular mask."""
    return np.tril(np.ones((steps, steps), dtype=bool))


def multi_head_attention(
    query,
    key,
    value,
    cfg: AttentionConfig,
    attn_mask=None,
    weights: Optional[AttentionWeights] = None,
    training: bool = False,
) -> tf.Tensor:
    """Scaled dot-product attention with heads, followed by an output projection.

    Args:
        query: [B, Tq, d]
        key, value: [B, Tk, d]
        cfg: model_dim must equal d
        attn_mask: optional boolean [B, Tq, Tk] or [Tq, Tk]; True marks visible keys
        weights: projections; identity projections when None
        training: enables dropout on the attention probabilities

    Returns:
        [B, Tq, d]
    """
    query = as_tensor(query)
    key = as_tensor(key, query.dtype)
    value = as_tensor(value, query.dtype)
    dim = cfg.model_dim
    for tensor, label in ((query, "query"), (key, "key"), (value, "value")):
        if tensor.shape.rank != 3 or tensor.shape[-1] != dim:
            raise ShapeError(f"{label} {tensor.shape} does not match model_dim {dim}")
    batch, num_q, num_k = int(query.shape[0]), int(query.shape[1]), int(key.shape[1])

    if weights is not None:
        query = linear(query, weights.w_q, weights.b_q)
        key = linear(key, weights.w_k, weights.b_k)
        value = linear(value, weights.w_v, weights.b_v)

    heads = cfg.num_heads
    head_dim = dim // heads

    def split(tensor, steps):
        return tf.transpose(tf.reshape(tensor, [batch, steps, heads, head_dim]), [0, 2, 1, 3])

    scores = matmul(split(query, num_q), tf.transpose(split(key, num_k), [0, 1, 3, 2]))
    scores = scores / math.sqrt(head_dim)

    mask = None
    if attn_mask is not None:
        mask = tf.convert_to_tensor(np.asarray(attn_mask, dtype=bool))
        if mask.shape.rank == 2:
            mask = tf.broadcast_to(mask[None], [batch, num_q, num_k])
        if mask.shape != (batch, num_q, num_k):
            raise ShapeError(
                f"attention mask {mask.shape} does not match [{batch}, {num_q}, {num_k}]"
            )
        if not bool(tf.reduce_all(tf.reduce_any(mask, axis=-1))):
            raise MaskError("attention mask hides every key of at least one query row")
        mask = mask[:, None, :, :]
        scores = tf.where(mask, scores, tf.constant(MASK_VALUE, dtype=scores.dtype))

    probs = softmax(scores, axis=-1)
    if mask is not None:
        probs = probs * tf.cast(mask, probs.dtype)
    probs = dropout(probs, cfg.dropout_p, training)

    context = matmul(probs, split(value, num_k))
    context = tf.reshape(tf.transpose(context, [0, 2, 1, 3]), [batch, num_q, dim])
    if weights is not None:
        context = linear(context, weights.w_o, weights.b_o)
    return context


def sinusoidal_positional_encoding(steps: int, dim: int, dtype=None) -> tf.Tensor:
    """PE[t, 2i] = sin(t / 10000^(2i/d)), PE[t, 2i+1] = cos(t / 10000^(2i/d))."""
    if dim % 2 != 0:
        raise ShapeError(f"positional encoding needs an even dimension, got {dim}")
    positions = np.arange(steps, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((steps, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    return as_tensor(table, dtype)


def embedding_lookup(table, ids) -> tf.Tensor:
    """Row lookup; ids must lie in [0, V)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = int(table.shape[0])
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabularyError(
            f"embedding ids must lie in [0, {vocab}), got range [{ids.min()}, {ids.max()}]"
        )
    return tf.gather(table, ids)


def dropout(x, p: float, training: bool) -> tf.Tensor:
    """Inverted dropout; identity when not training."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1)")
    x = as_tensor(x)
    keep = _RNG.random(tuple(x.shape)) >= p
    return x * tf.constant(keep / (1.0 - p), dtype=x.dtype)


def glorot_uniform(fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return _RNG.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _constant_initializer(values: np.ndarray):
    def initializer(shape, dtype=None, **kwargs):
        return tf.constant(np.reshape(values, shape), dtype=dtype)

    return initializer


class ParameterLayer(tf.keras.layers.Layer):
    """Keras layer keeping a registry of canonical parameter names.

    Weights are created from numpy arrays with `new_weight`, sub-layers are
    registered with `new_child`. `named_parameters` walks the registry and yields
    dotted names such as `encoder.blocks.0.mamba_in.in_proj`.
    """

    def __init__(self, name=None, dtype=None):
        super().__init__(name=name, dtype=dtype or tf.keras.backend.floatx())
        # weights are created eagerly, so there is nothing left to build on first call
        self.built = True
        # lengths are passed positionally as python lists; newer Keras rejects that by default
        self._allow_non_tensor_positional_args = True
        self._parameter_names = []
        self._child_paths = []

    def new_weight(self, name: str, values: np.ndarray):
        variable = self.add_weight(
            name=name,
            shape=tuple(np.shape(values)),
            initializer=_constant_initializer(np.asarray(values)),
            dtype=self.dtype,
            trainable=True,
        )
        setattr(self, name, variable)
        self._parameter_names.append(name)
        return variable

    def new_child(self, path: str, layer: "ParameterLayer"):
        setattr(self, path.replace(".", "_"), layer)
        self._child_paths.append(path)
        return layer

    def child(self, path: str) -> "ParameterLayer":
        return getattr(self, path.replace(".", "_"))

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, tf.Variable]]:
        for name in self._parameter_names:
            yield prefix + name, getattr(self, name)
        for path in self._child_paths:
            yield from self.child(path).named_parameters(prefix + path + ".")


class MultiHeadAttention(ParameterLayer):
    """Attention module with its own q/k/v/output projections."""

    def __init__(self, cfg: AttentionConfig, zero_output: bool = False, name=None, dtype=None):
        super().__init__(name=name, dtype=dtype)
        self.config = cfg
        dim = cfg.model_dim
        for label in ("q", "k", "v"):
            self.new_weight(f"w_{label}", glorot_uniform(dim, dim))
            self.new_weight(f"b_{label}", np.zeros(dim))
        self.new_weight("w_o", np.zeros((dim, dim)) if zero_output else glorot_uniform(dim, dim))
        self.new_weight("b_o", np.zeros(dim))

    def attention_weights(self) -> AttentionWeights:
        return AttentionWeights(
            self.w_q, self.b_q, self.w_k, self.b_k, self.w_v, self.b_v, self.w_o, self.b_o
        )

    def call(self, query, key, value, attn_mask=None, training=False):
        return multi_head_attention(
            query,
            key,
            value,
            self.config,
            attn_mask=attn_mask,
            weights=self.attention_weights(),
            training=training,
        )


def gradients(f: Callable[[], tf.Tensor], params: Sequence) -> List[np.ndarray]:
    """Reverse-mode gradients of the scalar f() with respect to params.

    Parameters that do not take part in f get an all-zero gradient.
    """
    with tf.GradientTape() as tape:
        for param in params:
            if isinstance(param, (tf.Variable, tf.Tensor)):
                tape.watch(param)
        value = f()
    grads = tape.gradient(
        value, list(params), unconnected_gradients=tf.UnconnectedGradients.ZERO
    )
    return [np.asarray(tf.convert_to_tensor(grad)) for grad in grads]


@dataclass
class GradCheckReport:
    """Result of comparing reverse-mode and central-difference gradients."""

    name: str
    max_rel_error: float
    coordinates: int
    worst: str

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold


def grad_check(
    f: Callable[[], tf.Tensor],
    params: Sequence,
    eps: float = 1e-5,
    name: str = "f",
    coords_per_param: Optional[int] = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compares tape gradients of f with (f(x+eps) - f(x-eps)) / (2 eps).

    Args:
        f: deterministic scalar function reading the variables in `params`
        params: assignable variables
        eps: finite difference step
        name: label used in the report
        coords_per_param: sample this many coordinates of each parameter; all when None
        floor: lower bound of the relative error denominator

    Returns:
        GradCheckReport with the largest relative error seen.
    """
    analytic = gradients(f, params)
    for grad in analytic:
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"{name}: reverse-mode gradient is not finite")

    max_error, worst, checked = 0.0, "", 0
    for index, (param, grad) in enumerate(zip(params, analytic)):
        base = np.array(param.numpy(), dtype=np.float64)
        size = base.size
        if coords_per_param is None or coords_per_param >= size:
            coords = range(size)
        else:
            coords = np.sort(_RNG.choice(size, size=coords_per_param, replace=False))
        for coord in coords:
            shifted = base.copy().reshape(-1)
            shifted[coord] = base.flat[coord] + eps
            param.assign(shifted.reshape(base.shape))
            f_plus = float(f())
            shifted[coord] = base.flat[coord] - eps
            param.assign(shifted.reshape(base.shape))
            f_minus = float(f())
            param.assign(base)
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NonFiniteError(f"{name}: function value is not finite")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = float(grad.flat[coord])
            error = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
            checked += 1
            if error > max_error:
                max_error, worst = error, f"param {index} coord {coord}"
    logger.info("grad check %s: max rel error %.3e over %d coords", name, max_error, checked)
    return GradCheckReport(name=name, max_rel_error=max_error, coordinates=checked, worst=worst)
