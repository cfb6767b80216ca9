"""
This file holds the networks of the joint CTC/attention recogniser.

The default topology stacks Mamba encoder blocks (Mamba -> RMSNorm + self
attention -> Mamba) on a convolutional front-end, and Mamba decoder blocks
(Mamba -> RMSNorm + source-target attention -> Mamba) on a text embedding.
The Transformer encoder/decoder blocks of the baseline are kept for the
ablation variants; `build_variant` picks the blocks from the config flags.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import tensorflow as tf

from libs.speech_mamba.Errors import ConfigError, ShapeError
from libs.speech_mamba.NeuralCore import (
    AttentionConfig,
    MultiHeadAttention,
    ParameterLayer,
    as_tensor,
    dropout,
    embedding_lookup,
    get_rng,
    glorot_uniform,
    layer_norm,
    linear,
    make_causal_mask,
    make_padding_mask,
    rms_norm,
    set_seed,
    silu,
    sinusoidal_positional_encoding,
    causal_depthwise_conv1d,
)
from libs.speech_mamba.SelectiveSsm import SelectiveSsm, SsmConfig

logger = logging.getLogger(__name__ + ".py")

BLANK_ID = 0
BOS_ID = 1
EOS_ID = 2
FIRST_SYMBOL_ID = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the recogniser.

    vocab_size counts the ids 1..V (BOS, EOS and the symbols); the CTC head adds
    the blank id 0. mamba_decoder=None follows use_s2s.
    """

    d_model: int = 512
    num_heads: int = 8
    encoder_blocks: int = 7
    decoder_blocks: int = 3
    conv_width: int = 4
    ssm_state: int = 256
    expand: int = 2
    dt_rank: Optional[int] = None
    vocab_size: int = 5000
    dropout_p: float = 0.1
    frontend_subsample: int = 4
    frontend_channels: Tuple[int, ...] = (64, 32)
    n_mels: int = 80
    mamba_encoder: bool = True
    mamba_decoder: Optional[bool] = None
    use_s2s: bool = True
    transformer_encoder_blocks: int = 12
    transformer_decoder_blocks: int = 6
    ffn_dim: int = 2048
    encoder_positional_encoding: bool = True
    final_norm: bool = True
    zero_init_residual: bool = True
    rms_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "frontend_channels", tuple(int(c) for c in self.frontend_channels))
        positive = (
            "d_model",
            "num_heads",
            "encoder_blocks",
            "conv_width",
            "ssm_state",
            "expand",
            "vocab_size",
            "n_mels",
            "transformer_encoder_blocks",
            "ffn_dim",
        )
        for key in positive:
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} is not divisible by num_heads {self.num_heads}"
            )
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for the positional encoding")
        if self.vocab_size < FIRST_SYMBOL_ID:
            raise ConfigError(f"vocab_size must cover BOS, EOS and one symbol, got {self.vocab_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p {self.dropout_p} outside [0, 1)")
        if not self.frontend_channels or min(self.frontend_channels) < 1:
            raise ConfigError("frontend_channels must be a non-empty list of positive ints")
        if self.frontend_subsample != 2 ** len(self.frontend_channels):
            raise ConfigError(
                f"frontend_subsample {self.frontend_subsample} does not match "
                f"{len(self.frontend_channels)} stride-2 convolutions"
            )
        if self.dt_rank is not None and self.dt_rank < 1:
            raise ConfigError("dt_rank must be >= 1")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if not self.use_s2s and self.mamba_decoder is not None:
            raise ConfigError("mamba_decoder is set but use_s2s=false removes the decoder")
        if self.use_s2s:
            blocks = self.decoder_blocks if self.decoder_is_mamba else self.transformer_decoder_blocks
            if blocks < 1:
                raise ConfigError("use_s2s=true needs at least one decoder block")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def decoder_is_mamba(self) -> bool:
        return self.use_s2s if self.mamba_decoder is None else bool(self.mamba_decoder)

    @property
    def ssm_config(self) -> SsmConfig:
        return SsmConfig(d_inner=self.d_inner, state_dim=self.ssm_state, dt_rank=self.dt_rank)

    @property
    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.num_heads, self.dropout_p)

    @property
    def frontend_freq(self) -> int:
        freq = self.n_mels
        for _ in self.frontend_channels:
            freq = (freq + 1) // 2
        return freq


@dataclass
class AsrOutput:
    """Result of forward_asr. s2s_logits is None when the model has no decoder."""

    ctc_logits: tf.Tensor
    s2s_logits: Optional[tf.Tensor]
    enc_out: tf.Tensor
    enc_lens: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def subsampled_lengths(lengths, stages: int) -> np.ndarray:
    """ceil(len / 2) per stride-2 convolution."""
    lengths = np.asarray(lengths, dtype=np.int64)
    for _ in range(stages):
        lengths = (lengths + 1) // 2
    return lengths


def _time_mask(lengths, steps: int, dtype) -> tf.Tensor:
    valid = np.arange(steps)[None, :] < np.asarray(lengths)[:, None]
    return tf.constant(valid.astype(tf.as_dtype(dtype).as_numpy_dtype))


class ConvFrontend(ParameterLayer):
    """Stride-2 3x3 convolutions with ReLU, then a linear map to d_model."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        in_channels = 1
        for index, channels in enumerate(cfg.frontend_channels):
            fan_in = 9 * in_channels
            limit = 1.0 / math.sqrt(fan_in)
            self.new_weight(
                f"conv{index}_kernel",
                get_rng().uniform(-limit, limit, size=(3, 3, in_channels, channels)),
            )
            self.new_weight(f"conv{index}_bias", get_rng().uniform(-limit, limit, size=channels))
            in_channels = channels
        flat = cfg.frontend_freq * cfg.frontend_channels[-1]
        self.new_weight("proj_kernel", glorot_uniform(flat, cfg.d_model))
        self.new_weight("proj_bias", np.zeros(cfg.d_model))

    def call(self, features, feat_lens):
        cfg = self.config
        features = as_tensor(features, self.dtype)
        if features.shape.rank != 3 or features.shape[-1] != cfg.n_mels:
            raise ShapeError(f"features {features.shape} are not [B, T, {cfg.n_mels}]")
        steps = int(features.shape[1])
        feat_lens = np.asarray(feat_lens, dtype=np.int64)
        if steps < cfg.frontend_subsample or feat_lens.min() < cfg.frontend_subsample:
            raise ShapeError(
                f"utterances need at least {cfg.frontend_subsample} frames, "
                f"got T={steps}, shortest length {int(feat_lens.min())}"
            )
        x = (features * _time_mask(feat_lens, steps, self.dtype)[:, :, None])[..., None]
        lengths = feat_lens
        for index in range(len(cfg.frontend_channels)):
            x = tf.pad(x, [[0, 0], [1, 1], [1, 1], [0, 0]])
            x = tf.nn.conv2d(x, getattr(self, f"conv{index}_kernel"), strides=2, padding="VALID")
            x = tf.nn.relu(x + getattr(self, f"conv{index}_bias"))
            lengths = subsampled_lengths(lengths, 1)
            x = x * _time_mask(lengths, int(x.shape[1]), self.dtype)[:, :, None, None]
        batch, frames = int(x.shape[0]), int(x.shape[1])
        x = tf.reshape(x, [batch, frames, -1])
        x = linear(x, self.proj_kernel, self.proj_bias)
        if cfg.encoder_positional_encoding:
            x = x + sinusoidal_positional_encoding(frames, cfg.d_model, self.dtype)
        return x, lengths


class MambaBlock(ParameterLayer):
    """RMSNorm -> (in_proj -> causal conv -> SiLU -> selective SSM) * SiLU(gate) -> out_proj, residual."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        d_model, d_inner, width = cfg.d_model, cfg.d_inner, cfg.conv_width
        conv_limit = 1.0 / math.sqrt(width)
        self.new_weight("norm_gain", np.ones(d_model))
        self.new_weight("in_proj", glorot_uniform(d_model, 2 * d_inner))
        self.new_weight("conv_kernel", get_rng().uniform(-conv_limit, conv_limit, (d_inner, width)))
        self.new_weight("conv_bias", get_rng().uniform(-conv_limit, conv_limit, d_inner))
        if cfg.zero_init_residual:
            self.new_weight("out_proj", np.zeros((d_inner, d_model)))
        else:
            self.new_weight("out_proj", glorot_uniform(d_inner, d_model))
        self.new_child("ssm", SelectiveSsm(cfg.ssm_config, dtype=cfg.dtype))

    def call(self, x, training=False, parallel=True):
        x = as_tensor(x, self.dtype)
        u = rms_norm(x, self.norm_gain, self.config.rms_eps)
        main, gate = tf.split(linear(u, self.in_proj), 2, axis=-1)
        main = silu(causal_depthwise_conv1d(main, self.conv_kernel, self.conv_bias))
        main = self.child("ssm")(main, parallel=parallel)
        out = linear(main * silu(gate), self.out_proj)
        return x + dropout(out, self.config.dropout_p, training)


class MambaEncoderBlock(ParameterLayer):
    """Mamba -> RMSNorm + self attention -> Mamba."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        self.new_weight("attn_norm_gain", np.ones(cfg.d_model))
        self.new_child("mamba_in", MambaBlock(cfg))
        self.new_child(
            "self_attn",
            MultiHeadAttention(cfg.attention_config, zero_output=cfg.zero_init_residual, dtype=cfg.dtype),
        )
        self.new_child("mamba_out", MambaBlock(cfg))

    def call(self, x, src_lengths=None, training=False):
        x = self.child("mamba_in")(x, training=training)
        steps = int(x.shape[1])
        attn_mask = None if src_lengths is None else make_padding_mask(src_lengths, steps, steps)
        u = rms_norm(x, self.attn_norm_gain, self.config.rms_eps)
        context = self.child("self_attn")(u, u, u, attn_mask=attn_mask, training=training)
        x = x + dropout(context, self.config.dropout_p, training)
        return self.child("mamba_out")(x, training=training)


class MambaDecoderBlock(ParameterLayer):
    """Mamba -> RMSNorm + source-target attention -> Mamba.

    There is no self attention; the text path is causal because the Mamba
    recurrence and its convolution are.
    """

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        self.new_weight("cross_norm_gain", np.ones(cfg.d_model))
        self.new_child("mamba_in", MambaBlock(cfg))
        self.new_child(
            "cross_attn",
            MultiHeadAttention(cfg.attention_config, zero_output=cfg.zero_init_residual, dtype=cfg.dtype),
        )
        self.new_child("mamba_out", MambaBlock(cfg))

    def call(self, y, enc_out, memory_lengths=None, training=False):
        y = self.child("mamba_in")(y, training=training)
        enc_out = as_tensor(enc_out, self.dtype)
        attn_mask = None
        if memory_lengths is not None:
            attn_mask = make_padding_mask(memory_lengths, int(y.shape[1]), int(enc_out.shape[1]))
        u = rms_norm(y, self.cross_norm_gain, self.config.rms_eps)
        context = self.child("cross_attn")(u, enc_out, enc_out, attn_mask=attn_mask, training=training)
        y = y + dropout(context, self.config.dropout_p, training)
        return self.child("mamba_out")(y, training=training)


class _FeedForwardMixin:
    def _new_feed_forward(self, cfg: ModelConfig):
        self.new_weight("ffn_norm_gain", np.ones(cfg.d_model))
        self.new_weight("ffn_norm_bias", np.zeros(cfg.d_model))
        self.new_weight("ffn_w1", glorot_uniform(cfg.d_model, cfg.ffn_dim))
        self.new_weight("ffn_b1", np.zeros(cfg.ffn_dim))
        if cfg.zero_init_residual:
            self.new_weight("ffn_w2", np.zeros((cfg.ffn_dim, cfg.d_model)))
        else:
            self.new_weight("ffn_w2", glorot_uniform(cfg.ffn_dim, cfg.d_model))
        self.new_weight("ffn_b2", np.zeros(cfg.d_model))

    def _feed_forward(self, x, training):
        p = self.config.dropout_p
        u = layer_norm(x, self.ffn_norm_gain, self.ffn_norm_bias)
        hidden = dropout(tf.nn.relu(linear(u, self.ffn_w1, self.ffn_b1)), p, training)
        return x + dropout(linear(hidden, self.ffn_w2, self.ffn_b2), p, training)


class TransformerEncoderBlock(_FeedForwardMixin, ParameterLayer):
    """Pre-LayerNorm self attention + ReLU feed forward (baseline encoder)."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        self.new_weight("attn_norm_gain", np.ones(cfg.d_model))
        self.new_weight("attn_norm_bias", np.zeros(cfg.d_model))
        self._new_feed_forward(cfg)
        self.new_child(
            "self_attn",
            MultiHeadAttention(cfg.attention_config, zero_output=cfg.zero_init_residual, dtype=cfg.dtype),
        )

    def call(self, x, src_lengths=None, training=False):
        x = as_tensor(x, self.dtype)
        steps = int(x.shape[1])
        attn_mask = None if src_lengths is None else make_padding_mask(src_lengths, steps, steps)
        u = layer_norm(x, self.attn_norm_gain, self.attn_norm_bias)
        context = self.child("self_attn")(u, u, u, attn_mask=attn_mask, training=training)
        x = x + dropout(context, self.config.dropout_p, training)
        return self._feed_forward(x, training)


class TransformerDecoderBlock(_FeedForwardMixin, ParameterLayer):
    """Causal self attention, source-target attention and feed forward (baseline decoder)."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        for label in ("self", "cross"):
            self.new_weight(f"{label}_norm_gain", np.ones(cfg.d_model))
            self.new_weight(f"{label}_norm_bias", np.zeros(cfg.d_model))
        self._new_feed_forward(cfg)
        for label in ("self_attn", "cross_attn"):
            self.new_child(
                label,
                MultiHeadAttention(
                    cfg.attention_config, zero_output=cfg.zero_init_residual, dtype=cfg.dtype
                ),
            )

    def call(self, y, enc_out, memory_lengths=None, training=False):
        y = as_tensor(y, self.dtype)
        enc_out = as_tensor(enc_out, self.dtype)
        p = self.config.dropout_p
        steps = int(y.shape[1])
        u = layer_norm(y, self.self_norm_gain, self.self_norm_bias)
        context = self.child("self_attn")(
            u, u, u, attn_mask=make_causal_mask(steps), training=training
        )
        y = y + dropout(context, p, training)
        attn_mask = None
        if memory_lengths is not None:
            attn_mask = make_padding_mask(memory_lengths, steps, int(enc_out.shape[1]))
        u = layer_norm(y, self.cross_norm_gain, self.cross_norm_bias)
        context = self.child("cross_attn")(u, enc_out, enc_out, attn_mask=attn_mask, training=training)
        y = y + dropout(context, p, training)
        return self._feed_forward(y, training)


class _FinalNorm(ParameterLayer):
    """RMSNorm after Mamba stacks, LayerNorm after Transformer stacks."""

    def __init__(self, cfg: ModelConfig, use_rms: bool, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        self.use_rms = use_rms
        self.new_weight("gain", np.ones(cfg.d_model))
        if not use_rms:
            self.new_weight("bias", np.zeros(cfg.d_model))

    def call(self, x):
        if self.use_rms:
            return rms_norm(x, self.gain, self.config.rms_eps)
        return layer_norm(x, self.gain, self.bias)


class SpeechEncoder(ParameterLayer):
    """Front-end followed by the encoder block stack."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        self.new_child("frontend", ConvFrontend(cfg))
        block_type = MambaEncoderBlock if cfg.mamba_encoder else TransformerEncoderBlock
        count = cfg.encoder_blocks if cfg.mamba_encoder else cfg.transformer_encoder_blocks
        self.num_blocks = count
        for index in range(count):
            self.new_child(f"blocks.{index}", block_type(cfg))
        if cfg.final_norm:
            self.new_child("final_norm", _FinalNorm(cfg, use_rms=cfg.mamba_encoder))

    def call(self, features, feat_lens, training=False):
        x, lengths = self.child("frontend")(features, feat_lens)
        x = dropout(x, self.config.dropout_p, training)
        for index in range(self.num_blocks):
            x = self.child(f"blocks.{index}")(x, src_lengths=lengths, training=training)
        if self.config.final_norm:
            x = self.child("final_norm")(x)
        x = x * _time_mask(lengths, int(x.shape[1]), self.dtype)[:, :, None]
        return x, lengths


class TextDecoder(ParameterLayer):
    """Embedding + positional encoding followed by the decoder block stack."""

    def __init__(self, cfg: ModelConfig, name=None):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        self.new_weight("embedding", get_rng().normal(0.0, cfg.d_model**-0.5, (cfg.vocab_size, cfg.d_model)))
        mamba = cfg.decoder_is_mamba
        block_type = MambaDecoderBlock if mamba else TransformerDecoderBlock
        count = cfg.decoder_blocks if mamba else cfg.transformer_decoder_blocks
        self.num_blocks = count
        for index in range(count):
            self.new_child(f"blocks.{index}", block_type(cfg))
        if cfg.final_norm:
            self.new_child("final_norm", _FinalNorm(cfg, use_rms=mamba))

    def call(self, tokens_in, enc_out, enc_lens=None, training=False):
        tokens_in = np.asarray(tokens_in, dtype=np.int64)
        if tokens_in.ndim != 2:
            raise ShapeError(f"tokens_in must be [B, Ty], got shape {tokens_in.shape}")
        # decoder class index = token id - 1; the blank never enters the decoder
        y = embedding_lookup(self.embedding, tokens_in - 1)
        y = y + sinusoidal_positional_encoding(tokens_in.shape[1], self.config.d_model, self.dtype)
        y = dropout(y, self.config.dropout_p, training)
        for index in range(self.num_blocks):
            y = self.child(f"blocks.{index}")(y, enc_out, memory_lengths=enc_lens, training=training)
        if self.config.final_norm:
            y = self.child("final_norm")(y)
        return y


class SpeechMambaModel(ParameterLayer):
    """Encoder, CTC head, and (when use_s2s) the attention decoder with its output projection."""

    def __init__(self, cfg: ModelConfig, name="speech_mamba"):
        super().__init__(name=name, dtype=cfg.dtype)
        self.config = cfg
        vocab, d_model = cfg.vocab_size, cfg.d_model
        self.new_weight("ctc_kernel", glorot_uniform(d_model, vocab + 1))
        self.new_weight("ctc_bias", np.zeros(vocab + 1))
        if cfg.use_s2s:
            self.new_weight("out_kernel", glorot_uniform(d_model, vocab))
            self.new_weight("out_bias", np.zeros(vocab))
        self.new_child("encoder", SpeechEncoder(cfg))
        if cfg.use_s2s:
            self.new_child("decoder", TextDecoder(cfg))

    @property
    def has_decoder(self) -> bool:
        return self.config.use_s2s

    def encode(self, features, feat_lens, training=False):
        return self.child("encoder")(features, feat_lens, training=training)

    def ctc_logits(self, enc_out) -> tf.Tensor:
        return linear(enc_out, self.ctc_kernel, self.ctc_bias)

    def decode_logits(self, tokens_in, enc_out, enc_lens=None, training=False) -> tf.Tensor:
        if not self.has_decoder:
            raise ConfigError("model was built with use_s2s=false and has no decoder")
        hidden = self.child("decoder")(tokens_in, enc_out, enc_lens=enc_lens, training=training)
        return linear(hidden, self.out_kernel, self.out_bias)

    def call(self, features, feat_lens, tokens_in=None, training=False):
        enc_out, enc_lens = self.encode(features, feat_lens, training=training)
        s2s_logits = None
        if self.has_decoder and tokens_in is not None:
            s2s_logits = self.decode_logits(tokens_in, enc_out, enc_lens, training=training)
        return AsrOutput(self.ctc_logits(enc_out), s2s_logits, enc_out, enc_lens)


def forward_asr(model: SpeechMambaModel, features, feat_lens, tokens_in=None, training=False) -> AsrOutput:
    """frontend -> encoder -> CTC head, and embedding -> decoder -> out_proj when tokens_in is given."""
    return model(features, feat_lens, tokens_in=tokens_in, training=training)


def build_variant(cfg: ModelConfig) -> SpeechMambaModel:
    """Builds the model the flags describe; the init draws are seeded by cfg.seed."""
    set_seed(cfg.seed)
    model = SpeechMambaModel(cfg)
    logger.info(
        "built %s encoder / %s decoder, %d parameters",
        "mamba" if cfg.mamba_encoder else "transformer",
        ("mamba" if cfg.decoder_is_mamba else "transformer") if cfg.use_s2s else "no",
        param_count(model),
    )
    return model


def param_count(model: ParameterLayer) -> int:
    return int(sum(np.prod(variable.shape) for _, variable in model.named_parameters()))


def registry_is_complete(model: ParameterLayer) -> bool:
    """Every trainable variable appears exactly once in the name registry."""
    registered = [id(variable) for _, variable in model.named_parameters()]
    trainable = {id(variable) for variable in model.trainable_weights}
    return len(registered) == len(set(registered)) and set(registered) == trainable


def _prefixed(prefix: str, shapes: dict) -> "OrderedDict[str, tuple]":
    return OrderedDict((prefix + name, shape) for name, shape in shapes.items())


def _attention_shapes(d_model: int) -> dict:
    shapes = OrderedDict()
    for label in ("q", "k", "v"):
        shapes[f"w_{label}"] = (d_model, d_model)
        shapes[f"b_{label}"] = (d_model,)
    shapes["w_o"] = (d_model, d_model)
    shapes["b_o"] = (d_model,)
    return shapes


def _mamba_block_shapes(cfg: ModelConfig) -> dict:
    d_model, d_inner = cfg.d_model, cfg.d_inner
    shapes = OrderedDict(
        [
            ("norm_gain", (d_model,)),
            ("in_proj", (d_model, 2 * d_inner)),
            ("conv_kernel", (d_inner, cfg.conv_width)),
            ("conv_bias", (d_inner,)),
            ("out_proj", (d_inner, d_model)),
        ]
    )
    ssm = cfg.ssm_config
    ssm_shapes = {
        "log_a": (ssm.d_inner, ssm.state_dim),
        "d_skip": (ssm.d_inner,),
        "w_delta_down": (ssm.d_inner, ssm.dt_rank),
        "w_delta_up": (ssm.dt_rank, ssm.d_inner),
        "b_delta": (ssm.d_inner,),
        "w_b": (ssm.d_inner, ssm.state_dim),
        "w_c": (ssm.d_inner, ssm.state_dim),
    }
    shapes.update(_prefixed("ssm.", ssm_shapes))
    return shapes


def _feed_forward_shapes(cfg: ModelConfig) -> dict:
    return OrderedDict(
        [
            ("ffn_norm_gain", (cfg.d_model,)),
            ("ffn_norm_bias", (cfg.d_model,)),
            ("ffn_w1", (cfg.d_model, cfg.ffn_dim)),
            ("ffn_b1", (cfg.ffn_dim,)),
            ("ffn_w2", (cfg.ffn_dim, cfg.d_model)),
            ("ffn_b2", (cfg.d_model,)),
        ]
    )


def _block_shapes(cfg: ModelConfig, kind: str) -> dict:
    d_model = cfg.d_model
    shapes = OrderedDict()
    if kind == "mamba_encoder":
        shapes["attn_norm_gain"] = (d_model,)
        shapes.update(_prefixed("mamba_in.", _mamba_block_shapes(cfg)))
        shapes.update(_prefixed("self_attn.", _attention_shapes(d_model)))
        shapes.update(_prefixed("mamba_out.", _mamba_block_shapes(cfg)))
    elif kind == "mamba_decoder":
        shapes["cross_norm_gain"] = (d_model,)
        shapes.update(_prefixed("mamba_in.", _mamba_block_shapes(cfg)))
        shapes.update(_prefixed("cross_attn.", _attention_shapes(d_model)))
        shapes.update(_prefixed("mamba_out.", _mamba_block_shapes(cfg)))
    elif kind == "transformer_encoder":
        shapes["attn_norm_gain"] = (d_model,)
        shapes["attn_norm_bias"] = (d_model,)
        shapes.update(_feed_forward_shapes(cfg))
        shapes.update(_prefixed("self_attn.", _attention_shapes(d_model)))
    else:
        for label in ("self", "cross"):
            shapes[f"{label}_norm_gain"] = (d_model,)
            shapes[f"{label}_norm_bias"] = (d_model,)
        shapes.update(_feed_forward_shapes(cfg))
        shapes.update(_prefixed("self_attn.", _attention_shapes(d_model)))
        shapes.update(_prefixed("cross_attn.", _attention_shapes(d_model)))
    return shapes


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Canonical parameter names and shapes of build_variant(cfg), without allocating."""
    d_model, vocab = cfg.d_model, cfg.vocab_size
    shapes = OrderedDict([("ctc_kernel", (d_model, vocab + 1)), ("ctc_bias", (vocab + 1,))])
    if cfg.use_s2s:
        shapes["out_kernel"] = (d_model, vocab)
        shapes["out_bias"] = (vocab,)

    frontend = OrderedDict()
    in_channels = 1
    for index, channels in enumerate(cfg.frontend_channels):
        frontend[f"conv{index}_kernel"] = (3, 3, in_channels, channels)
        frontend[f"conv{index}_bias"] = (channels,)
        in_channels = channels
    frontend["proj_kernel"] = (cfg.frontend_freq * cfg.frontend_channels[-1], d_model)
    frontend["proj_bias"] = (d_model,)
    shapes.update(_prefixed("encoder.frontend.", frontend))

    kind = "mamba_encoder" if cfg.mamba_encoder else "transformer_encoder"
    count = cfg.encoder_blocks if cfg.mamba_encoder else cfg.transformer_encoder_blocks
    for index in range(count):
        shapes.update(_prefixed(f"encoder.blocks.{index}.", _block_shapes(cfg, kind)))
    if cfg.final_norm:
        shapes["encoder.final_norm.gain"] = (d_model,)
        if not cfg.mamba_encoder:
            shapes["encoder.final_norm.bias"] = (d_model,)

    if cfg.use_s2s:
        shapes["decoder.embedding"] = (vocab, d_model)
        mamba = cfg.decoder_is_mamba
        kind = "mamba_decoder" if mamba else "transformer_decoder"
        count = cfg.decoder_blocks if mamba else cfg.transformer_decoder_blocks
        for index in range(count):
            shapes.update(_prefixed(f"decoder.blocks.{index}.", _block_shapes(cfg, kind)))
        if cfg.final_norm:
            shapes["decoder.final_norm.gain"] = (d_model,)
            if not mamba:
                shapes["decoder.final_norm.bias"] = (d_model,)
    return shapes


def parameter_breakdown(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Parameter counts grouped per component (frontend, each block, heads)."""
    groups = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        parts = name.split(".")
        if parts[0] == "encoder" and parts[1] == "frontend":
            key = "encoder.frontend"
        elif len(parts) > 2 and parts[1] == "blocks":
            key = ".".join(parts[:3])
        else:
            key = ".".join(parts[:2]) if len(parts) > 1 else parts[0].split("_")[0]
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return groups


def analytic_param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(cfg).values()))

