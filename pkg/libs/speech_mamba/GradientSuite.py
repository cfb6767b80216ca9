"""
This file runs the finite difference gradient suite over the primitives and the composite blocks.

Every check evaluates a scalar function of a few double precision variables
and compares its tape gradient with central differences. Primitives must agree
to 1e-6 relative error, composite blocks to 1e-4.
"""
import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from libs.speech_mamba.DataProcessor import collate
from libs.speech_mamba.NeuralCore import (
    AttentionConfig,
    AttentionWeights,
    GradCheckReport,
    causal_depthwise_conv1d,
    embedding_lookup,
    grad_check,
    layer_norm,
    linear,
    log_softmax,
    make_causal_mask,
    matmul,
    multi_head_attention,
    rms_norm,
    set_seed,
    silu,
    softmax,
    softplus,
)
from libs.speech_mamba.Objectives import ctc_log_probs, ctc_loss, joint_loss, s2s_loss
from libs.speech_mamba.SelectiveSsm import SsmConfig, SsmParams, init_ssm_parameters, selective_ssm_forward
from libs.speech_mamba.SpeechMambaNetworks import (
    MambaBlock,
    MambaDecoderBlock,
    MambaEncoderBlock,
    ModelConfig,
    TransformerDecoderBlock,
    TransformerEncoderBlock,
    build_variant,
    forward_asr,
)

logger = logging.getLogger(__name__ + ".py")

PRIMITIVE_THRESHOLD = 1e-6
COMPOSITE_THRESHOLD = 1e-4

Check = Tuple[str, Callable[[], tf.Tensor], Sequence]


@dataclass
class SuiteResult:
    report: GradCheckReport
    kind: str
    threshold: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.threshold)

    def to_dict(self) -> dict:
        return {
            "name": self.report.name,
            "kind": self.kind,
            "max_rel_error": self.report.max_rel_error,
            "threshold": self.threshold,
            "coordinates": self.report.coordinates,
            "worst": self.report.worst,
            "passed": self.passed,
        }


class _RandomProjection:
    """Fixed random weighting that turns any output into a scalar."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.weights = {}

    def __call__(self, y) -> tf.Tensor:
        shape = tuple(y.shape)
        if shape not in self.weights:
            self.weights[shape] = tf.constant(self.rng.normal(size=shape), dtype=y.dtype)
        return tf.reduce_sum(y * self.weights[shape])


def gradcheck_model_config(**overrides) -> ModelConfig:
    """Smallest model exercising every component: one block of each kind, two heads."""
    values = dict(
        d_model=8,
        num_heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        conv_width=3,
        ssm_state=2,
        expand=2,
        vocab_size=5,
        dropout_p=0.0,
        frontend_channels=(2, 2),
        n_mels=8,
        transformer_encoder_blocks=1,
        transformer_decoder_blocks=1,
        ffn_dim=16,
        dtype="float64",
    )
    values.update(overrides)
    return ModelConfig(**values)


def randomize_zero_parameters(layer, rng: np.random.Generator, scale: float = 0.3):
    """Zero-initialised residual outputs hide most of a block from the gradient; fill them."""
    for _, variable in layer.named_parameters():
        values = variable.numpy()
        if not np.any(values):
            variable.assign(rng.normal(scale=scale, size=values.shape))


def _var(rng: np.random.Generator, *shape, scale: float = 1.0) -> tf.Variable:
    return tf.Variable(rng.normal(scale=scale, size=shape), dtype=tf.float64)


def primitive_checks(rng: np.random.Generator) -> List[Check]:
    project = _RandomProjection(rng)
    checks: List[Check] = []

    a, b = _var(rng, 2, 3, 4), _var(rng, 4, 5)
    checks.append(("matmul", lambda: project(matmul(a, b)), [a, b]))

    x, kernel, bias = _var(rng, 2, 3, 4), _var(rng, 4, 3), _var(rng, 3)
    checks.append(("linear", lambda: project(linear(x, kernel, bias)), [x, kernel, bias]))

    s = _var(rng, 3, 5, scale=2.0)
    checks.append(("silu", lambda: project(silu(s)), [s]))
    checks.append(("softplus", lambda: project(softplus(s)), [s]))
    checks.append(("softmax", lambda: project(softmax(s, axis=-1)), [s]))
    checks.append(("log_softmax", lambda: project(log_softmax(s, axis=-1)), [s]))

    n, gain, shift = _var(rng, 2, 3, 6), _var(rng, 6), _var(rng, 6)
    checks.append(("rms_norm", lambda: project(rms_norm(n, gain)), [n, gain]))
    checks.append(("layer_norm", lambda: project(layer_norm(n, gain, shift)), [n, gain, shift]))

    c, c_kernel, c_bias = _var(rng, 2, 6, 3), _var(rng, 3, 4), _var(rng, 3)
    checks.append(
        ("causal_depthwise_conv1d", lambda: project(causal_depthwise_conv1d(c, c_kernel, c_bias)), [c, c_kernel, c_bias])
    )

    cfg = AttentionConfig(model_dim=4, num_heads=2, dropout_p=0.0)
    q, k, v = _var(rng, 1, 3, 4), _var(rng, 1, 3, 4), _var(rng, 1, 3, 4)
    projections = [_var(rng, *shape, scale=0.5) for shape in [(4, 4), (4,)] * 4]
    mask = make_causal_mask(3)
    checks.append(
        (
            "multi_head_attention",
            lambda: project(
                multi_head_attention(q, k, v, cfg, attn_mask=mask, weights=AttentionWeights(*projections))
            ),
            [q, k, v] + projections,
        )
    )

    table = _var(rng, 5, 3)
    ids = np.array([[0, 3, 3], [4, 1, 0]])
    checks.append(("embedding_lookup", lambda: project(embedding_lookup(table, ids)), [table]))

    ssm_cfg = SsmConfig(d_inner=4, state_dim=3)
    init = init_ssm_parameters(ssm_cfg, rng)
    ssm_vars = {key: tf.Variable(values, dtype=tf.float64) for key, values in init.items()}
    ssm_x = _var(rng, 2, 5, 4)
    params = SsmParams(**ssm_vars)
    for parallel in (True, False):
        label = "selective_ssm_parallel" if parallel else "selective_ssm_sequential"
        checks.append(
            (label, lambda p=parallel: project(selective_ssm_forward(ssm_x, params, parallel=p)), [ssm_x] + list(ssm_vars.values()))
        )

    ctc_logits = _var(rng, 2, 5, 4)
    targets, input_lens = [[1, 2], [3, 3]], [5, 4]
    checks.append(("ctc_loss", lambda: ctc_loss(ctc_log_probs(ctc_logits), targets, input_lens), [ctc_logits]))

    s2s_logits = _var(rng, 2, 3, 5)
    dec_targets = np.array([[1, 4, 2], [0, 3, -1]])
    checks.append(("s2s_loss", lambda: s2s_loss(s2s_logits, dec_targets, smoothing=0.1), [s2s_logits]))
    return checks


def composite_checks(rng: np.random.Generator) -> List[Check]:
    cfg = gradcheck_model_config()
    project = _RandomProjection(rng)
    checks = []
    x = tf.constant(rng.normal(size=(2, 5, cfg.d_model)))
    memory = tf.constant(rng.normal(size=(2, 4, cfg.d_model)))
    src_lengths, memory_lengths = np.array([5, 3]), np.array([4, 2])

    mamba = MambaBlock(cfg)
    checks.append(("mamba_block", lambda: project(mamba(x)), mamba))
    encoder_block = MambaEncoderBlock(cfg)
    checks.append(("encoder_block", lambda: project(encoder_block(x, src_lengths=src_lengths)), encoder_block))
    decoder_block = MambaDecoderBlock(cfg)
    checks.append(
        ("decoder_block", lambda: project(decoder_block(x, memory, memory_lengths=memory_lengths)), decoder_block)
    )
    transformer_encoder = TransformerEncoderBlock(cfg)
    checks.append(
        ("transformer_encoder_block", lambda: project(transformer_encoder(x, src_lengths=src_lengths)), transformer_encoder)
    )
    transformer_decoder = TransformerDecoderBlock(cfg)
    checks.append(
        (
            "transformer_decoder_block",
            lambda: project(transformer_decoder(x, memory, memory_lengths=memory_lengths)),
            transformer_decoder,
        )
    )

    model = build_variant(cfg)
    features = [rng.normal(size=(12, cfg.n_mels)), rng.normal(size=(9, cfg.n_mels))]
    batch = collate(["a", "b"], features, [[3, 4], [4]])

    def model_loss():
        out = forward_asr(model, batch.features, batch.feat_lens, batch.tokens_in)
        ctc = ctc_loss(ctc_log_probs(out.ctc_logits), batch.ctc_targets, out.enc_lens)
        s2s = s2s_loss(out.s2s_logits, batch.dec_targets, smoothing=0.1)
        return joint_loss(ctc, s2s, 0.3)

    checks.append(("full_model_joint_loss", model_loss, model))

    for _, _, layer in checks:
        randomize_zero_parameters(layer, rng)
    return [(name, f, [v for _, v in layer.named_parameters()]) for name, f, layer in checks]


def run_gradient_suite(seed: int = 0, eps: float = 1e-5, coords_per_param: Optional[int] = 3) -> List[SuiteResult]:
    """Runs every primitive check on all coordinates and every composite check on a coordinate sample.

    coords_per_param=None checks all coordinates of the composite parameters too.
    """
    tic = time.perf_counter()
    set_seed(seed)
    rng = np.random.default_rng(seed)
    results = []
    for name, f, params in primitive_checks(rng):
        report = grad_check(f, params, eps=eps, name=name)
        results.append(SuiteResult(report, "primitive", PRIMITIVE_THRESHOLD))
    for name, f, params in composite_checks(rng):
        report = grad_check(f, params, eps=eps, name=name, coords_per_param=coords_per_param)
        results.append(SuiteResult(report, "composite", COMPOSITE_THRESHOLD))
    failed = [r.report.name for r in results if not r.passed]
    if failed:
        logger.warning("gradient checks failed: %s", failed)
    logger.info("gradient suite: %d checks in %.1fs", len(results), time.perf_counter() - tic)
    return results


def summarize(results: Sequence[SuiteResult]) -> dict:
    return {
        "passed": all(r.passed for r in results),
        "checks": [r.to_dict() for r in results],
    }
