"""
This file times the selective scan and compares how Mamba and Transformer encoders scale with length.
"""
import logging
import time
from typing import Callable, Dict, Sequence

import numpy as np
import tensorflow as tf

from libs.speech_mamba.NeuralCore import set_seed
from libs.speech_mamba.SelectiveSsm import (
    SsmConfig,
    discretize,
    init_ssm_parameters,
    scan_combine_count,
    selective_ssm_flops,
    ssm_scan_parallel,
)
from libs.speech_mamba.SpeechMambaNetworks import MambaBlock, MambaEncoderBlock, ModelConfig, TransformerEncoderBlock

logger = logging.getLogger(__name__ + ".py")


def median_time(fn: Callable[[], object], repeats: int = 5) -> float:
    """Median wall time of fn over `repeats` runs after one warm-up call."""
    fn()
    timings = []
    for _ in range(repeats):
        tic = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - tic)
    return float(np.median(timings))


def benchmark_config(**overrides) -> ModelConfig:
    """Single-head d=64 encoder with a narrow feed forward so attention dominates the Transformer cost."""
    values = dict(
        d_model=64,
        num_heads=1,
        encoder_blocks=1,
        ssm_state=16,
        expand=2,
        vocab_size=8,
        dropout_p=0.0,
        ffn_dim=128,
        use_s2s=False,
        dtype="float32",
    )
    values.update(overrides)
    return ModelConfig(**values)


def bench_scan(lengths: Sequence[int] = (4096, 8192), d_inner: int = 128, state_dim: int = 16, repeats: int = 5, seed: int = 0) -> dict:
    """Times ssm_scan_parallel and reports the analytic work counters per length."""
    set_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = SsmConfig(d_inner=d_inner, state_dim=state_dim)
    params = init_ssm_parameters(cfg, rng)
    a = -np.exp(params["log_a"])
    out = {}
    for length in lengths:
        delta = tf.constant(rng.uniform(0.001, 0.1, size=(1, length, d_inner)), dtype=tf.float32)
        b_sel = tf.constant(rng.normal(size=(1, length, state_dim)), dtype=tf.float32)
        c_sel = tf.constant(rng.normal(size=(1, length, state_dim)), dtype=tf.float32)
        x = tf.constant(rng.normal(size=(1, length, d_inner)), dtype=tf.float32)
        a_bar, b_bar = discretize(tf.constant(a, dtype=tf.float32), b_sel, delta)
        d_skip = tf.ones([d_inner], dtype=tf.float32)
        seconds = median_time(lambda: ssm_scan_parallel(a_bar, b_bar, c_sel, x, d_skip), repeats)
        out[str(length)] = {
            "seconds": seconds,
            "combines": scan_combine_count(length),
            "flops": selective_ssm_flops(1, length, cfg),
        }
        logger.info("scan T=%d: %.4fs", length, seconds)
    return out


def bench_encoder_scaling(lengths: Sequence[int] = (4096, 8192), repeats: int = 5, seed: int = 0, cfg: ModelConfig = None) -> Dict[str, dict]:
    """Forward time on [1, T, d] input of a Mamba block, a full Mamba encoder block
    (Mamba, self attention, Mamba) and a Transformer encoder block.

    Returns:
        per kind the seconds per length and the ratio between the last and the first length
    """
    cfg = cfg or benchmark_config()
    set_seed(seed)
    rng = np.random.default_rng(seed)
    blocks = {
        "mamba": MambaBlock(cfg),
        "mamba_encoder_block": MambaEncoderBlock(cfg),
        "transformer": TransformerEncoderBlock(cfg),
    }
    result = {}
    for kind, block in blocks.items():
        seconds = {}
        for length in lengths:
            x = tf.constant(rng.normal(size=(1, length, cfg.d_model)), dtype=cfg.dtype)
            seconds[str(length)] = median_time(lambda: block(x), repeats)
            logger.info("%s T=%d: %.4fs", kind, length, seconds[str(length)])
        first, last = str(lengths[0]), str(lengths[-1])
        result[kind] = {"seconds": seconds, "ratio": seconds[last] / seconds[first]}
    return result


def run_benchmarks(lengths: Sequence[int] = (4096, 8192), repeats: int = 5, seed: int = 0) -> dict:
    scan = bench_scan(lengths, repeats=repeats, seed=seed)
    first, last = str(lengths[0]), str(lengths[-1])
    return {
        "scan": scan,
        "scan_ratio": scan[last]["seconds"] / scan[first]["seconds"],
        "encoder": bench_encoder_scaling(lengths, repeats=repeats, seed=seed),
    }
