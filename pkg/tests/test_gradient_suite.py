import numpy as np
import pytest

from libs.speech_mamba.GradientSuite import (
    COMPOSITE_THRESHOLD,
    PRIMITIVE_THRESHOLD,
    SuiteResult,
    composite_checks,
    primitive_checks,
    run_gradient_suite,
    summarize,
)
from libs.speech_mamba.NeuralCore import GradCheckReport


@pytest.fixture(scope="module")
def suite():
    return run_gradient_suite(seed=0, coords_per_param=2)


class TestGradientSuite:
    def test_every_check_passes(self, suite):
        failed = [(r.report.name, r.report.max_rel_error, r.report.worst) for r in suite if not r.passed]
        assert failed == []

    def test_covers_primitives_and_blocks(self, suite):
        names = {r.report.name for r in suite}
        for expected in (
            "matmul",
            "causal_depthwise_conv1d",
            "multi_head_attention",
            "selective_ssm_parallel",
            "selective_ssm_sequential",
            "ctc_loss",
            "s2s_loss",
            "mamba_block",
            "decoder_block",
            "full_model_joint_loss",
        ):
            assert expected in names

    def test_thresholds_by_kind(self, suite):
        for result in suite:
            expected = PRIMITIVE_THRESHOLD if result.kind == "primitive" else COMPOSITE_THRESHOLD
            assert result.threshold == expected

    def test_summary(self, suite):
        summary = summarize(suite)
        assert summary["passed"]
        assert len(summary["checks"]) == len(suite)
        assert set(summary["checks"][0]) == {"name", "kind", "max_rel_error", "threshold", "coordinates", "worst", "passed"}

    def test_check_builders_are_seeded(self):
        first = [name for name, _, _ in primitive_checks(np.random.default_rng(0))]
        assert first == [name for name, _, _ in primitive_checks(np.random.default_rng(1))]
        composite = composite_checks(np.random.default_rng(0))
        assert all(params for _, _, params in composite)


class TestSuiteResult:
    def test_failure_is_reported(self):
        bad = SuiteResult(GradCheckReport("x", 2e-6, 4, "x[0]"), "primitive", PRIMITIVE_THRESHOLD)
        good = SuiteResult(GradCheckReport("y", 2e-6, 4, "y[1]"), "composite", COMPOSITE_THRESHOLD)
        assert not bad.passed and good.passed
        summary = summarize([bad, good])
        assert not summary["passed"]
        assert [c["passed"] for c in summary["checks"]] == [False, True]
