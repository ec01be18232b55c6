from fractions import Fraction

import numpy as np
import pytest

from bnnlab.core import RngStream
from bnnlab.errors import ContractViolation
from bnnlab.harness import (
    GradVarianceReport,
    LayerVariance,
    MCConfig,
    compare_report,
    matched_prediction,
    measure_forward_variance,
    measure_gradient_variance,
    scale_invariance_check,
    shat_sq_variance,
    shat_sq_variance_closed,
    shat_sq_variance_fraction,
    shat_sq_variance_sampled,
    within_factor,
)
from bnnlab.normalizers import NormalizerConfig
from bnnlab.theory import InitScheme, NetworkSpec, predict_forward_variance


def small(normalizer=None, widths=(16, 16, 16, 16), batch=32):
    return NetworkSpec.binary_mlp(list(widths), normalizer, batch)


class TestWithinFactor:
    @pytest.mark.parametrize("measured, predicted, ok", [
        (1.2, 1.0, True), (1.0, 1.2, True), (1.5, 1.0, False), (0.7, 1.0, False), (1.33, 1.0, True),
    ])
    def test_examples(self, measured, predicted, ok):
        assert within_factor(measured, predicted) is ok


class TestShatSquared:
    def test_k_two(self):
        assert shat_sq_variance_fraction(2) == 1

    def test_k_one_is_deterministic(self):
        assert shat_sq_variance_fraction(1) == 0

    @pytest.mark.parametrize("k", range(1, 31))
    def test_enumeration_matches_closed_form(self, k):
        assert shat_sq_variance_fraction(k) == 2 - Fraction(2, k)
        assert float(shat_sq_variance_fraction(k)) == pytest.approx(shat_sq_variance_closed(k), abs=1e-15)

    @pytest.mark.parametrize("k", range(2, 31))
    def test_bound(self, k):
        v = shat_sq_variance_fraction(k)
        assert v <= k - 1
        assert (v == k - 1) is (k == 2)

    def test_enumeration_limit(self):
        with pytest.raises(ContractViolation):
            shat_sq_variance_fraction(31)

    @pytest.mark.parametrize("k", [64, 256])
    def test_sampled_agrees(self, k):
        est, se = shat_sq_variance_sampled(k, RngStream(0, k))
        assert abs(est - shat_sq_variance_closed(k)) <= 3 * se
        assert est <= k - 1

    def test_modes(self):
        assert shat_sq_variance(4) == 1.5
        assert shat_sq_variance(4, "sampled", RngStream(1), 50_000) == pytest.approx(1.5, rel=0.05)
        with pytest.raises(ValueError):
            shat_sq_variance(4, "guess")


def fake_report(measured, predicted):
    layers = [LayerVariance(l + 1, 4, 4, m, m, p, p, p, p) for l, (m, p) in enumerate(zip(measured, predicted))]
    return GradVarianceReport(layers, "matched")


class TestCompare:
    def test_pass_and_fail(self):
        verdicts = compare_report(fake_report([64.0, 1.0], [64.0, 1.0]))
        assert all(v.passed for v in verdicts)
        verdicts = compare_report(fake_report([100.0, 1.0], [64.0, 1.0]))
        assert [v.passed for v in verdicts] == [False, True]

    def test_tolerance_must_exceed_one(self):
        with pytest.raises(ContractViolation):
            compare_report(fake_report([1.0], [1.0]), tolerance=1.0)


class TestMatchedPrediction:
    def test_no_norm(self):
        pred = matched_prediction(small())
        assert pred.model == "no-norm"
        assert pred.relative == (256.0, 16.0, 1.0)

    def test_bn(self):
        pred = matched_prediction(small(NormalizerConfig.full_bn(), widths=(8, 16, 32, 64)))
        assert pred.model == "bn-leading"
        assert pred.relative[0] == 16.0

    def test_center_scale_fan_in_matches_bn(self):
        widths = (8, 16, 32, 64)
        a = matched_prediction(small(NormalizerConfig.center_scale_fan_in(), widths))
        b = matched_prediction(small(NormalizerConfig.full_bn(), widths))
        assert a.relative == pytest.approx(b.relative)


class TestMeasureGradientVariance:
    def test_no_norm_growth(self):
        rep = measure_gradient_variance(small(), mc=MCConfig(trials=60, batch_size=32))
        assert all(within_factor(r, 16.0) for r in rep.measured_step_ratios())
        assert rep.matched_model == "no-norm"

    def test_bn_flat(self):
        rep = measure_gradient_variance(small(NormalizerConfig.full_bn()), mc=MCConfig(trials=60, batch_size=32))
        assert all(v.passed for v in compare_report(rep))

    def test_deterministic_across_workers(self):
        spec = small(NormalizerConfig.full_bn(), widths=(8, 8, 8))
        mc = MCConfig(trials=30, batch_size=16, master_seed=3)
        a = measure_gradient_variance(spec, mc=mc, workers=1)
        b = measure_gradient_variance(spec, mc=mc, workers=2)
        assert a.rows() == b.rows()

    def test_too_few_trials(self):
        with pytest.raises(ContractViolation):
            measure_gradient_variance(small(), mc=MCConfig(trials=29))

    def test_rows_schema(self):
        rep = measure_gradient_variance(small(widths=(8, 8, 8)), mc=MCConfig(trials=30, batch_size=8))
        rows = rep.rows()
        assert len(rows) == 2
        assert tuple(rows[0]) == GradVarianceReport.CSV_HEADER
        assert rows[-1]["measured_rel"] == 1.0


class TestForwardVariance:
    def test_matches_prediction(self):
        spec = small(widths=(8, 16, 32))
        measured = measure_forward_variance(spec, InitScheme(), MCConfig(trials=40, batch_size=64))
        for m, p in zip(measured, predict_forward_variance(spec, 1.0)):
            assert m == pytest.approx(p, rel=0.1)


class TestScaleInvariance:
    @pytest.mark.parametrize("c", [1e3, 1e-3, 7.0])
    @pytest.mark.parametrize("normalizer", [None, NormalizerConfig.full_bn(), NormalizerConfig.center_scale_fan_in()])
    def test_binary_layers(self, c, normalizer):
        assert scale_invariance_check(small(normalizer), c, layer=2)

    def test_full_precision_control(self):
        spec = NetworkSpec((8, 8, 8), (False, True), (NormalizerConfig.identity(),) * 2, ("relu", "sign"), 16)
        assert not scale_invariance_check(spec, 1e3, layer=1)
        assert scale_invariance_check(spec, 1e3, layer=2)

    def test_bad_scale(self):
        with pytest.raises(ContractViolation):
            scale_invariance_check(small(), 0.0)
