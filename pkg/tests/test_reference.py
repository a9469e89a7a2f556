import math

import numpy as np
import pytest
import torch

from mdaggr import losses, reference
from mdaggr.errors import ContractViolation, OracleSizeError


class TestNaiveOps:
    def test_naive_kl_identical_is_zero(self):
        z = np.random.default_rng(0).normal(size=(4, 5))
        assert reference.naive_dsc_loss(z, z.copy()) == 0.0

    def test_naive_miou_hand_example(self):
        pred = [[0, 0], [1, 1]]
        gt = [[0, 1], [1, 1]]
        cw = reference.naive_class_wise_iou(pred, gt, 2)
        assert cw == [pytest.approx(0.5), pytest.approx(2 / 3)]
        assert reference.naive_mean_iou(cw) == pytest.approx(7 / 12, abs=1e-12)

    def test_size_guard_refuses(self):
        with pytest.raises(OracleSizeError):
            reference.naive_cycle_loss(np.zeros(20_000), np.zeros(20_000))

    def test_macro_accuracy_ignores_imbalance(self):
        preds = [0] * 90 + [0] * 10
        labels = [0] * 90 + [1] * 10
        assert reference.naive_classification_accuracy(preds, labels) == pytest.approx(0.5)

    def test_grid_histogram_matches_counts(self):
        lab = np.array([[0, 1], [1, 1]])
        raw = reference.naive_grid_label_histogram(lab, 1, 1, 2)
        assert raw[0, 0] == pytest.approx(0.25)
        assert raw[1, 0] == pytest.approx(0.75)


class TestFiniteDifferenceGradient:
    def test_quadratic(self):
        p = torch.tensor(3.0, dtype=torch.float64)
        report = reference.finite_difference_gradient(lambda v: v * v, p, step=1e-3)
        assert report.numeric[0] == pytest.approx(6.0, abs=1e-9)
        assert report.analytic[0] == pytest.approx(6.0, abs=1e-12)
        assert report.passed

    def test_constant(self):
        p = torch.tensor([1.0, -2.0], dtype=torch.float64)
        report = reference.finite_difference_gradient(lambda v: (v * 0.0).sum(), p)
        assert np.all(report.numeric == 0.0)
        assert np.all(report.analytic == 0.0)
        assert report.passed

    def test_dsc_wrt_dynamic_logits(self):
        rng = np.random.default_rng(2)
        frozen = torch.tensor(rng.normal(size=(2, 3)), dtype=torch.float64)
        dyn = torch.tensor(rng.normal(size=(2, 3)), dtype=torch.float64)
        report = reference.finite_difference_gradient(
            lambda v: losses.dsc_loss(v, frozen), dyn, step=1e-3, tolerance=1e-4)
        assert report.max_relative_error <= 1e-4
        assert report.passed

    def test_non_finite_probe_rejected(self):
        p = torch.tensor(0.0, dtype=torch.float64)
        with pytest.raises(ContractViolation):
            reference.finite_difference_gradient(lambda v: torch.log(v), p)

    def test_report_fields_consistent(self):
        p = torch.tensor([1.0, 2.0], dtype=torch.float64)
        report = reference.finite_difference_gradient(lambda v: (v ** 3).sum(), p)
        assert report.analytic.shape == report.numeric.shape == report.relative_error.shape
        assert report.max_relative_error == pytest.approx(report.relative_error.max())
        assert report.passed == (report.max_relative_error <= report.tolerance)


class TestOracleIndependence:
    def test_naive_uses_python_loops_not_torch(self):
        import inspect
        source = inspect.getsource(reference)
        body = source.split("class GradientCheckReport")[0]
        assert "torch" not in body
