"""
Test Gradient Correctness
Compares autograd gradients of the full model with central finite differences.
"""

import pytest
import torch

from writerid.models.backbones import BackboneName
from writerid.models.gradcheck import finite_difference_check, relative_error
from writerid.models.layers import cross_entropy
from writerid.models.pipeline import ModelConfig, build_model


class DoubledGradient(torch.autograd.Function):
    """Identity forward whose backward is deliberately wrong."""

    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad * 2.0


class TestFiniteDifferenceCheck:
    """Test the gradient check on the tiny-backbone model."""

    def setup_method(self):
        torch.manual_seed(0)
        self.images = torch.rand(2, 3, 224, 224)
        self.targets = torch.eye(3)[[0, 2]]

    @pytest.mark.parametrize("attention", [False, True])
    def test_model_gradients_match(self, attention):
        cfg = ModelConfig(backbone=BackboneName.TINY_TEST, num_classes=3, attention=attention)
        model = build_model(cfg, pretrained=False)
        report = finite_difference_check(model, self.images, self.targets, coords_per_tensor=20)
        assert report.passed, report.failures()
        checked = sum(t.checked for t in report.tensors)
        skipped = sum(t.skipped for t in report.tensors)
        assert checked >= 0.8 * (checked + skipped)
        assert {"vlad.centers", "reduce.conv.weight", "head.classifier.weight"} <= {t.name for t in report.tensors}

    def test_wrong_gradient_detected(self):
        model = build_model(ModelConfig(backbone=BackboneName.TINY_TEST, num_classes=3), pretrained=False)
        images, targets = self.images.double(), self.targets.double()

        def broken_loss(m):
            return DoubledGradient.apply(cross_entropy(m(images), targets))

        report = finite_difference_check(model, images, targets, coords_per_tensor=3, loss_fn=broken_loss)
        assert not report.passed
        assert report.max_error > 0.1

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0, 1e-4) == 0.0
        assert relative_error(1e-6, 0.0, 1e-4) == pytest.approx(1e-2)
        assert relative_error(2.0, 1.0, 1e-4) == pytest.approx(0.5)
