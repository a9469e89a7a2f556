import numpy as np
import pytest
import torch

from mdaggr import models
from mdaggr.errors import CheckpointError, ConfigurationError, InferenceError
from mdaggr.losses import GridSpec, scores_from_logits
from mdaggr.reference import finite_difference_gradient


class TestTranslator:
    def test_paper_scale_shape_and_range(self):
        pair = models.build_translator(models.TranslatorConfig(residual_blocks=9,
                                                               base_width=64), seed=0)
        x = torch.rand(1, 3, 64, 64) * 2 - 1
        y = pair.forward(x)
        assert y.shape == (1, 3, 64, 64)
        assert float(y.min()) >= -1.0 and float(y.max()) <= 1.0

    def test_zero_final_layer_gives_zero_map(self):
        pair = models.build_translator(models.TranslatorConfig(residual_blocks=3,
                                                               base_width=8), seed=1)
        with torch.no_grad():
            pair.forward.final_conv.weight.zero_()
            pair.forward.final_conv.bias.zero_()
        y = pair.forward(torch.rand(2, 3, 16, 16))
        assert torch.all(y == 0.0)

    def test_parameter_count_formula(self):
        # independent layer-by-layer sum (instance norms carry no parameters)
        blocks, b, c = 3, 16, 3
        conv = lambda cin, cout, k: k * k * cin * cout + cout  # noqa: E731
        expected = (conv(c, b, 7)
                    + conv(b, 2 * b, 3) + conv(2 * b, 4 * b, 3)
                    + blocks * 2 * conv(4 * b, 4 * b, 3)
                    + conv(4 * b, 2 * b, 3) + conv(2 * b, b, 3)
                    + conv(b, c, 7))
        net = models.TranslatorNet(models.TranslatorConfig(residual_blocks=blocks,
                                                           base_width=b))
        assert models.parameter_count(net) == expected

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigurationError):
            models.TranslatorConfig(residual_blocks=0)
        with pytest.raises(ConfigurationError):
            models.TranslatorConfig(base_width=0)

    def test_input_contract(self):
        pair = models.build_translator(models.TranslatorConfig(residual_blocks=1,
                                                               base_width=4))
        with pytest.raises(InferenceError):
            pair.forward(torch.zeros(1, 3, 30, 30))  # not a multiple of 4
        with pytest.raises(InferenceError):
            pair.forward(torch.zeros(1, 1, 32, 32))  # wrong channel count

    def test_deterministic_build(self):
        cfg = models.TranslatorConfig(residual_blocks=2, base_width=8)
        a = models.build_translator(cfg, seed=9)
        b = models.build_translator(cfg, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        c = models.build_translator(cfg, seed=10)
        assert any(not torch.equal(pa, pc)
                   for pa, pc in zip(a.parameters(), c.parameters()))


class TestPixelDiscriminator:
    def test_patchwise_output(self):
        net = models.build_pixel_discriminator(models.DiscriminatorConfig(base_width=16))
        raw = net(torch.rand(2, 3, 64, 64))
        assert raw.shape[0] == 2 and raw.shape[1] == 1
        assert raw.shape[2] > 1 and raw.shape[3] > 1

    def test_constant_zero_raw_maps_to_half(self):
        raw = torch.zeros(2, 1, 3, 3)
        assert torch.all(scores_from_logits(raw) == 0.5)

    def test_receptive_field_matches_independent_trace(self):
        # independent trace 1: project one output cell back through every
        # (kernel, stride) as an input interval
        lo, hi = 0, 0
        for k, s in reversed(models.PixelDiscriminator.LAYER_SPEC):
            lo = lo * s
            hi = hi * s + (k - 1)
        traced_interval = hi - lo + 1
        assert traced_interval == models.PixelDiscriminator.receptive_field() == 46

        # independent trace 2: gradient support through a norm-free copy
        # (instance norm couples all positions, so it is bypassed here)
        net = models.PixelDiscriminator(models.DiscriminatorConfig(base_width=4))
        layers = [m if not isinstance(m, torch.nn.InstanceNorm2d) else torch.nn.Identity()
                  for m in net.net]
        conv_only = torch.nn.Sequential(*layers)
        for p in conv_only.parameters():
            p.requires_grad_(False)
        x = torch.zeros(1, 3, 96, 96, requires_grad=True)
        out = conv_only(x)
        cy, cx = out.shape[2] // 2, out.shape[3] // 2
        out[0, 0, cy, cx].backward()
        support = x.grad[0].abs().sum(dim=0) > 0
        rows = torch.nonzero(support.any(dim=1)).squeeze(1)
        cols = torch.nonzero(support.any(dim=0)).squeeze(1)
        traced = max(int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1))
        assert traced == 46


class TestFeatureAndClassDiscriminators:
    def test_feature_disc_shapes(self):
        net = models.build_feature_discriminator(in_channels=32, base_width=16)
        raw = net(torch.rand(2, 32, 8, 8))
        assert raw.shape == (2, 1, 8, 8)

    def test_class_disc_scores_per_cell(self):
        grid = GridSpec(4, 4)
        net = models.build_class_discriminator(in_channels=32, num_classes=5, grid=grid,
                                               base_width=8)
        raw = net(torch.rand(2, 32, 16, 16))
        assert raw.shape == (2, 5, 16)

    def test_channel_contract(self):
        net = models.build_feature_discriminator(in_channels=8)
        with pytest.raises(InferenceError):
            net(torch.rand(1, 4, 8, 8))


class TestTaskNetwork:
    def test_classification_shape(self):
        net = models.build_task_network("classification", 10, base_width=8)
        assert net(torch.rand(4, 3, 32, 32)).shape == (4, 10)

    def test_segmentation_shape(self):
        net = models.build_task_network("segmentation", 4, base_width=8)
        assert net(torch.rand(4, 3, 64, 64)).shape == (4, 4, 64, 64)

    def test_softmax_simplex(self):
        net = models.build_task_network("classification", 7, base_width=8)
        logits = net(torch.rand(5, 3, 32, 32))
        sums = torch.softmax(logits, dim=1).sum(dim=1)
        assert torch.allclose(sums, torch.ones(5), atol=1e-6)

    def test_feature_map_precedes_head(self):
        net = models.build_task_network("classification", 3, base_width=8)
        feat = models.extract_features(net, torch.rand(2, 3, 32, 32))
        assert feat.shape == (2, 32, 8, 8)

    def test_kind_validated(self):
        with pytest.raises(ConfigurationError):
            models.build_task_network("detection", 3)


def _check_network_gradients(net, x, seed, tolerance=1e-3):
    net = net.double()
    x = x.double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # probe at an O(1) weight scale: the finite-difference step must stay
        # small relative to the weights, and the instance norms make the
        # activations (hence kink distances) insensitive to the scale choice
        for p in net.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 2.0)
        proj = torch.randn(net(x).shape, generator=gen, dtype=torch.float64)

    failures = {}
    for name, p in net.named_parameters():
        fn = lambda v, name=name: (torch.func.functional_call(net, {name: v}, (x,))
                                   * proj).sum()
        report = finite_difference_gradient(fn, p.detach(), step=1e-3, tolerance=tolerance)
        if not report.passed:
            failures[name] = report.max_relative_error
    assert not failures, failures


def _probe_input(shape, seed):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen) * 1.6 - 0.8


class TestDifferentiability:
    """Finite-difference probes on miniature (sub-1e3-parameter) configs."""

    def test_translator_gradients(self):
        cfg = models.TranslatorConfig(residual_blocks=1, base_width=1, channels=1)
        pair = models.build_translator(cfg, seed=3)
        assert models.parameter_count(pair.forward) <= 1000
        _check_network_gradients(pair.forward, _probe_input((1, 1, 8, 8), 100), seed=0)

    def test_discriminator_gradients(self):
        cfg = models.DiscriminatorConfig(base_width=1, channels=1)
        net = models.build_pixel_discriminator(cfg, seed=4)
        assert models.parameter_count(net) <= 1000
        _check_network_gradients(net, _probe_input((1, 1, 16, 16), 101), seed=1)

    def test_task_network_gradients(self):
        net = models.build_task_network("classification", 2, base_width=2, channels=1,
                                        seed=5)
        assert models.parameter_count(net) <= 1000
        _check_network_gradients(net, _probe_input((1, 1, 8, 8), 102), seed=11)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        net = models.build_task_network("classification", 3, base_width=4, seed=0)
        config = {"task_width": 4, "num_classes": 3}
        payload = models.pack_checkpoint({"task": net}, config, extra={"stage": 1})
        path = tmp_path / "ck.pt"
        models.save_checkpoint(path, payload)
        loaded = models.load_checkpoint(path)
        assert loaded["stage"] == 1
        other = models.build_task_network("classification", 3, base_width=4, seed=9)
        models.restore_components(loaded, {"task": other}, config)
        x = torch.rand(2, 3, 16, 16)
        assert torch.equal(net(x), other(x))

    def test_mismatched_config_rejected(self, tmp_path):
        net = models.build_task_network("classification", 3, base_width=4)
        payload = models.pack_checkpoint({"task": net}, {"task_width": 4})
        path = tmp_path / "ck.pt"
        models.save_checkpoint(path, payload)
        loaded = models.load_checkpoint(path)
        with pytest.raises(CheckpointError):
            models.restore_components(loaded, {"task": net}, {"task_width": 8})

    def test_mismatched_shape_rejected(self, tmp_path):
        net = models.build_task_network("classification", 3, base_width=4)
        payload = models.pack_checkpoint({"task": net}, {"w": 4})
        path = tmp_path / "ck.pt"
        models.save_checkpoint(path, payload)
        loaded = models.load_checkpoint(path)
        wider = models.build_task_network("classification", 3, base_width=8)
        with pytest.raises(CheckpointError):
            models.restore_components(loaded, {"task": wider}, {"w": 4})

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            models.load_checkpoint(tmp_path / "absent.pt")
