import numpy as np
import pytest
import torch

from promodet.backbone import (CBR, Backbone, BackboneConfig, PyramidDecoder,
                               expected_pyramid_sizes)


def tiny_backbone(input_size=384, decoder_channels=256):
    cfg = BackboneConfig(input_size=input_size,
                         encoder_channels=(8, 8, 8, 8, 8),
                         decoder_channels=decoder_channels)
    return Backbone(cfg).eval()


class TestCbr:
    def test_kernel_validation(self):
        with pytest.raises(ValueError):
            CBR(8, 8, 2)
        with pytest.raises(ValueError):
            CBR(8, 8, 5)

    def test_shapes(self):
        x = torch.randn(1, 12, 48, 48)
        assert CBR(12, 256, 1).eval()(x).shape == (1, 256, 48, 48)
        assert CBR(12, 256, 3).eval()(x).shape == (1, 256, 48, 48)

    def test_identity_init_is_relu(self):
        block = CBR(3, 3, 1).eval()
        with torch.no_grad():
            block.conv.weight.zero_()
            for c in range(3):
                block.conv.weight[c, c, 0, 0] = 1.0
        x = torch.randn(2, 3, 9, 9)
        torch.testing.assert_close(block(x), torch.relu(x), rtol=1e-5, atol=1e-5)


class TestPyramidShapes:
    def test_384_sizes_and_channels(self):
        model = tiny_backbone(384)
        with torch.no_grad():
            maps = model(torch.randn(1, 3, 384, 384))
        assert [m.shape[-1] for m in maps] == [48, 24, 12, 6, 3, 1]
        assert all(m.shape[1] == 256 for m in maps)
        assert expected_pyramid_sizes(384) == [48, 24, 12, 6, 3, 1]

    def test_512_sizes_and_channels(self):
        model = tiny_backbone(512)
        with torch.no_grad():
            maps = model(torch.randn(1, 3, 512, 512))
        assert [m.shape[-1] for m in maps] == [64, 32, 16, 8, 4, 2]
        assert all(m.shape[1] == 256 for m in maps)

    def test_zero_params_zero_pyramid(self):
        decoder = PyramidDecoder((4, 4, 4, 4, 4), out_channels=8).eval()
        with torch.no_grad():
            for p in decoder.parameters():
                p.zero_()
        maps = [torch.zeros(1, 4, s, s) for s in (16, 8, 4, 2, 1)]
        with torch.no_grad():
            out = decoder(maps)
        for m in out:
            assert torch.count_nonzero(m) == 0

    def test_stride_mismatch_raises(self):
        decoder = PyramidDecoder((4, 4, 4, 4, 4), out_channels=8).eval()
        maps = [torch.zeros(1, 4, s, s) for s in (16, 8, 4, 2, 2)]
        with pytest.raises(ValueError, match="stride mismatch"):
            decoder(maps)

    def test_encoder_count_validated(self):
        decoder = PyramidDecoder((4, 4, 4, 4, 4), out_channels=8)
        with pytest.raises(ValueError):
            decoder([torch.zeros(1, 4, 8, 8)])

    def test_deterministic_eval_forward(self):
        model = tiny_backbone(384, decoder_channels=16)
        x = torch.randn(1, 3, 384, 384)
        with torch.no_grad():
            a = model(x)
            b = model(x)
        for m1, m2 in zip(a, b):
            torch.testing.assert_close(m1, m2, rtol=0, atol=0)


class TestConfig:
    def test_rejects_unknown_encoder(self):
        with pytest.raises(ValueError):
            BackboneConfig(encoder_kind="vgg16-reduced")

    def test_rejects_bad_width_list(self):
        with pytest.raises(ValueError):
            BackboneConfig(encoder_channels=(8, 8))

    def test_rejects_indivisible_input(self):
        with pytest.raises(ValueError):
            BackboneConfig(input_size=100)


class TestGradients:
    def test_input_gradient_matches_central_differences(self):
        torch.manual_seed(3)
        cfg = BackboneConfig(input_size=384, encoder_channels=(4, 4, 4, 4, 4),
                             decoder_channels=6)
        model = Backbone(cfg).double().eval()
        x = torch.randn(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)

        def scalar(t):
            return sum(m.sum() for m in model(t))

        scalar(x).backward()
        analytic = x.grad.detach().clone()
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(20):
            c = int(rng.integers(0, 3))
            i = int(rng.integers(0, 32))
            j = int(rng.integers(0, 32))
            with torch.no_grad():
                xp = x.detach().clone()
                xp[0, c, i, j] += h
                xm = x.detach().clone()
                xm[0, c, i, j] -= h
                fd = (scalar(xp) - scalar(xm)).item() / (2 * h)
            a = analytic[0, c, i, j].item()
            denom = max(abs(a), abs(fd), 1e-6)
            assert abs(a - fd) / denom <= 1e-3
