import pytest
import torch

from _tables import CSU, DISCRIMINATOR, audit, expected, recorded_shapes
from vsanet.core import DimensionError, TrainConfig, seed_all
from vsanet.csu_gan import CsuModel, Discriminator, csu_forward, discriminate
from vsanet.svae import SvaeModel, decode


def small_config(**kw):
    return TrainConfig(image_size=32, width_divisor=8, latent_dim=16, **kw)


def latent_and_taps(cfg, seed):
    seed_all(seed)
    svae = SvaeModel(cfg)
    z = torch.randn(2, cfg.latent_dim)
    with torch.no_grad():
        _, tap3, tap4 = decode(svae, z)
    return z, tap3, tap4


@pytest.mark.parametrize("size", [256, 64, 32])
def test_shape_audit(size):
    assert audit(size) == []


def test_fuse4_shape_at_full_scale():
    shapes = recorded_shapes(256)["csu"]
    assert shapes["sca2"] == (512, 32, 32)
    assert shapes == expected(CSU, 256)


def test_discriminator_full_scale():
    assert recorded_shapes(256)["discriminator"] == expected(DISCRIMINATOR, 256)


class TestCsuForward:
    def test_desk_scale_output(self):
        cfg = TrainConfig(image_size=64, width_divisor=4)
        seed_all(0)
        model = CsuModel(cfg)
        z, tap3, tap4 = latent_and_taps(cfg, 1)
        with torch.no_grad():
            y = csu_forward(model, torch.rand(3, 64, 64), z[0], tap3[0], tap4[0])
        assert y.shape == (3, 64, 64)
        assert y.min() >= 0 and y.max() <= 1

    def test_zero_gain_equals_plain_unet(self):
        cfg = small_config()
        seed_all(0)
        model = CsuModel(cfg)
        model.set_gamma(0.0)
        z, tap3, tap4 = latent_and_taps(cfg, 1)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            assert torch.equal(model(x, z, tap3, tap4), model(x, z, tap3, tap4, use_sca=False))

    def test_exemplar_invariance_with_zero_gain(self):
        cfg = small_config()
        seed_all(0)
        model = CsuModel(cfg)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            a = model(x, *latent_and_taps(cfg, 1))
            b = model(x, *latent_and_taps(cfg, 2))
        assert torch.equal(a, b)

    def test_exemplar_dependence_with_gain(self):
        cfg = small_config()
        seed_all(0)
        model = CsuModel(cfg)
        model.set_gamma(0.5)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            a = model(x, *latent_and_taps(cfg, 1))
            b = model(x, *latent_and_taps(cfg, 2))
        assert (a - b).abs().mean() > 0

    def test_dead_path_detector(self):
        # with zero gain the attention blocks are disconnected by design
        cfg = small_config()
        seed_all(0)
        model = CsuModel(cfg).double()
        model.set_gamma(0.5)
        z, tap3, tap4 = latent_and_taps(cfg, 1)
        x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
        w = torch.randn(2, 3, 32, 32, dtype=torch.float64)
        y = model(x, z.double(), tap3.double(), tap4.double())
        (y * w).sum().backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().gt(0).any()]
        assert dead == []

    def test_bad_spatial_size(self):
        cfg = small_config()
        model = CsuModel(cfg)
        z, tap3, tap4 = latent_and_taps(cfg, 1)
        with pytest.raises(DimensionError):
            csu_forward(model, torch.rand(3, 40, 40), z[0], tap3[0], tap4[0])

    def test_bad_channels(self):
        cfg = small_config()
        model = CsuModel(cfg)
        z, tap3, tap4 = latent_and_taps(cfg, 1)
        with pytest.raises(DimensionError):
            csu_forward(model, torch.rand(1, 32, 32), z[0], tap3[0], tap4[0])

    def test_gamma_default_zero(self):
        assert all(b.gamma.item() == 0.0 for b in CsuModel(small_config()).sca)


class TestDiscriminator:
    def test_full_scale_patch_map(self):
        with torch.device("meta"):
            d = Discriminator(TrainConfig(image_size=256))
            out = discriminate(d, torch.empty(3, 256, 256))
        assert out.shape == (1, 16, 16)

    def test_desk_scale_patch_map(self):
        d = Discriminator(TrainConfig(image_size=64, width_divisor=8))
        with torch.no_grad():
            assert discriminate(d, torch.rand(3, 64, 64)).shape == (1, 4, 4)

    def test_zero_weights_zero_logits(self):
        d = Discriminator(TrainConfig(image_size=64, width_divisor=8))
        with torch.no_grad():
            for p in d.parameters():
                p.zero_()
            out = discriminate(d, torch.rand(2, 3, 64, 64))
        assert torch.equal(out, torch.zeros(2, 1, 4, 4))

    def test_rejects_non_square(self):
        d = Discriminator(TrainConfig(image_size=64, width_divisor=8))
        with pytest.raises(DimensionError):
            discriminate(d, torch.rand(3, 64, 32))

    def test_first_layer_has_no_norm(self):
        d = Discriminator(TrainConfig(image_size=64, width_divisor=8))
        assert not hasattr(d.conv1, "norm")
        assert hasattr(d.conv2, "norm") and hasattr(d.conv3, "norm")
