from dataclasses import replace

import numpy as np
import pytest
import torch

from glss import generative as gv
from glss import segmentation as sg
from glss.datagen import SynthConfig, build_benchmark
from glss.errors import CheckpointError, InvalidInputError, TrainingDivergedError

TINY = gv.VAEConfig(latent_dim=4, image_size=8, channels=(4, 8), edge_channels=2)
SMALL = gv.VAEConfig(latent_dim=8, image_size=32, channels=(8, 16, 16), edge_channels=4, batch_size=4,
                     learning_rate=1e-3)


@pytest.fixture(scope="module")
def data():
    return build_benchmark(SynthConfig(n_source_train=8, n_source_test=4, n_target_test=4, image_size=32))


@pytest.fixture(scope="module")
def seg(data):
    return sg.train_seg(data["source_train"], sg.SegConfig(epochs=1, batch_size=4))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        gv.VAEConfig(latent_dim=0)
    with pytest.raises(InvalidInputError):
        gv.VAEConfig(perceptual_weight=-1.0)
    with pytest.raises(InvalidInputError):
        gv.VAEConfig(image_size=24)
    with pytest.raises(InvalidInputError):
        gv.VAEConfig(perceptual_layer=7)


def test_encode_contract():
    model = gv.init_vae(SMALL)
    x = np.random.default_rng(0).random((32, 32, 1))
    g1, g2 = gv.encode(model, x), gv.encode(model, x)
    assert g1.mu.shape == (8,) and g1.log_var.shape == (8,)
    assert np.array_equal(g1.mu, g2.mu) and np.array_equal(g1.log_var, g2.log_var)
    g0 = gv.encode(model, np.zeros((32, 32, 1)))
    assert np.all(np.isfinite(g0.mu)) and np.all(np.isfinite(g0.log_var))
    with pytest.raises(InvalidInputError):
        gv.encode(model, np.zeros((16, 16, 1)))


def test_gaussian_latent_validation():
    with pytest.raises(InvalidInputError):
        gv.GaussianLatent(np.zeros(3), np.zeros(4))
    with pytest.raises(InvalidInputError):
        gv.GaussianLatent(np.array([np.nan]), np.zeros(1))


def test_reparameterize_examples():
    g = gv.GaussianLatent(np.array([1.0, -2.0, 0.5]), np.array([0.3, -1.0, 2.0]))
    assert np.array_equal(gv.reparameterize(g, np.zeros(3)), g.mu)
    unit = gv.GaussianLatent(g.mu, np.zeros(3))
    assert np.allclose(gv.reparameterize(unit, np.eye(3)[0]), g.mu + np.eye(3)[0])
    with pytest.raises(InvalidInputError):
        gv.reparameterize(g, np.zeros(4))


def test_reparameterize_monte_carlo_mean():
    g = gv.GaussianLatent(np.array([1.0, -2.0, 0.5]), np.array([0.3, -1.0, 2.0]))
    n = 100_000
    noise = np.random.default_rng(7).standard_normal((n, 3))
    z = g.mu + np.exp(0.5 * g.log_var) * noise
    zt = gv.reparameterize((torch.tensor(g.mu).expand(n, 3), torch.tensor(g.log_var).expand(n, 3)),
                           torch.tensor(noise)).numpy()
    assert np.allclose(z, zt)
    sigma = np.exp(0.5 * g.log_var)
    assert np.all(np.abs(zt.mean(0) - g.mu) < 3 * sigma / np.sqrt(n))


def test_reparameterize_is_differentiable():
    mu = torch.zeros(3, requires_grad=True)
    lv = torch.zeros(3, requires_grad=True)
    gv.reparameterize((mu, lv), torch.ones(3)).sum().backward()
    assert torch.allclose(mu.grad, torch.ones(3)) and torch.allclose(lv.grad, 0.5 * torch.ones(3))


def test_decode_contract():
    model = gv.init_vae(SMALL)
    z = np.random.default_rng(1).standard_normal(8)
    rng = np.random.default_rng(2)
    e1, e2 = rng.random((32, 32, 1)), rng.random((32, 32, 1))
    a, b = gv.decode(model, z, e1), gv.decode(model, z, e2)
    assert a.shape == (32, 32, 1)
    assert a.min() >= 0 and a.max() <= 1
    assert np.max(np.abs(a - b)) > 0
    with pytest.raises(InvalidInputError):
        gv.decode(model, np.zeros(3), e1)
    with pytest.raises(InvalidInputError):
        gv.decode(model, z, np.zeros((16, 16, 1)))


def test_decode_ignores_edges_when_ablated():
    model = gv.init_vae(replace(SMALL, use_edge=False))
    z = np.zeros(8)
    rng = np.random.default_rng(3)
    assert np.array_equal(gv.decode(model, z, rng.random((32, 32, 1))), gv.decode(model, z, rng.random((32, 32, 1))))


def test_perceptual_features(seg, data):
    x = torch.as_tensor(data["source_test"].image_stack()[:2], dtype=torch.float32).unsqueeze(1)
    f1 = gv.perceptual_features(seg, x, 2)
    f2 = gv.perceptual_features(seg, x, 2)
    assert torch.equal(f1, f2)
    assert float(((f1 - f2) ** 2).sum()) == 0.0
    noisy = (x + 0.5 * torch.randn(x.shape, generator=torch.Generator().manual_seed(0))).clamp(0, 1)
    assert float(((gv.perceptual_features(seg, noisy, 2) - f1) ** 2).sum()) > 1e-6
    with pytest.raises(InvalidInputError):
        gv.perceptual_features(seg, x, 9)
    xg = x.clone().requires_grad_(True)
    gv.perceptual_features(seg, xg, 2).sum().backward()
    assert xg.grad is not None and xg.grad.abs().sum() > 0
    assert all(p.grad is None for p in seg.net.parameters())


def test_loss_identities(seg, data):
    model = gv.init_vae(SMALL)
    x = torch.as_tensor(data["source_test"].image_stack()[:3], dtype=torch.float32).unsqueeze(1)
    zero = torch.zeros(3, 8)
    lg, lh, parts = gv.vae_losses(model, x, x.clone(), (zero, zero), seg, SMALL)
    assert float(lg) == 0.0 and float(lh) == 0.0
    x_hat = torch.rand(x.shape, generator=torch.Generator().manual_seed(1))
    mu, lv = torch.randn(3, 8), torch.randn(3, 8)
    lg, lh, parts = gv.vae_losses(model, x, x_hat, (mu, lv), seg, replace(SMALL, perceptual_weight=0.0))
    assert float(lh) == float(parts["L_r"])
    lg, lh, parts = gv.vae_losses(model, x, x_hat, (mu, lv), seg, SMALL)
    assert torch.isclose(lg - lh, parts["KL"])
    assert torch.isclose(lh, parts["L_r"] + SMALL.perceptual_weight * parts["L_p"])


def test_asymmetric_update(seg, data, monkeypatch):
    """A huge KL changes the encoder step but leaves the decoder step bit-identical."""
    x = torch.as_tensor(data["source_train"].image_stack()[:4], dtype=torch.float32).unsqueeze(1)
    e = gv.edge_batch(data["source_train"].image_stack()[:4])
    noise = torch.randn(4, 8, generator=torch.Generator().manual_seed(0))

    def one_step():
        model = gv.init_vae(SMALL)
        before = model.parameter_arrays()
        opt = gv.make_optimizer(model, SMALL)
        gv.vae_step(model, x, e, noise, seg, opt, SMALL)
        after = model.parameter_arrays()
        return {k: after[k] - before[k] for k in after}

    base = one_step()
    orig = gv.diffops.kl_diag_gaussian
    monkeypatch.setattr(gv.diffops, "kl_diag_gaussian", lambda mu, lv: orig(mu + 1e3, lv))
    huge = one_step()
    dec = [k for k in base if k.startswith("decoder.")]
    enc = [k for k in base if k.startswith("encoder.")]
    assert all(np.array_equal(base[k], huge[k]) for k in dec)
    assert any(not np.array_equal(base[k], huge[k]) for k in enc)


def test_smoke_training(seg, data):
    cfg = replace(SMALL, epochs=2)
    mask_reads = data["source_train"].reads["mask"]
    before = seg.parameter_arrays()
    model = gv.train_vae(data["source_train"], seg, cfg)
    after = seg.parameter_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert len(model.history) == 2
    assert model.history[-1]["L_r"] <= model.history[0]["L_r"]
    again = gv.train_vae(data["source_train"], seg, cfg)
    assert again.history == model.history
    assert data["source_train"].reads["mask"] == mask_reads


def test_training_guards(seg, data):
    model = gv.train_vae(data["source_train"], seg, replace(SMALL, epochs=0))
    assert model.history == []
    with pytest.raises(InvalidInputError):
        gv.train_vae(data["target_test"], seg, SMALL)
    assert data["target_test"].reads["image"] == 0
    with pytest.raises(InvalidInputError):
        gv.train_vae(data["source_train"], seg, replace(SMALL, image_size=64, channels=(8, 16, 16)))


def test_divergence_is_reported(seg, data, monkeypatch):
    orig = gv.diffops.kl_diag_gaussian
    monkeypatch.setattr(gv.diffops, "kl_diag_gaussian", lambda mu, lv: orig(mu, lv) * float("nan"))
    with pytest.raises(TrainingDivergedError) as info:
        gv.train_vae(data["source_train"], seg, replace(SMALL, epochs=1))
    assert info.value.epoch == 0 and info.value.batch == 0


def test_checkpoint_round_trip(tmp_path, seg, data):
    model = gv.train_vae(data["source_train"], seg, replace(SMALL, epochs=1))
    gv.save_vae(model, tmp_path / "v.zip")
    back = gv.load_vae(tmp_path / "v.zip")
    pa, pb = model.parameter_arrays(), back.parameter_arrays()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert back.config == model.config and back.history == model.history
    gv.save_vae(back, tmp_path / "w.zip")
    assert (tmp_path / "v.zip").read_bytes() == (tmp_path / "w.zip").read_bytes()
    with pytest.raises(CheckpointError):
        sg.load_seg(tmp_path / "v.zip")
    with pytest.raises(CheckpointError):
        gv.load_vae(tmp_path / "missing.zip")


def test_tiny_float64_model_runs():
    model = gv.init_vae(TINY, dtype=torch.float64)
    out = gv.decode(model, np.zeros(4), np.zeros((8, 8, 1)))
    assert out.shape == (8, 8, 1) and model.dtype == torch.float64
