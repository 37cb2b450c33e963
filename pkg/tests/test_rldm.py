import hashlib

import numpy as np
import pytest

from advrestore import dataio, rldm
from advrestore.autodiff import Tensor, ops, optim
from advrestore.diffusion import DdimSubsequence, ddim_step, make_ddim_subsequence, make_linear_schedule
from tests.gradcheck import max_gradient_error


@pytest.fixture(scope="module")
def images():
    ds = dataio.build_dataset(seed=3, n_identities=6, n_variants=4, n_test_variants=1,
                              n_genuine_pairs=5, n_impostor_pairs=5, n_attack_pairs=5)
    return ds.hq, ds.degraded


@pytest.fixture(scope="module")
def ae(images):
    return rldm.train_autoencoder(np.concatenate(images), steps=20, batch_size=8, seed=0)


def small_model(ae, m=4):
    unet = rldm.ConditionalUNet(rldm.UNetConfig(widths=(8, 16), time_dim=8, groups=4), seed=1)
    sched = make_linear_schedule(100)
    return rldm.RLDM(ae, unet, sched, make_ddim_subsequence(100, m))


def digest(module):
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.tobytes())
    return h.hexdigest()


def test_encode_shape_and_determinism(ae, images):
    hq, _ = images
    z = ae.encode(hq[:3])
    assert z.shape == (3, 4, 8, 8)
    assert ae.encode(hq[0]).shape == (1, 4, 8, 8)
    np.testing.assert_array_equal(z, ae.encode(hq[:3]))


def test_encode_rejects_wrong_resolution(ae):
    with pytest.raises(ValueError, match="32x32"):
        ae.encode(np.zeros((1, 1, 16, 16)))


def test_decode_round_trip_shape_and_range(ae, images):
    hq, _ = images
    x = ae.decode(ae.encode(hq[:4]))
    assert x.shape == hq[:4].shape
    assert x.min() >= 0.0 and x.max() <= 1.0
    big = ae.decode(50.0 * np.ones((1, 4, 8, 8)))
    assert big.min() >= 0.0 and big.max() <= 1.0
    with pytest.raises(ValueError, match="latent shape"):
        ae.decode(np.zeros((1, 3, 8, 8)))


def test_train_autoencoder_freezes_and_normalizes_latents(ae, images):
    assert ae.frozen
    z = ae.encode(np.concatenate(images))
    assert z.std() == pytest.approx(1.0, rel=1e-9)


def test_train_autoencoder_divergence_is_reported(images):
    bad = images[0].copy()
    bad[:, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="diverged"):
        rldm.train_autoencoder(bad, steps=5, batch_size=4, seed=0)


def test_unet_contract(ae):
    model = small_model(ae)
    assert model.unet.in_channels == 2 * ae.cfg.latent_channels
    rng = np.random.default_rng(0)
    zc, zn = rng.normal(size=(2, 2, 4, 8, 8))
    out = model.unet_forward(zc, zn, 40).data
    assert out.shape == zn.shape
    np.testing.assert_array_equal(out, model.unet_forward(zc, zn, 40).data)
    with pytest.raises(ValueError, match="shape mismatch"):
        model.unet_forward(zc[:1], zn, 40)


def test_unet_conditioning_is_live(ae):
    model = small_model(ae)
    rng = np.random.default_rng(1)
    zc, zn = rng.normal(size=(2, 1, 4, 8, 8))
    a = model.unet_forward(zc, zn, 10).data
    b = model.unet_forward(rng.normal(size=zc.shape), zn, 10).data
    c = model.unet_forward(np.zeros_like(zc), zn, 10).data
    assert np.abs(a - b).max() > 1e-6 and np.abs(a - c).max() > 1e-6


def test_unet_timestep_changes_output(ae):
    model = small_model(ae)
    zc, zn = np.random.default_rng(2).normal(size=(2, 1, 4, 8, 8))
    assert np.abs(model.unet_forward(zc, zn, 5).data - model.unet_forward(zc, zn, 90).data).max() > 1e-6


def test_unet_gradients_match_finite_differences(ae):
    unet = small_model(ae).unet
    rng = np.random.default_rng(3)
    zc, zn = rng.normal(size=(2, 1, 4, 8, 8))
    w = rng.normal(size=(1, 4, 8, 8))

    def build(c, n):
        return ops.sum(ops.mul(unet(c, n, 37), Tensor(w)))

    assert max_gradient_error(build, [zc, zn], n_coords=8, seed=4) <= 1e-4


def test_perfect_predictor_has_zero_loss(ae, images):
    model = small_model(ae)
    hq, deg = images
    xi = np.random.default_rng(5).normal(size=(4, 4, 8, 8))
    model.unet_forward = lambda zc, zn, r: Tensor(xi)
    opt = optim.Adam(model.unet.parameters(), 1e-3)
    loss = rldm.train_rldm_step(model, hq[:4], deg[:4], np.random.default_rng(0), opt, xi=xi)
    assert loss == 0.0


def test_train_step_updates_unet_only(ae, images):
    model = small_model(ae)
    hq, deg = images
    before_ae, before_unet = digest(model.autoencoder), digest(model.unet)
    opt = optim.Adam(model.unet.parameters(), 1e-3)
    loss = rldm.train_rldm_step(model, hq[:4], deg[:4], np.random.default_rng(0), opt)
    assert np.isfinite(loss) and loss > 0
    assert digest(model.autoencoder) == before_ae
    assert digest(model.unet) != before_unet


def test_train_step_requires_frozen_autoencoder(images):
    fresh = rldm.Autoencoder()
    model = small_model(fresh)
    opt = optim.Adam(model.unet.parameters(), 1e-3)
    with pytest.raises(RuntimeError, match="frozen"):
        rldm.train_rldm_step(model, images[0][:2], images[1][:2], np.random.default_rng(0), opt)


def test_train_rldm_reduces_loss_and_keeps_encoder(ae, images):
    model = small_model(ae)
    before = digest(model.autoencoder)
    seen = []
    losses = rldm.train_rldm(model, *images, steps=60, batch_size=8, seed=0, callback=lambda s, m: seen.append(digest(m.autoencoder)))
    assert set(seen) == {before}
    assert losses[-20:].mean() < losses[:5].mean()


def test_restore_is_deterministic_and_resumable(ae, images):
    model = small_model(ae, m=4)
    calls = []
    unet_forward = model.unet_forward
    model.unet_forward = lambda zc, zn, r: calls.append(r) or unet_forward(zc, zn, r)
    s1 = rldm.restore(images[1][:3], model, seed=11)
    assert calls == [100, 75, 50, 25] and s1.timesteps == calls
    s2 = rldm.restore(images[1][:3], model, seed=11)
    np.testing.assert_array_equal(s1.x_bar, s2.x_bar)
    assert not np.array_equal(s1.x_bar, rldm.restore(images[1][:3], model, seed=12).x_bar)
    z = ddim_step(s1.eps_final, s1.z_before_final, s1.r_final, 0, None, model.schedule)
    np.testing.assert_array_equal(z, s1.z_final)
    np.testing.assert_array_equal(ae.decode(z), s1.x_bar)


def test_restore_decodes_once(ae, images, monkeypatch):
    model = small_model(ae, m=3)
    count = []
    decode = type(ae).decode
    monkeypatch.setattr(type(ae), "decode", lambda self, z: count.append(1) or decode(self, z))
    rldm.restore(images[1][:2], model, seed=0)
    assert len(count) == 1


def test_restore_rejects_empty_subsequence(ae, images):
    model = small_model(ae)
    model.subsequence = DdimSubsequence(())
    with pytest.raises(ValueError, match="empty"):
        rldm.restore(images[1][:1], model)


def test_subsequence_must_fit_schedule(ae):
    with pytest.raises(ValueError):
        rldm.RLDM(ae, small_model(ae).unet, make_linear_schedule(10), make_ddim_subsequence(20, 4))


def test_checkpoint_round_trip(ae, images, tmp_path):
    model = small_model(ae)
    dataio.save_checkpoint(tmp_path / "ae.ckpt", "autoencoder", ae.state_dict(), ae.config_dict())
    dataio.save_checkpoint(tmp_path / "u.ckpt", "rldm", model.unet.state_dict(), rldm.rldm_config_dict(model))
    _, s, c = dataio.load_checkpoint(tmp_path / "ae.ckpt", "autoencoder")
    ae2 = rldm.Autoencoder.from_state(s, c)
    _, s, c = dataio.load_checkpoint(tmp_path / "u.ckpt", "rldm")
    model2 = rldm.rldm_from_state(ae2, s, c)
    assert model2.subsequence == model.subsequence
    np.testing.assert_array_equal(rldm.restore(images[1][:2], model, 3).x_bar, rldm.restore(images[1][:2], model2, 3).x_bar)
