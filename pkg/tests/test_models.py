import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udap import diffnum as dn
from udap import models
from udap.diffnum import Tensor


def test_single_step_schedule():
    s = models.make_linear_schedule(1, 0.5, 0.5)
    assert s.alpha_bar.tolist() == [0.5]


def test_zero_schedule_only_in_test_mode():
    s = models.make_linear_schedule(3, 0.0, 0.0, allow_zero=True)
    assert s.alpha_bar.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        models.make_linear_schedule(3, 0.0, 0.0)


def test_default_schedule_matches_standalone_product():
    s = models.make_linear_schedule(20, 1e-4, 0.02)
    prod = 1.0
    for k in range(20):
        prod *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 19)
    assert abs(s.alpha_bar[19] - prod) < 1e-6


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (5, 0.1, 0.05), (5, 1e-4, 1.0), (5, -0.1, 0.1)])
def test_bad_schedules_rejected(args):
    with pytest.raises(ValueError):
        models.make_linear_schedule(*args)


@given(st.integers(1, 60), st.floats(1e-5, 0.3), st.floats(0.0, 0.5))
def test_schedule_invariants(T, lo, span):
    s = models.make_linear_schedule(T, lo, min(lo + span, 0.99))
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    assert np.allclose(s.alpha_bar, np.cumprod(1 - s.beta), atol=1e-6)


def test_train_steps_subsamples_longer_chain():
    s = models.make_linear_schedule(20, 1e-4, 0.02, train_steps=1000)
    full = np.cumprod(1 - np.linspace(1e-4, 0.02, 1000))
    assert np.allclose(s.alpha_bar, full[49::50])


# ---------------------------------------------------------------- forward diffusion


def _sched(*ab):
    return models.schedule_from_alpha_bar(list(ab))


def test_perturb_forward_limits():
    z, e = Tensor([1.5, -2.0]), Tensor([0.3, 0.7])
    assert models.perturb_forward(z, 0, e, _sched(1.0, 0.5)).data.tolist() == z.data.tolist()
    # alpha_bar = 0 is the pure-noise end; build the arrays directly since it is outside a valid schedule
    s0 = models.NoiseSchedule(1, np.array([1.0]), np.array([0.0]))
    assert models.perturb_forward(z, 0, e, s0).data.tolist() == e.data.tolist()


def test_perturb_forward_hand_value():
    out = models.perturb_forward(Tensor([2.0]), 0, Tensor([4.0]), _sched(0.25))
    assert abs(out.data[0] - 4.4641016) < 1e-6


def test_perturb_forward_rejects_bad_t():
    with pytest.raises(ValueError):
        models.perturb_forward(Tensor([1.0]), 1, Tensor([1.0]), _sched(0.5))


def test_perturb_forward_linear(rng):
    s = models.make_linear_schedule()
    a, b, c, d = (rng.standard_normal(8).astype(np.float32) for _ in range(4))
    lhs = models.perturb_forward(Tensor(a + c), 7, Tensor(b + d), s).data
    rhs = models.perturb_forward(Tensor(a), 7, Tensor(b), s).data + models.perturb_forward(Tensor(c), 7, Tensor(d), s).data
    assert np.allclose(lhs, rhs, atol=1e-6)


# ---------------------------------------------------------------- codec


def test_codec_shapes(tiny_images):
    ae = models.AutoEncoder()
    z = ae.encode(Tensor(tiny_images[:2]))
    assert z.shape == (2, 4, 8, 8)
    assert ae.decode(z).shape == (2, 1, 32, 32)


def test_identity_codec_is_exact(tiny_images):
    ae = models.train_autoencoder(tiny_images[:8], epochs=5, seed=0, identity=True)
    x = Tensor(tiny_images[:3])
    assert np.array_equal(ae(x).data, x.data)
    assert ae.heldout_mse == 0.0


def test_zero_epochs_reports_mse(tiny_images):
    ae = models.train_autoencoder(tiny_images[:8], epochs=0, seed=0, hidden=4)
    assert np.isfinite(ae.heldout_mse) and ae.trained_epochs == 0


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        models.train_autoencoder(np.zeros((0, 1, 32, 32), np.float32), epochs=1, seed=0)


def test_codec_training_is_seed_deterministic(tiny_images):
    a = models.train_autoencoder(tiny_images[:16], epochs=1, seed=3, hidden=4)
    b = models.train_autoencoder(tiny_images[:16], epochs=1, seed=3, hidden=4)
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_trained_codec_beats_untrained(tiny_bundle, tiny_images):
    fresh = models.AutoEncoder(hidden=8)
    assert tiny_bundle.codec.heldout_mse < models.codec_mse(fresh, tiny_images)


# ---------------------------------------------------------------- denoiser


def test_denoiser_output_shape():
    den = models.Denoiser((4, 8, 8), channels=(8, 16, 8))
    assert den(Tensor(np.zeros((3, 4, 8, 8))), [0, 5, 19]).shape == (3, 4, 8, 8)


def test_zero_steps_returns_untrained(tiny_bundle, tiny_images):
    den = models.train_denoiser(tiny_bundle.codec, tiny_bundle.schedule, tiny_images[:8], steps=0, seed=0, channels=(8, 8, 8))
    assert den.trained_steps == 0 and np.isfinite(den.val_loss)


def test_training_improves_validation_loss(tiny_bundle, tiny_images):
    untrained = models.train_denoiser(tiny_bundle.codec, tiny_bundle.schedule, tiny_images, steps=0, seed=0, channels=(8, 8, 8))
    assert tiny_bundle.denoiser.val_loss < untrained.val_loss


def test_single_datapoint_overfit():
    codec = models.AutoEncoder((1, 16, 16), latent_channels=1, hidden=4)
    lat = np.random.default_rng(0).standard_normal((1, 1, 4, 4)).astype(np.float32)
    den = models.train_denoiser(codec, models.make_linear_schedule(), None, steps=2000, seed=0,
                                latents=lat, batch_size=8, channels=(8, 8, 8), fixed_noise=True)
    assert den.train_loss < 1e-3


def test_latent_shape_mismatch_rejected(tiny_bundle):
    with pytest.raises(dn.ShapeError):
        models.train_denoiser(tiny_bundle.codec, tiny_bundle.schedule, None, steps=1, seed=0,
                              latents=np.zeros((4, 2, 8, 8), np.float32))


def test_denoiser_training_is_seed_deterministic(tiny_bundle, tiny_images):
    kw = dict(steps=3, seed=5, channels=(8, 8, 8))
    a = models.train_denoiser(tiny_bundle.codec, tiny_bundle.schedule, tiny_images[:16], **kw)
    b = models.train_denoiser(tiny_bundle.codec, tiny_bundle.schedule, tiny_images[:16], **kw)
    for k, v in a.state_dict().items():
        assert v.tobytes() == b.state_dict()[k].tobytes()


def test_bundle_checks_consistency(tiny_bundle):
    with pytest.raises(ValueError, match="T="):
        models.ModelBundle(models.make_linear_schedule(10), tiny_bundle.codec, tiny_bundle.denoiser)
    with pytest.raises(dn.ShapeError):
        models.ModelBundle(tiny_bundle.schedule, tiny_bundle.codec, models.null_denoiser((2, 8, 8)))
