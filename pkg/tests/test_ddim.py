import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udap import ddim, models
from udap import diffnum as dn
from udap.diffnum import Tensor
from udap.models import ConstantDenoiser, ModelBundle


def _sched(*ab):
    return models.schedule_from_alpha_bar(list(ab))


def _identity_bundle(shape, schedule=None, value=0.0):
    schedule = schedule or models.make_linear_schedule()
    codec = models.AutoEncoder(shape, identity=True)
    return ModelBundle(schedule, codec, ConstantDenoiser(shape, value, schedule.T))


def test_denoise_null_predictor_scales():
    s = _sched(0.9, 0.5)
    out = ddim.ddim_denoise_step(Tensor([[2.0]]), 2, ConstantDenoiser((1,), 0.0, 2), s)
    assert abs(out.data[0] - 2.0 * math.sqrt(0.9 / 0.5)) < 1e-6


def test_equal_alpha_bar_is_identity_step():
    s = _sched(0.7, 0.7)
    z = Tensor([[0.3, -1.2]])
    den = ConstantDenoiser((2,), 0.9, 2)
    assert np.allclose(ddim.ddim_denoise_step(z, 2, den, s).data, z.data, atol=1e-7)
    assert np.allclose(ddim.ddim_invert_step(z, 1, den, s).data, z.data, atol=1e-7)


def test_denoise_scalar_hand_value():
    # z_t = 1, eps = 0.5, ab_t = 0.25, ab_{t-1} = 0.64
    s = _sched(0.64, 0.25)
    want = math.sqrt(0.64) * (1 - math.sqrt(0.75) * 0.5) / math.sqrt(0.25) + math.sqrt(0.36) * 0.5
    got = ddim.ddim_denoise_step(Tensor([[1.0]]), 2, ConstantDenoiser((1,), 0.5, 2), s).data[0, 0]
    assert abs(got - want) < 1e-6


def test_invert_then_denoise_scalar_oracle():
    ab = [0.95, 0.8, 0.6]
    s = _sched(*ab)
    den = ConstantDenoiser((1,), 0.5, 3)
    z = Tensor([[0.7]])
    up = ddim.ddim_invert_step(z, 1, den, s)
    back = ddim.ddim_denoise_step(up, 2, den, s)
    # standalone scalar recurrence
    a0, a1, e = ab[0], ab[1], 0.5
    u = math.sqrt(a1) * (0.7 - math.sqrt(1 - a0) * e) / math.sqrt(a0) + math.sqrt(1 - a1) * e
    assert abs(up.data[0, 0] - u) < 1e-6
    b = math.sqrt(a0) * (u - math.sqrt(1 - a1) * e) / math.sqrt(a1) + math.sqrt(1 - a0) * e
    assert abs(back.data[0, 0] - b) < 1e-6 and abs(back.data[0, 0] - 0.7) < 1e-6


def test_step_range_errors():
    s = models.make_linear_schedule()
    den = ConstantDenoiser((1,), 0.0)
    with pytest.raises(ValueError):
        ddim.ddim_denoise_step(Tensor([[1.0]]), 0, den, s)
    with pytest.raises(ValueError):
        ddim.ddim_invert_step(Tensor([[1.0]]), 20, den, s)
    with pytest.raises(ValueError):
        ddim.reconstruct(Tensor(np.zeros((1, 1, 4, 4))), _identity_bundle((1, 4, 4)), 21)
    with pytest.raises(ValueError):
        ddim.reconstruct(Tensor(np.zeros((1, 1, 4, 4))), _identity_bundle((1, 4, 4)), 0)


@given(st.integers(0, 2**31 - 1), st.floats(-2, 2), st.integers(0, 18))
def test_inverse_step_algebra(seed, c, t):
    s = models.make_linear_schedule()
    den = ConstantDenoiser((3, 4), c)
    z = Tensor(np.random.default_rng(seed).standard_normal((1, 3, 4)))
    back = ddim.ddim_denoise_step(ddim.ddim_invert_step(z, t, den, s), t + 1, den, s)
    assert np.max(np.abs(back.data - z.data)) <= 1e-5 * max(1.0, np.max(np.abs(z.data)))


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 0.05), st.floats(0.0, 0.5), st.booleans())
def test_null_predictor_roundtrip(seed, lo, span, strided):
    s = models.make_linear_schedule(20, lo, min(lo + span, 0.9))
    b = _identity_bundle((4, 32, 32), s)
    z = Tensor(np.random.default_rng(seed).standard_normal((1, 4, 32, 32)))
    z_hat, inv, den = ddim.reconstruct(z, b, 10, strided)
    assert z_hat.data.tobytes() == z.data.tobytes()
    assert len(inv.latents) == len(den.latents) == 11
    assert den.latents[10] is inv.latents[10]


@pytest.mark.parametrize("strided", [False, True])
def test_chain_matches_single_steps(tiny_bundle, strided):
    b = tiny_bundle
    z = Tensor(np.random.default_rng(4).standard_normal((1, 4, 8, 8)))
    z_hat, inv, den = ddim.reconstruct(z, b, 5, strided)
    stride = ddim.stride_for(b.schedule, 5, strided)
    # replay with the per-step update in z
    cur, ref = z, [z.data]
    for t in range(5):
        ab_f, ab_t = ddim.alpha_bar_at(t, b.schedule, stride), ddim.alpha_bar_at(t + 1, b.schedule, stride)
        cur = ddim._move(cur, b.denoiser(cur, ddim.schedule_index(t + 1, b.schedule, stride)), ab_f, ab_t)
        ref.append(cur.data)
    for t in range(5, 0, -1):
        ab_f, ab_t = ddim.alpha_bar_at(t, b.schedule, stride), ddim.alpha_bar_at(t - 1, b.schedule, stride)
        cur = ddim._move(cur, b.denoiser(cur, ddim.schedule_index(t, b.schedule, stride)), ab_f, ab_t)
    for got, want in zip(inv.latents, ref):
        assert np.allclose(got.data, want, atol=1e-5)
    assert np.allclose(z_hat.data, cur.data, atol=1e-5)


def test_trajectory_direction_validated():
    with pytest.raises(ValueError):
        ddim.Trajectory("sideways", 3)


def test_metric_loss_identity_examples():
    b = _identity_bundle((1, 4, 4))
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 1, 4, 4)))
    # the ten scalings and their inverses cancel to f32 rounding, not bit-exactly
    assert ddim.ddim_metric_loss(x, x, b, 10).item() < 1e-12
    shifted = Tensor(x.data + np.float32(0.25))
    assert abs(ddim.ddim_metric_loss(x, shifted, b, 10).item() - 0.0625) < 1e-6


def test_metric_loss_shape_mismatch():
    b = _identity_bundle((1, 4, 4))
    with pytest.raises(dn.ShapeError):
        ddim.ddim_metric_loss(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 4, 4))), b, 10)


def fd_gradient_relerr(seed=0, head_gain=1.0, h=1e-3):
    """Relative error of the analytic dL/dz0 against central differences on a 4x4 identity codec."""
    s = models.make_linear_schedule()
    den = models.Denoiser((1, 4, 4), channels=(8, 8, 8), seed=seed)
    den.params["head.w"].data *= head_gain
    b = ModelBundle(s, models.AutoEncoder((1, 4, 4), identity=True), den)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0, 1, (1, 1, 4, 4)))
    z0 = rng.uniform(0, 1, (1, 1, 4, 4)).astype(dn.DTYPE)
    z = Tensor(z0, requires_grad=True)
    ddim.ddim_metric_loss(x, z, b, 10).backward()
    fd = np.zeros(z0.size)
    with dn.no_grad():
        for j in range(z0.size):
            zp, zm = z0.copy(), z0.copy()
            zp.flat[j] += h
            zm.flat[j] -= h
            lp = ddim.ddim_metric_loss(x, Tensor(zp), b, 10).item()
            lm = ddim.ddim_metric_loss(x, Tensor(zm), b, 10).item()
            fd[j] = (lp - lm) / (2 * h)
    return float(np.linalg.norm(z.grad.ravel() - fd) / np.linalg.norm(fd))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_metric_loss_gradient_matches_fd(seed):
    assert fd_gradient_relerr(seed) < 1e-3


def test_metric_loss_gradient_float64_oracle(monkeypatch):
    # with a strongly nonlinear predictor, h=1e-3 straddles relu kinks; in
    # float64 a tiny step isolates the derivative itself
    monkeypatch.setattr(dn, "DTYPE", np.float64)
    assert fd_gradient_relerr(0, head_gain=20.0, h=1e-6) < 1e-6
