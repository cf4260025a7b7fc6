import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udap import models
from udap.attacks import AttackSpec, attack_denoiser, attack_encoder, attack_hybrid, run_attack
from udap.diffnum import Tensor


def _x(tiny_images, i=0):
    return Tensor(tiny_images[i : i + 1])


@pytest.mark.parametrize("kw", [{"xi": 0.0}, {"steps": 0}])
def test_zero_budget_or_steps_is_identity(tiny_bundle, tiny_images, kw):
    x = _x(tiny_images)
    for fam in ("encoder", "denoiser", "hybrid"):
        out, rep = run_attack(x, tiny_bundle, AttackSpec(family=fam, **kw))
        assert np.array_equal(out.data, x.data)
        assert rep.final_delta_linf == 0.0


def test_attack_is_deterministic(tiny_bundle, tiny_images):
    spec = AttackSpec(family="hybrid", steps=4, seed=11)
    a, ra = attack_hybrid(_x(tiny_images), tiny_bundle, spec)
    b, rb = attack_hybrid(_x(tiny_images), tiny_bundle, spec)
    assert a.data.tobytes() == b.data.tobytes()
    assert ra.objective_curve == rb.objective_curve


@settings(max_examples=6)
@given(st.sampled_from(["encoder", "denoiser", "hybrid"]), st.floats(1 / 255, 16 / 255), st.integers(0, 10**6))
def test_budget_range_and_best_curve(tiny_bundle, tiny_images, family, xi, seed):
    x = _x(tiny_images, seed % 8)
    out, rep = run_attack(x, tiny_bundle, AttackSpec(family=family, xi=xi, steps=3, step_size=xi / 2, seed=seed))
    d = out.data - x.data
    assert np.max(np.abs(d)) <= xi + 1e-6
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0
    assert all(b >= a for a, b in zip(rep.best_curve, rep.best_curve[1:]))
    assert len(rep.objective_curve) == 4


def test_hybrid_endpoints_match_single_families(tiny_bundle, tiny_images):
    x = _x(tiny_images)
    enc, _ = attack_encoder(x, tiny_bundle, AttackSpec(family="encoder", steps=3, seed=2))
    hyb1, _ = attack_hybrid(x, tiny_bundle, AttackSpec(family="hybrid", steps=3, seed=2, hybrid_weight=1.0))
    assert np.array_equal(enc.data, hyb1.data)
    den, _ = attack_denoiser(x, tiny_bundle, AttackSpec(family="denoiser", steps=3, seed=2))
    hyb0, _ = attack_hybrid(x, tiny_bundle, AttackSpec(family="hybrid", steps=3, seed=2, hybrid_weight=0.0))
    assert np.array_equal(den.data, hyb0.data)


def test_hybrid_reports_both_components(tiny_bundle, tiny_images):
    _, rep = attack_hybrid(_x(tiny_images), tiny_bundle, AttackSpec(family="hybrid", steps=3))
    assert set(rep.component_curves) == {"encoder", "denoiser"}
    assert all(v > 0 for curve in rep.component_curves.values() for v in curve)


def test_encoder_attack_moves_the_latent(tiny_bundle, tiny_images):
    _, rep = attack_encoder(_x(tiny_images), tiny_bundle, AttackSpec(family="encoder", steps=5))
    assert rep.best_curve[-1] > 0


def test_degenerate_bundles_rejected(tiny_bundle, tiny_images):
    ident = models.ModelBundle(tiny_bundle.schedule, models.AutoEncoder((1, 32, 32), identity=True),
                               models.null_denoiser((1, 32, 32)))
    with pytest.raises(ValueError, match="identity or untrained"):
        attack_encoder(_x(tiny_images), ident, AttackSpec(family="encoder", steps=2))
    untrained = models.ModelBundle(tiny_bundle.schedule, tiny_bundle.codec, models.null_denoiser((4, 8, 8)))
    with pytest.raises(ValueError, match="trained denoiser"):
        attack_denoiser(_x(tiny_images), untrained, AttackSpec(family="denoiser", steps=2))


def test_family_mismatch_and_bad_spec():
    with pytest.raises(ValueError):
        AttackSpec(family="pixel")
    with pytest.raises(ValueError):
        AttackSpec(xi=0.01, step_size=0.02)
    with pytest.raises(ValueError):
        AttackSpec(hybrid_weight=1.5)


def test_out_of_range_input_rejected(tiny_bundle):
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        attack_denoiser(Tensor(np.full((1, 1, 32, 32), 1.5)), tiny_bundle, AttackSpec(steps=1))
