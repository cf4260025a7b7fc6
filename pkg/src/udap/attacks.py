"""L-infinity PGD analogues of encoder-, denoiser- and hybrid-targeted attacks.

All three share one loop: random start inside the budget, sign-gradient
ascent, projection back to the budget and the [0, 1] pixel range, and the
best iterate (under a fixed evaluation objective) is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor
from .models import ModelBundle, perturb_forward

FAMILIES = ("encoder", "denoiser", "hybrid")


@dataclass
class AttackSpec:
    family: str = "denoiser"
    xi: float = 8 / 255
    steps: int = 40
    step_size: float = 1 / 255
    hybrid_weight: float = 0.5
    seed: int = 0
    t_hat: int = 10

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.xi < 0 or self.steps < 0:
            raise ValueError(f"need xi >= 0 and steps >= 0, got xi={self.xi}, steps={self.steps}")
        if self.steps > 0 and self.xi > 0 and not 0 < self.step_size <= self.xi:
            raise ValueError(f"need 0 < step_size <= xi, got step_size={self.step_size}, xi={self.xi}")
        if not 0.0 <= self.hybrid_weight <= 1.0:
            raise ValueError(f"hybrid_weight must lie in [0, 1], got {self.hybrid_weight}")
        if self.t_hat < 1:
            raise ValueError(f"t_hat must be >= 1, got {self.t_hat}")


@dataclass
class AttackReport:
    objective_curve: list = field(default_factory=list)
    best_curve: list = field(default_factory=list)
    delta_linf_curve: list = field(default_factory=list)
    component_curves: dict = field(default_factory=dict)
    final_delta_linf: float = 0.0
    measured_gap: float = 0.0

    def rows(self):
        """(step, objective, delta_linf) rows for CSV emission."""
        return [(i, o, d) for i, (o, d) in enumerate(zip(self.objective_curve, self.delta_linf_curve))]


class _Objective:
    """Encoder and denoiser objectives for one clean image.

    ``sampled`` draws one fresh (t, eps) per call and is used for gradients;
    ``evaluate`` uses a fixed panel of every depth with frozen noise so that
    iterates are compared on equal terms.
    """

    def __init__(self, x: Tensor, bundle: ModelBundle, spec: AttackSpec, rng: np.random.Generator):
        self.bundle = bundle
        self.spec = spec
        self.rng = rng
        with dn.no_grad():
            self.z_clean = bundle.codec.encode(x)
        depth = min(spec.t_hat, bundle.schedule.T)
        self.panel_t = np.arange(depth)
        self.panel_eps = np.random.default_rng(spec.seed + 7919).standard_normal(
            (depth,) + tuple(bundle.codec.latent_shape)
        ).astype(dn.DTYPE)

    def encoder(self, z: Tensor) -> Tensor:
        return dn.mse(z, self.z_clean)

    def denoiser_sampled(self, z: Tensor) -> Tensor:
        idx = int(self.rng.integers(0, len(self.panel_t)))
        eps = Tensor(self.rng.standard_normal(z.shape).astype(dn.DTYPE))
        zt = perturb_forward(z, idx, eps, self.bundle.schedule)
        return dn.mse(self.bundle.denoiser(zt, idx), eps)

    def _panel_latents(self, z: np.ndarray) -> np.ndarray:
        ab = self.bundle.schedule.alpha_bar[self.panel_t].astype(dn.DTYPE)[:, None, None, None]
        return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * self.panel_eps

    def denoiser_panel(self, z: np.ndarray) -> float:
        with dn.no_grad():
            pred = self.bundle.denoiser(Tensor(self._panel_latents(z)), self.panel_t).data
        return float(np.mean((pred - self.panel_eps) ** 2, dtype=np.float64))

    def gap(self, z_adv: np.ndarray) -> float:
        """Mean over the panel of ||eps(z_t) - eps(z_t^adv)||_2 under shared noise."""
        with dn.no_grad():
            a = self.bundle.denoiser(Tensor(self._panel_latents(self.z_clean.data)), self.panel_t).data
            b = self.bundle.denoiser(Tensor(self._panel_latents(z_adv)), self.panel_t).data
        d = (a - b).reshape(len(self.panel_t), -1)
        return float(np.mean(np.sqrt(np.sum(d.astype(np.float64) ** 2, axis=1))))


def _check_bundle(bundle: ModelBundle, lam: float) -> None:
    if lam > 0 and (bundle.codec.identity or bundle.codec.trained_epochs == 0):
        raise ValueError("encoder-targeted objective is degenerate for an identity or untrained codec")
    if lam < 1 and getattr(bundle.denoiser, "trained_steps", 0) == 0:
        raise ValueError("denoiser-targeted objective needs a trained denoiser")


def _pgd(x: Tensor, bundle: ModelBundle, spec: AttackSpec, lam: float):
    """Shared PGD loop maximizing lam * encoder + (1 - lam) * denoiser (normalized)."""
    _check_bundle(bundle, lam)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise dn.ShapeError(f"attacks operate on one image of shape (1, C, H, W), got {x.shape}")
    x0 = x.data
    if x0.min() < 0 or x0.max() > 1:
        raise ValueError("attack input must lie in [0, 1]")
    report = AttackReport()
    if spec.steps == 0 or spec.xi == 0:
        return Tensor(x0), report

    rng = np.random.default_rng(spec.seed)
    obj = _Objective(x, bundle, spec, rng)
    use_enc, use_den = lam > 0, lam < 1
    lo, hi = np.maximum(x0 - spec.xi, 0.0), np.minimum(x0 + spec.xi, 1.0)
    xa = np.clip(x0 + rng.uniform(-spec.xi, spec.xi, x0.shape), lo, hi).astype(dn.DTYPE)

    norm_enc = norm_den = 1.0
    comps = {"encoder": [], "denoiser": []}
    best_val, best_x = -np.inf, xa
    for step in range(spec.steps + 1):
        xt = Tensor(xa, requires_grad=True)
        z = bundle.codec.encode(xt)
        e_val = obj.encoder(z) if use_enc else None
        d_panel = obj.denoiser_panel(z.data) if use_den else 0.0
        if step == 0:
            # hybrid mixes the two objectives relative to their starting magnitudes
            if lam not in (0.0, 1.0):
                norm_enc = max(e_val.item(), 1e-12)
                norm_den = max(d_panel, 1e-12)
        e_num = e_val.item() if use_enc else 0.0
        val = lam * e_num / norm_enc + (1 - lam) * d_panel / norm_den
        comps["encoder"].append(e_num)
        comps["denoiser"].append(d_panel)
        report.objective_curve.append(val)
        report.delta_linf_curve.append(float(np.max(np.abs(xa - x0))))
        if val > best_val:
            best_val, best_x = val, xa
        report.best_curve.append(best_val)
        if step == spec.steps:
            break

        terms = []
        if use_enc:
            terms.append(dn.scale(e_val, lam / norm_enc))
        if use_den:
            terms.append(dn.scale(obj.denoiser_sampled(z), (1 - lam) / norm_den))
        loss = terms[0] if len(terms) == 1 else dn.add(*terms)
        loss.backward()
        g = xt.grad
        xa = np.clip(xa + spec.step_size * np.sign(g), lo, hi).astype(dn.DTYPE)

    names = (("encoder",) if use_enc else ()) + (("denoiser",) if use_den else ())
    report.component_curves = {k: comps[k] for k in names}
    report.final_delta_linf = float(np.max(np.abs(best_x - x0)))
    with dn.no_grad():
        z_adv = bundle.codec.encode(Tensor(best_x)).data
    report.measured_gap = obj.gap(z_adv)
    return Tensor(best_x), report


def attack_encoder(x: Tensor, bundle: ModelBundle, spec: AttackSpec):
    """Push the encoding of ``x`` away from its clean encoding."""
    if spec.family != "encoder":
        raise ValueError(f"attack_encoder needs family 'encoder', got {spec.family!r}")
    return _pgd(x, bundle, spec, 1.0)


def attack_denoiser(x: Tensor, bundle: ModelBundle, spec: AttackSpec):
    """Maximize the noise-prediction loss of the perturbed image's latent."""
    if spec.family != "denoiser":
        raise ValueError(f"attack_denoiser needs family 'denoiser', got {spec.family!r}")
    return _pgd(x, bundle, spec, 0.0)


def attack_hybrid(x: Tensor, bundle: ModelBundle, spec: AttackSpec):
    if spec.family != "hybrid":
        raise ValueError(f"attack_hybrid needs family 'hybrid', got {spec.family!r}")
    return _pgd(x, bundle, spec, spec.hybrid_weight)


def run_attack(x: Tensor, bundle: ModelBundle, spec: AttackSpec):
    return {"encoder": attack_encoder, "denoiser": attack_denoiser, "hybrid": attack_hybrid}[spec.family](x, bundle, spec)
