"""Deterministic DDIM stepping, inversion/reconstruction, and the DDIM metric loss.

Trajectory time ``t`` runs from 0 (clean latent) to ``t_hat``. Time 0 has
alpha_bar = 1; time ``t >= 1`` maps to a schedule index, either directly
(``t - 1``) or strided so that ``t_hat`` covers the whole schedule. The noise
predictor is always queried with the schedule index of the later of the two
times a step connects, so an inversion step and the denoise step that undoes
it use the same timestep label.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor
from .models import ModelBundle, NoiseSchedule


def schedule_index(t: int, schedule: NoiseSchedule, stride: int = 1) -> int:
    """Schedule index backing trajectory time ``t >= 1``."""
    idx = t * stride - 1
    if t < 1 or idx >= schedule.T:
        raise ValueError(f"trajectory time {t} (stride {stride}) outside the schedule of length {schedule.T}")
    return idx


def alpha_bar_at(t: int, schedule: NoiseSchedule, stride: int = 1) -> float:
    return 1.0 if t == 0 else float(schedule.alpha_bar[schedule_index(t, schedule, stride)])


def max_depth(schedule: NoiseSchedule, stride: int = 1) -> int:
    return schedule.T // stride


def stride_for(schedule: NoiseSchedule, t_hat: int, strided: bool) -> int:
    return max(schedule.T // t_hat, 1) if strided else 1


def _move(z: Tensor, eps: Tensor, ab_from: float, ab_to: float) -> Tensor:
    # sqrt(ab_to) * (z - sqrt(1-ab_from) eps) / sqrt(ab_from) + sqrt(1-ab_to) eps
    a = np.sqrt(ab_to / ab_from)
    b = np.sqrt(1.0 - ab_to) - a * np.sqrt(1.0 - ab_from)
    return dn.add(dn.scale(z, a), dn.scale(eps, b))


def ddim_denoise_step(z_t: Tensor, t: int, denoiser, schedule: NoiseSchedule, stride: int = 1) -> Tensor:
    """One eta=0 DDIM step from trajectory time ``t`` to ``t - 1``."""
    if not 1 <= t <= max_depth(schedule, stride):
        raise ValueError(f"denoise step needs 1 <= t <= {max_depth(schedule, stride)}, got {t}")
    eps = denoiser(z_t, schedule_index(t, schedule, stride))
    return _move(z_t, eps, alpha_bar_at(t, schedule, stride), alpha_bar_at(t - 1, schedule, stride))


def ddim_invert_step(z_t: Tensor, t: int, denoiser, schedule: NoiseSchedule, stride: int = 1) -> Tensor:
    """One DDIM inversion step from ``t`` to ``t + 1`` with the noise predicted at ``z_t``."""
    if not 0 <= t < max_depth(schedule, stride):
        raise ValueError(f"inversion step needs 0 <= t < {max_depth(schedule, stride)}, got {t}")
    eps = denoiser(z_t, schedule_index(t + 1, schedule, stride))
    return _move(z_t, eps, alpha_bar_at(t, schedule, stride), alpha_bar_at(t + 1, schedule, stride))


@dataclass
class Trajectory:
    direction: str
    t_max: int
    latents: list = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in ("inversion", "denoise"):
            raise ValueError(f"unknown direction {self.direction!r}")


def _check_depth(t_hat: int, schedule: NoiseSchedule, stride: int) -> None:
    if not 1 <= t_hat <= max_depth(schedule, stride):
        raise ValueError(f"t_hat={t_hat} outside [1, {max_depth(schedule, stride)}]")


def _sigma(ab: float) -> float:
    return float(np.sqrt((1.0 - ab) / ab))


def _z_at(y: Tensor, ab: float) -> Tensor:
    return y if ab == 1.0 else dn.scale(y, np.sqrt(ab))


# The chains below run in the rescaled variable y = z / sqrt(alpha_bar), where
# an eta=0 DDIM step is y <- y + (sigma_to - sigma_from) * eps with
# sigma = sqrt((1 - ab) / ab). This is the same update as the per-step
# functions above, but with a zero noise prediction y never changes, so a
# null-predictor reconstruction returns its input bit for bit.


def _invert_y(y: Tensor, denoiser, schedule: NoiseSchedule, t_hat: int, stride: int):
    lat = [_z_at(y, 1.0)]
    for t in range(t_hat):
        ab_from, ab_to = alpha_bar_at(t, schedule, stride), alpha_bar_at(t + 1, schedule, stride)
        eps = denoiser(lat[-1], schedule_index(t + 1, schedule, stride))
        y = dn.add(y, dn.scale(eps, _sigma(ab_to) - _sigma(ab_from)))
        lat.append(_z_at(y, ab_to))
    return y, lat


def _denoise_y(y: Tensor, denoiser, schedule: NoiseSchedule, t_hat: int, stride: int):
    lat = [None] * (t_hat + 1)
    lat[t_hat] = _z_at(y, alpha_bar_at(t_hat, schedule, stride))
    for t in range(t_hat, 0, -1):
        ab_from, ab_to = alpha_bar_at(t, schedule, stride), alpha_bar_at(t - 1, schedule, stride)
        eps = denoiser(lat[t], schedule_index(t, schedule, stride))
        y = dn.add(y, dn.scale(eps, _sigma(ab_to) - _sigma(ab_from)))
        lat[t - 1] = _z_at(y, ab_to)
    return y, lat


def invert(z0: Tensor, denoiser, schedule: NoiseSchedule, t_hat: int, stride: int = 1) -> Trajectory:
    _check_depth(t_hat, schedule, stride)
    _, lat = _invert_y(z0, denoiser, schedule, t_hat, stride)
    return Trajectory("inversion", t_hat, lat)


def denoise(z_top: Tensor, denoiser, schedule: NoiseSchedule, t_hat: int, stride: int = 1) -> Trajectory:
    """Run ``t_hat`` denoise steps; ``latents[t]`` holds the latent at time ``t``."""
    _check_depth(t_hat, schedule, stride)
    y = dn.scale(z_top, 1.0 / np.sqrt(alpha_bar_at(t_hat, schedule, stride)))
    _, lat = _denoise_y(y, denoiser, schedule, t_hat, stride)
    lat[t_hat] = z_top
    return Trajectory("denoise", t_hat, lat)


def reconstruct(z0: Tensor, bundle: ModelBundle, t_hat: int, strided: bool = False):
    """Invert ``z0`` to depth ``t_hat`` then denoise back from the inverted latent.

    Returns ``(z0_hat, inversion_trajectory, denoise_trajectory)``. The denoise
    pass starts from the inverted latent itself (shared, not re-derived).
    """
    stride = stride_for(bundle.schedule, t_hat, strided)
    _check_depth(t_hat, bundle.schedule, stride)
    y, inv = _invert_y(z0, bundle.denoiser, bundle.schedule, t_hat, stride)
    y0, den = _denoise_y(y, bundle.denoiser, bundle.schedule, t_hat, stride)
    den[t_hat] = inv[t_hat]
    return y0, Trajectory("inversion", t_hat, inv), Trajectory("denoise", t_hat, den)


def reconstruct_image(x: Tensor, z0: Tensor, bundle: ModelBundle, t_hat: int, strided: bool = False) -> Tensor:
    z_hat, _, _ = reconstruct(z0, bundle, t_hat, strided)
    x_hat = bundle.codec.decode(z_hat)
    if x_hat.shape != x.shape:
        raise dn.ShapeError(f"decoded reconstruction {x_hat.shape} does not match image {x.shape}")
    return x_hat


def ddim_metric_loss(x: Tensor, z0: Tensor, bundle: ModelBundle, t_hat: int, strided: bool = False) -> Tensor:
    """Mean squared error between ``x`` and the decoded DDIM reconstruction of ``z0``."""
    if x.data.ndim != 4 or x.shape[1:] != tuple(bundle.codec.image_shape):
        raise dn.ShapeError(f"image {x.shape} does not match codec image shape {bundle.codec.image_shape}")
    return dn.mse(reconstruct_image(x, z0, bundle, t_hat, strided), x)


def recon_error(x: Tensor, bundle: ModelBundle, t_hat: int, strided: bool = False) -> float:
    """L_DDIM of ``x`` at its own encoding, without recording a graph."""
    with dn.no_grad():
        return ddim_metric_loss(x, bundle.codec.encode(x), bundle, t_hat, strided).item()
