"""Desk-scale latent purification of adversarial images through DDIM inversion."""

__version__ = "0.1.0"

from .attacks import AttackReport, AttackSpec, attack_denoiser, attack_encoder, attack_hybrid, run_attack
from .ddim import ddim_denoise_step, ddim_invert_step, ddim_metric_loss, reconstruct
from .diffnum import Tensor, adam_step, backward, forward_op, no_grad
from .evalreport import ImageSet, gen_procedural_corpus, image_metrics, recon_gap
from .models import ModelBundle, NoiseSchedule, make_linear_schedule, train_autoencoder, train_denoiser
from .purify import PurifyConfig, PurifyTrace, calibrate_tau, purify, purify_batch

__all__ = [
    "AttackReport", "AttackSpec", "ImageSet", "ModelBundle", "NoiseSchedule", "PurifyConfig", "PurifyTrace",
    "Tensor", "adam_step", "attack_denoiser", "attack_encoder", "attack_hybrid", "backward", "calibrate_tau",
    "ddim_denoise_step", "ddim_invert_step", "ddim_metric_loss", "forward_op", "gen_procedural_corpus",
    "image_metrics", "make_linear_schedule", "no_grad", "purify", "purify_batch", "recon_gap", "reconstruct",
    "run_attack", "train_autoencoder", "train_denoiser",
]
