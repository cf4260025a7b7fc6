"""Latent purification by descent on the DDIM metric loss, gated by a threshold.

Per image: encode, then for up to ``max_epochs`` epochs evaluate the loss and
either stop (loss <= tau) or take one Adam step on the latent. The target of
the loss is always the original input image.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffnum as dn
from .ddim import ddim_metric_loss, max_depth, stride_for
from .diffnum import Tensor
from .models import ModelBundle

log = logging.getLogger(__name__)

THRESHOLD_MET = "threshold_met"
MAX_EPOCHS = "max_epochs"
ALREADY_CLEAN = "already_clean"
FAILED = "failed"


@dataclass
class PurifyConfig:
    tau: float = 4e-3
    max_epochs: int = 100
    t_hat: int = 10
    lr: float = 1e-2
    seed: int = 0
    gate: bool = True
    strided: bool = False

    def validate(self, bundle: ModelBundle | None = None) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if bundle is not None:
            stride = stride_for(bundle.schedule, self.t_hat, self.strided)
            if not 1 <= self.t_hat <= max_depth(bundle.schedule, stride):
                raise ValueError(f"t_hat={self.t_hat} outside [1, {max_depth(bundle.schedule, stride)}]")


@dataclass
class PurifyTrace:
    loss_curve: list = field(default_factory=list)
    epochs_run: int = 0
    termination: str = MAX_EPOCHS
    wall_time_ms: float = 0.0
    best_epoch: int = 0
    error: str | None = None

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0] if self.loss_curve else float("nan")

    @property
    def final_loss(self) -> float:
        """Loss of the latent that was decoded into the output."""
        return self.loss_curve[self.best_epoch] if self.loss_curve else float("nan")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("loss_curve")
        d["initial_loss"] = self.initial_loss
        d["final_loss"] = self.final_loss
        return d


def _decode(bundle: ModelBundle, z: np.ndarray) -> Tensor:
    with dn.no_grad():
        return Tensor(np.clip(bundle.codec.decode(Tensor(z)).data, 0.0, 1.0))


def calibrate_tau(clean_images, bundle: ModelBundle, t_hat: int, strided: bool = False) -> float:
    """Mean DDIM metric loss of clean images at their own encodings."""
    images = [np.asarray(getattr(im, "data", im), dtype=dn.DTYPE) for im in clean_images]
    if not images:
        raise ValueError("calibrate_tau: need at least one clean image")
    losses = []
    with dn.no_grad():
        for im in images:
            x = Tensor(im[None] if im.ndim == 3 else im)
            losses.append(ddim_metric_loss(x, bundle.codec.encode(x), bundle, t_hat, strided).item())
    return float(np.mean(np.asarray(losses, dtype=np.float64)))


def purify(x: Tensor, bundle: ModelBundle, cfg: PurifyConfig):
    """Return ``(x_purified, trace)`` for one (1, C, H, W) image."""
    cfg.validate(bundle)
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise dn.ShapeError(f"purify expects one image of shape (1, C, H, W), got {x.shape}")
    start = time.perf_counter()
    trace = PurifyTrace()
    x = Tensor(x.data)
    with dn.no_grad():
        z0 = bundle.codec.encode(x).data
    if cfg.max_epochs == 0:
        trace.termination = MAX_EPOCHS
        trace.wall_time_ms = (time.perf_counter() - start) * 1e3
        return _decode(bundle, z0), trace

    z = Tensor(z0, requires_grad=True)
    state = dn.OptState()
    best_loss, best_z = np.inf, z0
    for epoch in range(cfg.max_epochs):
        try:
            loss = ddim_metric_loss(x, z, bundle, cfg.t_hat, cfg.strided)
        except dn.NonFiniteError as exc:
            trace.termination = FAILED
            trace.error = f"epoch {epoch}: {exc}"
            log.warning("purify aborted: %s", trace.error)
            break
        val = loss.item()
        trace.loss_curve.append(val)
        if val < best_loss:
            best_loss, best_z, trace.best_epoch = val, z.data.copy(), len(trace.loss_curve) - 1
        if cfg.gate and val <= cfg.tau:
            trace.termination = ALREADY_CLEAN if epoch == 0 else THRESHOLD_MET
            best_z, trace.best_epoch = z.data, len(trace.loss_curve) - 1
            break
        loss.backward()
        try:
            dn.adam_step([z], cfg.lr, state)
        except dn.NonFiniteError as exc:
            trace.termination = FAILED
            trace.error = f"epoch {epoch}: {exc}"
            break
        trace.epochs_run += 1
    else:
        # out of epochs: score the final iterate too, then keep the best one
        with dn.no_grad():
            val = ddim_metric_loss(x, Tensor(z.data), bundle, cfg.t_hat, cfg.strided).item()
        trace.loss_curve.append(val)
        if val < best_loss:
            best_z, trace.best_epoch = z.data.copy(), len(trace.loss_curve) - 1
        if cfg.gate and val <= cfg.tau:
            trace.termination = THRESHOLD_MET
            best_z, trace.best_epoch = z.data.copy(), len(trace.loss_curve) - 1
        else:
            trace.termination = MAX_EPOCHS

    out = _decode(bundle, best_z)
    trace.wall_time_ms = (time.perf_counter() - start) * 1e3
    return out, trace


@dataclass
class BatchResult:
    images: list
    traces: list
    wall_time_ms: float
    failed: list


def purify_batch(images, bundle: ModelBundle, cfg: PurifyConfig, workers: int = 1) -> BatchResult:
    """Purify each image independently; a failure marks that image and moves on."""
    arrs = [np.asarray(getattr(im, "data", im), dtype=dn.DTYPE) for im in images]
    if not arrs:
        raise ValueError("purify_batch: empty image set")
    cfg.validate(bundle)
    start = time.perf_counter()

    def one(im):
        x = Tensor(im[None] if im.ndim == 3 else im)
        try:
            return purify(x, bundle, cfg)
        except Exception as exc:  # noqa: BLE001 - recorded per image, batch continues
            log.warning("purify failed: %s", exc)
            return Tensor(x.data), PurifyTrace(termination=FAILED, error=str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, arrs))
    else:
        results = [one(a) for a in arrs]
    outs = [r[0].data[0] for r in results]
    traces = [r[1] for r in results]
    failed = [i for i, t in enumerate(traces) if t.termination == FAILED]
    return BatchResult(outs, traces, (time.perf_counter() - start) * 1e3, failed)
