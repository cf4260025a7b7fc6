"""Noise schedule, toy autoencoder, noise predictor and their training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor

log = logging.getLogger(__name__)

DEFAULT_T = 20
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1 or self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ValueError(f"schedule arrays must have length T={self.T}")


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    allow_zero: bool = False,
    train_steps: int | None = None,
) -> NoiseSchedule:
    """Linearly spaced betas (endpoints included) and their cumulative products.

    With ``train_steps`` the betas span a longer training chain whose
    cumulative products are subsampled every ``train_steps // T`` steps, the
    way few-step samplers sit on top of a 1000-step model. ``allow_zero``
    admits the degenerate all-zero schedule used in tests.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    lo = 0.0 if allow_zero else np.nextafter(0.0, 1.0)
    if not (lo <= beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    n = T if train_steps is None else train_steps
    if n < T:
        raise ValueError(f"train_steps={n} must be >= T={T}")
    beta = np.linspace(beta_start, beta_end, n, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    if n == T:
        return NoiseSchedule(T, beta, alpha_bar)
    return schedule_from_alpha_bar(alpha_bar[(np.arange(T) + 1) * (n // T) - 1])


def schedule_from_alpha_bar(alpha_bar) -> NoiseSchedule:
    """Build a schedule from explicit cumulative products (non-increasing, in (0, 1])."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if ab.ndim != 1 or ab.size == 0 or np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) > 0):
        raise ValueError("alpha_bar must be a non-empty, non-increasing sequence in (0, 1]")
    prev = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(ab.size, 1.0 - ab / prev, ab)


def perturb_forward(z0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Closed-form forward diffusion sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T})")
    ab = float(schedule.alpha_bar[t])
    return dn.add(dn.scale(z0, np.sqrt(ab)), dn.scale(eps, np.sqrt(1.0 - ab)))


# ---------------------------------------------------------------- parameters


def _he_conv(rng, cout, cin, k):
    std = np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class ParamModule:
    """Ordered name -> Tensor parameter store shared by the networks below."""

    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise dn.ShapeError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=dn.DTYPE)

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True


# ---------------------------------------------------------------- autoencoder


class AutoEncoder(ParamModule):
    """Two stride-2 conv layers down (4x spatial), two upsample+conv layers back.

    Latents are divided by ``latent_scale`` (fit after training) so that the
    diffusion model sees roughly unit-variance inputs.
    """

    def __init__(self, image_shape=(1, 32, 32), latent_channels: int = 4, hidden: int = 32,
                 seed: int = 0, identity: bool = False):
        self.image_shape = tuple(image_shape)
        self.identity = identity
        self.hidden = hidden
        self.latent_scale = 1.0
        self.heldout_mse = float("nan")
        self.trained_epochs = 0
        c, h, w = self.image_shape
        if identity:
            self.latent_shape = self.image_shape
            self.params = {}
            return
        if h % 4 or w % 4:
            raise ValueError(f"image size {h}x{w} must be divisible by 4")
        self.latent_shape = (latent_channels, h // 4, w // 4)
        rng = np.random.default_rng(seed)
        self.params = {
            "enc1.w": _he_conv(rng, hidden, c, 3),
            "enc1.b": _zeros(hidden),
            "enc2.w": _he_conv(rng, latent_channels, hidden, 3),
            "enc2.b": _zeros(latent_channels),
            "dec1.w": _he_conv(rng, hidden, latent_channels, 3),
            "dec1.b": _zeros(hidden),
            "dec2.w": _he_conv(rng, c, hidden, 3),
            "dec2.b": _zeros(c),
        }

    def _check(self, x: Tensor, expected, what):
        if x.data.ndim != 4 or x.shape[1:] != tuple(expected):
            raise dn.ShapeError(f"{what}: expected (N, {', '.join(map(str, expected))}), got {x.shape}")

    def encode(self, x: Tensor) -> Tensor:
        self._check(x, self.image_shape, "encode")
        if self.identity:
            return x
        p = self.params
        h = dn.relu(dn.conv2d(x, p["enc1.w"], p["enc1.b"], stride=2, padding=1))
        z = dn.conv2d(h, p["enc2.w"], p["enc2.b"], stride=2, padding=1)
        return dn.scale(z, 1.0 / self.latent_scale) if self.latent_scale != 1.0 else z

    def decode(self, z: Tensor) -> Tensor:
        self._check(z, self.latent_shape, "decode")
        if self.identity:
            return z
        p = self.params
        if self.latent_scale != 1.0:
            z = dn.scale(z, self.latent_scale)
        h = dn.relu(dn.conv2d(dn.upsample2x(z), p["dec1.w"], p["dec1.b"], padding=1))
        return dn.sigmoid(dn.conv2d(dn.upsample2x(h), p["dec2.w"], p["dec2.b"], padding=1))

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _split(n: int, holdout: float, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(n)
    n_val = int(round(n * holdout)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1) if n > 1 else 0
    return np.sort(idx[n_val:]), np.sort(idx[:n_val])


def _stack(images) -> np.ndarray:
    images = getattr(images, "images", images)
    if isinstance(images, np.ndarray):
        return images.astype(dn.DTYPE, copy=False)
    items = [np.asarray(getattr(im, "data", im), dtype=dn.DTYPE) for im in images]
    return np.stack(items) if items else np.zeros((0,), dn.DTYPE)


def codec_mse(codec: AutoEncoder, images: np.ndarray, batch_size: int = 128) -> float:
    if len(images) == 0:
        return float("nan")
    total = 0.0
    with dn.no_grad():
        for i in range(0, len(images), batch_size):
            xb = Tensor(images[i : i + batch_size])
            total += float(np.sum((codec(xb).data - xb.data) ** 2, dtype=np.float64))
    return total / images.size


def train_autoencoder(
    dataset,
    epochs: int,
    seed: int,
    *,
    identity: bool = False,
    latent_channels: int = 4,
    hidden: int = 32,
    batch_size: int = 32,
    lr: float = 2e-3,
    holdout: float = 0.1,
) -> AutoEncoder:
    """Fit the codec by plain reconstruction MSE; held-out MSE lands in ``heldout_mse``."""
    images = _stack(dataset)
    if len(images) == 0:
        raise ValueError("train_autoencoder: empty dataset")
    rng = np.random.default_rng(seed)
    codec = AutoEncoder(images.shape[1:], latent_channels, hidden, seed=seed, identity=identity)
    train_idx, val_idx = _split(len(images), holdout, rng)
    if identity:
        codec.heldout_mse = 0.0
        return codec
    opt = dn.Adam(codec.parameters(), lr=lr)
    for epoch in range(epochs):
        running = 0.0
        for bi in _batches(len(train_idx), batch_size, rng):
            xb = Tensor(images[train_idx[bi]])
            loss = dn.mse(codec(xb), xb)
            loss.backward()
            opt.step()
            running += loss.item() * len(bi)
        if epoch % 20 == 0 or epoch == epochs - 1:
            log.info("autoencoder epoch %d train mse %.5f", epoch, running / len(train_idx))
    codec.trained_epochs = epochs
    val = images[val_idx] if len(val_idx) else images[train_idx]
    codec.heldout_mse = codec_mse(codec, val)
    codec.latent_scale = _fit_latent_scale(codec, images[train_idx])
    codec.freeze()
    return codec


def _fit_latent_scale(codec: AutoEncoder, images: np.ndarray) -> float:
    with dn.no_grad():
        z = codec.encode(Tensor(images[:256])).data
    return float(max(np.std(z, dtype=np.float64), 1e-6))


# ---------------------------------------------------------------- denoiser


class Denoiser(ParamModule):
    """Conv residual noise predictor: stem, three residual blocks (16, 32, 16), head.

    Each block adds a projected sinusoidal timestep embedding after its first conv.
    """

    def __init__(self, latent_shape=(4, 8, 8), channels=(16, 32, 16), emb_dim: int = 32,
                 T: int = DEFAULT_T, seed: int = 0):
        self.latent_shape = tuple(latent_shape)
        self.channels = tuple(channels)
        self.emb_dim = emb_dim
        self.T = T
        self.trained_steps = 0
        self.val_loss = float("nan")
        rng = np.random.default_rng(seed)
        c_lat = self.latent_shape[0]
        p = {"stem.w": _he_conv(rng, channels[0], c_lat, 3), "stem.b": _zeros(channels[0])}
        cin = channels[0]
        for i, cout in enumerate(channels):
            p[f"b{i}.emb.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / emb_dim), (emb_dim, cout)), requires_grad=True)
            p[f"b{i}.emb.b"] = _zeros(cout)
            p[f"b{i}.c1.w"] = _he_conv(rng, cout, cin, 3)
            p[f"b{i}.c1.b"] = _zeros(cout)
            p[f"b{i}.c2.w"] = _he_conv(rng, cout, cout, 3)
            p[f"b{i}.c2.b"] = _zeros(cout)
            if cin != cout:
                p[f"b{i}.skip.w"] = _he_conv(rng, cout, cin, 1)
            cin = cout
        head = rng.normal(0.0, 0.1 * np.sqrt(1.0 / (cin * 9)), (c_lat, cin, 3, 3))
        p["head.w"] = Tensor(head, requires_grad=True)
        p["head.b"] = _zeros(c_lat)
        self.params = p

    def __call__(self, z: Tensor, t) -> Tensor:
        if z.data.ndim != 4 or z.shape[1:] != self.latent_shape:
            raise dn.ShapeError(f"denoiser: expected (N, {self.latent_shape}), got {z.shape}")
        n = z.shape[0]
        # spread schedule indices over a 0..1000 range like large-T models see
        t = np.broadcast_to(np.asarray(t, dtype=dn.DTYPE) * (1000.0 / self.T), (n,))
        p = self.params
        emb = dn.sin_embed(Tensor(t), self.emb_dim)
        h = dn.conv2d(z, p["stem.w"], p["stem.b"], padding=1)
        for i in range(len(self.channels)):
            e = dn.bias_add(dn.matmul(emb, p[f"b{i}.emb.w"]), p[f"b{i}.emb.b"])
            r = dn.conv2d(dn.relu(h), p[f"b{i}.c1.w"], p[f"b{i}.c1.b"], padding=1)
            r = dn.conv2d(dn.relu(dn.channel_add(r, e)), p[f"b{i}.c2.w"], p[f"b{i}.c2.b"], padding=1)
            skip = dn.conv2d(h, p[f"b{i}.skip.w"]) if f"b{i}.skip.w" in p else h
            h = dn.add(skip, r)
        return dn.conv2d(dn.relu(h), p["head.w"], p["head.b"], padding=1)


class ConstantDenoiser:
    """Predicts the same noise for every latent; ``value=0`` is the null predictor."""

    trained_steps = 0

    def __init__(self, latent_shape, value: float = 0.0, T: int = DEFAULT_T):
        self.latent_shape = tuple(latent_shape)
        self.value = value
        self.T = T

    def __call__(self, z: Tensor, t) -> Tensor:
        if z.shape[1:] != self.latent_shape:
            raise dn.ShapeError(f"denoiser: expected (N, {self.latent_shape}), got {z.shape}")
        return Tensor(np.full(z.shape, self.value))

    def parameters(self):
        return []


def null_denoiser(latent_shape, T: int = DEFAULT_T) -> ConstantDenoiser:
    return ConstantDenoiser(latent_shape, 0.0, T)


def _noise_batch(z0: np.ndarray, schedule: NoiseSchedule, rng, t_range=None):
    n = len(z0)
    hi = schedule.T if t_range is None else t_range
    t = rng.integers(0, hi, n)
    eps = rng.standard_normal(z0.shape).astype(dn.DTYPE)
    ab = schedule.alpha_bar[t].astype(dn.DTYPE)[:, None, None, None]
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return zt.astype(dn.DTYPE), t, eps


def denoiser_loss(denoiser, latents: np.ndarray, schedule: NoiseSchedule, seed: int, repeats: int = 4) -> float:
    """Mean noise-prediction MSE over a fixed, seed-determined draw of (t, eps)."""
    rng = np.random.default_rng(seed)
    vals = []
    with dn.no_grad():
        for _ in range(repeats):
            for i in range(0, len(latents), 128):
                zt, t, eps = _noise_batch(latents[i : i + 128], schedule, rng)
                vals.append(float(np.mean((denoiser(Tensor(zt), t).data - eps) ** 2, dtype=np.float64)) * len(zt))
    return sum(vals) / (repeats * len(latents))


def encode_all(codec: AutoEncoder, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with dn.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(codec.encode(Tensor(images[i : i + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0,) + codec.latent_shape, dn.DTYPE)


def train_denoiser(
    codec: AutoEncoder,
    schedule: NoiseSchedule,
    dataset,
    steps: int,
    seed: int,
    *,
    batch_size: int = 64,
    lr: float = 2e-3,
    holdout: float = 0.1,
    channels=(16, 32, 16),
    latents: np.ndarray | None = None,
    fixed_noise: bool = False,
) -> Denoiser:
    """DDPM epsilon-prediction training on encoded latents with t ~ U{0..T-1}.

    ``latents`` bypasses the codec; its trailing shape must still match the
    codec's latent shape. ``fixed_noise`` draws one (t, eps) batch and reuses
    it every step, turning training into a memorization check.
    """
    rng = np.random.default_rng(seed)
    if latents is None:
        images = _stack(dataset)
        if len(images) == 0:
            raise ValueError("train_denoiser: empty dataset")
        latents = encode_all(codec, images)
    latents = np.asarray(latents, dtype=dn.DTYPE)
    if latents.shape[1:] != tuple(codec.latent_shape):
        raise dn.ShapeError(f"latent shape {latents.shape[1:]} does not match codec {codec.latent_shape}")
    den = Denoiser(codec.latent_shape, channels=channels, T=schedule.T, seed=seed)
    train_idx, val_idx = _split(len(latents), holdout, rng)
    val = latents[val_idx] if len(val_idx) else latents[train_idx]
    train = latents[train_idx]
    opt = dn.Adam(den.parameters(), lr=lr)
    den.train_loss = float("nan")
    fixed = _noise_batch(train[: min(batch_size, len(train))], schedule, rng) if fixed_noise else None
    for step in range(steps):
        if fixed is None:
            bi = rng.integers(0, len(train), min(batch_size, len(train)))
            zt, t, eps = _noise_batch(train[bi], schedule, rng)
        else:
            zt, t, eps = fixed
        loss = dn.mse(den(Tensor(zt), t), Tensor(eps))
        loss.backward()
        # cosine decay to 10% of the base rate
        opt.lr = lr * (0.55 + 0.45 * np.cos(np.pi * step / max(steps, 1)))
        opt.step()
        den.train_loss = loss.item()
        if step % 500 == 0:
            log.info("denoiser step %d loss %.5f", step, den.train_loss)
    den.trained_steps = steps
    den.val_loss = denoiser_loss(den, val, schedule, seed + 1)
    den.freeze()
    return den


@dataclass
class ModelBundle:
    schedule: NoiseSchedule
    codec: AutoEncoder
    denoiser: object
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if getattr(self.denoiser, "T", self.schedule.T) != self.schedule.T:
            raise ValueError(f"denoiser trained for T={self.denoiser.T}, schedule has T={self.schedule.T}")
        if tuple(self.denoiser.latent_shape) != tuple(self.codec.latent_shape):
            raise dn.ShapeError(
                f"denoiser latent {self.denoiser.latent_shape} does not match codec {self.codec.latent_shape}"
            )
