"""Procedural 32x32 image corpus driven by a SplitMix64 stream.

Only integer arithmetic feeds the generator state, so the same
(n, seed, kind) produces the same images on every platform.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
KINDS = ("shapes", "gradients", "mixed")
SIZE = 32


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # top 53 bits -> exact double in [0, 1)
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi)."""
        return lo + self.next_u64() % (hi - lo)


_yy, _xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64) / (SIZE - 1)


def _background(rng: SplitMix64, kind: str) -> np.ndarray:
    a = rng.uniform(0.25, 0.75)
    span = rng.uniform(0.15, 0.4)
    ang = rng.uniform(-0.6, 0.6)
    if kind == "gradients":
        # mostly horizontal so every row varies
        d = np.cos(ang) * _xx + np.sin(ang) * _yy
    else:
        d = np.cos(ang * 4) * _xx + np.sin(ang * 4) * _yy
    d = (d - d.min()) / max(d.max() - d.min(), 1e-12)
    lo = a - span / 2
    return lo + span * d


def _shapes(img: np.ndarray, rng: SplitMix64, count: int) -> None:
    for _ in range(count):
        cx, cy = rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)
        rx, ry = rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3)
        val = rng.uniform(0.05, 0.95)
        if rng.randint(0, 2):
            mask = ((_xx - cx) / rx) ** 2 + ((_yy - cy) / ry) ** 2 <= 1.0
        else:
            mask = (np.abs(_xx - cx) <= rx) & (np.abs(_yy - cy) <= ry)
        img[mask] = val


def gen_image(rng: SplitMix64, kind: str) -> np.ndarray:
    if kind == "mixed":
        kind = ("shapes", "gradients")[rng.randint(0, 2)]
    img = _background(rng, kind)
    if kind == "shapes":
        _shapes(img, rng, rng.randint(1, 4))
    elif rng.randint(0, 2):
        _shapes(img, rng, 1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def generate(n: int, seed: int, kind: str = "mixed") -> np.ndarray:
    """``n`` grayscale images as an (n, 1, 32, 32) float32 array in [0, 1]."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    rng = SplitMix64(seed)
    return np.stack([gen_image(rng, kind) for _ in range(n)])
