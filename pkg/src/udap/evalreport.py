"""Image sets, reconstruction-gap and image metrics, and report files.

Report layout under an output directory::

    metrics.csv        image_id,label,metric,value   (long format)
    traces/<id>.csv    epoch,loss                    (one row per evaluated epoch)
    attacks/<id>.csv   step,objective,delta_linf
    summary.json       aggregates, per-image trace summaries, config and bundle echo

Floats are written with ``repr`` so every file round-trips exactly through
the loaders below. Non-finite values appear as ``inf``/``nan`` in CSV and as
the strings ``"inf"``/``"nan"`` in JSON.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus
from .ddim import recon_error
from .diffnum import Tensor
from .storage import atomic_write

PSNR_IDENTICAL = math.inf
METRIC_FIELDS = ("image_id", "label", "metric", "value")


@dataclass
class ImageSet:
    images: np.ndarray
    labels: list = field(default_factory=list)
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.size == 0:
            self.images = self.images.reshape((0,) + self.images.shape[1:]) if self.images.ndim == 4 else np.zeros((0, 1, 1, 1), np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"ImageSet expects (N, C, H, W), got {self.images.shape}")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("ImageSet images must lie in [0, 1]")
        if not self.labels:
            self.labels = ["clean"] * len(self.images)
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def subset(self, idx) -> "ImageSet":
        idx = list(idx)
        return ImageSet(self.images[idx], [self.labels[i] for i in idx], dict(self.source))


def gen_procedural_corpus(n: int, seed: int, kind: str = "mixed") -> ImageSet:
    imgs = corpus.generate(n, seed, kind)
    return ImageSet(imgs, ["clean"] * n, {"generator": "splitmix64-procedural", "n": n, "seed": seed, "kind": kind})


# ---------------------------------------------------------------- metrics


@dataclass
class GapReport:
    errors: list
    labels: list
    group_median: dict
    group_mean: dict
    gap_ratio: float | None

    def rows(self):
        return [(f"{i:04d}", lab, "recon_l2", err) for i, (lab, err) in enumerate(zip(self.labels, self.errors))]


def recon_gap(clean, adversarial, bundle, t_hat: int, csv_path=None, strided: bool = False) -> GapReport:
    """Per-image DDIM reconstruction error for both groups and the ratio of medians."""
    clean = clean if isinstance(clean, ImageSet) else ImageSet(clean)
    adversarial = adversarial if isinstance(adversarial, ImageSet) else ImageSet(adversarial, ["adversarial"] * len(adversarial))
    if not len(clean) or not len(adversarial):
        raise ValueError("recon_gap needs non-empty clean and adversarial sets")
    for s in (clean, adversarial):
        if s.images.shape[1:] != tuple(bundle.codec.image_shape):
            raise ValueError(f"image shape {s.images.shape[1:]} does not match bundle {bundle.codec.image_shape}")
    errors, labels = [], []
    for group, s in (("clean", clean), ("adversarial", adversarial)):
        for im in s.images:
            errors.append(recon_error(Tensor(im[None]), bundle, t_hat, strided))
            labels.append(group)
    errs = np.asarray(errors, dtype=np.float64)
    lab = np.asarray(labels)
    med = {g: float(np.median(errs[lab == g])) for g in ("clean", "adversarial")}
    mean = {g: float(np.mean(errs[lab == g])) for g in ("clean", "adversarial")}
    ratio = med["adversarial"] / med["clean"] if med["clean"] > 0 else None
    report = GapReport(errors, labels, med, mean, ratio)
    if csv_path is not None:
        write_metrics(csv_path, report.rows())
    return report


def psnr(mse_value: float) -> float:
    return PSNR_IDENTICAL if mse_value == 0 else 10.0 * math.log10(1.0 / mse_value)


def image_metrics(a, b) -> list[dict]:
    a = np.asarray(getattr(a, "images", a), dtype=np.float64)
    b = np.asarray(getattr(b, "images", b), dtype=np.float64)
    if len(a) != len(b):
        raise ValueError(f"image_metrics: {len(a)} vs {len(b)} images")
    if a.shape != b.shape:
        raise ValueError(f"image_metrics: shape mismatch {a.shape} vs {b.shape}")
    out = []
    for x, y in zip(a, b):
        m = float(np.mean((x - y) ** 2))
        out.append({"mse": m, "psnr": psnr(m)})
    return out


# ---------------------------------------------------------------- files


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode()


def write_metrics(path, rows) -> None:
    atomic_write(path, _csv_bytes(METRIC_FIELDS, rows))


def load_metrics(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(i, lab, m, float(v)) for i, lab, m, v in r]


def write_trace(path, trace) -> None:
    atomic_write(path, _csv_bytes(("epoch", "loss"), enumerate(trace.loss_curve)))


def load_trace(path) -> list[float]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [float(v) for _, v in r]


def write_attack(path, report) -> None:
    atomic_write(path, _csv_bytes(("step", "objective", "delta_linf"), report.rows()))


def load_attack(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(int(s), float(o), float(d)) for s, o, d in r]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


def aggregate(rows) -> dict:
    """{label: {metric: {count, mean, median, min, max}}} from long-format rows."""
    groups: dict = {}
    for _, label, metric, value in rows:
        groups.setdefault(label, {}).setdefault(metric, []).append(float(value))
    out = {}
    for label in sorted(groups):
        out[label] = {}
        for metric in sorted(groups[label]):
            v = np.asarray(groups[label][metric], dtype=np.float64)
            out[label][metric] = {
                "count": int(v.size),
                "mean": float(np.mean(v)),
                "median": float(np.median(v)),
                "min": float(np.min(v)),
                "max": float(np.max(v)),
            }
    return out


def write_json(path, doc) -> None:
    atomic_write(path, (json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n").encode())


def load_summary(path) -> dict:
    return _unjson(json.loads(Path(path).read_text()))


def emit_report(out_dir, rows=(), traces=None, attack_reports=None, extra=None) -> Path:
    """Write metrics.csv, per-image trace/attack CSVs and summary.json under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    rows = list(rows)
    write_metrics(out / "metrics.csv", rows)
    traces = dict(traces or {})
    for image_id, tr in traces.items():
        write_trace(out / "traces" / f"{image_id}.csv", tr)
    for image_id, rep in dict(attack_reports or {}).items():
        write_attack(out / "attacks" / f"{image_id}.csv", rep)
    summary = {
        "aggregates": aggregate(rows),
        "n_rows": len(rows),
        "traces": {k: t.summary() for k, t in traces.items()},
    }
    summary.update(extra or {})
    write_json(out / "summary.json", summary)
    return out
