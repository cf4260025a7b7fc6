"""Checkpoint files, PGM/PPM images and bundle directories.

Checkpoint layout (all integers little-endian)::

    offset  size        field
    0       8           magic b"UDAPCKPT"
    8       4           version (u32)
    12      4           entry count (u32)
    ...                 entries, each:
                          u32 name length, UTF-8 name bytes,
                          u32 ndim, ndim x u64 dims,
                          prod(dims) x f32 payload
    end-4   4           CRC32 of every preceding byte (u32)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"UDAPCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CRCMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ImageFormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(entries: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint: bad magic")
    if len(blob) < 20:
        raise TruncatedCheckpointError(f"checkpoint truncated at {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", body, 8)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads version {VERSION}; migrate the file")
    entries = {}
    off = 16
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, off)
            off += 4
            if off + nlen > len(body):
                raise struct.error("name runs past end")
            name = body[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            nbytes = int(np.prod(dims, dtype=np.int64)) * 4
            if off + nbytes > len(body):
                raise struct.error("payload runs past end")
            entries[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).astype(np.float32)
            off += nbytes
    except struct.error as exc:
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CRCMismatchError("checkpoint CRC mismatch (file truncated or corrupted)") from exc
        raise TruncatedCheckpointError(f"checkpoint truncated: {exc}") from exc
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CRCMismatchError("checkpoint CRC mismatch")
    if off != len(body):
        raise TruncatedCheckpointError(f"{len(body) - off} trailing bytes before CRC")
    return entries


def save_checkpoint(entries: dict[str, np.ndarray], path) -> None:
    atomic_write(path, encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- PGM / PPM


def _header_tokens(data: bytes):
    """Yield (token, end_offset) for the four header fields, skipping comments."""
    pos, n = 0, len(data)
    for _ in range(4):
        while pos < n:
            if data[pos : pos + 1] == b"#":
                while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif data[pos : pos + 1].isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: unexpected end of data")
        yield data[start:pos], pos


def decode_image(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into a (C, H, W) float32 array in [0, 1]."""
    toks = list(_header_tokens(data))
    magic = toks[0][0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        w, h, maxval = (int(t[0]) for t in toks[1:])
    except ValueError as exc:
        raise ImageFormatError(f"malformed header: {exc}") from None
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval} unsupported; only 8-bit (255) images are read")
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    off = toks[3][1]
    if off >= len(data) or not data[off : off + 1].isspace():
        raise ImageFormatError("malformed header: missing whitespace after maxval")
    off += 1
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    pix = data[off:]
    if len(pix) != need:
        raise ImageFormatError(f"expected {need} pixel bytes, found {len(pix)}")
    arr = np.frombuffer(pix, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def encode_image(img) -> bytes:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float32)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected (1|3, H, W) image, got shape {arr.shape}")
    c, h, w = arr.shape
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def write_image(img, path) -> None:
    atomic_write(path, encode_image(img))


def image_suffix(img) -> str:
    arr = np.asarray(getattr(img, "data", img))
    return ".pgm" if (arr.shape[-3] if arr.ndim >= 3 else 1) == 1 else ".ppm"


def read_image_dir(directory) -> tuple[list[str], np.ndarray]:
    """All .pgm/.ppm files in a directory, sorted by name, as (ids, (N, C, H, W))."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"missing image directory: {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not paths:
        raise ValueError(f"no .pgm/.ppm images in {d}")
    imgs = [read_image(p) for p in paths]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ImageFormatError(f"mixed image shapes in {d}: {sorted(shapes)}")
    return [p.stem for p in paths], np.stack(imgs)


def write_image_dir(directory, ids, images) -> None:
    for image_id, im in zip(ids, images):
        write_image(im, Path(directory) / f"{image_id}{image_suffix(im)}")


# ---------------------------------------------------------------- bundles


def save_bundle(bundle, directory) -> Path:
    """Write codec.ckpt, denoiser.ckpt and bundle.json under ``directory``."""
    from .models import ConstantDenoiser

    d = Path(directory)
    codec, den = bundle.codec, bundle.denoiser
    meta = {
        "metadata": bundle.metadata,
        "schedule": {
            "T": bundle.schedule.T,
            "beta": [float(b) for b in bundle.schedule.beta],
            "alpha_bar": [float(a) for a in bundle.schedule.alpha_bar],
        },
        "codec": {
            "image_shape": list(codec.image_shape),
            "latent_channels": codec.latent_shape[0],
            "hidden": codec.hidden,
            "identity": codec.identity,
            "latent_scale": codec.latent_scale,
            "heldout_mse": codec.heldout_mse,
            "trained_epochs": codec.trained_epochs,
        },
    }
    if isinstance(den, ConstantDenoiser):
        meta["denoiser"] = {"constant": den.value, "latent_shape": list(den.latent_shape), "T": den.T}
    else:
        meta["denoiser"] = {
            "latent_shape": list(den.latent_shape),
            "channels": list(den.channels),
            "emb_dim": den.emb_dim,
            "T": den.T,
            "trained_steps": den.trained_steps,
            "val_loss": den.val_loss,
        }
        save_checkpoint(den.state_dict(), d / "denoiser.ckpt")
    save_checkpoint(codec.state_dict(), d / "codec.ckpt")
    atomic_write(d / "bundle.json", json.dumps(meta, indent=2, sort_keys=True).encode())
    return d


def load_bundle(directory):
    from .models import AutoEncoder, ConstantDenoiser, Denoiser, ModelBundle, NoiseSchedule

    d = Path(directory)
    meta_path = d / "bundle.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing bundle dependency: {meta_path}")
    meta = json.loads(meta_path.read_text())
    needed = [d / "codec.ckpt"] + ([] if "constant" in meta["denoiser"] else [d / "denoiser.ckpt"])
    for p in needed:
        if not p.exists():
            raise FileNotFoundError(f"missing bundle dependency: {p}")
    sc = meta["schedule"]
    # float64 values survive the JSON round trip exactly
    schedule = NoiseSchedule(sc["T"], np.asarray(sc["beta"], np.float64), np.asarray(sc["alpha_bar"], np.float64))
    cm = meta["codec"]
    codec = AutoEncoder(cm["image_shape"], cm["latent_channels"], cm["hidden"], identity=cm["identity"])
    codec.load_state_dict(load_checkpoint(d / "codec.ckpt"))
    codec.latent_scale = cm["latent_scale"]
    codec.heldout_mse = cm["heldout_mse"]
    codec.trained_epochs = cm["trained_epochs"]
    codec.freeze()
    dm = meta["denoiser"]
    if "constant" in dm:
        den = ConstantDenoiser(dm["latent_shape"], dm["constant"], dm["T"])
    else:
        den = Denoiser(dm["latent_shape"], tuple(dm["channels"]), dm["emb_dim"], dm["T"])
        den.load_state_dict(load_checkpoint(d / "denoiser.ckpt"))
        den.trained_steps = dm["trained_steps"]
        den.val_loss = dm["val_loss"]
        den.freeze()
    return ModelBundle(schedule, codec, den, meta["metadata"])
