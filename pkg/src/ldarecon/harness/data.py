"""Synthetic images, PGM (P5) I/O and file-glob ingestion.

Intensities live in ``[0, 1]``. PGM files are written with maxval 255 or
65535 (big-endian samples, as the format requires) and read back scaled
by ``1 / maxval``.
"""
import glob as _glob
from pathlib import Path

import numpy as np

from ldarecon.errors import InvalidData, LdaError


class DataIOError(LdaError):
    exit_code = 4


def piecewise_constant(shape, rng, n_shapes=4):
    """Random rectangles and discs over a random background."""
    h, w = shape
    img = np.full(shape, rng.uniform(0.1, 0.9))
    ii, jj = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        level = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            i0, i1 = np.sort(rng.integers(0, h + 1, size=2))
            j0, j1 = np.sort(rng.integers(0, w + 1, size=2))
            img[i0:i1 + 1, j0:j1 + 1] = level
        else:
            ci, cj = rng.uniform(0, h), rng.uniform(0, w)
            rad = rng.uniform(0.15, 0.4) * min(h, w)
            img[(ii - ci) ** 2 + (jj - cj) ** 2 <= rad * rad] = level
    return img


def smooth_bumps(shape, rng, n_bumps=3):
    """Sum of Gaussian bumps, rescaled to ``[0, 1]``."""
    h, w = shape
    ii, jj = np.mgrid[0:h, 0:w]
    img = np.zeros(shape)
    for _ in range(n_bumps):
        ci, cj = rng.uniform(0, h), rng.uniform(0, w)
        width = rng.uniform(0.1, 0.35) * min(h, w)
        img += rng.uniform(0.3, 1.0) * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * width ** 2))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def synthetic_images(count, shape, rng, kind="mixed"):
    """``count`` images; ``kind`` is ``piecewise``, ``bumps`` or ``mixed`` (alternating)."""
    makers = {"piecewise": [piecewise_constant], "bumps": [smooth_bumps],
              "mixed": [piecewise_constant, smooth_bumps]}
    if kind not in makers:
        raise InvalidData(f"unknown synthetic kind {kind!r}")
    seq = makers[kind]
    return np.stack([seq[i % len(seq)](shape, rng) for i in range(count)])


def write_pgm(path, img, maxval=255):
    """Write ``img`` (values in ``[0, 1]``, clipped) as binary PGM."""
    if maxval not in (255, 65535):
        raise InvalidData("maxval must be 255 or 65535")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidData("PGM images must be 2-D")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(header + data)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                pos = buf.index(b"\n", pos)
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm(path):
    """Read a binary PGM (P5) file; returns floats in ``[0, 1]``."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    try:
        (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise InvalidData(f"{path}: malformed PGM header") from exc
    if magic != b"P5" or not 0 < maxval < 65536:
        raise InvalidData(f"{path}: not a binary PGM")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos) \
        if len(buf) - pos >= count * np.dtype(dtype).itemsize else None
    if raw is None:
        raise InvalidData(f"{path}: truncated pixel data")
    return raw.reshape(h, w).astype(np.float64) / maxval


def load_glob(pattern, shape=None):
    """Read every PGM matching ``pattern`` (sorted); optionally center-crop to ``shape``."""
    paths = sorted(_glob.glob(str(pattern)))
    if not paths:
        raise DataIOError(f"no files match {pattern}")
    imgs = []
    for p in paths:
        img = read_pgm(p)
        if shape is not None:
            img = center_crop(img, shape, p)
        imgs.append(img)
    return np.stack(imgs) if shape is not None else imgs


def center_crop(img, shape, name="image"):
    h, w = shape
    if img.shape[0] < h or img.shape[1] < w:
        raise InvalidData(f"{name}: {img.shape} is smaller than {tuple(shape)}")
    i0 = (img.shape[0] - h) // 2
    j0 = (img.shape[1] - w) // 2
    return img[i0:i0 + h, j0:j0 + w]
