"""Synthetic image generation and minimal image IO (PNG via Pillow, raw PPM).

The synthetic set mixes texture complexities (smooth gradients, Gaussian
blobs, band-limited noise) so content-dependent bit selection has signal to
learn. Generation is fully seeded and deterministic.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("gradients", "gaussian-blobs", "band-limited-noise")


class DataError(RuntimeError):
    """Dataset unavailable, unreadable, or empty."""


def _gradient_image(rng: np.random.Generator, size: int) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        lo = rng.uniform(0.32, 0.42)
        hi = rng.uniform(0.58, 0.68)
        img[c] = lo + ramp * (hi - lo)
    return img


def _blob_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(size / 12, size / 4)
        amp = rng.uniform(0.4, 1.0)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    field = (field - field.min()) / max(field.max() - field.min(), 1e-9)
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        tint = rng.uniform(0.7, 1.0)
        img[c] = 0.08 + 0.84 * tint * field
    return np.clip(img, 0.0, 1.0)


def _band_limited_noise_image(rng: np.random.Generator, size: int) -> np.ndarray:
    cutoff = max(size // 6, 2)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    mask = (np.sqrt(fy * fy + fx * fx) <= cutoff / size)
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        spectrum = np.fft.fft2(rng.standard_normal((size, size)))
        field = np.real(np.fft.ifft2(spectrum * mask))
        field = (field - field.min()) / max(field.max() - field.min(), 1e-9)
        img[c] = field
    return img


_GENERATORS = {
    "gradients": _gradient_image,
    "gaussian-blobs": _blob_image,
    "band-limited-noise": _band_limited_noise_image,
}


def synthetic_dataset(count: int, size: int, kinds=KINDS,
                      seed: int = 0) -> np.ndarray:
    """Deterministic (count, 3, size, size) float32 images in [0, 1]."""
    if size % 8 != 0:
        raise ValueError(f"synthetic image size must be divisible by 8, got {size}")
    kinds = tuple(kinds)
    for k in kinds:
        if k not in _GENERATORS:
            raise ValueError(f"unknown synthetic kind {k!r}, expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    for i in range(count):
        images[i] = _GENERATORS[kinds[i % len(kinds)]](rng, size)
    return images


# -- image files ---------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) [0,1] image as binary 8-bit PPM (P6)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"write_ppm: expected (3, H, W), got {img.shape}")
    h, w = img.shape[1], img.shape[2]
    pixels = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # comments (#...) allowed between them
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1   # single whitespace after maxval
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported, maxval={maxval}")
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: PPM pixel data truncated")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def read_image(path: str | Path) -> np.ndarray:
    """Load one image as (3, H, W) float32 in [0, 1]."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        return read_png(path)
    raise DataError(f"{path}: unsupported image format {suffix!r} (png/ppm only)")


def load_image_dir(path: str | Path) -> tuple[list[np.ndarray], list[str], list[str]]:
    """Read every png/ppm in a directory, skipping unreadable files.

    Returns (images, loaded filenames, skipped filenames); images keep their
    own sizes. Raises DataError when nothing is readable.
    """
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{path}: not a directory")
    files = sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".ppm"))
    images, names, skipped = [], [], []
    for f in files:
        try:
            images.append(read_image(f))
            names.append(f.name)
        except Exception as exc:   # unreadable image: warn, record, continue
            logger.warning("skipping unreadable image %s: %s", f, exc)
            skipped.append(f.name)
    if not images:
        raise DataError(f"{path}: no readable png/ppm images")
    return images, names, skipped
