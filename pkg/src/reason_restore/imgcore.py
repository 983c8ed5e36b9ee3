"""Image container helpers, seeded RNG streams, convolution and PSNR/SSIM.

Images are plain ``float64`` numpy arrays of shape ``(H, W, 3)`` holding
intensities in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage.metrics import structural_similarity

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LUMA = np.array([0.299, 0.587, 0.114])


class ShapeError(ValueError):
    pass


def as_image(data, *, clamp: bool = False) -> np.ndarray:
    """Validate ``data`` as an H x W x 3 image and return a float64 copy."""
    img = np.array(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected an H x W x 3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if clamp:
        np.clip(img, 0.0, 1.0, out=img)
    return img


def constant_image(h: int, w: int, value) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=np.float64), (h, w, 3)).copy()


def luma(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


@dataclass(frozen=True)
class Rng:
    """Counter-based random stream keyed by a master seed and a stream path.

    An ``Rng`` is a value: ``generator()`` always restarts the same sequence,
    and ``child(...)`` derives an independent sub-stream (image id, stage id).
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(not 0 <= s < 2**64 for s in self.stream):
            raise ValueError(f"stream ids must be 64-bit unsigned integers, got {self.stream}")

    def child(self, *keys: int) -> Rng:
        return Rng(self.seed, self.stream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(seq))


def check_kernel(weights) -> np.ndarray:
    k = np.asarray(weights, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be square, got shape {k.shape}")
    if k.shape[0] % 2 == 0:
        raise ValueError(f"kernel side must be odd, got {k.shape[0]}")
    total = k.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"kernel weights must sum to 1 (got {total!r}); normalize it first")
    return k


def convolve2d(img: np.ndarray, kernel) -> np.ndarray:
    """Convolve every channel with a normalized odd-square kernel.

    ``kernel`` may be a ``BlurKernel`` or a bare 2-D array. Borders use edge
    replication and the result is clamped to [0, 1].
    """
    weights = getattr(kernel, "weights", kernel)
    k = check_kernel(weights)
    img = as_image(img)
    if k.shape == (1, 1):
        return np.clip(img * k[0, 0], 0.0, 1.0)
    out = np.empty_like(img)
    for c in range(3):
        ndimage.convolve(img[..., c], k, output=out[..., c], mode="nearest")
    return np.clip(out, 0.0, 1.0, out=out)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB with peak 1.0; identical inputs return ``PSNR_CAP_DB``."""
    err = mse(a, b)
    if err < 1e-12:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / err)))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM on the luma channel (11x11 Gaussian window, sigma 1.5)."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    ya, yb = luma(np.asarray(a, dtype=np.float64)), luma(np.asarray(b, dtype=np.float64))
    return float(structural_similarity(
        ya, yb, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path, img: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)
