"""Parametric inverse operators and the Gaussian policy over their parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .degrade import T_FLOOR
from .diagnose import DiagnosticReport
from .imgcore import Rng, as_image

PARAM_NAMES = ("defog_t", "defog_A_r", "defog_A_g", "defog_A_b",
               "denoise_strength", "sharpen_amount", "derain_strength")
LOWER = np.array([T_FLOOR, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
UPPER = np.array([1.0, 1.0, 1.0, 1.0, 3.0, 2.0, 1.0])
NEUTRAL = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
DEFAULT_EXPLORATION_STD = np.array([0.05, 0.02, 0.02, 0.02, 0.15, 0.1, 0.1])

# fixed support keeps the Gaussian smooth in sigma (scipy's truncation jumps)
DENOISE_RADIUS = 9
SHARPEN_SIGMA = 1.0
DERAIN_WIDTH = 5
# report -> prior scaling
DENOISE_PER_SIGMA = 1.0 / 0.05
SHARPEN_PER_PIXEL = 0.25
DERAIN_PER_COVERAGE = 1.0 / 0.3


@dataclass(frozen=True)
class RestorationParams:
    defog_t: float = 1.0
    defog_A: tuple[float, float, float] = (1.0, 1.0, 1.0)
    denoise_strength: float = 0.0
    sharpen_amount: float = 0.0
    derain_strength: float = 0.0

    def to_vector(self) -> np.ndarray:
        return np.array([self.defog_t, *self.defog_A, self.denoise_strength,
                         self.sharpen_amount, self.derain_strength], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> RestorationParams:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected a {len(PARAM_NAMES)}-vector, got shape {v.shape}")
        return cls(float(v[0]), (float(v[1]), float(v[2]), float(v[3])),
                   float(v[4]), float(v[5]), float(v[6]))

    def projected(self) -> RestorationParams:
        return RestorationParams.from_vector(project(self.to_vector()))


def project(v: np.ndarray) -> np.ndarray:
    return np.clip(v, LOWER, UPPER)


def _gaussian_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def gaussian_blur(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    g = _gaussian_1d(sigma, radius)
    out = ndimage.convolve1d(img, g, axis=0, mode="nearest")
    return ndimage.convolve1d(out, g, axis=1, mode="nearest")


def derain(img: np.ndarray, strength: float) -> np.ndarray:
    """Blend toward a horizontal median, across the near-vertical streaks."""
    med = ndimage.median_filter(img, size=(1, DERAIN_WIDTH, 1), mode="nearest")
    return np.clip((1.0 - strength) * img + strength * med, 0.0, 1.0)


def defog(img: np.ndarray, t: float, A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(1, 1, 3)
    return np.clip((img - (1.0 - t) * A) / t, 0.0, 1.0)


def restore(img: np.ndarray, p: RestorationParams) -> np.ndarray:
    """Undo the degradations in reverse order: rain, noise, blur, then fog.

    Stages with zero strength are skipped, so neutral parameters return the
    input unchanged. Out-of-range parameters are projected first.
    """
    img = as_image(img)
    p = p.projected()
    out = img
    if p.derain_strength > 0.0:
        out = derain(out, p.derain_strength)
    if p.denoise_strength > 0.0:
        out = np.clip(gaussian_blur(out, p.denoise_strength, DENOISE_RADIUS), 0.0, 1.0)
    if p.sharpen_amount > 0.0:
        radius = int(math.ceil(3 * SHARPEN_SIGMA))
        out = np.clip(out + p.sharpen_amount * (out - gaussian_blur(out, SHARPEN_SIGMA, radius)), 0.0, 1.0)
    if p.defog_t < 1.0:
        out = defog(out, p.defog_t, p.defog_A)
    return out


@dataclass
class RestorationPolicy:
    mean: np.ndarray
    exploration_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.exploration_std = np.asarray(self.exploration_std, dtype=np.float64).copy()
        if self.mean.shape != (len(PARAM_NAMES),) or self.exploration_std.shape != self.mean.shape:
            raise ValueError("policy mean and exploration_std must be 7-vectors")
        if np.any(self.exploration_std <= 0.0):
            raise ValueError("exploration_std must be strictly positive")

    @property
    def params(self) -> RestorationParams:
        return RestorationParams.from_vector(project(self.mean))


def prior_params(report: DiagnosticReport) -> RestorationParams:
    """Map a diagnosis onto restoration parameters; absent degradations stay neutral."""
    fog, shake, rain, noise = report.presence
    return RestorationParams(
        defog_t=report.transmission_mean if fog else 1.0,
        defog_A=tuple(float(np.clip(a, 0.0, 1.0)) for a in report.atmospheric_light) if fog else (1.0, 1.0, 1.0),
        denoise_strength=min(UPPER[4], DENOISE_PER_SIGMA * report.noise_sigma) if noise else 0.0,
        sharpen_amount=min(UPPER[5], SHARPEN_PER_PIXEL * report.blur_length) if shake else 0.0,
        derain_strength=min(UPPER[6], DERAIN_PER_COVERAGE * report.rain_coverage) if rain else 0.0,
    ).projected()


def init_policy(report: DiagnosticReport, exploration_std=None) -> RestorationPolicy:
    std = DEFAULT_EXPLORATION_STD if exploration_std is None else exploration_std
    return RestorationPolicy(prior_params(report).to_vector(), std)


def sample_noise(rng: Rng, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError(f"a group needs at least 2 candidates, got {n}")
    return rng.generator().standard_normal((n, len(PARAM_NAMES)))


def candidate_vectors(policy: RestorationPolicy, eps: np.ndarray) -> np.ndarray:
    """Projected phi_k = mu + std * eps_k, one row per candidate."""
    return project(policy.mean[None, :] + policy.exploration_std[None, :] * eps)


def sample_candidates(policy: RestorationPolicy, rng: Rng, n: int) -> list[RestorationParams]:
    eps = sample_noise(rng, n)
    return [RestorationParams.from_vector(v) for v in candidate_vectors(policy, eps)]
