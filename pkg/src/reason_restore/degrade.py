"""Compositional degradation synthesis: fog, camera shake, rain, readout noise.

The forward model is

    I_d = B_k(t * J + (1 - t) * A) + S_rain + N(sigma(x))

applied in that order. Each stage records the quantity its severity score is
computed from (mean transmission, kernel RMS radius, rain coverage, mean noise
sigma) so the returned recipe is a complete ground-truth annotation.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .imgcore import Rng, as_image, convolve2d, luma

T_FLOOR = 0.05
NOISE_SIGMA_REF = 0.05
RAIN_COVERAGE_THRESHOLD = 10.0 / 255.0
DEFAULT_RAIN_GRAY = (0.9, 0.9, 0.9)
RAIN_COLOR_FACTOR = 0.9

# rng stage ids below a per-image stream
STAGE_RECIPE = 0
STAGE_KERNEL = 1
STAGE_DEPTH = 2
STAGE_RAIN = 3
STAGE_NOISE = 4

DEGRADATIONS = ("fog", "shake", "rain", "noise")


@dataclass
class FogParams:
    A: np.ndarray
    beta: float
    t: np.ndarray | None = None
    t_mean: float | None = None

    @classmethod
    def from_depth(cls, A, beta: float, t0: np.ndarray) -> FogParams:
        t = np.clip(np.asarray(t0, dtype=np.float64) ** beta, T_FLOOR, 1.0)
        return cls(A=np.asarray(A, dtype=np.float64), beta=float(beta), t=t, t_mean=float(t.mean()))

    @classmethod
    def uniform(cls, A, t: float, shape: tuple[int, int]) -> FogParams:
        """Constant transmission map; ``beta`` is meaningless and stored as 1."""
        tmap = np.full(shape, float(np.clip(t, T_FLOOR, 1.0)))
        return cls(A=np.asarray(A, dtype=np.float64), beta=1.0, t=tmap, t_mean=float(tmap.mean()))


@dataclass
class BlurKernel:
    weights: np.ndarray
    direction: float
    effective_length: float
    energy: float
    r_rms: float
    r_max: float
    clipped: bool = False

    @classmethod
    def from_weights(cls, weights, r_max: float | None = None, clipped: bool = False) -> BlurKernel:
        k = np.asarray(weights, dtype=np.float64)
        stats = kernel_stats(k)
        if r_max is None:
            r_max = float(k.shape[0] // 2)
        return cls(weights=k, r_max=float(r_max), clipped=clipped, **stats)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass
class RainParams:
    density: float
    slant: float
    streak_length: float
    streak_width: float
    opacity: float
    color: np.ndarray
    coverage: float | None = None


@dataclass
class NoiseParams:
    k: float
    b: float
    sigma_bar: float | None = None


@dataclass
class DegradationRecipe:
    """Ground truth for one degraded sample. A block is ``None`` iff absent."""

    fog: FogParams | None = None
    blur: BlurKernel | None = None
    rain: RainParams | None = None
    noise: NoiseParams | None = None
    severity: np.ndarray = field(default_factory=lambda: np.ones(4))
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def presence(self) -> tuple[bool, bool, bool, bool]:
        return (self.fog is not None, self.blur is not None,
                self.rain is not None, self.noise is not None)


@dataclass
class SamplerConfig:
    p_fog: float = 0.5
    p_shake: float = 0.5
    p_rain: float = 0.5
    p_noise: float = 0.5
    A_range: tuple[float, float] = (0.7, 1.0)
    beta_range: tuple[float, float] = (0.8, 3.0)
    k_range: tuple[float, float] = (0.0, 0.3)
    b_range: tuple[float, float] = (-20.0, 20.0)
    steps_range: tuple[int, int] = (8, 32)
    canvas_radius: int = 16
    turn_std: float = 0.3
    rain_density_range: tuple[float, float] = (0.004, 0.015)
    rain_slant_range: tuple[float, float] = (-0.4, 0.4)
    rain_length_range: tuple[float, float] = (8.0, 20.0)
    rain_width_range: tuple[float, float] = (1.0, 2.0)
    rain_opacity_range: tuple[float, float] = (0.5, 0.9)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> SamplerConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sampler config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("p_fog", "p_shake", "p_rain", "p_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name, value in asdict(self).items():
            if name.endswith("_range") and value[0] > value[1]:
                raise ValueError(f"{name} has lower bound above upper bound: {value}")
        lo, hi = self.steps_range
        if lo < 1:
            raise ValueError(f"steps_range must start at >= 1, got {self.steps_range}")
        if self.canvas_radius < 1:
            raise ValueError("canvas_radius must be >= 1")
        d_lo, d_hi = self.rain_density_range
        if not (0.0 < d_lo and d_hi < 1.0):
            raise ValueError(f"rain density must lie in (0, 1), got {self.rain_density_range}")


# --- severity scores --------------------------------------------------------

def _clamp_score(s: float) -> float:
    return float(min(100.0, max(1.0, s)))


def fog_severity(t_mean: float, clamp: bool = True) -> float:
    s = (1.0 - t_mean) / (1.0 - T_FLOOR) * 99.0 + 1.0
    return _clamp_score(s) if clamp else s


def shake_severity(r_rms: float, r_max: float, clamp: bool = True) -> float:
    s = r_rms / r_max * 99.0 + 1.0
    return _clamp_score(s) if clamp else s


def rain_severity(coverage: float, clamp: bool = True) -> float:
    s = coverage * 99.0 + 1.0
    return _clamp_score(s) if clamp else s


def noise_severity(sigma_bar: float, clamp: bool = True) -> float:
    s = sigma_bar / NOISE_SIGMA_REF * 99.0 + 1.0
    return _clamp_score(s) if clamp else s


def severity_scores(recipe: DegradationRecipe) -> np.ndarray:
    """Scores in [1, 100] for (fog, shake, rain, noise); absent stages score 1."""
    out = np.ones(4)
    if recipe.fog is not None:
        if recipe.fog.t_mean is None:
            raise ValueError("fog is present but t_mean was never measured")
        out[0] = fog_severity(recipe.fog.t_mean)
    if recipe.blur is not None:
        out[1] = shake_severity(recipe.blur.r_rms, recipe.blur.r_max)
    if recipe.rain is not None:
        if recipe.rain.coverage is None:
            raise ValueError("rain is present but coverage was never measured")
        out[2] = rain_severity(recipe.rain.coverage)
    if recipe.noise is not None:
        if recipe.noise.sigma_bar is None:
            raise ValueError("noise is present but sigma_bar was never measured")
        out[3] = noise_severity(recipe.noise.sigma_bar)
    return out


# --- fog ---------------------------------------------------------------------

def synth_depth_prior(rng: Rng, h: int, w: int, grid: int = 4) -> np.ndarray:
    """Relative transmission prior: vertical ramp blended 70/30 with value noise.

    Top rows are far (low t0), bottom rows near; values are rescaled to [0.2, 1].
    """
    if h < 8 or w < 8:
        raise ValueError(f"depth prior needs h, w >= 8, got {h}x{w}")
    gen = rng.generator()
    ramp = np.repeat(np.linspace(0.0, 1.0, h)[:, None], w, axis=1)
    coarse = gen.random((grid + 1, grid + 1))
    yy = np.linspace(0.0, grid, h)[:, None].repeat(w, axis=1)
    xx = np.linspace(0.0, grid, w)[None, :].repeat(h, axis=0)
    noise = ndimage.map_coordinates(coarse, [yy, xx], order=1, mode="nearest")
    field_ = 0.7 * ramp + 0.3 * noise
    lo, hi = field_.min(), field_.max()
    return 0.2 + 0.8 * (field_ - lo) / (hi - lo)


def apply_fog(img: np.ndarray, fog: FogParams) -> np.ndarray:
    img = as_image(img)
    t = np.asarray(fog.t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(img.shape[:2], float(t))
    if t.shape != img.shape[:2]:
        raise ValueError(f"transmission map {t.shape} does not match image {img.shape[:2]}")
    t3 = t[..., None]
    A = np.asarray(fog.A, dtype=np.float64).reshape(1, 1, 3)
    return np.clip(img * t3 + A * (1.0 - t3), 0.0, 1.0)


# --- camera shake --------------------------------------------------------------

def kernel_stats(weights: np.ndarray) -> dict:
    """Direction, effective length, energy and RMS radius of a kernel.

    Coordinates are (x right, y down) relative to the canvas center. The
    direction is the angle in [0, pi) of the principal eigenvector of the
    weighted second-moment matrix about the centroid; the effective length is
    the square root of its largest eigenvalue.
    """
    k = np.asarray(weights, dtype=np.float64)
    r = k.shape[0] // 2
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    total = k.sum()
    cx, cy = (k * xs).sum() / total, (k * ys).sum() / total
    dx, dy = xs - cx, ys - cy
    m = np.array([[(k * dx * dx).sum(), (k * dx * dy).sum()],
                  [(k * dx * dy).sum(), (k * dy * dy).sum()]]) / total
    evals, evecs = np.linalg.eigh(m)
    vx, vy = evecs[:, -1]
    direction = math.atan2(vy, vx) % math.pi
    if direction >= math.pi:
        direction = 0.0
    return {
        "direction": float(direction),
        "effective_length": float(math.sqrt(max(evals[-1], 0.0))),
        "energy": float(np.sqrt((k * k).sum())),
        "r_rms": float(math.sqrt(max(m[0, 0] + m[1, 1], 0.0))),
    }


def shake_trajectory(gen: np.random.Generator, n_steps: int, turn_std: float = 0.5,
                     horizontal: bool = False) -> np.ndarray:
    """Unit-step walk with a drifting heading; returns ``n_steps`` (x, y) samples."""
    if horizontal:
        headings = np.zeros(n_steps - 1)
    else:
        start = gen.uniform(0.0, 2.0 * math.pi)
        headings = start + np.cumsum(gen.normal(0.0, turn_std, n_steps - 1))
    pts = np.zeros((n_steps, 2))
    if n_steps > 1:
        pts[1:, 0] = np.cumsum(np.cos(headings))
        pts[1:, 1] = np.cumsum(np.sin(headings))
    return pts


def rasterize_trajectory(pts: np.ndarray, weights: np.ndarray, radius: int) -> tuple[np.ndarray, bool]:
    """Bilinear splat of weighted points, centred on their weighted centroid."""
    size = 2 * radius + 1
    canvas = np.zeros((size, size))
    centroid = (weights[:, None] * pts).sum(axis=0) / weights.sum()
    shifted = pts - centroid + radius
    clipped = False
    for (x, y), wt in zip(shifted, weights):
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yi, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
            for xi, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
                share = wt * wx * wy
                if share == 0.0:
                    continue
                if 0 <= xi < size and 0 <= yi < size:
                    canvas[yi, xi] += share
                else:
                    clipped = True
    return canvas, clipped


def make_shake_kernel(rng: Rng, config: SamplerConfig | None = None, *,
                      n_steps: int | None = None, horizontal: bool = False) -> BlurKernel:
    """Gaussian-weighted random-walk shake kernel.

    ``n_steps`` and ``horizontal`` override the sampled walk (test hooks).
    """
    config = config or SamplerConfig()
    gen = rng.generator()
    lo, hi = config.steps_range
    sampled = int(gen.integers(lo, hi + 1))
    steps = sampled if n_steps is None else int(n_steps)
    if steps < 1:
        raise ValueError(f"step count must be >= 1, got {steps}")
    pts = shake_trajectory(gen, steps, config.turn_std, horizontal=horizontal)
    idx = np.arange(steps, dtype=np.float64)
    sigma = steps / 4.0
    temporal = np.exp(-0.5 * ((idx - (steps - 1) / 2.0) / sigma) ** 2)
    canvas, clipped = rasterize_trajectory(pts, temporal, config.canvas_radius)
    canvas /= canvas.sum()
    return BlurKernel.from_weights(canvas, r_max=float(config.canvas_radius), clipped=clipped)


# --- rain ------------------------------------------------------------------------

def streak_kernel(length: float, width: float, slant: float) -> np.ndarray:
    """Anti-aliased line footprint with peak 1; slant 0 is vertical."""
    half = int(math.ceil(length / 2.0 + width)) + 1
    ys, xs = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    dx, dy = math.sin(slant), math.cos(slant)
    along = xs * dx + ys * dy
    perp = np.abs(xs * dy - ys * dx)
    w_perp = np.clip(width / 2.0 + 0.5 - perp, 0.0, 1.0)
    w_along = np.clip(length / 2.0 + 0.5 - np.abs(along), 0.0, 1.0)
    return w_perp * w_along


def rain_layer(shape: tuple[int, int], rain: RainParams, rng: Rng) -> np.ndarray:
    """Monochrome streak intensity in [0, 1], independent of image content."""
    gen = rng.generator()
    h, w = shape
    seeds = gen.random((h, w)) < rain.density
    strength = gen.uniform(0.6, 1.0, (h, w))
    seed_map = np.where(seeds, strength, 0.0)
    if not seeds.any():
        return np.zeros((h, w))
    layer = ndimage.convolve(seed_map, streak_kernel(rain.streak_length, rain.streak_width, rain.slant),
                             mode="nearest")
    return np.clip(layer, 0.0, 1.0)


def apply_rain(img: np.ndarray, rain: RainParams, rng: Rng) -> tuple[np.ndarray, float]:
    if not 0.0 < rain.density < 1.0:
        raise ValueError(f"rain density must lie in (0, 1), got {rain.density}")
    img = as_image(img)
    mono = rain_layer(img.shape[:2], rain, rng)
    color = np.asarray(rain.color, dtype=np.float64).reshape(1, 1, 3)
    layer = mono[..., None] * color
    coverage = float(np.mean(luma(layer) > RAIN_COVERAGE_THRESHOLD))
    out = np.clip(img + rain.opacity * layer, 0.0, 1.0)
    return out, coverage


# --- noise ------------------------------------------------------------------------

def noise_sigma_map(img: np.ndarray, noise: NoiseParams) -> np.ndarray:
    """Per-sample std in normalized units: max(0, k * 255v + b) / 255."""
    return np.maximum(0.0, noise.k * 255.0 * img + noise.b) / 255.0


def apply_noise(img: np.ndarray, noise: NoiseParams, rng: Rng) -> tuple[np.ndarray, float]:
    img = as_image(img)
    sigma = noise_sigma_map(img, noise)
    z = rng.generator().standard_normal(img.shape)
    out = np.clip(img + sigma * z, 0.0, 1.0)
    return out, float(sigma.mean())


# --- recipes and composition ---------------------------------------------------

def sample_recipe(rng: Rng, config: SamplerConfig | None = None) -> DegradationRecipe:
    """Draw presence flags and parameters. Every draw happens regardless of the
    flags so toggling one probability never shifts another block's values."""
    config = config or SamplerConfig()
    config.validate()
    gen = rng.child(STAGE_RECIPE).generator()
    u = gen.random(4)
    probs = (config.p_fog, config.p_shake, config.p_rain, config.p_noise)
    present = [bool(ui < p) for ui, p in zip(u, probs)]

    A = gen.uniform(*config.A_range, size=3)
    beta = float(gen.uniform(*config.beta_range))
    k = float(gen.uniform(*config.k_range))
    b = float(gen.uniform(*config.b_range))
    density = float(gen.uniform(*config.rain_density_range))
    slant = float(gen.uniform(*config.rain_slant_range))
    length = float(gen.uniform(*config.rain_length_range))
    width = float(gen.uniform(*config.rain_width_range))
    opacity = float(gen.uniform(*config.rain_opacity_range))
    kernel = make_shake_kernel(rng.child(STAGE_KERNEL), config)

    warnings = []
    if not any(probs):
        warnings.append("all inclusion probabilities are zero; recipe has no degradations")
    fog = FogParams(A=A, beta=beta) if present[0] else None
    rain_color = RAIN_COLOR_FACTOR * A if fog is not None else np.array(DEFAULT_RAIN_GRAY)
    return DegradationRecipe(
        fog=fog,
        blur=kernel if present[1] else None,
        rain=RainParams(density, slant, length, width, opacity, rain_color) if present[2] else None,
        noise=NoiseParams(k, b) if present[3] else None,
        seed=rng.seed,
        warnings=warnings,
    )


def degrade(img: np.ndarray, recipe: DegradationRecipe, rng: Rng,
            depth_prior: np.ndarray | None = None) -> tuple[np.ndarray, dict, DegradationRecipe]:
    """Run the present stages in forward-model order.

    Returns the degraded image, a dict of per-stage snapshots (keys from
    ``DEGRADATIONS``, present stages only) and a copy of the recipe with
    measured quantities and severity scores filled in. A fog block without a
    transmission map gets one from ``depth_prior`` or a synthesized prior.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    out = img
    snapshots: dict[str, np.ndarray] = {}
    fog, blur, rain, noise = recipe.fog, recipe.blur, recipe.rain, recipe.noise

    if fog is not None:
        if fog.t is None:
            t0 = depth_prior if depth_prior is not None else synth_depth_prior(rng.child(STAGE_DEPTH), h, w)
            fog = FogParams.from_depth(fog.A, fog.beta, t0)
        else:
            fog = replace(fog, t_mean=float(np.mean(fog.t)))
        out = apply_fog(out, fog)
        snapshots["fog"] = out
    if blur is not None:
        out = convolve2d(out, blur)
        snapshots["shake"] = out
    if rain is not None:
        out, coverage = apply_rain(out, rain, rng.child(STAGE_RAIN))
        rain = replace(rain, coverage=coverage)
        snapshots["rain"] = out
    if noise is not None:
        out, sigma_bar = apply_noise(out, noise, rng.child(STAGE_NOISE))
        noise = replace(noise, sigma_bar=sigma_bar)
        snapshots["noise"] = out

    final = replace(recipe, fog=fog, blur=blur, rain=rain, noise=noise, warnings=list(recipe.warnings))
    final.severity = severity_scores(final)
    return out, snapshots, final
