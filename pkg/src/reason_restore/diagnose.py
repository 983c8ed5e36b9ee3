"""Analytic degradation diagnosis and the text form of the diagnostic record.

Each estimator recovers the quantity the generator's severity formula is
built on, then scores it with the same closed form:

* fog: dark-channel atmospheric light and transmission
* noise: mean absolute Laplacian response over flat pixels
* shake: anisotropy of the luma structure tensor, mapped to an RMS radius
  through a calibration table
* rain: oriented ridge-filter bank, thresholded response fraction
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .degrade import T_FLOOR, fog_severity, noise_severity, rain_severity, streak_kernel
from .imgcore import as_image, luma

PRESENCE_THRESHOLD = 20.0
DEGRADATION_LABELS = ("Fog degradation", "Motion blur", "Rain streaks", "Gaussian noise")
REPORT_SCHEMA = 1
SCENE_MAX_WORDS = 30
SCENE_BLOCKLIST = frozenset({
    "fog", "foggy", "haze", "hazy", "mist", "misty", "blur", "blurry", "blurred",
    "rain", "rainy", "raindrop", "raindrops", "streak", "streaks", "noise", "noisy",
    "grain", "grainy", "contrast", "artifact", "artifacts", "degradation", "degraded",
})

DARK_PATCH = 15
BRIGHT_FRACTION = 0.001
FLAT_PERCENTILE = 60.0
LAPLACIAN = np.array([[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]])
LAPLACIAN_NORM = 6.0  # sqrt of the sum of squared taps
SHAKE_R_MAX = 16.0
RAIN_ANGLES = 8
RAIN_LINE_LENGTH = 11
RAIN_SIDE_OFFSET = 3.0
RAIN_THRESHOLD = 0.03

# Eigenvalue ratio -> RMS blur radius (px), from straight-walk shake kernels
# on the chart image (scripts/calibrate_blur.py). Ascending in ratio.
BLUR_RATIO_TABLE = np.array([0.0, 0.18, 0.21, 0.25, 0.30, 0.35, 0.40, 0.49, 0.55, 0.65, 0.75, 1.0])
BLUR_LENGTH_TABLE = np.array([10.0, 7.05, 6.2, 5.3, 4.4, 3.55, 2.7, 1.8, 1.4, 1.0, 0.7, 0.0])


class ReportParseError(ValueError):
    pass


@dataclass(frozen=True)
class DiagnosticReport:
    """Presence, severity, parameter estimates and an optional scene text.

    ``severity`` is ordered (fog, shake, rain, noise); presence is derived
    from it so the two can never disagree.
    """

    severity: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    atmospheric_light: tuple[float, float, float] = (1.0, 1.0, 1.0)
    transmission_mean: float = 1.0
    blur_direction: float = 0.0
    blur_length: float = 0.0
    rain_coverage: float = 0.0
    rain_slant: float = 0.0
    noise_sigma: float = 0.0
    scene_description: str | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "severity", tuple(float(s) for s in self.severity))
        object.__setattr__(self, "atmospheric_light", tuple(float(a) for a in self.atmospheric_light))
        if len(self.severity) != 4:
            raise ValueError(f"severity needs 4 entries, got {len(self.severity)}")
        if len(self.atmospheric_light) != 3:
            raise ValueError("atmospheric_light needs 3 entries")
        for s in self.severity:
            if not 1.0 <= s <= 100.0:
                raise ValueError(f"severity {s} outside [1, 100]")
        if self.scene_description is not None:
            check_scene_description(self.scene_description)

    @property
    def presence(self) -> tuple[bool, bool, bool, bool]:
        return tuple(s > PRESENCE_THRESHOLD for s in self.severity)

    @property
    def severity_array(self) -> np.ndarray:
        return np.array(self.severity)


def check_scene_description(text: str) -> None:
    if "\n" in text:
        raise ValueError("scene description must be a single line")
    words = text.split()
    if len(words) > SCENE_MAX_WORDS:
        raise ValueError(f"scene description has {len(words)} words, limit is {SCENE_MAX_WORDS}")
    banned = sorted({w for w in re.findall(r"[a-z]+", text.lower()) if w in SCENE_BLOCKLIST})
    if banned:
        raise ValueError(f"scene description mentions degradation terms: {', '.join(banned)}")


def _check_size(img: np.ndarray, minimum: int) -> np.ndarray:
    img = as_image(img)
    if min(img.shape[:2]) < minimum:
        raise ValueError(f"image {img.shape[0]}x{img.shape[1]} is below the {minimum}x{minimum} minimum")
    return img


def _dark_channel(img: np.ndarray) -> np.ndarray:
    return ndimage.minimum_filter(img.min(axis=2), size=DARK_PATCH, mode="nearest")


def estimate_fog(img: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Return (A_hat, t_mean_hat, s_fog_hat) from the dark channel prior."""
    img = _check_size(img, 16)
    h, w = img.shape[:2]
    dark = _dark_channel(img)
    n = max(1, int(round(BRIGHT_FRACTION * h * w)))
    brightest = np.argsort(dark.ravel(), kind="stable")[-n:]
    A = img.reshape(-1, 3)[brightest].mean(axis=0)
    t = 1.0 - _dark_channel(img / np.maximum(A, 1e-3))
    t = np.clip(t, T_FLOOR, 1.0)
    t_mean = float(np.clip(math.fsum(t.ravel()) / t.size, T_FLOOR, 1.0))
    return A, t_mean, fog_severity(t_mean)


def estimate_noise(img: np.ndarray) -> tuple[float, float]:
    """Return (sigma_hat, s_noise_hat).

    Flat pixels are the ``FLAT_PERCENTILE`` share with the smallest smoothed
    luma gradient; on those, E|Laplacian| = sigma * 6 * sqrt(2/pi) per channel.
    """
    img = _check_size(img, 16)
    smooth = ndimage.gaussian_filter(luma(img), 1.0, mode="nearest")
    grad = np.hypot(ndimage.sobel(smooth, 0, mode="nearest"), ndimage.sobel(smooth, 1, mode="nearest"))
    flat = grad <= np.percentile(grad, FLAT_PERCENTILE)
    responses = [np.abs(ndimage.convolve(img[..., c], LAPLACIAN, mode="nearest"))[flat] for c in range(3)]
    sigma = float(np.mean(np.concatenate(responses)) * math.sqrt(math.pi / 2.0) / LAPLACIAN_NORM)
    return sigma, noise_severity(sigma)


def structure_tensor(img: np.ndarray) -> np.ndarray:
    y = luma(img)
    gx = ndimage.sobel(y, 1, mode="nearest")
    gy = ndimage.sobel(y, 0, mode="nearest")
    return np.array([[np.sum(gx * gx), np.sum(gx * gy)], [np.sum(gx * gy), np.sum(gy * gy)]])


def blur_length_from_ratio(ratio: float) -> float:
    return float(np.interp(ratio, BLUR_RATIO_TABLE, BLUR_LENGTH_TABLE))


def estimate_blur(img: np.ndarray) -> tuple[float, float, float]:
    """Return (direction_hat, length_hat, s_shake_hat).

    Blur suppresses gradients along its direction, so the direction is the
    angle of the minor-energy eigenvector, in [0, pi) with y pointing down.
    """
    img = _check_size(img, 32)
    evals, evecs = np.linalg.eigh(structure_tensor(img))
    if evals[1] <= 1e-12:
        return 0.0, 0.0, 1.0
    ratio = float(np.clip(evals[0] / evals[1], 0.0, 1.0))
    vx, vy = evecs[:, 0]
    direction = math.atan2(vy, vx) % math.pi
    if direction >= math.pi:
        direction = 0.0
    length = blur_length_from_ratio(ratio)
    score = min(100.0, length / SHAKE_R_MAX * 99.0 + 1.0)
    return float(direction), length, float(score)


def _ridge_kernels(slant: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    center = streak_kernel(RAIN_LINE_LENGTH, 1.0, slant)
    center /= center.sum()
    # unit normal to the streak direction (sin s, cos s)
    nx, ny = math.cos(slant), -math.sin(slant)
    d = RAIN_SIDE_OFFSET
    left = ndimage.shift(center, (d * ny, d * nx), order=1)
    right = ndimage.shift(center, (-d * ny, -d * nx), order=1)
    return center, left / left.sum(), right / right.sum()


def rain_slants() -> np.ndarray:
    return -math.pi / 2.0 + np.arange(RAIN_ANGLES) * math.pi / RAIN_ANGLES


def estimate_rain(img: np.ndarray) -> tuple[float, float, float]:
    """Return (coverage_hat, slant_hat, s_rain_hat).

    A pixel responds at slant ``s`` when the mean luma along a short line at
    that slant exceeds both parallel side lines by ``RAIN_THRESHOLD``; thin
    bright streaks respond, step edges do not.
    """
    img = _check_size(img, 32)
    y = luma(img)
    best_cov, best_slant = 0.0, 0.0
    for slant in rain_slants():
        center, left, right = _ridge_kernels(float(slant))
        c = ndimage.convolve(y, center, mode="nearest")
        side = np.maximum(ndimage.convolve(y, left, mode="nearest"), ndimage.convolve(y, right, mode="nearest"))
        cov = float(np.mean(c - side > RAIN_THRESHOLD))
        if cov > best_cov:
            best_cov, best_slant = cov, float(slant)
    return best_cov, best_slant, rain_severity(best_cov)


def diagnose(img: np.ndarray, scene_description: str | None = None) -> DiagnosticReport:
    img = _check_size(img, 32)
    A, t_mean, s_fog = estimate_fog(img)
    direction, length, s_shake = estimate_blur(img)
    coverage, slant, s_rain = estimate_rain(img)
    sigma, s_noise = estimate_noise(img)
    severity = tuple(min(100.0, max(1.0, round(s, 1))) for s in (s_fog, s_shake, s_rain, s_noise))
    return DiagnosticReport(
        severity=severity,
        atmospheric_light=tuple(float(a) for a in A),
        transmission_mean=t_mean,
        blur_direction=direction,
        blur_length=length,
        rain_coverage=coverage,
        rain_slant=slant,
        noise_sigma=sigma,
        scene_description=scene_description,
    )


# --- text form -------------------------------------------------------------------

HEADER = f"Diagnostic report (schema {REPORT_SCHEMA})"
PARAM_PREFIX = "Detailed degradation parameters: "
SCENE_PREFIX = "Clean scene description: "
PARAM_KEYS = ("atmospheric_light", "transmission_mean", "blur_direction", "blur_length",
              "rain_coverage", "rain_slant", "noise_sigma")
_FLOAT = r"[-+]?(?:\d+\.?\d*(?:[eE][-+]?\d+)?|inf|nan)"
_SEVERITY_LINE = re.compile(rf"^(?P<label>[A-Za-z ]+): (?P<flag>Yes|No) \((?P<score>{_FLOAT})\)$")


def _fmt(x: float) -> str:
    return repr(float(x))


def render_report(r: DiagnosticReport) -> str:
    lines = [HEADER]
    for label, present, score in zip(DEGRADATION_LABELS, r.presence, r.severity):
        lines.append(f"{label}: {'Yes' if present else 'No'} ({_fmt(score)})")
    params = [f"atmospheric_light={','.join(_fmt(a) for a in r.atmospheric_light)}"]
    params += [f"{key}={_fmt(getattr(r, key))}" for key in PARAM_KEYS[1:]]
    lines.append(PARAM_PREFIX + "; ".join(params))
    if r.scene_description is not None:
        lines.append(SCENE_PREFIX + r.scene_description)
    return "\n".join(lines) + "\n"


def _fail(lineno: int, expected: str, got: str):
    raise ReportParseError(f"line {lineno}: expected {expected}, got {got!r}")


def parse_report(text: str) -> DiagnosticReport:
    lines = text.splitlines()
    if not lines or lines[0] != HEADER:
        found = lines[0] if lines else ""
        m = re.match(r"^Diagnostic report \(schema (\S+)\)$", found)
        if m:
            raise ReportParseError(f"line 1: unsupported report schema {m.group(1)} (expected {REPORT_SCHEMA})")
        _fail(1, repr(HEADER), found)
    if len(lines) not in (6, 7):
        raise ReportParseError(f"expected 6 or 7 lines, got {len(lines)}")
    severity = []
    for i, label in enumerate(DEGRADATION_LABELS):
        lineno = i + 2
        m = _SEVERITY_LINE.match(lines[i + 1])
        if not m or m.group("label") != label:
            _fail(lineno, f"'{label}: Yes|No (<score>)'", lines[i + 1])
        score = float(m.group("score"))
        if (m.group("flag") == "Yes") != (score > PRESENCE_THRESHOLD):
            raise ReportParseError(
                f"line {lineno}: flag {m.group('flag')} contradicts score {score} "
                f"(presence means score > {PRESENCE_THRESHOLD})")
        severity.append(score)

    line = lines[5]
    if not line.startswith(PARAM_PREFIX):
        _fail(6, f"'{PARAM_PREFIX}key=value; ...'", line)
    values = {}
    for item in line[len(PARAM_PREFIX):].split("; "):
        key, sep, value = item.partition("=")
        if not sep or key not in PARAM_KEYS or key in values:
            _fail(6, f"one of {', '.join(PARAM_KEYS)} as key=value", item)
        values[key] = value
    if set(values) != set(PARAM_KEYS):
        _fail(6, f"all keys {', '.join(PARAM_KEYS)}", line)
    try:
        A = tuple(float(a) for a in values.pop("atmospheric_light").split(","))
        numeric = {k: float(v) for k, v in values.items()}
    except ValueError as exc:
        raise ReportParseError(f"line 6: malformed number ({exc})") from None

    scene = None
    if len(lines) == 7:
        if not lines[6].startswith(SCENE_PREFIX):
            _fail(7, f"'{SCENE_PREFIX}<text>'", lines[6])
        scene = lines[6][len(SCENE_PREFIX):]
    try:
        return DiagnosticReport(severity=tuple(severity), atmospheric_light=A, scene_description=scene, **numeric)
    except ValueError as exc:
        raise ReportParseError(str(exc)) from None


# --- record form -----------------------------------------------------------------

REPORT_KIND = "diagnosis"


def report_to_record(r: DiagnosticReport) -> dict:
    """JSON-ready parameter block in the style of an annotation record."""
    return {
        "kind": REPORT_KIND,
        "schema_version": REPORT_SCHEMA,
        "presence": dict(zip(("fog", "shake", "rain", "noise"), r.presence)),
        "severity": list(r.severity),
        "parameters": {"atmospheric_light": list(r.atmospheric_light),
                       **{k: getattr(r, k) for k in PARAM_KEYS[1:]}},
        "scene_description": r.scene_description,
    }


def report_from_record(d: dict) -> DiagnosticReport:
    if d.get("kind") != REPORT_KIND:
        raise ReportParseError(f"expected kind {REPORT_KIND!r}, got {d.get('kind')!r}")
    if d.get("schema_version") != REPORT_SCHEMA:
        raise ReportParseError(f"unsupported report schema {d.get('schema_version')} (expected {REPORT_SCHEMA})")
    try:
        p = d["parameters"]
        report = DiagnosticReport(severity=tuple(d["severity"]), atmospheric_light=tuple(p["atmospheric_light"]),
                                  scene_description=d.get("scene_description"),
                                  **{k: float(p[k]) for k in PARAM_KEYS[1:]})
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportParseError(f"malformed diagnosis record: {exc}") from None
    stored = d.get("presence")
    if stored is not None and tuple(stored.get(k) for k in ("fog", "shake", "rain", "noise")) != report.presence:
        raise ReportParseError("presence flags disagree with severity scores")
    return report
