"""Random instance builders shared by the round-trip tests."""
import math

import numpy as np

from reason_restore.datasetio import AnnotationRecord, Manifest, config_hash
from reason_restore.degrade import (DegradationRecipe, FogParams, NoiseParams, RainParams,
                                    SamplerConfig, make_shake_kernel)
from reason_restore.diagnose import DiagnosticReport
from reason_restore.grpo import TrainConfig, TrainState
from reason_restore.imgcore import Rng
from reason_restore.restore import RestorationPolicy

WORDS = ["red", "car", "tree", "house", "street", "people", "bench", "river", "bridge", "dog", "sky", "window"]


def _score(g):
    return float(g.choice([1.0, 100.0, round(g.uniform(1, 100), 1), g.uniform(1, 100)]))


def random_recipe(g: np.random.Generator) -> DegradationRecipe:
    on = g.random(4) < 0.5
    fog = FogParams(A=g.uniform(0.7, 1, 3), beta=float(g.uniform(0.8, 3)), t_mean=float(g.uniform(0.05, 1))) \
        if on[0] else None
    blur = make_shake_kernel(Rng(int(g.integers(2**32)))) if on[1] else None
    rain = RainParams(float(g.uniform(1e-3, 0.02)), float(g.uniform(-0.4, 0.4)), float(g.uniform(8, 20)),
                      float(g.uniform(1, 2)), float(g.uniform(0.5, 0.9)), g.uniform(0.6, 1, 3),
                      float(g.random())) if on[2] else None
    noise = NoiseParams(float(g.uniform(0, 0.3)), float(g.uniform(-20, 20)), float(g.uniform(0, 0.1))) \
        if on[3] else None
    sev = np.array([_score(g) if flag else 1.0 for flag in on])
    warnings = ["all inclusion probabilities are zero; recipe has no degradations"] if g.random() < 0.1 else []
    return DegradationRecipe(fog, blur, rain, noise, sev, int(g.integers(0, 2**63)), warnings)


def random_record(g: np.random.Generator) -> AnnotationRecord:
    image_id = f"img_{int(g.integers(10**6)):06d}"
    rec = random_recipe(g)
    stages = {s: f"stages/{image_id}_{s}.png" for s, on in zip(("fog", "shake", "rain", "noise"), rec.presence)
              if on and g.random() < 0.5}
    return AnnotationRecord(image_id, f"clean/{image_id}.png", f"degraded/{image_id}.png", rec,
                            int(g.integers(0, 2**63)), stages)


def random_manifest(g: np.random.Generator) -> Manifest:
    sampler = SamplerConfig(p_fog=float(g.random()), p_rain=float(g.random()))
    cfg = {"name": "set" + str(int(g.integers(100))), "split": str(g.choice(["train", "test"])),
           "snapshots": None, "sampler": sampler.to_dict()}
    n = int(g.integers(0, 12))
    records = [{"id": f"img_{i:03d}", "annotation": f"annotations/img_{i:03d}.json"} for i in range(n)]
    skipped = [{"file": "broken.png", "error": "UnidentifiedImageError: cannot identify"}] if g.random() < 0.3 else []
    return Manifest(cfg["name"], cfg["split"], int(g.integers(0, 2**63)), cfg, config_hash(cfg), records, skipped)


def random_report(g: np.random.Generator) -> DiagnosticReport:
    scene = None
    if g.random() < 0.5:
        scene = " ".join(g.choice(WORDS, size=int(g.integers(0, 30))))
    return DiagnosticReport(
        severity=tuple(_score(g) for _ in range(4)),
        atmospheric_light=tuple(g.random(3)),
        transmission_mean=float(g.uniform(0.05, 1)),
        blur_direction=float(g.uniform(0, math.pi)),
        blur_length=float(g.uniform(0, 12)),
        rain_coverage=float(g.random()),
        rain_slant=float(g.uniform(-math.pi / 2, math.pi / 2)),
        noise_sigma=float(g.uniform(0, 0.2)),
        scene_description=scene,
    )


def random_state(g: np.random.Generator) -> TrainState:
    step = int(g.integers(0, 20))
    cfg = TrainConfig(group_size=int(g.integers(2, 16)), tau=None if g.random() < 0.5 else float(g.random() + 1e-3),
                      learning_rate=float(g.random()), steps=int(g.integers(step, 400)),
                      seed=int(g.integers(0, 2**63)), fd_step=float(g.uniform(1e-6, 1e-3)),
                      batch_size=int(g.integers(1, 4)), exploration_std=tuple(g.uniform(0.01, 0.2, 7)))
    return TrainState(RestorationPolicy(g.normal(size=7), np.array(cfg.exploration_std)), cfg, step,
                      list(g.normal(size=step) * 50))


# --- field-exact comparison -----------------------------------------------------------------

def _arr(a):
    return None if a is None else tuple(np.asarray(a, dtype=np.float64).ravel().tolist())


def recipe_fields(r: DegradationRecipe) -> tuple:
    """Every stored field of a recipe; the transmission map is not serialized."""
    fog = None if r.fog is None else (_arr(r.fog.A), r.fog.beta, r.fog.t_mean)
    blur = None if r.blur is None else (np.asarray(r.blur.weights).shape, _arr(r.blur.weights), r.blur.direction,
                                        r.blur.effective_length, r.blur.energy, r.blur.r_rms, r.blur.r_max,
                                        r.blur.clipped)
    rain = None if r.rain is None else (r.rain.density, r.rain.slant, r.rain.streak_length, r.rain.streak_width,
                                        r.rain.opacity, _arr(r.rain.color), r.rain.coverage)
    noise = None if r.noise is None else (r.noise.k, r.noise.b, r.noise.sigma_bar)
    return fog, blur, rain, noise, _arr(r.severity), r.seed, tuple(r.warnings)


def record_fields(rec: AnnotationRecord) -> tuple:
    return (rec.image_id, rec.clean_path, rec.degraded_path, recipe_fields(rec.recipe), rec.seed,
            tuple(sorted(rec.stage_paths.items())), rec.schema_version)


def state_fields(s: TrainState) -> tuple:
    return (s.step, s.config, tuple(s.reward_history), _arr(s.policy.mean), _arr(s.policy.exploration_std))

