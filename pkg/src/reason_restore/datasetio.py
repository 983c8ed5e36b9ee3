"""Dataset generation, annotation/manifest files and the evaluation table.

Layout of a generated dataset::

    root/
      manifest.json
      clean/<id>.png
      degraded/<id>.png
      stages/<id>_<stage>.png      (when snapshots are enabled)
      annotations/<id>.json

Annotation and manifest files are UTF-8 JSON with sorted keys and a
``schema_version`` field; readers reject versions they do not know.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degrade import (DEGRADATIONS, BlurKernel, DegradationRecipe, FogParams, NoiseParams, RainParams,
                      SamplerConfig, degrade, sample_recipe)
from .imgcore import Rng, psnr, read_png, ssim, write_png

SCHEMA_VERSION = 1
ANNOTATION_KIND = "annotation"
MANIFEST_KIND = "manifest"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "test")


class RecordFormatError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    name: str = "dataset"
    split: str = "train"
    snapshots: bool | None = None  # None: on for test splits, off for train

    @property
    def write_snapshots(self) -> bool:
        return self.split == "test" if self.snapshots is None else self.snapshots

    def to_dict(self) -> dict:
        return {"name": self.name, "split": self.split, "snapshots": self.snapshots,
                "sampler": self.sampler.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> GeneratorConfig:
        unknown = set(d) - {"name", "split", "snapshots", "sampler"}
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        cfg = cls(sampler=SamplerConfig.from_dict(d.get("sampler", {})),
                  name=d.get("name", "dataset"), split=d.get("split", "train"),
                  snapshots=d.get("snapshots"))
        if cfg.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {cfg.split!r}")
        return cfg

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class AnnotationRecord:
    image_id: str
    clean_path: str
    degraded_path: str
    recipe: DegradationRecipe
    seed: int
    stage_paths: dict[str, str] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION


@dataclass
class Manifest:
    name: str
    split: str
    master_seed: int
    config: dict
    config_hash: str
    records: list[dict]
    skipped: list[dict] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def record_count(self) -> int:
        return len(self.records)


# --- recipe <-> dict ----------------------------------------------------------------

def _floats(v) -> list[float]:
    return [float(x) for x in np.asarray(v).ravel()]


def recipe_to_dict(recipe: DegradationRecipe) -> dict:
    """Serializable form; the per-pixel transmission map is not stored."""
    d: dict = {
        "presence": dict(zip(DEGRADATIONS, recipe.presence)),
        "severity": _floats(recipe.severity),
        "seed": int(recipe.seed),
        "warnings": list(recipe.warnings),
    }
    if recipe.fog is not None:
        f = recipe.fog
        d["fog"] = {"A": _floats(f.A), "beta": float(f.beta), "t_mean": f.t_mean}
    if recipe.blur is not None:
        k = recipe.blur
        d["blur"] = {"weights": np.asarray(k.weights, dtype=np.float64).tolist(),
                     "direction": k.direction, "effective_length": k.effective_length,
                     "energy": k.energy, "r_rms": k.r_rms, "r_max": k.r_max, "clipped": bool(k.clipped)}
    if recipe.rain is not None:
        r = recipe.rain
        d["rain"] = {"density": r.density, "slant": r.slant, "streak_length": r.streak_length,
                     "streak_width": r.streak_width, "opacity": r.opacity, "color": _floats(r.color),
                     "coverage": r.coverage}
    if recipe.noise is not None:
        n = recipe.noise
        d["noise"] = {"k": n.k, "b": n.b, "sigma_bar": n.sigma_bar}
    return d


def recipe_from_dict(d: dict) -> DegradationRecipe:
    presence = d["presence"]
    if set(presence) != set(DEGRADATIONS):
        raise RecordFormatError(f"presence must list exactly {DEGRADATIONS}")
    blocks = {"fog": "fog", "shake": "blur", "rain": "rain", "noise": "noise"}
    for name, key in blocks.items():
        if bool(presence[name]) != (key in d):
            raise RecordFormatError(f"{name}: presence flag {presence[name]} disagrees with the parameter block")
    severity = np.array(d["severity"], dtype=np.float64)
    if severity.shape != (4,):
        raise RecordFormatError(f"severity must have 4 entries, got {severity.size}")
    for name, s in zip(DEGRADATIONS, severity):
        if not 1.0 <= s <= 100.0:
            raise RecordFormatError(f"{name} severity {s} outside [1, 100]")
    fog = blur = rain = noise = None
    if "fog" in d:
        f = d["fog"]
        fog = FogParams(A=np.array(f["A"], dtype=np.float64), beta=f["beta"], t_mean=f["t_mean"])
    if "blur" in d:
        k = d["blur"]
        blur = BlurKernel(weights=np.array(k["weights"], dtype=np.float64), direction=k["direction"],
                          effective_length=k["effective_length"], energy=k["energy"], r_rms=k["r_rms"],
                          r_max=k["r_max"], clipped=k["clipped"])
    if "rain" in d:
        r = d["rain"]
        rain = RainParams(r["density"], r["slant"], r["streak_length"], r["streak_width"], r["opacity"],
                          np.array(r["color"], dtype=np.float64), r["coverage"])
    if "noise" in d:
        n = d["noise"]
        noise = NoiseParams(n["k"], n["b"], n["sigma_bar"])
    return DegradationRecipe(fog=fog, blur=blur, rain=rain, noise=noise, severity=severity,
                             seed=int(d["seed"]), warnings=list(d.get("warnings", [])))


# --- files -----------------------------------------------------------------------------

def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _load(path, kind: str) -> dict:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RecordFormatError(f"{path}: not UTF-8 at byte offset {exc.start}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise RecordFormatError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise RecordFormatError(f"{path}: expected a JSON object at byte offset 0")
    if obj.get("kind") != kind:
        raise RecordFormatError(f"{path}: expected a {kind} file, found kind {obj.get('kind')!r}")
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise RecordFormatError(f"{path}: unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    return obj


def record_to_dict(rec: AnnotationRecord) -> dict:
    return {
        "kind": ANNOTATION_KIND,
        "schema_version": rec.schema_version,
        "id": rec.image_id,
        "seed": int(rec.seed),
        "paths": {"clean": rec.clean_path, "degraded": rec.degraded_path, "stages": dict(rec.stage_paths)},
        "recipe": recipe_to_dict(rec.recipe),
    }


def record_from_dict(d: dict) -> AnnotationRecord:
    try:
        paths = d["paths"]
        return AnnotationRecord(
            image_id=d["id"], clean_path=paths["clean"], degraded_path=paths["degraded"],
            stage_paths=dict(paths.get("stages", {})), recipe=recipe_from_dict(d["recipe"]),
            seed=int(d["seed"]), schema_version=d["schema_version"],
        )
    except KeyError as exc:
        raise RecordFormatError(f"annotation is missing field {exc}") from None


def write_record(path, rec: AnnotationRecord, root=None) -> None:
    """Write ``rec``; with ``root`` given, every referenced path must exist."""
    if root is not None:
        for p in [rec.clean_path, rec.degraded_path, *rec.stage_paths.values()]:
            if not (Path(root) / p).exists():
                raise FileNotFoundError(f"annotation {rec.image_id} references missing file {p}")
    Path(path).write_text(_dump(record_to_dict(rec)), encoding="utf-8")


def read_record(path) -> AnnotationRecord:
    try:
        return record_from_dict(_load(path, ANNOTATION_KIND))
    except RecordFormatError as exc:
        if str(exc).startswith(str(path)):
            raise
        raise RecordFormatError(f"{path}: {exc}") from None


def manifest_to_dict(m: Manifest) -> dict:
    return {
        "kind": MANIFEST_KIND,
        "schema_version": m.schema_version,
        "name": m.name,
        "split": m.split,
        "master_seed": int(m.master_seed),
        "config": m.config,
        "config_hash": m.config_hash,
        "record_count": m.record_count,
        "records": list(m.records),
        "skipped": list(m.skipped),
    }


def manifest_from_dict(d: dict) -> Manifest:
    try:
        m = Manifest(name=d["name"], split=d["split"], master_seed=int(d["master_seed"]), config=d["config"],
                     config_hash=d["config_hash"], records=list(d["records"]), skipped=list(d.get("skipped", [])),
                     schema_version=d["schema_version"])
        count = d["record_count"]
    except KeyError as exc:
        raise RecordFormatError(f"manifest is missing field {exc}") from None
    if count != len(m.records):
        raise RecordFormatError(f"record_count {count} disagrees with {len(m.records)} listed records")
    if config_hash(m.config) != m.config_hash:
        raise RecordFormatError("config_hash does not match the stored config")
    return m


def write_manifest(path, m: Manifest) -> None:
    Path(path).write_text(_dump(manifest_to_dict(m)), encoding="utf-8")


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        return manifest_from_dict(_load(path, MANIFEST_KIND))
    except RecordFormatError as exc:
        if str(exc).startswith(str(path)):
            raise
        raise RecordFormatError(f"{path}: {exc}") from None


# --- generation -------------------------------------------------------------------------

def _unique_ids(files: list[Path]) -> list[str]:
    seen: dict[str, int] = {}
    ids = []
    for f in files:
        stem = f.stem
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        ids.append(stem if n == 0 else f"{stem}_{n}")
    return ids


def _generate_one(job) -> dict:
    index, src, image_id, out_dir, config, master_seed = job
    out_dir = Path(out_dir)
    try:
        clean = read_png(src)
    except Exception as exc:  # undecodable input is logged, not fatal
        return {"skipped": {"file": Path(src).name, "error": f"{type(exc).__name__}: {exc}"}}
    rng = Rng(master_seed, (index,))
    recipe = sample_recipe(rng, config.sampler)
    degraded, snapshots, final = degrade(clean, recipe, rng)
    clean_rel, degraded_rel = f"clean/{image_id}.png", f"degraded/{image_id}.png"
    write_png(out_dir / clean_rel, clean)
    write_png(out_dir / degraded_rel, degraded)
    stage_paths = {}
    if config.write_snapshots:
        for stage, snap in snapshots.items():
            rel = f"stages/{image_id}_{stage}.png"
            write_png(out_dir / rel, snap)
            stage_paths[stage] = rel
    rec = AnnotationRecord(image_id, clean_rel, degraded_rel, final, rng.seed, stage_paths)
    ann_rel = f"annotations/{image_id}.json"
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    write_record(out_dir / ann_rel, rec, root=out_dir)
    return {"record": {"id": image_id, "annotation": ann_rel}}


def generate_dataset(clean_dir, out_dir, config: GeneratorConfig | None = None, master_seed: int = 0,
                     jobs: int = 1) -> Manifest:
    """Degrade every image in ``clean_dir`` into a dataset tree at ``out_dir``.

    Image ``i`` (sorted by file name) uses rng stream ``(master_seed, i)``,
    so output bytes depend only on the inputs, config and seed, not on ``jobs``.
    """
    config = config or GeneratorConfig()
    config.sampler.validate()
    clean_dir, out_dir = Path(clean_dir), Path(out_dir)
    if not clean_dir.is_dir():
        raise FileNotFoundError(f"clean image directory not found: {clean_dir}")
    files = sorted((p for p in clean_dir.iterdir() if p.is_file()), key=lambda p: p.name)
    ids = _unique_ids(files)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs_list = [(i, str(f), image_id, str(out_dir), config, master_seed) for i, (f, image_id) in enumerate(zip(files, ids))]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_generate_one, jobs_list))
    else:
        results = [_generate_one(j) for j in jobs_list]
    records = [r["record"] for r in results if "record" in r]
    skipped = [r["skipped"] for r in results if "skipped" in r]
    if not records:
        raise ValueError(f"no decodable images in {clean_dir}")
    cfg = config.to_dict()
    manifest = Manifest(config.name, config.split, master_seed, cfg, config_hash(cfg), records, skipped)
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    return manifest


def load_records(root) -> tuple[Manifest, list[AnnotationRecord]]:
    root = Path(root)
    manifest = read_manifest(root / MANIFEST_NAME)
    return manifest, [read_record(root / r["annotation"]) for r in manifest.records]


# --- evaluation --------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: list[tuple[str, float | None, float | None]]
    missing: list[str]

    @property
    def complete(self) -> bool:
        return not self.missing

    def means(self) -> tuple[float, float]:
        done = [(p, s) for _, p, s in self.rows if p is not None]
        if not done:
            return math.nan, math.nan
        return float(np.mean([p for p, _ in done])), float(np.mean([s for _, s in done]))

    def table(self) -> str:
        lines = ["id\tpsnr_db\tssim"]
        for image_id, p, s in self.rows:
            lines.append(f"{image_id}\tMISSING\tMISSING" if p is None else f"{image_id}\t{p:.4f}\t{s:.4f}")
        mp, ms = self.means()
        lines.append(f"MEAN\t{mp:.4f}\t{ms:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(root, restored_dir) -> EvalResult:
    """PSNR/SSIM of ``restored_dir/<id>.png`` against each record's clean image."""
    root, restored_dir = Path(root), Path(restored_dir)
    _, records = load_records(root)
    rows, missing = [], []
    for rec in records:
        path = restored_dir / f"{rec.image_id}.png"
        if not path.exists():
            rows.append((rec.image_id, None, None))
            missing.append(rec.image_id)
            continue
        clean, restored = read_png(root / rec.clean_path), read_png(path)
        rows.append((rec.image_id, psnr(restored, clean), ssim(restored, clean)))
    return EvalResult(rows, missing)
