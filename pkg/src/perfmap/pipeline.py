"""End-to-end PPM generation: DSA, enhancement, skeleton seeds, fast marching."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .diffusion import DiffusionParams, perona_malik
from .dsa import subtract_normalize
from .eikonal import build_speed, fast_march
from .errors import ParameterError, PerfmapError, StageError, ValidationError
from .vesselseg import binarize, extract_seeds, thin3d
from .volume import check_compatible, load_nifti, save_nifti

log = logging.getLogger(__name__)

STAGES = ("load", "dsa", "enhance", "segment", "skeletonize", "seeds", "speed", "fastmarch")


@dataclass(frozen=True)
class PipelineConfig:
    threshold: float = 0.2
    seed_quantile: float = 0.75
    seed_population: str = "skeleton"
    iterations: int = 5
    time_step: float = 0.0625
    conductance: float = 1.0
    epsilon: float = 1e-3
    init_radius: float = 0.0
    fwhm: float = 10.0
    fwhm_units: str = "voxel"
    output_dir: str = "."
    keep_intermediates: bool = False

    @property
    def diffusion(self) -> DiffusionParams:
        return DiffusionParams(self.iterations, self.time_step, self.conductance)

    def validate(self, spacing=(1.0, 1.0, 1.0)) -> None:
        """Check every parameter against the stage preconditions."""
        self.diffusion.validate(spacing)
        if not 0.0 <= self.seed_quantile <= 1.0:
            raise ParameterError(f"seed_quantile must lie in [0, 1], got {self.seed_quantile}")
        if self.seed_population not in ("skeleton", "volume"):
            raise ParameterError(f"seed_population must be skeleton or volume, got {self.seed_population!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ParameterError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.init_radius < 0:
            raise ParameterError(f"init_radius must be >= 0, got {self.init_radius}")
        if not self.fwhm > 0:
            raise ParameterError(f"fwhm must be positive, got {self.fwhm}")
        if self.fwhm_units not in ("voxel", "mm"):
            raise ParameterError(f"fwhm_units must be voxel or mm, got {self.fwhm_units!r}")

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_mapping(cls, values: dict) -> PipelineConfig:
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ParameterError(f"unknown config key {key!r}")
            kw[key] = _coerce(types[key], raw, key)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> PipelineConfig:
        return cls.from_mapping(read_key_values(path))


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if kind in ("bool", bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError as exc:
        raise ParameterError(f"bad value for {key}: {raw!r}") from exc
    return text


def read_key_values(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{n}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def array_checksum(vol) -> str:
    """SHA-256 over shape, dtype and raw bytes of a volume's data."""
    data = np.ascontiguousarray(getattr(vol, "data", vol))
    h = hashlib.sha256()
    h.update(repr((data.shape, data.dtype.str)).encode())
    h.update(data.tobytes())
    return h.hexdigest()


class _Stage:
    def __init__(self, name, records):
        self.name = name
        self.records = records
        self.outputs = {}
        self.params = {}

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            if isinstance(exc, (StageError, ValidationError)):
                return False
            raise StageError(self.name, exc) from exc
        self.records.append(
            {
                "stage": self.name,
                "params": self.params,
                "seconds": round(time.perf_counter() - self.start, 6),
                "checksums": self.outputs,
            }
        )
        return False


def run_pipeline(ct_path, cta_path, config: PipelineConfig = PipelineConfig()):
    """Run every stage and write ``ppm.nii.gz`` plus ``manifest.jsonl``.

    Returns ``(ppm_path, records)`` where ``records`` are the manifest
    entries. On failure, files written by this run are removed unless
    ``keep_intermediates`` is set.
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    records: list[dict] = []

    def _save(vol, name):
        path = out / name
        save_nifti(vol, path)
        written.append(path)
        return path

    try:
        with _Stage("load", records) as st:
            ct = load_nifti(ct_path)
            cta = load_nifti(cta_path)
            st.params = {"ct": str(ct_path), "cta": str(cta_path)}
            st.outputs = {"ct": array_checksum(ct), "cta": array_checksum(cta)}
        check_compatible(cta, ct)
        config.diffusion.validate(cta.spacing)

        with _Stage("dsa", records) as st:
            dsa = subtract_normalize(cta, ct)
            st.outputs = {"dsa": array_checksum(dsa)}
        with _Stage("enhance", records) as st:
            st.params = dataclasses.asdict(config.diffusion)
            vsp = perona_malik(dsa, config.diffusion)
            st.outputs = {"vsp": array_checksum(vsp)}
        with _Stage("segment", records) as st:
            st.params = {"threshold": config.threshold}
            mask = binarize(vsp, config.threshold)
            st.outputs = {"mask": array_checksum(mask)}
        with _Stage("skeletonize", records) as st:
            skel = thin3d(mask)
            st.outputs = {"skel": array_checksum(skel)}
        with _Stage("seeds", records) as st:
            st.params = {"quantile": config.seed_quantile, "population": config.seed_population}
            seeds = extract_seeds(skel, vsp, config.seed_quantile, config.seed_population)
            st.params["n_seeds"] = len(seeds)
            st.outputs = {"seeds": array_checksum(seeds.voxels)}
        with _Stage("speed", records) as st:
            st.params = {"epsilon": config.epsilon}
            speed = build_speed(dsa, config.epsilon)
            st.outputs = {"speed": array_checksum(speed.volume)}
        with _Stage("fastmarch", records) as st:
            st.params = {"init_radius": config.init_radius}
            arrival = fast_march(speed, seeds, init_radius=config.init_radius)
            st.outputs = {"ppm": array_checksum(arrival.arrival)}

        if config.keep_intermediates:
            _save(dsa, "dsa.nii.gz")
            _save(vsp, "vsp.nii.gz")
            _save(mask, "mask.nii.gz")
            _save(skel, "skel.nii.gz")
            seeds.write_csv(out / "seeds.csv")
            written.append(out / "seeds.csv")
        ppm_path = _save(arrival.arrival, "ppm.nii.gz")
        manifest = out / "manifest.jsonl"
        with open(manifest, "w") as fh:
            fh.write(json.dumps({"config": dataclasses.asdict(config)}, sort_keys=True) + "\n")
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        written.append(manifest)
    except BaseException:
        if not config.keep_intermediates:
            for p in written:
                p.unlink(missing_ok=True)
        raise
    log.info("wrote %s", ppm_path)
    return ppm_path, records


def manifest_checksums(records) -> dict:
    """Stage name to output checksums, ignoring timings."""
    return {r["stage"]: r["checksums"] for r in records if "stage" in r}


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- batch mode


def _run_subject(job):
    subject_id, ct, cta, config = job
    try:
        _, records = run_pipeline(ct, cta, config)
        return subject_id, "ok", manifest_checksums(records)["fastmarch"]["ppm"]
    except PerfmapError as exc:
        return subject_id, f"error: {exc}", ""


def read_batch(path):
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for col in ("subject_id", "ct", "cta"):
        if rows and col not in rows[0]:
            raise ValidationError(f"{path}: missing column {col!r}")
    out = []
    for r in rows:
        ct, cta = Path(r["ct"]), Path(r["cta"])
        out.append(
            (
                r["subject_id"],
                ct if ct.is_absolute() else path.parent / ct,
                cta if cta.is_absolute() else path.parent / cta,
            )
        )
    return out


def run_batch(subjects, config: PipelineConfig, jobs: int = 1):
    """Run the pipeline per subject into ``output_dir/<subject_id>``.

    Subjects share no state, so results do not depend on ``jobs``.
    Returns ``(subject_id, status, ppm checksum)`` tuples in input order.
    """
    base = Path(config.output_dir)
    work = [
        (sid, str(ct), str(cta), config.replace(output_dir=str(base / sid)))
        for sid, ct, cta in subjects
    ]
    if jobs <= 1:
        return [_run_subject(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_subject, work))
