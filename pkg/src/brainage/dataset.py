"""Manifests, intensity normalization, and the phantom generator.

Phantoms stand in for clinical scans: each record gets a per-modality
latent age (true age plus independent Gaussian noise, plus a male
offset on the structural side) and two volumes whose geometry encodes
those latent ages. That construction guarantees, at any scale, that
combining both modalities beats either alone and that sex carries
signal the combined model lacks.
"""

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .imaging import Modality, Volume, write_nifti_file
from .rng import SplitMix64, derive_seed


class DatasetError(Exception):
    pass


class ZeroDivisorError(DatasetError):
    pass


class MissingFieldError(DatasetError):
    pass


class DuplicateIdError(DatasetError):
    pass


class BadSexCodeError(DatasetError):
    pass


class EmptyManifestError(DatasetError):
    pass


class Sex(IntEnum):
    FEMALE = 0
    MALE = 1


_SEX_CODES = {"F": Sex.FEMALE, "M": Sex.MALE}
_SEX_LETTERS = {Sex.FEMALE: "F", Sex.MALE: "M"}


@dataclass(frozen=True)
class ScanRecord:
    id: str
    age: float
    sex: Sex
    project: str
    t1w_path: str
    aicbv_path: str

    def __post_init__(self):
        if not (math.isfinite(self.age) and 0.0 < self.age < 130.0):
            raise DatasetError(f"age must be finite and in (0, 130), got {self.age}")
        if self.sex not in (Sex.FEMALE, Sex.MALE):
            raise BadSexCodeError(f"sex must be 0 or 1, got {self.sex!r}")


@dataclass(frozen=True)
class Manifest:
    records: tuple

    def __post_init__(self):
        recs = tuple(self.records)
        if not recs:
            raise EmptyManifestError("manifest must contain at least one record")
        seen = set()
        for r in recs:
            if r.id in seen:
                raise DuplicateIdError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
        object.__setattr__(self, "records", recs)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ages(self) -> list[float]:
        return [r.age for r in self.records]


_MANIFEST_FIELDS = ("id", "age", "sex", "project", "t1w", "aicbv")


def save_manifest(m: Manifest, path) -> None:
    rows = [
        {
            "id": r.id,
            "age": r.age,
            "sex": _SEX_LETTERS[r.sex],
            "project": r.project,
            "t1w": r.t1w_path,
            "aicbv": r.aicbv_path,
        }
        for r in m.records
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=2)
        f.write("\n")


def load_manifest(path) -> Manifest:
    with open(path, "r", encoding="utf-8") as f:
        rows = json.load(f)
    if not isinstance(rows, list) or not rows:
        raise EmptyManifestError(f"{path}: manifest must be a nonempty JSON array")
    records = []
    for i, row in enumerate(rows):
        for name in _MANIFEST_FIELDS:
            if name not in row:
                raise MissingFieldError(f"{path}: record {i} missing field {name!r}")
        code = row["sex"]
        if code not in _SEX_CODES:
            raise BadSexCodeError(f"{path}: record {i} has sex {code!r}, expected 'F' or 'M'")
        records.append(
            ScanRecord(
                id=str(row["id"]),
                age=float(row["age"]),
                sex=_SEX_CODES[code],
                project=str(row["project"]),
                t1w_path=str(row["t1w"]),
                aicbv_path=str(row["aicbv"]),
            )
        )
    return Manifest(tuple(records))


def normalize_top_percent(v: Volume, fraction: float = 0.01) -> Volume:
    """Divide every voxel by the mean of the top `fraction` of values.

    k = max(1, ceil(fraction * N)) counts all voxels, background
    included. The divisor is recorded in the volume's meta under
    'norm_divisor'.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    flat = np.sort(v.voxels, axis=None)
    k = max(1, math.ceil(fraction * flat.size))
    divisor = float(np.mean(flat[-k:], dtype=np.float64))
    if divisor <= 0.0:
        raise ZeroDivisorError(f"top-{k} mean is {divisor}, cannot normalize")
    out = Volume(v.voxels / np.float32(divisor), v.affine, v.modality, dict(v.meta))
    out.meta["norm_divisor"] = divisor
    return out


@dataclass(frozen=True)
class PhantomSpec:
    count: int
    grid: int = 32
    seed: int = 0
    sigma_modality: float = 5.0
    sex_offset: float = 2.0
    noise_sigma: float = 0.05
    project_profiles: tuple = (
        ("HARBOR", 8.0, 45.0, 1.0),
        ("MERIDIAN", 20.0, 80.0, 1.0),
        ("LIGHTHOUSE", 50.0, 98.0, 1.0),
    )

    def __post_init__(self):
        if self.count < 1:
            raise DatasetError(f"count must be positive, got {self.count}")
        if self.grid < 2:
            raise DatasetError(f"grid must be at least 2, got {self.grid}")
        for label, lo, hi, w in self.project_profiles:
            if not lo < hi:
                raise DatasetError(f"project {label!r}: age_low {lo} must be < age_high {hi}")
            if w <= 0:
                raise DatasetError(f"project {label!r}: weight must be positive")


# Phantom geometry, in normalized [-1, 1] coordinates (voxel centers).
BRAIN_SEMI_AXES = (0.75, 0.85, 0.70)  # (z, y, x)
TISSUE_INTENSITY = 0.8
VENTRICLE_INTENSITY = 0.1
PERFUSION_BASE = 0.15
PERFUSION_CENTER = (0.35, 0.0, 0.0)  # toward high z: the "lower" part of the head
PERFUSION_WIDTH = 0.22


def ventricle_radius(a_t: float) -> float:
    """Ventricle radius in normalized coordinates for structural latent age a_t."""
    return 0.08 + 0.004 * (a_t - 10.0)


def perfusion_peak(a_a: float) -> float:
    """Peak perfusion intensity for functional latent age a_a."""
    return 0.9 - 0.006 * (a_a - 10.0)


def _grid_coords(edge: int):
    c = (np.arange(edge, dtype=np.float64) + 0.5) / edge * 2.0 - 1.0
    return c[:, None, None], c[None, :, None], c[None, None, :]


def _brain_mask(edge: int) -> np.ndarray:
    cz, cy, cx = _grid_coords(edge)
    az, ay, ax = BRAIN_SEMI_AXES
    return (cz / az) ** 2 + (cy / ay) ** 2 + (cx / ax) ** 2 <= 1.0


def t1w_structure(a_t: float, edge: int) -> np.ndarray:
    """Noise-free structural phantom: brain ellipsoid with an age-grown ventricle."""
    cz, cy, cx = _grid_coords(edge)
    brain = _brain_mask(edge)
    vol = np.where(brain, TISSUE_INTENSITY, 0.0)
    r = max(0.0, ventricle_radius(a_t))
    vent = (cz**2 + cy**2 + cx**2 < r * r) & brain
    vol[vent] = VENTRICLE_INTENSITY
    return vol.astype(np.float32)


def aicbv_structure(a_a: float, edge: int) -> np.ndarray:
    """Noise-free perfusion phantom: brain baseline plus an age-fading blob."""
    cz, cy, cx = _grid_coords(edge)
    brain = _brain_mask(edge)
    bz, by, bx = PERFUSION_CENTER
    d2 = (cz - bz) ** 2 + (cy - by) ** 2 + (cx - bx) ** 2
    blob = np.exp(-d2 / (2.0 * PERFUSION_WIDTH**2))
    vol = np.where(brain, PERFUSION_BASE + (perfusion_peak(a_a) - PERFUSION_BASE) * blob, 0.0)
    return vol.astype(np.float32)


def _phantom_affine(edge: int) -> np.ndarray:
    # world coordinates equal the normalized [-1, 1] grid coordinates
    s = 2.0 / edge
    t = -1.0 + 1.0 / edge
    return np.array(
        [[s, 0, 0, t], [0, s, 0, t], [0, 0, s, t], [0, 0, 0, 1]], dtype=np.float32
    )


def _add_noise(vol: np.ndarray, sigma: float, stream: SplitMix64) -> np.ndarray:
    if sigma > 0:
        noise = stream.gaussians(vol.size).reshape(vol.shape)
        vol = vol + np.float32(sigma) * noise.astype(np.float32)
    return np.maximum(vol, 0.0, dtype=np.float32)


def synth_phantoms(spec: PhantomSpec, out_dir) -> Manifest:
    """Generate `spec.count` phantom pairs under `out_dir`, deterministically.

    Per record, independent SplitMix64 streams (keyed by seed, record
    index, and purpose) draw the project, age, sex, the two latent
    modality ages, and the voxel noise. Volume paths in the returned
    manifest are relative to `out_dir`.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    affine = _phantom_affine(spec.grid)
    weights = np.array([p[3] for p in spec.project_profiles], dtype=np.float64)
    cum = np.cumsum(weights / weights.sum())
    records = []
    for i in range(spec.count):
        meta = SplitMix64(derive_seed(spec.seed, "record", i, "meta"))
        project_idx = int(np.searchsorted(cum, meta.uniform(), side="right"))
        project_idx = min(project_idx, len(spec.project_profiles) - 1)
        label, lo, hi, _ = spec.project_profiles[project_idx]
        age = lo + (hi - lo) * meta.uniform()
        sex = Sex(meta.next_u64() & 1)

        latent = SplitMix64(derive_seed(spec.seed, "record", i, "latent"))
        g = latent.gaussians(2)
        a_t = age + spec.sigma_modality * g[0] + spec.sex_offset * int(sex)
        a_a = age + spec.sigma_modality * g[1]

        rid = f"sub-{i:04d}"
        t1w_name = f"{rid}_t1w.nii"
        aicbv_name = f"{rid}_aicbv.nii"

        t1w = _add_noise(
            t1w_structure(a_t, spec.grid),
            spec.noise_sigma,
            SplitMix64(derive_seed(spec.seed, "record", i, "noise_t1w")),
        )
        aicbv = _add_noise(
            aicbv_structure(a_a, spec.grid),
            spec.noise_sigma,
            SplitMix64(derive_seed(spec.seed, "record", i, "noise_aicbv")),
        )
        write_nifti_file(Volume(t1w, affine, Modality.T1W), os.path.join(out_dir, t1w_name))
        write_nifti_file(Volume(aicbv, affine, Modality.AICBV), os.path.join(out_dir, aicbv_name))
        records.append(
            ScanRecord(
                id=rid,
                age=float(age),
                sex=sex,
                project=label,
                t1w_path=t1w_name,
                aicbv_path=aicbv_name,
            )
        )
    return Manifest(tuple(records))
