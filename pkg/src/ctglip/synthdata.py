"""Synthetic CT-like phantoms: volumes, organ label maps and templated reports.

Each subject is a pure function of ``(spec.master_seed, index)``.  Organs are
non-overlapping axis-aligned ellipsoids whose mean intensity encodes organ
identity; abnormal organs carry an additive high-frequency checkerboard
whose periods are derived from the abnormality name.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .reportproc import DEFAULT_NEGATIONS, OrganLexicon, mentions

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

BACKGROUND_MAX = 0.02
TEXTURE_AMPLITUDE = 0.1
INTENSITY_LOW = 0.3
INTENSITY_HIGH = 0.85
MAX_PLACEMENT_ATTEMPTS = 500


class PlacementError(RuntimeError):
    """Raised when the volume is too small to place every organ."""


class CohortConfigError(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + GOLDEN_GAMMA) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix_seed(*values: int) -> int:
    """Fold integers into one 64-bit seed with the splitmix64 finalizer."""
    h = 0
    for v in values:
        h = splitmix64(h ^ (int(v) & MASK64))
    return h


@dataclass(frozen=True)
class OrganSpec:
    id: int
    name: str
    synonyms: tuple[str, ...] = ()
    abnormalities: tuple[str, ...] = ()

    def all_names(self) -> tuple[str, ...]:
        names = [self.name]
        names.extend(s for s in self.synonyms if s != self.name)
        return tuple(names)


@dataclass(frozen=True)
class CohortSpec:
    n_subjects: int
    organs: tuple[OrganSpec, ...]
    abnormality_rate: float = 0.3
    shape: tuple[int, int, int] = (24, 24, 24)
    master_seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    radius_fraction: tuple[float, float] = (0.10, 0.16)
    intensity_margin: float = 0.05
    mention_normal_rate: float = 0.5

    def __post_init__(self):
        if self.n_subjects < 0:
            raise CohortConfigError("n_subjects must be non-negative")
        if not 0.0 <= self.abnormality_rate <= 1.0:
            raise CohortConfigError(f"abnormality_rate must lie in [0, 1], got {self.abnormality_rate}")
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise CohortConfigError(f"shape must be 3 positive integers, got {self.shape}")
        ids = [o.id for o in self.organs]
        if len(set(ids)) != len(ids):
            raise CohortConfigError("organ ids must be unique")
        if any(i <= 0 for i in ids):
            raise CohortConfigError("organ ids must be positive (0 is background)")
        lo, hi = self.radius_fraction
        if not 0 < lo <= hi:
            raise CohortConfigError("radius_fraction must satisfy 0 < min <= max")
        for organ in self.organs:
            others = [n for o in self.organs if o.id != organ.id for n in o.all_names()]
            for abn in organ.abnormalities:
                if any(mentions(abn, n) for n in others):
                    raise CohortConfigError(f"abnormality {abn!r} of {organ.name} mentions another organ")
                if any(mentions(abn, neg) for neg in DEFAULT_NEGATIONS):
                    raise CohortConfigError(f"abnormality {abn!r} matches a negation pattern")
        if len(self.organs) > 1:
            step = (INTENSITY_HIGH - INTENSITY_LOW) / (len(self.organs) - 1)
            if step < self.intensity_margin:
                raise CohortConfigError(
                    f"{len(self.organs)} organs cannot be separated by intensity margin {self.intensity_margin}"
                )

    def lexicon(self) -> OrganLexicon:
        return OrganLexicon({o.id: (o.name, o.all_names()) for o in self.organs})

    def organ_intensity(self) -> dict[int, float]:
        ordered = sorted(o.id for o in self.organs)
        if len(ordered) == 1:
            return {ordered[0]: 0.5}
        step = (INTENSITY_HIGH - INTENSITY_LOW) / (len(ordered) - 1)
        return {oid: INTENSITY_LOW + k * step for k, oid in enumerate(ordered)}


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValueError("volume must be 3D")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume has non-finite intensities")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class OrganMask:
    labels: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def organ_ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]


@dataclass
class GroundTruth:
    present: list[int] = field(default_factory=list)
    abnormal: dict[int, str] = field(default_factory=dict)
    intensity: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "present": list(self.present),
            "abnormal": {str(k): v for k, v in sorted(self.abnormal.items())},
            "intensity": {str(k): round(v, 6) for k, v in sorted(self.intensity.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GroundTruth":
        return cls(
            present=[int(i) for i in doc.get("present", [])],
            abnormal={int(k): v for k, v in doc.get("abnormal", {}).items()},
            intensity={int(k): float(v) for k, v in doc.get("intensity", {}).items()},
        )


@dataclass
class Subject:
    volume: Volume
    mask: OrganMask
    truth: GroundTruth
    report: str


def describe_abnormality(abnormality: str, organ: OrganSpec | str) -> str:
    """Phrase an abnormality for one organ, e.g. ``fatty liver in liver``.

    The organ name is appended only when the abnormality does not already
    mention one of the organ's names.
    """
    names = organ.all_names() if isinstance(organ, OrganSpec) else (organ,)
    organ_name = names[0]
    if any(mentions(abnormality, n) for n in names):
        return abnormality
    return f"{abnormality} in {organ_name}"


def texture_periods(abnormality: str) -> tuple[int, int, int]:
    digest = hashlib.sha256(abnormality.encode("utf-8")).digest()
    periods = tuple(1 + (digest[i] % 2) for i in range(3))
    if periods == (2, 2, 2):
        periods = (1, 2, 2)
    return periods


def checkerboard(shape: Sequence[int], periods: Sequence[int]) -> np.ndarray:
    z, y, x = np.indices(shape)
    parity = z // periods[0] + y // periods[1] + x // periods[2]
    return np.where(parity % 2 == 0, 1.0, -1.0)


def _place_ellipsoid(labels: np.ndarray, grid, radii, rng) -> np.ndarray | None:
    shape = labels.shape
    lo = [r for r in radii]
    hi = [s - 1 - r for s, r in zip(shape, radii)]
    if any(h < l for l, h in zip(lo, hi)):
        return None
    center = [rng.uniform(l, h) for l, h in zip(lo, hi)]
    z, y, x = grid
    inside = (
        ((z - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((x - center[2]) / radii[2]) ** 2
    ) <= 1.0
    if not inside.any() or labels[inside].any():
        return None
    return inside


def generate_subject(spec: CohortSpec, index: int) -> Subject:
    if not 0 <= index < spec.n_subjects:
        raise IndexError(f"subject index {index} outside [0, {spec.n_subjects})")
    rng = np.random.default_rng(mix_seed(spec.master_seed, index))
    shape = tuple(int(s) for s in spec.shape)

    voxels = rng.uniform(0.0, BACKGROUND_MAX, size=shape)
    labels = np.zeros(shape, dtype=np.uint16)
    truth = GroundTruth()
    codes = spec.organ_intensity()
    grid = np.indices(shape, dtype=np.float64)
    min_dim = min(shape)

    sentences = []
    for organ in sorted(spec.organs, key=lambda o: o.id):
        region = None
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            radii = rng.uniform(spec.radius_fraction[0], spec.radius_fraction[1], size=3) * min_dim
            radii = np.maximum(radii, 1.0)
            region = _place_ellipsoid(labels, grid, radii, rng)
            if region is not None:
                break
        if region is None:
            raise PlacementError(
                f"could not place organ {organ.id} ({organ.name}) in volume of shape {shape}"
            )
        labels[region] = organ.id
        code = codes[organ.id]
        voxels[region] = code + rng.uniform(0.0, BACKGROUND_MAX, size=int(region.sum()))
        truth.present.append(organ.id)
        truth.intensity[organ.id] = code

        abnormal = organ.abnormalities and rng.random() < spec.abnormality_rate
        if abnormal:
            name = organ.abnormalities[int(rng.integers(len(organ.abnormalities)))]
            pattern = checkerboard(shape, texture_periods(name))
            voxels[region] += TEXTURE_AMPLITUDE * pattern[region]
            truth.abnormal[organ.id] = name
            text = describe_abnormality(name, organ)
            sentences.append(text + ".")
        elif rng.random() < spec.mention_normal_rate:
            if rng.random() < 0.5:
                sentences.append(f"{organ.name.capitalize()} is unremarkable.")
            else:
                sentences.append(f"No evident abnormality in {organ.name}.")

    voxels = np.clip(voxels, 0.0, 1.0).astype(np.float32)
    return Subject(
        volume=Volume(voxels, tuple(float(s) for s in spec.spacing)),
        mask=OrganMask(labels),
        truth=truth,
        report=" ".join(sentences),
    )


# -- file formats -------------------------------------------------------------

def _write_array(path: Path, array: np.ndarray, dtype: str, spacing) -> Path:
    """Raw little-endian array plus a JSON header sidecar (x fastest)."""
    np_dtype = {"f32": "<f4", "u16": "<u2"}[dtype]
    raw = path.with_suffix(".raw")
    header = {
        "dims": [int(d) for d in array.shape[::-1]],
        "spacing": [float(s) for s in spacing[::-1]],
        "dtype": dtype,
        "byte_order": "little",
        "data_file": raw.name,
    }
    raw.write_bytes(np.ascontiguousarray(array, dtype=np_dtype).tobytes(order="C"))
    path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    return path


def read_array(header_path: str | os.PathLike) -> tuple[np.ndarray, tuple[float, float, float]]:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text())
    if header.get("byte_order") != "little":
        raise ValueError(f"{header_path}: unsupported byte order {header.get('byte_order')!r}")
    np_dtype = {"f32": "<f4", "u16": "<u2"}.get(header.get("dtype"))
    if np_dtype is None:
        raise ValueError(f"{header_path}: unsupported dtype {header.get('dtype')!r}")
    nx, ny, nz = header["dims"]
    data = np.frombuffer((header_path.parent / header["data_file"]).read_bytes(), dtype=np_dtype)
    if data.size != nx * ny * nz:
        raise ValueError(f"{header_path}: expected {nx * ny * nz} voxels, found {data.size}")
    sx, sy, sz = header["spacing"]
    return data.reshape(nz, ny, nx).copy(), (sz, sy, sx)


def write_volume(path, volume: Volume) -> Path:
    return _write_array(Path(path), volume.voxels, "f32", volume.spacing)


def write_mask(path, mask: OrganMask, spacing=(1.0, 1.0, 1.0)) -> Path:
    return _write_array(Path(path), mask.labels, "u16", spacing)


def read_volume(path) -> Volume:
    voxels, spacing = read_array(path)
    return Volume(voxels.astype(np.float32), spacing)


def read_mask(path) -> OrganMask:
    labels, _ = read_array(path)
    return OrganMask(labels.astype(np.int64))


@dataclass
class ManifestRecord:
    subject_id: str
    volume_path: str
    mask_path: str
    report_path: str
    ground_truth: GroundTruth

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "volume_path": self.volume_path,
            "mask_path": self.mask_path,
            "report_path": self.report_path,
            "ground_truth": self.ground_truth.to_json(),
        }


@dataclass
class Manifest:
    path: Path
    records: list[ManifestRecord]

    def __len__(self):
        return len(self.records)

    def resolve(self, relative: str) -> Path:
        return self.path.parent / relative

    def load_subject(self, i: int) -> Subject:
        rec = self.records[i]
        return Subject(
            volume=read_volume(self.resolve(rec.volume_path)),
            mask=read_mask(self.resolve(rec.mask_path)),
            truth=rec.ground_truth,
            report=self.resolve(rec.report_path).read_text(encoding="utf-8"),
        )


def write_subject(out_dir: Path, subject_id: str, subject: Subject) -> ManifestRecord:
    out_dir = Path(out_dir)
    vol = write_volume(out_dir / f"{subject_id}.vol.json", subject.volume)
    msk = write_mask(out_dir / f"{subject_id}.mask.json", subject.mask, subject.volume.spacing)
    rep = out_dir / f"{subject_id}.report.txt"
    rep.write_text(subject.report + "\n", encoding="utf-8")
    return ManifestRecord(subject_id, vol.name, msk.name, rep.name, subject.truth)


def write_manifest(path: Path, records: Iterable[ManifestRecord]) -> Path:
    path = Path(path)
    lines = [json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records]
    path.write_text("".join(lines), encoding="utf-8")
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            records.append(
                ManifestRecord(
                    subject_id=doc["subject_id"],
                    volume_path=doc["volume_path"],
                    mask_path=doc["mask_path"],
                    report_path=doc["report_path"],
                    ground_truth=GroundTruth.from_json(doc["ground_truth"]),
                )
            )
        except (KeyError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
    return Manifest(path, records)


def _generate_one(args) -> ManifestRecord:
    spec, index, out_dir = args
    subject = generate_subject(spec, index)
    return write_subject(out_dir, f"subject_{index:05d}", subject)


def generate_cohort(spec: CohortSpec, out_dir, workers: int = 1) -> Manifest:
    """Write every subject of ``spec`` plus ``manifest.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, i, out_dir) for i in range(spec.n_subjects)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_generate_one, jobs))
    else:
        records = [_generate_one(job) for job in jobs]
    manifest_path = write_manifest(out_dir / "manifest.jsonl", records)
    return Manifest(manifest_path, records)
