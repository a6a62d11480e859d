"""Case model, 4D -> 2D restructuring, resizing and the on-disk case format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_CLASSES = {0: "background", 1: "RV", 2: "MYO", 3: "LV"}
FOREGROUND_CLASSES = {1: "RV", 2: "MYO", 3: "LV"}
PHASES = ("ED", "ES")
FORMAT_VERSION = 1


class CaseFormatError(ValueError):
    """Raised when a case directory or manifest fails validation."""


class InvalidCaseError(ValueError):
    pass


class CaseLoadError(IOError):
    def __init__(self, case_id, reason):
        super().__init__(f"failed to load case {case_id!r}: {reason}")
        self.case_id = case_id


@dataclass
class Case4D:
    case_id: str
    disease: str
    image: np.ndarray  # (P, H, W, Z) float32
    label: np.ndarray  # (P, H, W, Z) uint8
    ed_index: int
    es_index: int
    pixel_spacing: tuple[float, float] | None = None

    def validate(self):
        if not self.disease:
            raise InvalidCaseError(f"case {self.case_id}: empty disease key")
        if self.image.ndim != 4:
            raise InvalidCaseError(f"case {self.case_id}: image must be 4D (P,H,W,Z), got {self.image.shape}")
        if self.image.shape != self.label.shape:
            raise InvalidCaseError(
                f"case {self.case_id}: image shape {self.image.shape} != label shape {self.label.shape}"
            )
        n_phases = self.image.shape[0]
        for name, idx in (("ed_index", self.ed_index), ("es_index", self.es_index)):
            if not 0 <= idx < n_phases:
                raise InvalidCaseError(f"case {self.case_id}: {name}={idx} outside [0, {n_phases})")
        if self.ed_index == self.es_index:
            raise InvalidCaseError(f"case {self.case_id}: ed_index equals es_index ({self.ed_index})")
        if self.label.size and int(self.label.max()) > 3:
            raise InvalidCaseError(f"case {self.case_id}: label values outside {{0,1,2,3}}")
        return self

    @property
    def shape(self):
        return tuple(self.image.shape)


@dataclass
class SliceSample:
    case_id: str
    disease: str
    phase: str
    slice_index: int
    image: np.ndarray
    label: np.ndarray


@dataclass
class DiseaseDataset:
    """Stacked 2D samples of one disease.

    Arrays are kept stacked (n, H, W) rather than as a list of
    ``SliceSample`` so batches can be gathered with fancy indexing.
    """

    disease: str | None
    images: np.ndarray
    labels: np.ndarray
    case_ids: list[str] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)
    slice_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.images) == 0:
            raise ValueError(f"dataset for disease {self.disease!r} is empty")

    def __len__(self):
        return len(self.images)

    @property
    def n_samples(self):
        return len(self.images)

    @classmethod
    def from_samples(cls, samples, disease=None):
        samples = list(samples)
        if not samples:
            raise ValueError("cannot build a dataset from zero samples")
        if disease is None:
            disease = samples[0].disease
        if any(s.disease != disease for s in samples):
            raise ValueError(f"samples mix diseases; expected only {disease!r}")
        return cls(
            disease=disease,
            images=np.stack([s.image for s in samples]).astype(np.float32),
            labels=np.stack([s.label for s in samples]).astype(np.uint8),
            case_ids=[s.case_id for s in samples],
            phases=[s.phase for s in samples],
            slice_indices=[s.slice_index for s in samples],
        )

    def samples(self):
        for i in range(len(self)):
            yield SliceSample(
                self.case_ids[i], self.disease, self.phases[i], self.slice_indices[i], self.images[i], self.labels[i]
            )


def pool_datasets(datasets):
    """Concatenate disease datasets (sorted by key) into one pooled dataset."""
    keys = sorted(datasets)
    parts = [datasets[k] for k in keys]
    return DiseaseDataset(
        disease=None,
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        case_ids=[c for p in parts for c in p.case_ids],
        phases=[c for p in parts for c in p.phases],
        slice_indices=[c for p in parts for c in p.slice_indices],
    )


def restructure_case(case):
    """Split a 4D case into its ED and ES slice samples, ED first."""
    case.validate()
    out = []
    n_slices = case.image.shape[3]
    for phase, idx in (("ED", case.ed_index), ("ES", case.es_index)):
        for z in range(n_slices):
            out.append(
                SliceSample(
                    case_id=case.case_id,
                    disease=case.disease,
                    phase=phase,
                    slice_index=z,
                    image=case.image[idx, :, :, z],
                    label=case.label[idx, :, :, z],
                )
            )
    return out


def _axis_plan(src, dst):
    # (source slice, destination slice) along one axis
    if src >= dst:
        start = (src - dst) // 2
        return slice(start, start + dst), slice(0, dst)
    before = (dst - src) // 2
    return slice(0, src), slice(before, before + src)


def resize_array(arr, target_h, target_w):
    """Center crop / symmetric zero pad the last two axes to the target size.

    With an odd margin the extra row/column goes to the bottom/right.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be >= 1")
    h, w = arr.shape[-2:]
    src_r, dst_r = _axis_plan(h, target_h)
    src_c, dst_c = _axis_plan(w, target_w)
    out = np.zeros(arr.shape[:-2] + (target_h, target_w), dtype=arr.dtype)
    out[..., dst_r, dst_c] = arr[..., src_r, src_c]
    return out


def restore_array(arr, orig_h, orig_w):
    """Inverse of :func:`resize_array` for the region that survived resizing."""
    return resize_array(arr, orig_h, orig_w)


def resize_to(sample, target_h, target_w):
    return SliceSample(
        sample.case_id,
        sample.disease,
        sample.phase,
        sample.slice_index,
        resize_array(sample.image, target_h, target_w),
        resize_array(sample.label, target_h, target_w),
    )


def normalize_slices(images, eps=1e-8):
    """Per-slice zero mean / unit variance over the last two axes.

    Constant slices map to all zeros.
    """
    images = np.asarray(images, dtype=np.float32)
    mean = images.mean(axis=(-2, -1), keepdims=True, dtype=np.float64)
    std = images.std(axis=(-2, -1), keepdims=True, dtype=np.float64)
    out = (images - mean) / np.maximum(std, eps)
    return out.astype(np.float32)


# --------------------------------------------------------------------------- io


def _meta_path(path):
    return Path(path) / "meta.json"


def write_case(case, directory):
    case.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "case_id": case.case_id,
        "disease": case.disease,
        "shape": [int(s) for s in case.image.shape],
        "ed_index": int(case.ed_index),
        "es_index": int(case.es_index),
        "dtype_image": "f32le",
        "dtype_label": "u8",
    }
    if case.pixel_spacing is not None:
        meta["pixel_spacing_mm"] = [float(case.pixel_spacing[0]), float(case.pixel_spacing[1])]
    (directory / "image.raw").write_bytes(np.ascontiguousarray(case.image, dtype="<f4").tobytes())
    (directory / "label.raw").write_bytes(np.ascontiguousarray(case.label, dtype="u1").tobytes())
    _meta_path(directory).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def read_case(directory):
    directory = Path(directory)
    meta_file = _meta_path(directory)
    if not meta_file.is_file():
        raise CaseFormatError(f"{directory}: missing meta.json")
    try:
        meta = json.loads(meta_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{meta_file}: malformed header ({exc})") from exc
    if not isinstance(meta, dict):
        raise CaseFormatError(f"{meta_file}: header must be a JSON object")
    if meta.get("format_version") != FORMAT_VERSION:
        raise CaseFormatError(f"{meta_file}: unknown format_version {meta.get('format_version')!r}")
    required = ("case_id", "disease", "shape", "ed_index", "es_index")
    missing = [k for k in required if k not in meta]
    if missing:
        raise CaseFormatError(f"{meta_file}: malformed header, missing {missing}")
    if meta.get("dtype_image", "f32le") != "f32le" or meta.get("dtype_label", "u8") != "u8":
        raise CaseFormatError(f"{meta_file}: unsupported dtypes")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 4 or any(s < 1 for s in shape):
        raise CaseFormatError(f"{meta_file}: shape must be 4 positive ints, got {meta['shape']}")
    n = int(np.prod(shape))
    img_bytes = (directory / "image.raw").read_bytes()
    lab_bytes = (directory / "label.raw").read_bytes()
    if len(img_bytes) != 4 * n:
        raise CaseFormatError(f"{directory}: image.raw has {len(img_bytes)} bytes, header implies {4 * n}")
    if len(lab_bytes) != n:
        raise CaseFormatError(f"{directory}: label.raw has {len(lab_bytes)} bytes, header implies {n}")
    image = np.frombuffer(img_bytes, dtype="<f4").reshape(shape).astype(np.float32)
    label = np.frombuffer(lab_bytes, dtype="u1").reshape(shape).copy()
    if label.max() > 3:
        raise CaseFormatError(f"{directory}: label payload contains values outside {{0,1,2,3}}")
    spacing = meta.get("pixel_spacing_mm")
    case = Case4D(
        case_id=meta["case_id"],
        disease=meta["disease"],
        image=image,
        label=label,
        ed_index=int(meta["ed_index"]),
        es_index=int(meta["es_index"]),
        pixel_spacing=tuple(spacing) if spacing else None,
    )
    try:
        return case.validate()
    except InvalidCaseError as exc:
        raise CaseFormatError(str(exc)) from exc


# --------------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    case_id: str
    disease: str
    path: str
    pixel_spacing: tuple[float, float] | None = None


@dataclass
class Manifest:
    dataset_name: str
    split: str
    diseases: list[str]
    cases: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise CaseFormatError(f"manifest split must be 'train' or 'test', got {self.split!r}")
        if len(set(self.diseases)) != len(self.diseases) or any(not d for d in self.diseases):
            raise CaseFormatError("manifest diseases must be unique non-empty keys")
        known = set(self.diseases)
        for c in self.cases:
            if c.disease not in known:
                raise CaseFormatError(f"case {c.case_id!r} has disease {c.disease!r} not in {sorted(known)}")

    def case_dir(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def to_json(self):
        cases = []
        for c in self.cases:
            d = {"case_id": c.case_id, "disease": c.disease, "path": c.path}
            if c.pixel_spacing is not None:
                d["pixel_spacing_mm"] = list(c.pixel_spacing)
            cases.append(d)
        return {"dataset_name": self.dataset_name, "split": self.split, "diseases": list(self.diseases), "cases": cases}

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path, check_paths=True):
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CaseFormatError(f"cannot read manifest {path}: {exc}") from exc
        for key in ("dataset_name", "split", "diseases", "cases"):
            if key not in raw:
                raise CaseFormatError(f"manifest {path} missing {key!r}")
        entries = [
            ManifestEntry(
                c["case_id"],
                c["disease"],
                c["path"],
                tuple(c["pixel_spacing_mm"]) if c.get("pixel_spacing_mm") else None,
            )
            for c in raw["cases"]
        ]
        m = cls(raw["dataset_name"], raw["split"], list(raw["diseases"]), entries, root=path.parent)
        if check_paths:
            for e in m.cases:
                if not _meta_path(m.case_dir(e)).is_file():
                    raise CaseLoadError(e.case_id, f"path {m.case_dir(e)} does not exist")
        return m


def load_manifest_cases(manifest):
    """Yield (entry, Case4D) pairs; wraps read failures in CaseLoadError."""
    for entry in manifest.cases:
        try:
            case = read_case(manifest.case_dir(entry))
        except (OSError, CaseFormatError) as exc:
            raise CaseLoadError(entry.case_id, exc) from exc
        if case.disease != entry.disease:
            raise CaseLoadError(entry.case_id, f"disease {case.disease!r} disagrees with manifest {entry.disease!r}")
        if entry.pixel_spacing is not None and case.pixel_spacing is None:
            case.pixel_spacing = entry.pixel_spacing
        yield entry, case


def build_disease_datasets(manifest, target_h, target_w, normalize=True):
    """Restructure, resize and group every case of a manifest by disease."""
    grouped = {d: [] for d in manifest.diseases}
    for _, case in load_manifest_cases(manifest):
        for s in restructure_case(case):
            grouped[case.disease].append(resize_to(s, target_h, target_w))
    out = {}
    for disease, samples in grouped.items():
        if not samples:
            raise CaseFormatError(f"disease {disease!r} has no cases in manifest {manifest.dataset_name!r}")
        ds = DiseaseDataset.from_samples(samples, disease)
        if normalize:
            ds.images = normalize_slices(ds.images)
        out[disease] = ds
    return out


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
