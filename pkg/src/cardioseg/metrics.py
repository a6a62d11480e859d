"""Dice and Hausdorff metrics, per-case evaluation and cross-dataset validation."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FOREGROUND_CLASSES, PHASES, load_manifest_cases, normalize_slices, resize_array, restore_array
from .segmenter import file_sha256, load_checkpoint
from .training import read_index

CSV_COLUMNS = ["arm", "run", "dataset", "disease", "phase", "class", "dice", "hd", "n_slices"]
CASE_COLUMNS = ["arm", "run", "dataset", "case_id", "disease", "phase", "class", "dice", "hd", "n_slices", "n_hd_slices"]
AGG_COLUMNS = ["arm", "dataset", "disease", "phase", "class", "dice_mean", "dice_std", "hd_mean", "hd_std", "n_runs"]
ALL = "ALL"


def dice(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


@dataclass
class ContourSet:
    points: np.ndarray  # (n, 2) int (row, col)
    shape: tuple[int, int]

    def __len__(self):
        return len(self.points)

    @property
    def empty(self):
        return len(self.points) == 0


def extract_contour(mask):
    """Foreground pixels with a background 4-neighbour; outside the image counts as background."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    boundary = m & ~interior
    return ContourSet(np.argwhere(boundary), tuple(m.shape))


def _directed_sq(pa, pb, sr, sc):
    dr = (pa[:, 0][:, None] - pb[:, 0][None, :]) * sr
    dc = (pa[:, 1][:, None] - pb[:, 1][None, :]) * sc
    return (dr * dr + dc * dc).min(axis=1).max()


def hausdorff(ca, cb, spacing=(1.0, 1.0)):
    """Symmetric Hausdorff distance between two contour sets, in spacing units.

    One empty contour scores the image diagonal; two empty contours score 0.
    """
    sr, sc = (float(spacing), float(spacing)) if np.isscalar(spacing) else (float(spacing[0]), float(spacing[1]))
    if sr <= 0 or sc <= 0:
        raise ValueError("pixel spacing must be positive")
    if ca.empty and cb.empty:
        return 0.0
    if ca.empty or cb.empty:
        h, w = ca.shape
        return math.sqrt((h * sr) * (h * sr) + (w * sc) * (w * sc))
    pa = ca.points.astype(np.int64)
    pb = cb.points.astype(np.int64)
    return math.sqrt(max(_directed_sq(pa, pb, sr, sc), _directed_sq(pb, pa, sr, sc)))


def hausdorff_masks(a, b, spacing=(1.0, 1.0)):
    return hausdorff(extract_contour(a), extract_contour(b), spacing)


# -------------------------------------------------------------------- tables


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def _std(xs):
    # sample std; a single value has no spread
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


@dataclass
class MetricsTable:
    """Per-case metric rows plus derived per-run and across-run aggregates."""

    case_rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def extend(self, other):
        self.case_rows.extend(other.case_rows)
        self.failures.extend(other.failures)
        return self

    @property
    def complete(self):
        return not self.failures

    def rows(self, include_all=True):
        """One row per (arm, run, dataset, disease, phase, class): means over cases."""
        groups = defaultdict(list)
        for r in self.case_rows:
            key = (r["arm"], r["run"], r["dataset"], r["disease"], r["phase"], r["class"])
            groups[key].append(r)
            if include_all:
                groups[key[:3] + (ALL,) + key[4:]].append(r)
        out = []
        for key in sorted(groups, key=_sort_key):
            rs = groups[key]
            out.append(dict(zip(CSV_COLUMNS[:6], key)) | {
                "dice": _mean([r["dice"] for r in rs]),
                "hd": _mean([r["hd"] for r in rs]),
                "dice_std": _std([r["dice"] for r in rs]),
                "hd_std": _std([r["hd"] for r in rs]),
                "n_slices": int(sum(r["n_slices"] for r in rs)),
                "n_cases": len(rs),
            })
        return out

    def aggregate(self):
        """Across-run mean and sample std of the per-run means."""
        groups = defaultdict(list)
        for r in self.rows():
            groups[(r["arm"], r["dataset"], r["disease"], r["phase"], r["class"])].append(r)
        out = []
        for key in sorted(groups, key=_sort_key):
            rs = groups[key]
            out.append(dict(zip(AGG_COLUMNS[:5], key)) | {
                "dice_mean": _mean([r["dice"] for r in rs]),
                "dice_std": _std([r["dice"] for r in rs]),
                "hd_mean": _mean([r["hd"] for r in rs]),
                "hd_std": _std([r["hd"] for r in rs]),
                "n_runs": len(rs),
            })
        return out

    def to_csv(self, path):
        _write_csv(path, CSV_COLUMNS, self.rows())

    def cases_to_csv(self, path):
        _write_csv(path, CASE_COLUMNS, self.case_rows)

    def aggregate_to_csv(self, path):
        _write_csv(path, AGG_COLUMNS, self.aggregate())

    def save(self, out_dir, prefix="metrics"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "table": out_dir / f"{prefix}.csv",
            "cases": out_dir / f"{prefix}_cases.csv",
            "aggregate": out_dir / f"{prefix}_aggregate.csv",
        }
        self.to_csv(paths["table"])
        self.cases_to_csv(paths["cases"])
        self.aggregate_to_csv(paths["aggregate"])
        return paths

    @classmethod
    def from_cases_csv(cls, path):
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                r["run"] = int(r["run"])
                r["class"] = r["class"]
                for k in ("dice", "hd"):
                    r[k] = float(r[k])
                for k in ("n_slices", "n_hd_slices"):
                    r[k] = int(r[k])
                rows.append(r)
        return cls(rows)


_PHASE_ORDER = {p: i for i, p in enumerate(PHASES)}
_CLASS_ORDER = {name: i for i, name in enumerate(FOREGROUND_CLASSES.values())}


def _sort_key(key):
    # phase and class in canonical order, the ALL disease first
    out = []
    for k in key:
        if k in _PHASE_ORDER:
            out.append((_PHASE_ORDER[k], ""))
        elif k in _CLASS_ORDER:
            out.append((_CLASS_ORDER[k], ""))
        elif k == ALL:
            out.append((-1, ""))
        else:
            out.append((0, k) if isinstance(k, str) else (k, ""))
    return tuple(out)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


# ---------------------------------------------------------------- evaluation


def slice_metrics(pred, gt, spacing=(1.0, 1.0)):
    """{class name: (dice, hd or None)} for one 2D slice; hd is None when both masks are empty."""
    out = {}
    for cls_id, name in FOREGROUND_CLASSES.items():
        a, b = pred == cls_id, gt == cls_id
        hd = None if not a.any() and not b.any() else hausdorff_masks(a, b, spacing)
        out[name] = (dice(a, b), hd)
    return out


def _predict_volume(model, vol, input_size, normalize):
    # vol is (H, W, Z); predict each slice in the model frame and map back
    h, w = vol.shape[:2]
    slices = np.moveaxis(vol, -1, 0)
    if input_size is not None:
        slices = resize_array(slices, *input_size)
    if normalize:
        slices = normalize_slices(slices)
    pred = np.asarray(model.predict(slices))
    if input_size is not None:
        pred = restore_array(pred, h, w)
    return pred


def evaluate(model, test_manifest, arm_tag, run=0, normalize=True, input_size="auto", default_spacing=(1.0, 1.0)):
    """Per-case Dice/HD for every (disease, phase, class) of a test manifest.

    ``model`` needs a ``predict(images) -> labels`` method; with
    ``input_size="auto"`` its ``input_size`` attribute (if any) decides
    the resize applied before prediction.
    """
    if not test_manifest.cases:
        raise ValueError("empty test set")
    if input_size == "auto":
        input_size = getattr(model, "input_size", None)
    table = MetricsTable()
    for entry, case in load_manifest_cases(test_manifest):
        spacing = case.pixel_spacing or default_spacing
        for phase, idx in (("ED", case.ed_index), ("ES", case.es_index)):
            gt = np.moveaxis(case.label[idx], -1, 0)
            pred = _predict_volume(model, case.image[idx], input_size, normalize)
            per_class = defaultdict(lambda: ([], []))
            for z in range(gt.shape[0]):
                for name, (d, hd) in slice_metrics(pred[z], gt[z], spacing).items():
                    per_class[name][0].append(d)
                    if hd is not None:
                        per_class[name][1].append(hd)
            for name in FOREGROUND_CLASSES.values():
                dices, hds = per_class[name]
                table.case_rows.append({
                    "arm": arm_tag,
                    "run": int(run),
                    "dataset": test_manifest.dataset_name,
                    "case_id": case.case_id,
                    "disease": case.disease,
                    "phase": phase,
                    "class": name,
                    "dice": float(np.mean(dices)),
                    "hd": float(np.mean(hds)) if hds else 0.0,
                    "n_slices": len(dices),
                    "n_hd_slices": len(hds),
                })
    return table


def cross_validate(runset_dir, test_manifest, normalize=True):
    """Evaluate every completed run of a run set on another dataset, without retraining."""
    runset_dir = Path(runset_dir)
    index = read_index(runset_dir)
    table = MetricsTable()
    for entry in index["runs"]:
        if entry["status"] != "complete":
            table.failures.append({"arm": entry["arm"], "seed": entry["seed"], "error": "run not complete"})
            continue
        ckpt = runset_dir / entry["checkpoint"]
        try:
            before = file_sha256(ckpt)
            model = load_checkpoint(ckpt)
            part = evaluate(model, test_manifest, entry["arm"], run=entry["run"], normalize=normalize)
            if file_sha256(ckpt) != before:
                raise RuntimeError(f"checkpoint {ckpt} changed during evaluation")
        except (OSError, ValueError) as exc:
            table.failures.append({"arm": entry["arm"], "seed": entry["seed"], "error": str(exc)})
            continue
        table.extend(part)
    return table
