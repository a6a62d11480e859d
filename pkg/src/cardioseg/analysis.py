"""Lambda sweeps, weight-norm probes and report assembly over run sets."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import MaskSpec
from .metrics import ALL, MetricsTable, _write_csv, evaluate
from .training import RunHistory, arm_tag, parse_arm, read_index, train

log = logging.getLogger(__name__)

DIAGONAL = ("nts+ctd", "mts+itd")
ABLATIONS = (
    ("nts+ctd", "mts+ctd"),
    ("nts+itd", "mts+itd"),
    ("nts+ctd", "nts+itd"),
    ("mts+ctd", "mts+itd"),
)
FG = ("RV", "MYO", "LV")


def pair_label(a, b):
    return f"{a.upper()} vs {b.upper()}"


@dataclass
class SweepSpec:
    kind: str = "ideal"
    lambdas: list = field(default_factory=lambda: [0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5])
    arm: str = "mts+itd"
    runs: int = 1

    def validate(self):
        if not self.lambdas:
            raise ValueError("sweep needs at least one lambda")
        for lam in self.lambdas:
            if not 0.0 < lam < 1.0:
                raise ValueError(f"sweep lambda {lam} outside (0, 1)")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ValueError("sweep lambdas must be strictly increasing")
        if self.runs < 1:
            raise ValueError("runs per lambda must be >= 1")
        MaskSpec(self.kind, self.lambdas[0])
        _, key = parse_arm(self.arm)
        if not key:
            raise ValueError(f"sweep arm {self.arm!r} does not mask its inputs; use an ITD arm")
        return self


def class_averaged(rows):
    """Mean over RV/MYO/LV of each class's mean over runs and phases (ALL-disease rows)."""
    per_class = defaultdict(lambda: ([], []))
    for r in rows:
        if r["disease"] == ALL and r["class"] in FG:
            per_class[r["class"]][0].append(r["dice"])
            per_class[r["class"]][1].append(r["hd"])
    if not per_class:
        return float("nan"), float("nan")
    dice = float(np.mean([np.mean(per_class[c][0]) for c in FG if c in per_class]))
    hd = float(np.mean([np.mean(per_class[c][1]) for c in FG if c in per_class]))
    return dice, hd


def sweep_lambda(spec, base_cfg, datasets, test_manifest, out_dir, normalize=True):
    """Train ``spec.runs`` models per lambda, evaluate them, and write ``sweep.csv``."""
    spec.validate()
    out_dir = Path(out_dir)
    strategy, key = parse_arm(spec.arm)
    rows = []
    n_models = 0
    for lam in spec.lambdas:
        cfg = base_cfg.with_arm(strategy, key)
        cfg.mask = MaskSpec(spec.kind, float(lam), base_cfg.mask.paper_literal_center_range if base_cfg.mask else False)
        table = MetricsTable()
        failed = 0
        for r in range(spec.runs):
            cfg.seed = base_cfg.seed + r
            try:
                model, _ = train(datasets, cfg)
            except Exception as exc:  # recorded per lambda, sweep continues
                log.error("sweep lambda=%s run %d failed: %s", lam, r, exc)
                failed += 1
                continue
            n_models += 1
            table.extend(evaluate(model, test_manifest, arm_tag(strategy, key), run=r, normalize=normalize))
        lam_dir = out_dir / f"lambda_{lam:g}"
        table.save(lam_dir)
        dice, hd = class_averaged(table.rows())
        rows.append({
            "mask_kind": spec.kind,
            "lambda": float(lam),
            "mean_dice_avg": dice,
            "mean_hd_avg": hd,
            "n_runs": spec.runs - failed,
            "n_failed": failed,
        })
    path = out_dir / "sweep.csv"
    _write_csv(path, ["mask_kind", "lambda", "mean_dice_avg", "mean_hd_avg", "n_runs", "n_failed"], rows)
    return path, rows, n_models


# ------------------------------------------------------------------ L1 probe


def _complete_histories(runset_dir):
    runset_dir = Path(runset_dir)
    index = read_index(runset_dir)
    out = []
    for entry in index["runs"]:
        if entry["status"] != "complete":
            continue
        path = runset_dir / entry["history"]
        if not path.is_file():
            log.warning("history %s missing; skipping run %s seed %s", path, entry["arm"], entry["seed"])
            continue
        out.append((entry, RunHistory.load(path)))
    return out


def l1_curve_rows(runset_dirs):
    rows = []
    for rs in runset_dirs:
        for entry, hist in _complete_histories(rs):
            for epoch, value in enumerate(hist.l1_norm):
                rows.append({
                    "arm": entry["arm"], "run": entry["run"], "seed": entry["seed"],
                    "epoch": epoch + 1, "l1_norm": float(value),
                })
    rows.sort(key=lambda r: (r["arm"], r["seed"], r["epoch"]))
    return rows


def l1_summary(curve_rows):
    """Final-epoch L1 means of ITD vs CTD per strategy, with seed-paired counts."""
    final = {}
    for r in curve_rows:
        k = (r["arm"], r["seed"])
        if k not in final or r["epoch"] > final[k][0]:
            final[k] = (r["epoch"], r["l1_norm"])
    out = []
    for strategy in ("nts", "mts"):
        ctd = {s: v for (a, s), (_, v) in final.items() if a == f"{strategy}+ctd"}
        itd = {s: v for (a, s), (_, v) in final.items() if a == f"{strategy}+itd"}
        if not ctd or not itd:
            continue
        paired = sorted(set(ctd) & set(itd))
        out.append({
            "strategy": strategy.upper(),
            "ctd_final_mean": float(np.mean(list(ctd.values()))),
            "itd_final_mean": float(np.mean(list(itd.values()))),
            "itd_minus_ctd": float(np.mean(list(itd.values())) - np.mean(list(ctd.values()))),
            "n_pairs": len(paired),
            "pairs_itd_greater": sum(1 for s in paired if itd[s] > ctd[s]),
        })
    return out


def probe_l1(runset_dir, out_dir):
    dirs = [runset_dir] if isinstance(runset_dir, (str, Path)) else list(runset_dir)
    curves = l1_curve_rows(dirs)
    if not curves:
        raise ValueError(f"no completed runs with histories in {dirs}")
    out_dir = Path(out_dir)
    curve_path = out_dir / "l1_curves.csv"
    summary_path = out_dir / "l1_summary.csv"
    _write_csv(curve_path, ["arm", "run", "seed", "epoch", "l1_norm"], curves)
    summary = l1_summary(curves)
    _write_csv(
        summary_path,
        ["strategy", "ctd_final_mean", "itd_final_mean", "itd_minus_ctd", "n_pairs", "pairs_itd_greater"],
        summary,
    )
    return curve_path, summary_path, summary


# -------------------------------------------------------------------- report

COMPARE_COLUMNS = [
    "comparison", "dataset", "disease", "phase", "class", "metric",
    "a_arm", "a_mean", "a_std", "b_arm", "b_mean", "b_std", "b_minus_a", "a_runs", "b_runs",
]


def load_eval_tables(runset_dir):
    """All metric tables written by ``eval``/``crossval`` under ``<runset>/eval/*``."""
    table = MetricsTable()
    for path in sorted(Path(runset_dir).glob("eval/*/metrics_cases.csv")):
        table.extend(MetricsTable.from_cases_csv(path))
    return table


def compare(aggregate_rows, arm_a, arm_b):
    by_key = defaultdict(dict)
    for r in aggregate_rows:
        by_key[(r["dataset"], r["disease"], r["phase"], r["class"])][r["arm"]] = r
    label = pair_label(arm_a, arm_b)
    out = []
    for key, arms in by_key.items():
        if arm_a not in arms or arm_b not in arms:
            continue
        a, b = arms[arm_a], arms[arm_b]
        for metric in ("dice", "hd"):
            out.append(dict(zip(("dataset", "disease", "phase", "class"), key)) | {
                "comparison": label,
                "metric": metric,
                "a_arm": arm_a, "a_mean": a[f"{metric}_mean"], "a_std": a[f"{metric}_std"],
                "b_arm": arm_b, "b_mean": b[f"{metric}_mean"], "b_std": b[f"{metric}_std"],
                "b_minus_a": b[f"{metric}_mean"] - a[f"{metric}_mean"],
                "a_runs": a["n_runs"], "b_runs": b["n_runs"],
            })
    return out


def report(runset_dirs, out_dir):
    """Write diagonal/ablation tables, box-plot data and L1 curves; never modifies the run sets."""
    runset_dirs = [Path(p) for p in runset_dirs]
    if not runset_dirs:
        raise ValueError("report needs at least one run set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = MetricsTable()
    partial = False
    run_counts = defaultdict(int)
    for rs in runset_dirs:
        index = read_index(rs)
        partial |= index["status"] != "complete"
        for e in index["runs"]:
            if e["status"] == "complete":
                run_counts[e["arm"]] += 1
        table.extend(load_eval_tables(rs))
    if not table.case_rows:
        raise ValueError("no evaluation results found; run `eval` on the run set(s) first")

    agg = table.aggregate()
    artifacts = {}
    missing = []
    diag = compare(agg, *DIAGONAL)
    if not diag:
        missing.append(pair_label(*DIAGONAL))
    path = out_dir / "diagonal.csv"
    _write_csv(path, COMPARE_COLUMNS, diag)
    artifacts["diagonal"] = {"file": path.name, "comparison": pair_label(*DIAGONAL), "rows": len(diag)}
    ablations = []
    for i, (a, b) in enumerate(ABLATIONS, start=1):
        rows = compare(agg, a, b)
        if not rows:
            missing.append(pair_label(a, b))
        path = out_dir / f"ablation_{i}.csv"
        _write_csv(path, COMPARE_COLUMNS, rows)
        ablations.append({"file": path.name, "comparison": pair_label(a, b), "rows": len(rows)})
    artifacts["ablations"] = ablations

    box = [r for r in table.rows()]
    path = out_dir / "boxplot_data.csv"
    _write_csv(path, ["arm", "run", "dataset", "disease", "phase", "class", "dice", "hd"], box)
    artifacts["boxplot"] = {"file": path.name, "rows": len(box)}

    curves = l1_curve_rows(runset_dirs)
    path = out_dir / "l1_curves.csv"
    _write_csv(path, ["arm", "run", "seed", "epoch", "l1_norm"], curves)
    artifacts["l1_curves"] = {"file": path.name, "rows": len(curves)}
    summary = l1_summary(curves)
    path = out_dir / "l1_summary.csv"
    _write_csv(
        path,
        ["strategy", "ctd_final_mean", "itd_final_mean", "itd_minus_ctd", "n_pairs", "pairs_itd_greater"],
        summary,
    )
    artifacts["l1_summary"] = {"file": path.name, "rows": len(summary)}

    manifest = {
        "partial": bool(partial or missing or table.failures),
        "missing_comparisons": missing,
        "runsets": [str(p) for p in runset_dirs],
        "runs_per_arm": dict(sorted(run_counts.items())),
        "artifacts": artifacts,
        "conventions": {
            "dice_both_empty": 1.0,
            "hd_one_empty": "image diagonal",
            "hd_both_empty": "slice excluded from the HD average",
            "metric_dimensionality": "2D per slice, averaged to per case",
            "std": "sample std (ddof=1) across runs; 0 for a single run",
        },
    }
    (out_dir / "report_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
