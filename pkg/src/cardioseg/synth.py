"""Synthetic multi-disease short-axis phantoms.

Each case is a stack of slices with a circular LV cavity inside a MYO
annulus and a crescent RV wrapped around the septal side. Disease keys
select the distributions the shape parameters are drawn from.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import Case4D, Manifest, ManifestEntry, write_case


class SynthConfigError(ValueError):
    pass


# Radii are in pixels at the basal slice of the ED phase; ranges are [lo, hi].
_BASE_DISEASE = {
    "lv_radius": [3.5, 4.5],
    "myo_thickness": [1.5, 2.0],
    "rv_length": [4.0, 5.5],  # radial extent of the RV crescent from the epicardium
    "rv_width": [1.6, 2.0],  # half-opening angle of the crescent, radians
    "rv_offset": [0.6, 1.0],  # angular position relative to the septum, radians
    "lv_contraction": [0.65, 0.75],
    "rv_contraction": [0.65, 0.75],
    "rv_intensity": None,  # overrides intensity.RV for this disease
    "train_cases": 8,
    "test_cases": 10,
}

DEFAULT_SYNTH_CONFIG = {
    "dataset_name": "synth-acdc",
    "height": 32,
    "width": 32,
    "slices": 3,
    "phases": 4,
    "ed_index": 0,
    "es_index": 2,
    "apex_scale": 0.7,
    "center_jitter": 2.0,
    "noise_sigma": 0.05,
    "intensity": {"background": 0.15, "body": 0.3, "RV": 0.85, "MYO": 0.35, "LV": 0.9},
    "body_radius": [12.0, 14.0],
    "intensity_jitter": 0.0,  # per-case relative jitter of each class mean
    "distractors": [0, 0],  # bright blobs placed in the body, count range
    "distractor_radius": [1.5, 3.0],
    "distractor_intensity": [0.7, 0.9],
    "blur_sigma": 0.0,
    "pixel_spacing_mm": [1.5, 1.5],
    "diseases": {
        "NOR": {},
        "MINF": {"myo_thickness": [1.1, 1.5], "lv_contraction": [0.8, 0.9], "lv_radius": [4.0, 5.0]},
        "DCM": {"lv_radius": [5.0, 6.0], "myo_thickness": [1.1, 1.5], "lv_contraction": [0.85, 0.95]},
        "HCM": {"lv_radius": [2.5, 3.2], "myo_thickness": [2.5, 3.2], "lv_contraction": [0.5, 0.6]},
        "ARV": {"rv_length": [6.0, 7.0], "rv_width": [2.1, 2.5], "rv_contraction": [0.85, 0.95]},
    },
}


def merge_config(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "diseases":
            out[key] = merge_config(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _disease_params(cfg, name):
    return merge_config(_BASE_DISEASE, cfg["diseases"][name])


def validate_synth_config(cfg):
    if len(cfg.get("diseases", {})) < 2:
        raise SynthConfigError("synthetic config needs at least 2 diseases")
    h, w, z, p = cfg["height"], cfg["width"], cfg["slices"], cfg["phases"]
    if min(h, w, z) < 1 or p < 2:
        raise SynthConfigError("height/width/slices must be >= 1 and phases >= 2")
    if not (0 <= cfg["ed_index"] < p and 0 <= cfg["es_index"] < p and cfg["ed_index"] != cfg["es_index"]):
        raise SynthConfigError("ed_index/es_index must be distinct phase indices")
    for name in cfg["diseases"]:
        d = _disease_params(cfg, name)
        outer = d["lv_radius"][1] + d["myo_thickness"][1] + d["rv_length"][1] + cfg["center_jitter"]
        if outer > (min(h, w) - 1) / 2:
            raise SynthConfigError(
                f"grid {h}x{w} too small for disease {name!r} (needs {2 * outer + 1:.1f} px across)"
            )
        if d["train_cases"] < 0 or d["test_cases"] < 0:
            raise SynthConfigError("case counts must be non-negative")


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(rng.uniform(lo, hi))


def _phantom_labels(h, w, cy, cx, lv_r, myo_t, rv_len, rv_half, rv_angle):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.sqrt(dy * dy + dx * dx)
    label = np.zeros((h, w), dtype=np.uint8)
    epi = lv_r + myo_t
    label[r <= epi] = 2
    label[r <= lv_r] = 3
    # crescent: angular sector around the septal direction, radially outside the epicardium
    theta = np.arctan2(dy, dx)
    ang = np.angle(np.exp(1j * (theta - rv_angle)))
    frac = np.clip(1.0 - (ang / rv_half) ** 2, 0.0, None)
    rv_outer = epi + rv_len * np.sqrt(frac)
    rv = (r > epi) & (r <= rv_outer) & (np.abs(ang) < rv_half)
    label[rv] = 1
    return label


def generate_case(cfg, disease, case_id, rng):
    d = _disease_params(cfg, disease)
    h, w, n_slices, n_phases = cfg["height"], cfg["width"], cfg["slices"], cfg["phases"]
    ed, es = cfg["ed_index"], cfg["es_index"]
    jitter = cfg["center_jitter"]
    cy = (h - 1) / 2 + rng.uniform(-jitter, jitter)
    cx = (w - 1) / 2 + rng.uniform(-jitter, jitter)
    lv_r = _uniform(rng, d["lv_radius"])
    myo_t = _uniform(rng, d["myo_thickness"])
    rv_len = _uniform(rng, d["rv_length"])
    rv_half = _uniform(rng, d["rv_width"])
    # RV sits on the image-left side of the LV, rotated by a disease-dependent offset
    rv_angle = np.pi + _uniform(rng, d["rv_offset"]) * rng.choice([-1.0, 1.0])
    lv_c = _uniform(rng, d["lv_contraction"])
    rv_c = _uniform(rng, d["rv_contraction"])
    body_r = _uniform(rng, cfg["body_radius"])
    inten = cfg["intensity"]
    sigma = cfg["noise_sigma"] * (max(inten.values()) - min(inten.values()))

    means = np.array([inten["background"], d["rv_intensity"] or inten["RV"], inten["MYO"], inten["LV"]])
    means = means * (1.0 + cfg["intensity_jitter"] * rng.uniform(-1.0, 1.0, size=4))
    body_level = inten["body"] * (1.0 + cfg["intensity_jitter"] * rng.uniform(-1.0, 1.0))
    blobs = []
    for _ in range(int(rng.integers(cfg["distractors"][0], cfg["distractors"][1], endpoint=True))):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.6, 1.0) * body_r
        blobs.append(
            ((h - 1) / 2 + dist * np.sin(ang), (w - 1) / 2 + dist * np.cos(ang),
             _uniform(rng, cfg["distractor_radius"]), _uniform(rng, cfg["distractor_intensity"]))
        )

    image = np.zeros((n_phases, h, w, n_slices), dtype=np.float32)
    label = np.zeros((n_phases, h, w, n_slices), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    body = np.sqrt((yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2) <= body_r
    for p in range(n_phases):
        # cosine interpolation ED -> ES -> ED across the cardiac cycle
        t = 0.5 - 0.5 * np.cos(2 * np.pi * ((p - ed) % n_phases) / (2 * ((es - ed) % n_phases)))
        t = min(max(t, 0.0), 1.0)
        lv_scale = 1.0 - t * (1.0 - lv_c)
        rv_scale = 1.0 - t * (1.0 - rv_c)
        # myocardium thickens as the cavity contracts
        myo_scale = 1.0 + t * (1.0 - lv_c) * 0.8
        for z in range(n_slices):
            s = cfg["apex_scale"] + (1.0 - cfg["apex_scale"]) * (z / (n_slices - 1) if n_slices > 1 else 1.0)
            lab = _phantom_labels(
                h, w, cy, cx, lv_r * s * lv_scale, myo_t * s * myo_scale, rv_len * s * rv_scale, rv_half, rv_angle
            )
            img = means[lab]
            img = np.where((lab == 0) & body, body_level, img)
            for by, bx, br, bi in blobs:
                blob = ((yy - by) ** 2 + (xx - bx) ** 2 <= (br * s) ** 2) & (lab == 0)
                img = np.where(blob, bi, img)
            if cfg["blur_sigma"] > 0:
                img = ndimage.gaussian_filter(img, cfg["blur_sigma"], mode="nearest")
            img = img + rng.normal(0.0, sigma, size=(h, w))
            image[p, :, :, z] = img
            label[p, :, :, z] = lab
    spacing = tuple(cfg["pixel_spacing_mm"]) if cfg.get("pixel_spacing_mm") else None
    return Case4D(case_id, disease, image, label, ed, es, spacing)


def synth_generate(config, seed, out_dir=None):
    """Generate train and test manifests (and persist cases when ``out_dir`` is given).

    Returns ``{"train": Manifest, "test": Manifest}``; when ``out_dir`` is
    None the cases are returned in memory as ``(manifests, cases)``.
    """
    cfg = merge_config(DEFAULT_SYNTH_CONFIG, {}) if config is None else config
    validate_synth_config(cfg)
    diseases = list(cfg["diseases"])
    ss = np.random.SeedSequence(seed)
    split_seeds = {name: dict(zip(("train", "test"), child.spawn(2))) for name, child in zip(diseases, ss.spawn(len(diseases)))}
    manifests = {}
    cases = {"train": [], "test": []}
    for split in ("train", "test"):
        entries = []
        for name in diseases:
            d = _disease_params(cfg, name)
            rng = np.random.default_rng(split_seeds[name][split])
            for i in range(d[f"{split}_cases"]):
                case_id = f"{split}_{name}_{i:03d}"
                case = generate_case(cfg, name, case_id, rng)
                cases[split].append(case)
                rel = f"{split}/{case_id}"
                if out_dir is not None:
                    write_case(case, Path(out_dir) / rel)
                entries.append(ManifestEntry(case_id, name, rel, case.pixel_spacing))
        manifests[split] = Manifest(cfg["dataset_name"], split, diseases, entries, root=Path(out_dir or "."))
    if out_dir is not None:
        for split, m in manifests.items():
            m.save(Path(out_dir) / f"{split}_manifest.json")
        return manifests
    return manifests, cases
