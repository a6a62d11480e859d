"""Run configuration: one JSON document with data/model/train/mask/optim/eval sections."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .synth import DEFAULT_SYNTH_CONFIG

DEFAULT_CONFIG = {
    "data": {
        "target_size": [32, 32],
        "normalize": True,
        "train_manifest": None,
        "test_manifest": None,
        "synth": DEFAULT_SYNTH_CONFIG,
    },
    "model": {"depth": 3, "base_channels": 16, "attention": False, "attention_heads": 1},
    "train": {"strategy": "mts", "key": False, "epochs": 8, "batch_size": 8, "seed": 0, "runs": 5},
    "mask": {"kind": "ideal", "lambda": 0.25, "paper_literal_center_range": False},
    "optim": {"lr": 0.001, "betas": [0.9, 0.999], "eps": 1e-8},
    "eval": {"default_spacing_mm": [1.0, 1.0]},
    "sweep": {"kind": "ideal", "lambdas": [0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5], "arm": "mts+itd", "runs": 1},
}

SECTIONS = tuple(DEFAULT_CONFIG)


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        # synthetic disease tables are replaced wholesale, not merged
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "diseases":
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config section(s) {sorted(unknown)}; expected {list(SECTIONS)}")
        cfg = deep_merge(cfg, raw)
    return deep_merge(cfg, overrides or {})


def set_dotted(cfg, dotted, value):
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value
    return cfg


def dump_config(cfg, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
