"""Training loops for the pooled (NTS) and multi-disease (MTS) strategies.

Both loops take one optimizer step per schedule step. Under MTS the step
loss is the sum over diseases of each disease's sub-batch mean loss.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import atomic_write_text, pool_datasets
from .masks import DEFAULT_LAMBDA, MaskSpec, mask_batch
from .sampler import mts_epoch_schedule, nts_epoch_schedule
from .segmenter import (
    Adam,
    ModelConfig,
    backward_and_step,
    cross_entropy_loss,
    forward,
    init_model,
    l1_norm,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STRATEGIES = ("MTS", "NTS")
ARMS = (("NTS", False), ("NTS", True), ("MTS", False), ("MTS", True))


class TrainConfigError(ValueError):
    pass


def arm_tag(strategy, key):
    return f"{strategy.lower()}+{'itd' if key else 'ctd'}"


def parse_arm(tag):
    try:
        strategy, data = tag.lower().split("+")
    except ValueError:
        raise TrainConfigError(f"arm must look like 'mts+itd', got {tag!r}") from None
    if strategy not in ("mts", "nts") or data not in ("ctd", "itd"):
        raise TrainConfigError(f"unknown arm {tag!r}; expected one of nts|mts + ctd|itd")
    return strategy.upper(), data == "itd"


@dataclass
class TrainConfig:
    strategy: str = "MTS"
    key: bool = False
    epochs: int = 8
    batch_size: int = 8
    mask: MaskSpec | None = field(default_factory=MaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    runs: int = 5

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise TrainConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.runs < 1:
            raise TrainConfigError("runs must be >= 1")
        if self.key and self.mask is None:
            raise TrainConfigError("KEY=true (ITD) requires a mask spec")
        self.model.validate()
        return self

    def with_arm(self, strategy, key, seed=None):
        cfg = TrainConfig(**{**self.__dict__})
        cfg.strategy, cfg.key = strategy, key
        if seed is not None:
            cfg.seed = seed
        return cfg

    def to_dict(self):
        return {
            "train": {
                "strategy": self.strategy.lower(),
                "key": self.key,
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "seed": self.seed,
                "runs": self.runs,
            },
            "mask": self.mask.to_config() if self.mask else {"kind": "none"},
            "model": {
                "depth": self.model.depth,
                "base_channels": self.model.base_channels,
                "attention": self.model.attention,
                "attention_heads": self.model.attention_heads,
                "input_size": list(self.model.input_size),
            },
            "optim": {"lr": self.lr, "betas": list(self.betas), "eps": self.eps},
        }

    @classmethod
    def from_dict(cls, cfg):
        """Build from a full JSON config (sections train/mask/model/optim/data)."""
        train = cfg.get("train", {})
        model = cfg.get("model", {})
        optim = cfg.get("optim", {})
        data = cfg.get("data", {})
        size = model.get("input_size") or data.get("target_size") or [32, 32]
        mask_section = dict(cfg.get("mask", {}))
        if mask_section.get("kind") not in (None, "none") and mask_section.get("lambda") is None:
            mask_section["lambda"] = DEFAULT_LAMBDA[mask_section["kind"]]
        return cls(
            strategy=str(train.get("strategy", "mts")).upper(),
            key=bool(train.get("key", False)),
            epochs=int(train.get("epochs", 8)),
            batch_size=int(train.get("batch_size", 8)),
            mask=MaskSpec.from_config(mask_section),
            model=ModelConfig(
                depth=int(model.get("depth", 3)),
                base_channels=int(model.get("base_channels", 16)),
                attention=bool(model.get("attention", False)),
                attention_heads=int(model.get("attention_heads", 1)),
                input_size=tuple(size),
            ),
            lr=float(optim.get("lr", 1e-3)),
            betas=tuple(optim.get("betas", (0.9, 0.999))),
            eps=float(optim.get("eps", 1e-8)),
            seed=int(train.get("seed", 0)),
            runs=int(train.get("runs", 5)),
        )


@dataclass
class RunHistory:
    strategy: str
    key: bool
    seed: int
    epoch_loss: list = field(default_factory=list)
    disease_loss: dict = field(default_factory=dict)
    l1_norm: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    step_sub_losses: list = field(default_factory=list)
    masked_visits: dict = field(default_factory=dict)
    n_steps: int = 0
    checkpoint: str | None = None
    wall_time: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _rngs(seed):
    init_ss, sched_ss, mask_ss = np.random.SeedSequence(seed).spawn(3)
    return init_ss, np.random.default_rng(sched_ss), np.random.default_rng(mask_ss)


def _run(step_batches, cfg, on_batch, diseases):
    """Shared loop; ``step_batches(epoch, sched_rng)`` yields lists of (disease, images, labels)."""
    cfg.validate()
    t0 = time.perf_counter()
    init_ss, sched_rng, mask_rng = _rngs(cfg.seed)
    model = init_model(cfg.model, init_ss)
    opt = Adam(cfg.lr, cfg.betas, cfg.eps)
    hist = RunHistory(cfg.strategy, cfg.key, cfg.seed)
    hist.masked_visits = {str(k): 0 for k in diseases}
    hist.disease_loss = {str(k): [] for k in diseases}
    for epoch in range(cfg.epochs):
        step_losses = []
        sub_acc = {str(k): [] for k in diseases}
        for step, parts in enumerate(step_batches(epoch, sched_rng)):
            images, labels, weights, owners = [], [], [], []
            for disease, x, y in parts:
                if cfg.key:
                    x = mask_batch(x, cfg.mask, mask_rng)
                    hist.masked_visits[str(disease)] += len(x)
                if on_batch is not None:
                    on_batch(x, y, disease)
                images.append(x)
                labels.append(y)
                weights.append(np.full(len(x), 1.0 / len(x)))
                owners.append((str(disease), len(x)))
            pred = forward(model, np.concatenate(images))
            loss = cross_entropy_loss(pred, np.concatenate(labels), np.concatenate(weights))
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            subs, start = {}, 0
            for (disease, n), w in zip(owners, weights):
                subs[disease] = float(loss.per_sample[start : start + n] @ w)
                start += n
            try:
                backward_and_step(model, loss, opt)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}, step {step}: {exc}") from exc
            step_losses.append(loss.value)
            hist.step_loss.append(loss.value)
            hist.step_sub_losses.append(subs)
            for d, v in subs.items():
                sub_acc[d].append(v)
        hist.n_steps += len(step_losses)
        hist.epoch_loss.append(float(np.mean(step_losses)) if step_losses else float("nan"))
        for d in hist.disease_loss:
            hist.disease_loss[d].append(float(np.mean(sub_acc[d])) if sub_acc[d] else float("nan"))
        hist.l1_norm.append(l1_norm(model))
        log.debug("epoch %d loss %.4f l1 %.2f", epoch, hist.epoch_loss[-1], hist.l1_norm[-1])
    hist.wall_time = time.perf_counter() - t0
    return model, hist


def train_mts(datasets, cfg, on_batch=None):
    """Multi-disease-aware training over ``{disease: DiseaseDataset}``."""
    if cfg.strategy != "MTS":
        raise TrainConfigError("train_mts needs cfg.strategy == 'MTS'")
    if not datasets:
        raise TrainConfigError("train_mts needs at least one disease dataset")
    keys = sorted(datasets)
    b = cfg.batch_size

    def batches(epoch, rng):
        plan = mts_epoch_schedule({k: len(datasets[k]) for k in keys}, b, rng)
        for step in plan.steps:
            yield [
                (sb.disease, datasets[sb.disease].images[list(sb.sample_refs)],
                 datasets[sb.disease].labels[list(sb.sample_refs)])
                for sb in step
            ]

    return _run(batches, cfg, on_batch, keys)


def train_nts(pooled, cfg, on_batch=None):
    """Pooled training; ``pooled`` is one dataset or a disease map to be pooled."""
    if cfg.strategy != "NTS":
        raise TrainConfigError("train_nts needs cfg.strategy == 'NTS'")
    if isinstance(pooled, dict):
        pooled = pool_datasets(pooled)
    b = cfg.batch_size

    def batches(epoch, rng):
        plan = nts_epoch_schedule(len(pooled), b, rng)
        for step in plan.steps:
            refs = list(step[0].sample_refs)
            yield [(pooled.disease, pooled.images[refs], pooled.labels[refs])]

    return _run(batches, cfg, on_batch, [pooled.disease])


def train(datasets, cfg, on_batch=None):
    if cfg.strategy == "MTS":
        return train_mts(datasets, cfg, on_batch)
    return train_nts(pool_datasets(datasets), cfg, on_batch)


# ----------------------------------------------------------------- run sets

INDEX_NAME = "index.json"


def _load_index(out_dir):
    path = Path(out_dir) / INDEX_NAME
    if path.is_file():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"format_version": 1, "status": "incomplete", "runs": []}


def _save_index(out_dir, index):
    index["runs"].sort(key=lambda r: (r["arm"], r["seed"]))
    index["status"] = "complete" if index["runs"] and all(r["status"] == "complete" for r in index["runs"]) else "incomplete"
    atomic_write_text(Path(out_dir) / INDEX_NAME, json.dumps(index, indent=2, sort_keys=True) + "\n")


def validate_index(index, root=None):
    """Check a run-set index against its schema; returns the list of problems."""
    problems = []
    if not isinstance(index, dict):
        return ["index is not an object"]
    if index.get("format_version") != 1:
        problems.append("format_version must be 1")
    if index.get("status") not in ("complete", "incomplete"):
        problems.append("status must be complete|incomplete")
    runs = index.get("runs")
    if not isinstance(runs, list):
        return problems + ["runs must be a list"]
    for i, r in enumerate(runs):
        for key, typ in (("arm", str), ("seed", int), ("run", int), ("checkpoint", str), ("history", str), ("status", str)):
            if not isinstance(r.get(key), typ):
                problems.append(f"runs[{i}].{key} missing or not {typ.__name__}")
        if isinstance(r.get("arm"), str):
            try:
                parse_arm(r["arm"])
            except TrainConfigError as exc:
                problems.append(f"runs[{i}]: {exc}")
        if r.get("status") not in ("complete", "failed"):
            problems.append(f"runs[{i}].status must be complete|failed")
        if root is not None and r.get("status") == "complete":
            for key in ("checkpoint", "history"):
                if isinstance(r.get(key), str) and not (Path(root) / r[key]).is_file():
                    problems.append(f"runs[{i}].{key} file {r[key]} is missing")
    return problems


def read_index(out_dir):
    path = Path(out_dir) / INDEX_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no run-set index at {path}")
    index = json.loads(path.read_text(encoding="utf-8"))
    problems = validate_index(index, out_dir)
    if problems:
        raise ValueError(f"invalid run-set index {path}: {'; '.join(problems)}")
    return index


def run_matrix(datasets, base_cfg, arms, n_runs, out_dir, dataset_name=None):
    """Train ``n_runs`` seeds per arm and persist checkpoints, histories and an index.

    Completed runs already listed in the index are skipped, so re-invoking
    with the same directory resumes. A failing run is recorded and the
    remaining runs still execute.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = _load_index(out_dir)
    index["config"] = base_cfg.to_dict()
    if dataset_name is not None:
        index["dataset"] = dataset_name
    done = {(r["arm"], r["seed"]) for r in index["runs"] if r["status"] == "complete"
            and (out_dir / r["checkpoint"]).is_file() and (out_dir / r["history"]).is_file()}
    for strategy, key in arms:
        if (strategy, key) not in ARMS:
            raise TrainConfigError(f"unknown arm ({strategy}, {key})")
        tag = arm_tag(strategy, key)
        for r in range(n_runs):
            seed = base_cfg.seed + r
            if (tag, seed) in done:
                log.info("skipping completed run %s seed %d", tag, seed)
                continue
            run_dir = Path(tag) / f"seed{seed:04d}"
            entry = {
                "arm": tag,
                "strategy": strategy,
                "key": key,
                "run": r,
                "seed": seed,
                "checkpoint": str(run_dir / "model.ckpt"),
                "history": str(run_dir / "history.json"),
            }
            try:
                cfg = base_cfg.with_arm(strategy, key, seed)
                model, hist = train(datasets, cfg)
                save_checkpoint(model, out_dir / entry["checkpoint"], {"arm": tag, "seed": seed})
                hist.checkpoint = entry["checkpoint"]
                hist.save(out_dir / entry["history"])
                entry["status"] = "complete"
                entry["final_l1_norm"] = hist.l1_norm[-1]
            except Exception as exc:  # one bad run must not sink the matrix
                log.error("run %s seed %d failed: %s", tag, seed, exc)
                entry["status"] = "failed"
                entry["error"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            index["runs"] = [x for x in index["runs"] if (x["arm"], x["seed"]) != (tag, seed)] + [entry]
            _save_index(out_dir, index)
    _save_index(out_dir, index)
    return index
