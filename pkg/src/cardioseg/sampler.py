"""Epoch schedules: multi-disease batches (MTS) and pooled batches (NTS)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SubBatch:
    disease: str | None
    sample_refs: tuple[int, ...]


@dataclass(frozen=True)
class BatchPlan:
    strategy: str  # "MTS" or "NTS"
    steps: tuple[tuple[SubBatch, ...], ...]

    def __len__(self):
        return len(self.steps)

    def draws(self, disease):
        """All sample indices drawn for ``disease`` over the epoch, in order."""
        return [i for step in self.steps for sb in step if sb.disease == disease for i in sb.sample_refs]


def _sizes(datasets):
    return {k: (v if isinstance(v, int) else len(v)) for k, v in datasets.items()}


def mts_epoch_schedule(datasets, b, rng):
    """One epoch of multi-disease batches.

    ``datasets`` maps disease key to a dataset (or just its size). Every
    step holds one sub-batch of ``b`` indices per disease; the epoch has
    ``max_k ceil(n_k / b)`` steps. Each disease walks through fresh
    permutations of its indices, reshuffling whenever one is exhausted.
    """
    if b < 1:
        raise ValueError("batch size must be >= 1")
    sizes = _sizes(datasets)
    if not sizes:
        raise ValueError("no disease datasets given")
    empty = [k for k, n in sizes.items() if n < 1]
    if empty:
        raise ValueError(f"empty dataset for disease(s) {empty}")
    n_steps = max(math.ceil(n / b) for n in sizes.values())
    streams = {}
    for k in sorted(sizes):
        need = n_steps * b
        parts, have = [], 0
        while have < need:
            perm = rng.permutation(sizes[k])
            parts.append(perm)
            have += len(perm)
        streams[k] = np.concatenate(parts)[:need]
    steps = tuple(
        tuple(SubBatch(k, tuple(int(i) for i in streams[k][s * b : (s + 1) * b])) for k in sorted(sizes))
        for s in range(n_steps)
    )
    return BatchPlan("MTS", steps)


def nts_epoch_schedule(pooled, b, rng):
    """One epoch of pooled batches: a single shuffle, trailing remainder dropped."""
    if b < 1:
        raise ValueError("batch size must be >= 1")
    n = pooled if isinstance(pooled, int) else len(pooled)
    if n < 1:
        raise ValueError("pooled dataset is empty")
    perm = rng.permutation(n)
    steps = tuple((SubBatch(None, tuple(int(i) for i in perm[s * b : (s + 1) * b])),) for s in range(n // b))
    return BatchPlan("NTS", steps)
