"""Occlusion masks for incomplete training data (ITD).

An ideal mask zeroes an alpha x alpha box; a Gaussian mask attenuates
radially around its center. Only training images are ever masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state

MASK_KINDS = ("ideal", "gaussian")
DEFAULT_LAMBDA = {"ideal": 0.25, "gaussian": 0.4}


class MaskSpecError(ValueError):
    pass


def _round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskSpec:
    kind: str = "ideal"
    lam: float = 0.25
    paper_literal_center_range: bool = False

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise MaskSpecError(f"mask kind must be one of {MASK_KINDS}, got {self.kind!r}")
        if not 0.0 < self.lam < 1.0:
            raise MaskSpecError(f"mask lambda must lie in (0, 1), got {self.lam}")

    def alpha(self, h, w):
        """Box side length in pixels for an h x w grid."""
        a = _round_half_up(self.lam * min(h, w))
        if a < 1:
            raise MaskSpecError(f"lambda={self.lam} gives an empty box on a {h}x{w} grid")
        return a

    def beta(self, h, w):
        return self.lam * min(h, w)

    @classmethod
    def from_config(cls, section):
        """Build from a ``mask`` config section; returns None for kind 'none'."""
        kind = section.get("kind", "ideal")
        if kind in (None, "none"):
            return None
        lam = section.get("lambda")
        if lam is None:
            lam = DEFAULT_LAMBDA[kind]
        return cls(kind, float(lam), bool(section.get("paper_literal_center_range", False)))

    def to_config(self):
        return {"kind": self.kind, "lambda": self.lam, "paper_literal_center_range": self.paper_literal_center_range}


@dataclass
class MaskRealization:
    spec: MaskSpec
    center: tuple[int, int]
    grid: np.ndarray = field(repr=False)


def center_range(alpha, n, paper_literal=False):
    """Inclusive range of admissible box centers along an axis of length n."""
    if alpha > n:
        raise MaskSpecError(f"box side {alpha} exceeds grid side {n}")
    if paper_literal:
        lo, hi = alpha // 2, (n - alpha) // 2
        if hi < lo:
            raise MaskSpecError(f"literal center range [{lo}, {hi}] is empty for alpha={alpha}, n={n}")
        return lo, hi
    # every center whose box rows [c - alpha//2, c - alpha//2 + alpha - 1] stay inside [0, n)
    return alpha // 2, n - alpha + alpha // 2


def sample_center(spec, h, w, rng):
    rng = check_random_state(rng) if not isinstance(rng, np.random.Generator) else rng
    if spec.kind == "gaussian":
        # soft masks have no box to contain; any pixel may be the center
        return int(_integers(rng, 0, h - 1)), int(_integers(rng, 0, w - 1))
    alpha = spec.alpha(h, w)
    if alpha > min(h, w):
        raise MaskSpecError(f"box side {alpha} exceeds grid {h}x{w}")
    u_lo, u_hi = center_range(alpha, h, spec.paper_literal_center_range)
    v_lo, v_hi = center_range(alpha, w, spec.paper_literal_center_range)
    return int(_integers(rng, u_lo, u_hi)), int(_integers(rng, v_lo, v_hi))


def _integers(rng, lo, hi):
    # inclusive on both ends, for either numpy RNG flavour
    if isinstance(rng, np.random.Generator):
        return rng.integers(lo, hi, endpoint=True)
    return rng.randint(lo, hi + 1)


def box_bounds(center, alpha):
    u0 = center[0] - alpha // 2
    v0 = center[1] - alpha // 2
    return u0, u0 + alpha, v0, v0 + alpha


def ideal_mask(h, w, center, alpha):
    u0, u1, v0, v1 = box_bounds(center, alpha)
    if alpha < 1 or u0 < 0 or v0 < 0 or u1 > h or v1 > w:
        raise MaskSpecError(f"box of side {alpha} at {center} leaves the {h}x{w} grid")
    grid = np.ones((h, w), dtype=np.float32)
    grid[u0:u1, v0:v1] = 0.0
    return grid


def gaussian_mask(h, w, center, beta):
    if beta <= 0:
        raise MaskSpecError("beta must be positive")
    u = np.arange(h, dtype=np.float64)[:, None] - center[0]
    v = np.arange(w, dtype=np.float64)[None, :] - center[1]
    dist2 = u * u + v * v
    return 1.0 - np.exp(-dist2 / (2.0 * beta * beta))


def realize(spec, h, w, rng):
    center = sample_center(spec, h, w, rng)
    if spec.kind == "ideal":
        grid = ideal_mask(h, w, center, spec.alpha(h, w))
    else:
        grid = gaussian_mask(h, w, center, spec.beta(h, w))
    return MaskRealization(spec, center, grid)


def apply_mask(image, mask):
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")
    return (image * mask).astype(image.dtype, copy=False)


def mask_batch(images, spec, rng):
    """Mask every image of an (n, H, W) batch with its own fresh realization."""
    out = np.empty_like(images)
    h, w = images.shape[-2:]
    for i in range(len(images)):
        out[i] = apply_mask(images[i], realize(spec, h, w, rng).grid.astype(images.dtype, copy=False))
    return out


class OcclusionMasker(TransformerMixin, BaseEstimator):
    """Transformer that occludes each image with a freshly sampled mask.

    Every call to ``transform`` draws new centers, so the same image is
    masked differently on each visit. ``n_masked_`` counts masked images.

    Parameters
    ----------
    kind : {'ideal', 'gaussian'}
    lam : float or None
        Mask size relative to min(H, W); None picks 0.25 (ideal) or 0.4 (gaussian).
    paper_literal_center_range : bool
    random_state : int, Generator or None
    """

    def __init__(self, kind="ideal", lam=None, paper_literal_center_range=False, random_state=None):
        self.kind = kind
        self.lam = lam
        self.paper_literal_center_range = paper_literal_center_range
        self.random_state = random_state

    def fit(self, X, y=None):
        lam = DEFAULT_LAMBDA.get(self.kind, 0.25) if self.lam is None else self.lam
        self.spec_ = MaskSpec(self.kind, float(lam), self.paper_literal_center_range)
        if isinstance(self.random_state, np.random.Generator):
            self.rng_ = self.random_state
        else:
            self.rng_ = np.random.default_rng(self.random_state)
        self.n_masked_ = 0
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            self.fit(X)
        X = np.asarray(X)
        if X.ndim == 2:
            return self.transform(X[None])[0]
        if X.ndim != 3:
            raise ValueError(f"expected (n, H, W) images, got shape {X.shape}")
        out = mask_batch(X, self.spec_, self.rng_)
        self.n_masked_ += len(X)
        return out
