"""Band-aware densification.

View-space gradients are accumulated separately for each spectral band. A
primitive is densified when its largest per-band average gradient norm exceeds
the threshold, so detail that only one band sees still triggers refinement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, IndexOutOfRangeError
from .optim import Adam
from .scene import GaussianCloud, quaternion_to_rotation

SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6
PERCENT_DENSE = 0.01
OPACITY_FLOOR = 0.005
MAX_WORLD_SCALE = 0.1
TAU_GRAD = 0.0008


@dataclass
class DensifyState:
    grad_sum: np.ndarray   # (S, n_bands) sum of per-step gradient norms
    count: np.ndarray      # (S, n_bands) accumulation events

    @classmethod
    def zeros(cls, count: int, n_bands: int) -> "DensifyState":
        return cls(np.zeros((count, n_bands)), np.zeros((count, n_bands), dtype=np.int64))

    @property
    def n_bands(self) -> int:
        return self.grad_sum.shape[1]

    def reset(self, count: Optional[int] = None) -> None:
        n = self.grad_sum.shape[0] if count is None else count
        self.grad_sum = np.zeros((n, self.n_bands))
        self.count = np.zeros((n, self.n_bands), dtype=np.int64)

    def averages(self) -> np.ndarray:
        """(S, n_bands) average gradient norm; NaN where a band never saw the primitive."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), np.nan)


def accumulate(state: DensifyState, band: int, homodir: np.ndarray, participated: np.ndarray) -> None:
    """Add ||g_i|| to band ``band`` for every participating primitive."""
    if not 0 <= band < state.n_bands:
        raise IndexOutOfRangeError(f"band index {band} outside [0, {state.n_bands})")
    homodir = np.asarray(homodir, dtype=np.float64)
    participated = np.asarray(participated, dtype=bool)
    if homodir.shape != (state.grad_sum.shape[0], 2) or participated.shape != (state.grad_sum.shape[0],):
        raise DimensionMismatchError("homodirectional gradients do not match the densify state")
    norms = np.sqrt(homodir[:, 0] ** 2 + homodir[:, 1] ** 2)
    state.grad_sum[participated, band] += norms[participated]
    state.count[participated, band] += 1


def criterion(state: DensifyState, tau_grad: float = TAU_GRAD) -> np.ndarray:
    """max over bands (with at least one event) of the average gradient > tau_grad."""
    avg = state.averages()
    seen = state.count > 0
    best = np.where(seen, avg, -np.inf).max(axis=1) if avg.size else np.zeros(avg.shape[0])
    return best > tau_grad


def _gather(cloud: GaussianCloud, extra: dict, rows: np.ndarray):
    new_cloud = GaussianCloud(**{k: v[rows] for k, v in cloud.arrays().items()})
    new_extra = {k: v[rows] for k, v in extra.items()}
    return new_cloud, new_extra


def apply(cloud: GaussianCloud, optimizer: Optional[Adam], mask: np.ndarray, scene_extent: float,
          rng: np.random.Generator, state: Optional[DensifyState] = None,
          extra: Optional[dict] = None, percent_dense: float = PERCENT_DENSE):
    """Split large masked primitives into two children, clone small ones.

    Children of a split are drawn from the parent Gaussian with scales divided
    by 1.6 and the parent removed; clones are exact copies. Optimizer moments
    of new rows start at zero and ``state`` is reset to the new size.
    ``extra`` holds further per-primitive arrays (e.g. SH coefficients) that
    follow the same reindexing. Returns ``(cloud, extra)``.
    """
    extra = dict(extra or {})
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cloud.count,):
        raise DimensionMismatchError(f"mask {mask.shape} does not match {cloud.count} primitives")
    large = cloud.scale.max(axis=1) > percent_dense * scene_extent
    split = np.flatnonzero(mask & large)
    clone = np.flatnonzero(mask & ~large)
    keep = np.setdiff1d(np.arange(cloud.count), split)
    children = np.repeat(split, SPLIT_CHILDREN)
    rows = np.concatenate([keep, clone, children]).astype(np.int64)
    is_new = np.concatenate([np.zeros(keep.size, bool), np.ones(clone.size + children.size, bool)])

    new_cloud, new_extra = _gather(cloud, extra, rows)
    if children.size:
        start = keep.size + clone.size
        rot = quaternion_to_rotation(cloud.rotation[children])
        std = cloud.scale[children]
        offset = np.einsum("nij,nj->ni", rot, rng.normal(size=(children.size, 3)) * std)
        new_cloud.position[start:] = cloud.position[children] + offset
        new_cloud.log_scale[start:] = cloud.log_scale[children] - np.log(SPLIT_SCALE_DIVISOR)
    if optimizer is not None:
        optimizer.reindex(list(cloud.arrays()) + list(extra), rows, is_new)
    if state is not None:
        state.reset(new_cloud.count)
    return new_cloud, new_extra


def prune(cloud: GaussianCloud, optimizer: Optional[Adam], scene_extent: float,
          opacity_floor: float = OPACITY_FLOOR, max_world_scale: float = MAX_WORLD_SCALE,
          state: Optional[DensifyState] = None, extra: Optional[dict] = None):
    """Drop primitives with opacity below the floor or a world scale above ``max_world_scale * extent``."""
    extra = dict(extra or {})
    if cloud.count == 0:
        return cloud, extra
    bad = (cloud.opacity[:, 0] < opacity_floor) | (cloud.scale.max(axis=1) > max_world_scale * scene_extent)
    rows = np.flatnonzero(~bad)
    if rows.size == cloud.count:
        return cloud, extra
    new_cloud, new_extra = _gather(cloud, extra, rows)
    if optimizer is not None:
        optimizer.reindex(list(cloud.arrays()) + list(extra), rows, np.zeros(rows.size, bool))
    if state is not None:
        keep_sum, keep_count = state.grad_sum[rows], state.count[rows]
        state.grad_sum, state.count = keep_sum, keep_count
    return new_cloud, new_extra
