"""Vegetation indices rendered from a trained model, and MI-based rigid registration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize

from .errors import BandNotFoundError, DimensionMismatchError, NoSignalError
from .raster import render_view

log = logging.getLogger(__name__)

VALID_EPS = 1e-6
MI_BINS = 32

# index -> (positive band, negative band)
INDEX_BANDS = {"ndvi": ("NIR", "R"), "gndvi": ("NIR", "G"), "savi": ("NIR", "R")}

# colorizer bins: [-1, 0) inanimate, [0, 0.33) diseased, [0.33, 0.66) moderate, [0.66, 1] very healthy
VI_BREAKS = (0.0, 0.33, 0.66)
VI_LABELS = ("inanimate", "diseased", "moderately healthy", "very healthy")
VI_PALETTE = np.array([
    [128, 128, 128],
    [215, 48, 39],
    [254, 224, 139],
    [26, 152, 80],
], dtype=np.uint8)


# ---------------------------------------------------------------- indices

def vegetation_index(pos, neg, index: str = "ndvi", lsoil: float = 0.5):
    """Per-pixel index from two band images; returns ``(vi, valid)``.

    NDVI/GNDVI are (a - b) / (a + b); SAVI is (1 + L)(a - b) / (a + b + L).
    Pixels whose denominator is below 1e-6 are 0 and flagged invalid.
    """
    a = np.asarray(pos, dtype=np.float64)
    b = np.asarray(neg, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"band images {a.shape} and {b.shape} differ")
    index = index.lower()
    if index in ("ndvi", "gndvi"):
        num, den = a - b, a + b
    elif index == "savi":
        num, den = (1.0 + lsoil) * (a - b), a + b + lsoil
    else:
        raise ValueError(f"unknown vegetation index {index!r}")
    valid = np.abs(den) >= VALID_EPS
    vi = np.where(valid, num / np.where(valid, den, 1.0), 0.0)
    return vi, valid


def render_vegetation_index(checkpoint, view, index: str = "ndvi", lsoil: float = 0.5,
                            background=None, threads: int = 1):
    """Render both required bands through the same camera and combine them per pixel.

    Returns ``(vi, valid)`` as (H, W) arrays.
    """
    index = index.lower()
    if index not in INDEX_BANDS:
        raise ValueError(f"unknown vegetation index {index!r}")
    bs = checkpoint.band_set
    imgs = []
    for name in INDEX_BANDS[index]:
        try:
            j = bs.index_of(name)
        except BandNotFoundError:
            raise BandNotFoundError(f"{index.upper()} needs band {name}, checkpoint has {bs.names}") from None
        if bs[j].channel_count != 1:
            raise BandNotFoundError(f"band {name} is not single-channel")
        imgs.append(render_view(checkpoint.cloud, checkpoint.model, view, j, bs, background, threads)[..., 0])
    return vegetation_index(imgs[0], imgs[1], index, lsoil)


def vi_bin(values) -> np.ndarray:
    """Palette bin per value; 1.0 falls in the top bin."""
    return np.digitize(np.asarray(values, dtype=np.float64), VI_BREAKS)


@dataclass
class Colorized:
    image: np.ndarray       # (H + bar, W, 3) uint8, RGB
    clamped: int            # number of out-of-range inputs


def colorize_vi(vi, bar_height: int = 8) -> Colorized:
    """Piecewise-constant palette plus a scale-bar strip spanning [-1, 1] along the bottom."""
    v = np.asarray(vi, dtype=np.float64)
    bad = ~np.isfinite(v) | (v < -1.0) | (v > 1.0)
    clamped = int(bad.sum())
    if clamped:
        log.warning("%d vegetation-index values outside [-1, 1] were clamped", clamped)
    v = np.clip(np.nan_to_num(v, nan=0.0), -1.0, 1.0)
    img = VI_PALETTE[vi_bin(v)]
    if bar_height > 0:
        w = v.shape[1]
        ramp = -1.0 + 2.0 * (np.arange(w) + 0.5) / w
        bar = np.repeat(VI_PALETTE[vi_bin(ramp)][None], bar_height, axis=0)
        img = np.concatenate([img, bar], axis=0)
    return Colorized(img, clamped)


def vi_to_uint16(vi) -> np.ndarray:
    """Map [-1, 1] linearly onto [0, 65535]."""
    v = np.clip(np.asarray(vi, dtype=np.float64), -1.0, 1.0)
    return np.round((v + 1.0) * 0.5 * 65535.0).astype(np.uint16)


# ---------------------------------------------------------------- mutual information

def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"images {a.shape} and {b.shape} differ")
    return a, b


def joint_histogram(a, b, bins: int = MI_BINS, mask=None) -> np.ndarray:
    a, b = _check_same(a, b)
    if bins < 2:
        raise ValueError("need at least two bins")
    if mask is not None:
        a, b = a[mask], b[mask]
    ia = np.clip((np.clip(a.ravel(), 0.0, 1.0) * bins).astype(np.int64), 0, bins - 1)
    ib = np.clip((np.clip(b.ravel(), 0.0, 1.0) * bins).astype(np.int64), 0, bins - 1)
    return np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins).astype(np.float64)


def entropy(a, bins: int = MI_BINS) -> float:
    a = np.asarray(a, dtype=np.float64)
    idx = np.clip((np.clip(a.ravel(), 0.0, 1.0) * bins).astype(np.int64), 0, bins - 1)
    p = np.bincount(idx, minlength=bins) / idx.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b, bins: int = MI_BINS, mask=None) -> float:
    """Histogram estimate of I(A; B) in nats on intensities in [0, 1]."""
    h = joint_histogram(a, b, bins, mask)
    n = h.sum()
    if n == 0:
        return 0.0
    p = h / n
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    nz = p > 0
    outer = np.outer(pa, pb)
    return max(float(np.sum(p[nz] * np.log(p[nz] / outer[nz]))), 0.0)


# ---------------------------------------------------------------- registration

@dataclass
class RigidTransform:
    tx: float = 0.0
    ty: float = 0.0
    angle_deg: float = 0.0

    def matrix(self, shape) -> np.ndarray:
        """3x3 map from (x, y) pixel coordinates, rotating about the image center."""
        h, w = shape[:2]
        c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        th = np.deg2rad(self.angle_deg)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        M = np.eye(3)
        M[:2, :2] = R
        M[:2, 2] = c - R @ c + np.array([self.tx, self.ty])
        return M


def warp(img, transform: RigidTransform, order: int = 1):
    """Move image content by ``transform`` (bilinear); returns ``(warped, inside)``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    inv = np.linalg.inv(transform.matrix(img.shape))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    out = ndimage.map_coordinates(img, [src_y, src_x], order=order, mode="constant", cval=0.0)
    return out, inside


@dataclass
class Registration:
    transform: RigidTransform
    mi: float
    identity_mi: float
    error_map: np.ndarray


def _objective(params, ref, moving, bins):
    t = RigidTransform(*params)
    warped, inside = warp(moving, t)
    if inside.sum() < 0.25 * inside.size:
        return 0.0
    return -mutual_information(ref, warped, bins, inside)


def mi_register(ref, moving, max_shift: float = 10.0, max_angle: float = 5.0, bins: int = MI_BINS,
                starts: int = 3, seed: int = 0) -> Registration:
    """Rigid transform T maximizing I(ref; T o moving) with Powell's method.

    Powell runs from the identity plus jittered starts; the result is never
    worse than the identity.
    """
    ref, moving = _check_same(ref, moving)
    if ref.ndim != 2:
        raise DimensionMismatchError("registration expects single-channel images")
    if np.ptp(ref) == 0 or np.ptp(moving) == 0:
        raise NoSignalError("cannot register a constant image")
    bounds = [(-max_shift, max_shift), (-max_shift, max_shift), (-max_angle, max_angle)]
    rng = np.random.default_rng(seed)
    x0s = [np.zeros(3)]
    for _ in range(max(starts - 1, 0)):
        x0s.append(rng.uniform(-0.3, 0.3, 3) * np.array([max_shift, max_shift, max_angle]))
    identity_mi = -_objective(np.zeros(3), ref, moving, bins)
    best_x, best_f = np.zeros(3), -identity_mi
    for x0 in x0s:
        res = optimize.minimize(_objective, x0, args=(ref, moving, bins), method="Powell", bounds=bounds,
                                options={"xtol": 1e-3, "ftol": 1e-7, "maxfev": 4000})
        if res.fun < best_f - 1e-12:
            best_x, best_f = np.asarray(res.x, dtype=np.float64), float(res.fun)
    t = RigidTransform(*best_x)
    warped, _ = warp(moving, t)
    return Registration(t, -best_f, identity_mi, gradient_error_map(ref, warped))


def sobel_magnitude(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def gradient_error_map(a, b) -> np.ndarray:
    """| |Sobel(a)| - |Sobel(b)| | per pixel."""
    a, b = _check_same(a, b)
    return np.abs(sobel_magnitude(a) - sobel_magnitude(b))
