"""Training losses, each returning ``(value, gradient)``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatchError, IndexOutOfRangeError, WindowSizeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    dssim: float = 0.2       # lambda: D-SSIM share of the photometric term
    norm: float = 0.1        # feature-norm regularizer
    smooth: float = 0.0      # optional, single-channel bands only
    cos: float = 0.0         # optional cosine kNN feature loss
    dssim_halved: bool = False

    def __post_init__(self):
        if not 0.0 <= self.dssim <= 1.0:
            raise ValueError("dssim weight must lie in [0, 1]")
        if min(self.norm, self.smooth, self.cos) < 0:
            raise ValueError("loss weights must be non-negative")


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"prediction {pred.shape} vs target {gt.shape}")
    return pred, gt


def l1_loss(pred, gt):
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero-padded 'same' filtering; the window is symmetric so this is self-adjoint
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def ssim(pred, gt, with_grad: bool = False):
    """Mean SSIM over pixels and channels of (H, W[, C]) images on a unit range.

    Returns the value, or ``(value, dSSIM/dpred)`` when ``with_grad`` is set.
    """
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt, squeeze = pred[..., None], gt[..., None], True
    else:
        squeeze = False
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise WindowSizeError(f"image {pred.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    x, y = pred, gt
    mx, my = _blur(x, win), _blur(y, win)
    exx, eyy, exy = _blur(x * x, win), _blur(y * y, win), _blur(x * y, win)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * cxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = vx + vy + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    value = float(smap.mean())
    if not with_grad:
        return value
    n = smap.size
    # partials of the map w.r.t. mx, vx and cxy, scaled by d(mean)/d(map)
    d_mx = (2 * my * A2 / (B1 * B2) - smap * 2 * mx / B1) / n
    d_vx = (-smap / B2) / n
    d_cxy = (2 * A1 / (B1 * B2)) / n
    # vx = E[x^2] - mx^2, cxy = E[xy] - mx my
    g_mx = d_mx - 2 * mx * d_vx - my * d_cxy
    grad = _blur(g_mx, win) + 2 * x * _blur(d_vx, win) + y * _blur(d_cxy, win)
    if squeeze:
        grad = grad[..., 0]
    return value, grad


def dssim_loss(pred, gt, halved: bool = False):
    """1 - SSIM (or (1 - SSIM) / 2 with ``halved``) and its gradient."""
    value, grad = ssim(pred, gt, with_grad=True)
    scale = 0.5 if halved else 1.0
    return scale * (1.0 - value), -scale * grad


def feature_norm_reg(features):
    """Sum over primitives of (||f_i|| - 1)^2; the gradient at f = 0 is taken as 0."""
    f = np.asarray(features, dtype=np.float64)
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    value = float(np.sum((norm - 1.0) ** 2))
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where(norm > 0, 2.0 * (norm - 1.0) * f / safe, 0.0)
    return value, grad


def smoothness_loss(pred):
    """(1 / 4M) * sum over pixels of absolute differences to each existing 4-neighbour."""
    t = np.asarray(pred, dtype=np.float64)
    if t.ndim == 3:
        if t.shape[2] != 1:
            raise DimensionMismatchError("smoothness loss expects a single-channel image")
        t2 = t[..., 0]
    else:
        t2 = t
    m = t2.size
    grad = np.zeros_like(t2)
    total = 0.0
    # every unordered neighbour pair is visited once from each side
    for axis in (0, 1):
        d = np.diff(t2, axis=axis)
        total += 2.0 * np.abs(d).sum()
        s = 2.0 * np.sign(d)
        if axis == 0:
            grad[1:, :] += s
            grad[:-1, :] -= s
        else:
            grad[:, 1:] += s
            grad[:, :-1] -= s
    scale = 1.0 / (4.0 * m)
    return total * scale, (grad * scale).reshape(t.shape)


def cosine_knn_loss(features, knn):
    """Mean over centers of the mean over neighbours of (1 - cos(f_c, f_s)).

    A pair with a zero-norm vector contributes 1 and no gradient.
    """
    f = np.asarray(features, dtype=np.float64)
    knn = np.asarray(knn, dtype=np.int64)
    s = f.shape[0]
    if s == 0 or knn.size == 0:
        return 0.0, np.zeros_like(f)
    if knn.ndim != 2 or knn.shape[0] != s:
        raise DimensionMismatchError(f"knn table {knn.shape} does not match {s} features")
    if knn.min() < 0 or knn.max() >= s:
        raise IndexOutOfRangeError("knn index out of range")
    k = knn.shape[1]
    norm = np.linalg.norm(f, axis=1)
    fc = f[:, None, :]
    fs = f[knn]
    nc = norm[:, None]
    ns = norm[knn]
    ok = (nc > 0) & (ns > 0)
    denom = np.where(ok, nc * ns, 1.0)
    dot = np.einsum("ckd,ckd->ck", np.broadcast_to(fc, fs.shape), fs)
    cos = np.where(ok, dot / denom, 0.0)
    value = float(np.mean(1.0 - cos))
    w = 1.0 / (s * k)
    safe_nc = np.where(nc > 0, nc, 1.0)
    safe_ns = np.where(ns > 0, ns, 1.0)
    dcos_dc = fs / denom[..., None] - cos[..., None] * fc / (safe_nc ** 2)[..., None]
    dcos_ds = fc / denom[..., None] - cos[..., None] * fs / (safe_ns ** 2)[..., None]
    okw = (ok * -w)[..., None]
    grad = (dcos_dc * okw).sum(axis=1)
    np.add.at(grad, knn.ravel(), (dcos_ds * okw).reshape(-1, f.shape[1]))
    return value, grad


@dataclass
class LossResult:
    value: float
    dimage: np.ndarray
    dfeatures: Optional[np.ndarray]
    terms: dict


def total_loss(render, gt, features, weights: LossWeights, knn=None) -> LossResult:
    """(1 - lam) L1 + lam D-SSIM + lam_norm * reg [+ lam_smooth smooth + lam_cos cos].

    ``features`` may be None (SH color model); the feature terms are then skipped.
    The smoothness term only applies to single-channel renders.
    """
    lam = weights.dssim
    l1, g_l1 = l1_loss(render, gt)
    terms = {"l1": l1}
    value = (1.0 - lam) * l1
    dimage = (1.0 - lam) * g_l1
    if lam > 0:
        ds, g_ds = dssim_loss(render, gt, halved=weights.dssim_halved)
        terms["dssim"] = ds
        value += lam * ds
        dimage = dimage + lam * g_ds
    dfeat = None
    if features is not None:
        dfeat = np.zeros_like(features)
        if weights.norm > 0:
            reg, g_reg = feature_norm_reg(features)
            terms["norm"] = reg
            value += weights.norm * reg
            dfeat += weights.norm * g_reg
        if weights.cos > 0 and knn is not None:
            cl, g_cl = cosine_knn_loss(features, knn)
            terms["cos"] = cl
            value += weights.cos * cl
            dfeat += weights.cos * g_cl
    if weights.smooth > 0 and np.asarray(render).shape[-1] == 1:
        sm, g_sm = smoothness_loss(render)
        terms["smooth"] = sm
        value += weights.smooth * sm
        dimage = dimage + weights.smooth * g_sm
    return LossResult(float(value), dimage, dfeat, terms)
