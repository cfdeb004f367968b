"""Image-quality and spectral-similarity metrics, and held-out evaluation."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Sequence

import numpy as np

from .errors import (
    BandNotFoundError,
    DimensionMismatchError,
    NonPositiveSumError,
    UndefinedCorrelationError,
    UndefinedSpectrumError,
)
from .losses import dssim_loss
from .raster import render_view

SID_EPS = 1e-8


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) for images on a unit range; +inf when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"prediction {pred.shape} vs target {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(pred, gt) -> float:
    return 1.0 - dssim_loss(pred, gt)[0]


def sam(r, t):
    """Spectral angle in radians between spectra along the last axis."""
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    nr = np.linalg.norm(r, axis=-1)
    nt = np.linalg.norm(t, axis=-1)
    if np.any(nr == 0) or np.any(nt == 0):
        raise UndefinedSpectrumError("spectral angle of a zero spectrum")
    cos = np.sum(r * t, axis=-1) / (nr * nt)
    out = np.arccos(np.clip(cos, -1.0, 1.0))
    return float(out) if out.ndim == 0 else out


def scm(r, t):
    """Pearson correlation of spectra along the last axis."""
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    rc = r - r.mean(axis=-1, keepdims=True)
    tc = t - t.mean(axis=-1, keepdims=True)
    den = np.sqrt(np.sum(rc * rc, axis=-1)) * np.sqrt(np.sum(tc * tc, axis=-1))
    if np.any(den == 0):
        raise UndefinedCorrelationError("spectral correlation of a zero-variance spectrum")
    out = np.clip(np.sum(rc * tc, axis=-1) / den, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def sid(r, t):
    """Symmetric KL divergence between sum-normalized spectra (natural log).

    Components are clamped to at least 1e-8 before taking logs.
    """
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(r < 0) or np.any(t < 0):
        raise NonPositiveSumError("spectral information divergence needs non-negative spectra")
    sr = r.sum(axis=-1, keepdims=True)
    st = t.sum(axis=-1, keepdims=True)
    if np.any(sr <= 0) or np.any(st <= 0):
        raise NonPositiveSumError("spectrum sums to zero")
    p = np.maximum(r / sr, SID_EPS)
    q = np.maximum(t / st, SID_EPS)
    out = np.sum(p * np.log(p / q), axis=-1) + np.sum(q * np.log(q / p), axis=-1)
    return float(out) if out.ndim == 0 else out


def spectral_valid_mask(stack: np.ndarray) -> np.ndarray:
    """Pixels of an (..., B) stack for which all three spectral metrics are defined."""
    nonneg = np.all(stack >= 0, axis=-1)
    positive = stack.sum(axis=-1) > 0
    varied = np.ptp(stack, axis=-1) > 0
    return nonneg & positive & varied


def spectral_stats(pred_stack: np.ndarray, gt_stack: np.ndarray) -> dict:
    """Per-pixel SAM/SCM/SID over valid pixels: sums, counts and exclusions."""
    pred = pred_stack.reshape(-1, pred_stack.shape[-1])
    gt = gt_stack.reshape(-1, gt_stack.shape[-1])
    ok = spectral_valid_mask(pred) & spectral_valid_mask(gt)
    n = int(ok.sum())
    if n == 0:
        return {"sam_sum": 0.0, "scm_sum": 0.0, "sid_sum": 0.0, "pixels": 0, "excluded": int(ok.size)}
    return {
        "sam_sum": float(np.sum(sam(gt[ok], pred[ok]))),
        "scm_sum": float(np.sum(scm(gt[ok], pred[ok]))),
        "sid_sum": float(np.sum(sid(gt[ok], pred[ok]))),
        "pixels": n,
        "excluded": int(ok.size - n),
    }


def evaluate(checkpoint, views: Sequence, background=None, threads: int = 1) -> dict:
    """Per-band PSNR/SSIM plus pixelwise-mean SAM/SCM/SID over the multi-spectral stack.

    ``checkpoint`` needs ``cloud``, ``model`` and ``band_set``; every view must
    carry its ground-truth image. Spectral metrics stack the single-channel
    bands, in band-set order, of eval images sharing a capture key; predicted
    and ground-truth stacks are built from the same per-band views.
    """
    band_set = checkpoint.band_set
    per_band = defaultdict(lambda: {"psnr": [], "ssim": []})
    renders = {}
    for view in views:
        if view.band_index >= len(band_set):
            raise BandNotFoundError(f"view {view.name!r} refers to band {view.band_index}")
        if view.image is None:
            raise DimensionMismatchError(f"view {view.name!r} has no ground-truth image")
        pred = render_view(checkpoint.cloud, checkpoint.model, view, view.band_index, band_set,
                           background=background, threads=threads)
        gt = view.image.reshape(pred.shape)
        name = band_set[view.band_index].name
        per_band[name]["psnr"].append(psnr(pred, gt))
        per_band[name]["ssim"].append(ssim_metric(pred, gt))
        renders[(view.capture_key, view.band_index)] = (pred, gt)

    report = {"bands": {}, "spectral": None}
    for b in band_set.bands:
        if b.name not in per_band:
            continue
        vals = per_band[b.name]
        report["bands"][b.name] = {
            "psnr": float(np.mean(vals["psnr"])),
            "ssim": float(np.mean(vals["ssim"])),
            "images": len(vals["psnr"]),
        }
    if report["bands"]:
        report["psnr_all"] = float(np.mean([v["psnr"] for v in report["bands"].values()]))
        report["ssim_all"] = float(np.mean([v["ssim"] for v in report["bands"].values()]))

    ms = band_set.spectral_indices()
    if len(ms) >= 2:
        totals = {"sam_sum": 0.0, "scm_sum": 0.0, "sid_sum": 0.0, "pixels": 0, "excluded": 0, "captures": 0}
        for key in sorted({k for k, _ in renders}):
            parts = [renders.get((key, j)) for j in ms]
            if any(p is None for p in parts) or len({p[0].shape for p in parts}) != 1:
                continue
            pred_stack = np.concatenate([p[0] for p in parts], axis=-1)
            gt_stack = np.concatenate([p[1] for p in parts], axis=-1)
            stats = spectral_stats(pred_stack, gt_stack)
            for k in ("sam_sum", "scm_sum", "sid_sum", "pixels", "excluded"):
                totals[k] += stats[k]
            totals["captures"] += 1
        if totals["pixels"] > 0:
            n = totals["pixels"]
            report["spectral"] = {
                "bands": [band_set[j].name for j in ms],
                "sam": totals["sam_sum"] / n,
                "scm": totals["scm_sum"] / n,
                "sid": totals["sid_sum"] / n,
                "pixels": n,
                "excluded": totals["excluded"],
                "captures": totals["captures"],
            }
    return report


def report_items(report: dict) -> list[tuple[str, object]]:
    """Flatten a report into ``key=value`` pairs in a stable order."""
    items = []
    for name, vals in report["bands"].items():
        for k in ("psnr", "ssim", "images"):
            items.append((f"band.{name}.{k}", vals[k]))
    for k in ("psnr_all", "ssim_all"):
        if k in report:
            items.append((k, report[k]))
    if report.get("spectral"):
        for k, v in report["spectral"].items():
            items.append((f"spectral.{k}", ",".join(v) if isinstance(v, list) else v))
    return items


def format_report(report: dict) -> str:
    lines = [f"{'band':<8}{'PSNR':>10}{'SSIM':>9}{'images':>8}"]
    for name, vals in report["bands"].items():
        lines.append(f"{name:<8}{vals['psnr']:>10.3f}{vals['ssim']:>9.4f}{vals['images']:>8d}")
    if "psnr_all" in report:
        lines.append(f"{'all':<8}{report['psnr_all']:>10.3f}{report['ssim_all']:>9.4f}")
    sp = report.get("spectral")
    if sp:
        lines.append("")
        lines.append(f"All-MS ({'+'.join(sp['bands'])}): SAM {sp['sam']:.5f}  SCM {sp['scm']:.5f}  "
                     f"SID {sp['sid']:.5f}  pixels {sp['pixels']}  excluded {sp['excluded']}")
    return "\n".join(lines)


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        for key, value in report_items(report):
            fh.write(f"{key}={value}\n")
