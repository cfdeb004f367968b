"""Differentiable projection and tile-based alpha compositing.

Pixel (row i, column j) has its center at image coordinates (j + 0.5, i + 0.5).
A projected Gaussian touches a pixel only if the pixel center lies inside its
square footprint (|dx| <= radius and |dy| <= radius) and its alpha there is at
least 1/255. Tiles are an acceleration structure only: every tile sees the
globally depth-sorted list restricted to the Gaussians whose footprint overlaps
it, so the result is identical to per-pixel evaluation.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .color import (
    ColorDecoder,
    SHColorModel,
    decode_backward,
    decode_forward,
    direction_to_spherical,
    sh_backward,
    sh_eval,
    view_directions,
)
from .errors import ChannelMismatchError, StaleCacheError
from .scene import CameraView, GaussianCloud, quaternion_to_rotation

TILE_SIZE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
NEAR_PLANE = 0.01
COV_DILATION = 0.3


@dataclass
class Projected2D:
    mean2d: np.ndarray      # (N, 2) pixels
    conic: np.ndarray       # (N, 3) inverse 2D covariance (a, b, c)
    depth: np.ndarray       # (N,)
    radius: np.ndarray      # (N,) integer pixels
    visible: np.ndarray     # (N,) bool
    # intermediates reused by project_backward
    cam: np.ndarray = field(repr=False, default=None)
    cov2d: np.ndarray = field(repr=False, default=None)
    jac: np.ndarray = field(repr=False, default=None)
    rot3d: np.ndarray = field(repr=False, default=None)
    cov3d: np.ndarray = field(repr=False, default=None)
    width: int = 0
    height: int = 0

    @property
    def count(self) -> int:
        return self.mean2d.shape[0]


def project(cloud: GaussianCloud, view: CameraView, dilation: float = COV_DILATION) -> Projected2D:
    """Perspective-project every Gaussian of ``cloud`` into ``view``.

    The 2D covariance is J W Sigma W^T J^T + dilation * I with the first-order
    Jacobian J of the pinhole projection at the camera-space mean.
    """
    K = view.intrinsics
    R, t = view.rotation, view.translation
    cam = cloud.position @ R.T + t
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)
    u = K.fx * x / zs + K.cx
    v = K.fy * y / zs + K.cy

    n = cloud.count
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = K.fx / zs
    jac[:, 0, 2] = -K.fx * x / zs ** 2
    jac[:, 1, 1] = K.fy / zs
    jac[:, 1, 2] = -K.fy * y / zs ** 2
    M = jac @ R

    rot3d = quaternion_to_rotation(cloud.rotation) if n else np.zeros((0, 3, 3))
    s2 = np.exp(2.0 * cloud.log_scale)
    cov3d = (rot3d * s2[:, None, :]) @ np.swapaxes(rot3d, 1, 2)
    cov = M @ cov3d @ np.swapaxes(M, 1, 2)
    A = cov[:, 0, 0] + dilation
    B = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    C = cov[:, 1, 1] + dilation
    det = A * C - B * B
    ok = in_front & (det > 0)
    det_s = np.where(ok, det, 1.0)
    conic = np.stack([C / det_s, -B / det_s, A / det_s], axis=1)
    mid = 0.5 * (A + C)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.where(ok, np.ceil(3.0 * np.sqrt(np.maximum(lam, 0.0))), 0.0)
    W, H = K.width, K.height
    on_screen = (u + radius >= 0.5) & (u - radius <= W - 0.5) & (v + radius >= 0.5) & (v - radius <= H - 0.5)
    visible = ok & on_screen & (radius > 0)
    radius = np.where(visible, radius, 0.0).astype(np.int64)
    return Projected2D(np.stack([u, v], axis=1), conic, z, radius, visible,
                       cam=cam, cov2d=np.stack([A, B, C], axis=1), jac=jac, rot3d=rot3d,
                       cov3d=cov3d, width=W, height=H)


def _rotation_grad_to_quaternion(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / norm).T
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    qn = q / norm
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


def project_backward(cloud: GaussianCloud, view: CameraView, proj: Projected2D,
                     dmean2d: np.ndarray, dconic: np.ndarray) -> dict[str, np.ndarray]:
    """Chain image-space gradients back to position, rotation and log-scale.

    Rows that are not visible receive zero gradient.
    """
    K = view.intrinsics
    R = view.rotation
    out = {"position": np.zeros_like(cloud.position), "rotation": np.zeros_like(cloud.rotation),
           "log_scale": np.zeros_like(cloud.log_scale)}
    idx = np.flatnonzero(proj.visible)
    if idx.size == 0:
        return out
    a, b, c = proj.conic[idx].T
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], 1)
    da, db, dc = dconic[idx].T
    Gq = np.stack([np.stack([da, 0.5 * db], -1), np.stack([0.5 * db, dc], -1)], 1)
    dcov = -Q @ Gq @ Q
    jac = proj.jac[idx]
    M = jac @ R
    cov3d = proj.cov3d[idx]
    dcov3 = np.swapaxes(M, 1, 2) @ dcov @ M
    dM = 2.0 * dcov @ M @ cov3d
    dJ = dM @ R.T

    x, y, z = proj.cam[idx].T
    du, dv = dmean2d[idx].T
    fx, fy = K.fx, K.fy
    z2, z3 = z * z, z * z * z
    dcx = dJ[:, 0, 2] * (-fx / z2) + du * fx / z
    dcy = dJ[:, 1, 2] * (-fy / z2) + dv * fy / z
    dcz = (dJ[:, 0, 0] * (-fx / z2) + dJ[:, 0, 2] * (2 * fx * x / z3)
           + dJ[:, 1, 1] * (-fy / z2) + dJ[:, 1, 2] * (2 * fy * y / z3)
           - du * fx * x / z2 - dv * fy * y / z2)
    out["position"][idx] = np.stack([dcx, dcy, dcz], axis=1) @ R

    rot = proj.rot3d[idx]
    s2 = np.exp(2.0 * cloud.log_scale[idx])
    dRq = 2.0 * dcov3 @ (rot * s2[:, None, :])
    ds2 = np.einsum("nji,njk,nki->ni", rot, dcov3, rot)
    out["log_scale"][idx] = 2.0 * s2 * ds2
    out["rotation"][idx] = _rotation_grad_to_quaternion(cloud.rotation[idx], dRq)
    return out


@dataclass
class _Tile:
    gauss: np.ndarray           # global Gaussian ids, depth order
    pix: np.ndarray             # flat pixel ids
    dx: np.ndarray = None
    dy: np.ndarray = None
    gval: np.ndarray = None     # exp(power)
    raw: np.ndarray = None      # opacity * exp(power)
    alpha: np.ndarray = None
    included: np.ndarray = None
    t_excl: np.ndarray = None
    weight: np.ndarray = None
    t_final: np.ndarray = None


@dataclass
class RenderAux:
    """Everything rasterize_backward needs, plus per-Gaussian statistics."""

    tiles: list
    width: int
    height: int
    channels: int
    background: np.ndarray
    final_transmittance: np.ndarray   # (H, W)
    touched: np.ndarray               # (N,) pixels each Gaussian contributed to
    participated: np.ndarray          # (N,) visible in this render
    colors: np.ndarray = field(repr=False, default=None)
    opacities: np.ndarray = field(repr=False, default=None)
    projected: Projected2D = field(repr=False, default=None)


def _tile_grid(width: int, height: int, tile: int):
    for ty in range(0, height, tile):
        for tx in range(0, width, tile):
            yield tx, ty, min(tx + tile, width), min(ty + tile, height)


def sorted_visible(proj: Projected2D) -> np.ndarray:
    """Visible Gaussian ids front to back; equal depths by ascending id."""
    idx = np.flatnonzero(proj.visible)
    order = np.lexsort((idx, proj.depth[idx]))
    return idx[order]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def rasterize_forward(proj: Projected2D, colors: np.ndarray, opacities: np.ndarray,
                      background: Optional[np.ndarray] = None, *, tile_size: int = TILE_SIZE,
                      early_stop: bool = True, threads: int = 1) -> tuple[np.ndarray, RenderAux]:
    """Alpha-composite projected Gaussians front to back into an (H, W, C) image."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.ndim != 2 or colors.shape[0] != proj.count:
        raise ChannelMismatchError(f"colors {colors.shape} do not match {proj.count} Gaussians")
    C = colors.shape[1]
    bg = np.zeros(C) if background is None else np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.shape[0] != C:
        raise ChannelMismatchError(f"background has {bg.shape[0]} channels, colors have {C}")
    opac = np.asarray(opacities, dtype=np.float64).reshape(-1)
    W, H = proj.width, proj.height
    order = sorted_visible(proj)
    u, v = proj.mean2d[order, 0], proj.mean2d[order, 1]
    r = proj.radius[order]

    tiles = []
    for x0, y0, x1, y1 in _tile_grid(W, H, tile_size):
        hit = (u + r >= x0 + 0.5) & (u - r <= x1 - 0.5) & (v + r >= y0 + 0.5) & (v - r <= y1 - 0.5)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        tiles.append(_Tile(order[hit], (ys * W + xs).ravel()))

    def run(tile: _Tile):
        return _tile_forward(tile, proj, colors, opac, bg, W, early_stop)

    results = _map(run, tiles, threads)
    image = np.empty((H * W, C))
    t_final = np.empty(H * W)
    touched = np.zeros(proj.count, dtype=np.int64)
    for tile, pix_color in zip(tiles, results):
        image[tile.pix] = pix_color
        t_final[tile.pix] = tile.t_final
        if tile.gauss.size:
            touched[tile.gauss] += tile.included.sum(axis=1)
    aux = RenderAux(tiles, W, H, C, bg, t_final.reshape(H, W), touched, proj.visible.copy(),
                    colors=colors, opacities=opac, projected=proj)
    return image.reshape(H, W, C), aux


def _tile_forward(tile: _Tile, proj, colors, opac, bg, width, early_stop):
    g = tile.gauss
    npix = tile.pix.size
    if g.size == 0:
        tile.t_final = np.ones(npix)
        return np.broadcast_to(bg, (npix, bg.size)).copy()
    px = (tile.pix % width) + 0.5
    py = (tile.pix // width) + 0.5
    dx = px[None, :] - proj.mean2d[g, 0][:, None]
    dy = py[None, :] - proj.mean2d[g, 1][:, None]
    a, b, c = (proj.conic[g, k][:, None] for k in range(3))
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    r = proj.radius[g][:, None]
    in_rect = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    gval = np.exp(np.minimum(power, 0.0))
    raw = opac[g][:, None] * gval
    alpha = np.minimum(raw, ALPHA_MAX)
    valid = in_rect & (alpha >= ALPHA_MIN) & (power <= 0)
    a_eff = np.where(valid, alpha, 0.0)
    t_incl = np.cumprod(1.0 - a_eff, axis=0)
    if early_stop:
        included = valid & (t_incl >= T_MIN)
        a_eff = np.where(included, alpha, 0.0)
        t_incl = np.cumprod(1.0 - a_eff, axis=0)
    else:
        included = valid
    t_excl = np.vstack([np.ones((1, npix)), t_incl[:-1]])
    weight = a_eff * t_excl
    tile.dx, tile.dy, tile.gval, tile.raw, tile.alpha = dx, dy, gval, raw, alpha
    tile.included, tile.t_excl, tile.weight, tile.t_final = included, t_excl, weight, t_incl[-1]
    return weight.T @ colors[g] + tile.t_final[:, None] * bg[None, :]


@dataclass
class RasterGrads:
    color: np.ndarray      # (N, C)
    opacity: np.ndarray    # (N,) w.r.t. activated opacity
    conic: np.ndarray      # (N, 3)
    mean2d: np.ndarray     # (N, 2) signed totals, pixels
    homodir: np.ndarray    # (N, 2) sums of per-pixel absolute mean2d gradients, pixels
    touched: np.ndarray    # (N,)


def rasterize_backward(aux: RenderAux, dimage: np.ndarray, threads: int = 1) -> RasterGrads:
    """Exact reverse of :func:`rasterize_forward`."""
    dimage = np.asarray(dimage, dtype=np.float64)
    if dimage.shape != (aux.height, aux.width, aux.channels):
        raise StaleCacheError(f"dL/dimage {dimage.shape} does not match render "
                              f"{(aux.height, aux.width, aux.channels)}")
    gflat = dimage.reshape(-1, aux.channels)
    proj, colors, opac, bg = aux.projected, aux.colors, aux.opacities, aux.background

    def run(tile: _Tile):
        return _tile_backward(tile, proj, colors, opac, bg, gflat)

    results = _map(run, aux.tiles, threads)
    n = proj.count
    grads = RasterGrads(np.zeros((n, aux.channels)), np.zeros(n), np.zeros((n, 3)),
                        np.zeros((n, 2)), np.zeros((n, 2)), aux.touched.copy())
    # fixed tile order keeps the reduction deterministic
    for tile, res in zip(aux.tiles, results):
        if res is None:
            continue
        g = tile.gauss
        dcol, dop, dcon, dmean, habs = res
        grads.color[g] += dcol
        grads.opacity[g] += dop
        grads.conic[g] += dcon
        grads.mean2d[g] += dmean
        grads.homodir[g] += habs
    return grads


def _tile_backward(tile: _Tile, proj, colors, opac, bg, gflat):
    g = tile.gauss
    if g.size == 0:
        return None
    gpix = gflat[tile.pix]                       # (P, C)
    q = colors[g] @ gpix.T                       # (G, P)
    wq = tile.weight * q
    suffix = np.cumsum(wq[::-1], axis=0)[::-1] - wq
    bgterm = tile.t_final * (gpix @ bg)
    dalpha = np.where(tile.included,
                      tile.t_excl * q - (suffix + bgterm[None, :]) / (1.0 - tile.alpha), 0.0)
    dcol = tile.weight @ gpix
    draw = np.where(tile.raw < ALPHA_MAX, dalpha, 0.0)
    dop = (draw * tile.gval).sum(axis=1)
    dpow = draw * opac[g][:, None] * tile.gval
    dx, dy = tile.dx, tile.dy
    a, b, c = (proj.conic[g, k][:, None] for k in range(3))
    dcon = np.stack([(-0.5 * dx * dx * dpow).sum(1), (-dx * dy * dpow).sum(1),
                     (-0.5 * dy * dy * dpow).sum(1)], axis=1)
    du = dpow * (a * dx + b * dy)
    dv = dpow * (b * dx + c * dy)
    dmean = np.stack([du.sum(1), dv.sum(1)], axis=1)
    habs = np.stack([np.abs(du).sum(1), np.abs(dv).sum(1)], axis=1)
    return dcol, dop, dcon, dmean, habs


ColorModel = Union[ColorDecoder, SHColorModel]


@dataclass
class RenderState:
    cloud: GaussianCloud
    model: ColorModel
    view: CameraView
    band: int
    projected: Projected2D
    rows: np.ndarray
    color_cache: object
    aux: RenderAux
    image: np.ndarray


def band_background(background, channels: int) -> np.ndarray:
    if background is None:
        return np.zeros(channels)
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    return np.full(channels, bg[0]) if bg.size == 1 else bg


def render_forward(cloud: GaussianCloud, model: ColorModel, view: CameraView, band: int,
                   band_set, background=None, threads: int = 1, early_stop: bool = True) -> RenderState:
    """project -> decode (visible primitives only) -> composite one band."""
    ch = band_set.channel_slice(band)
    nch = ch.stop - ch.start
    proj = project(cloud, view)
    rows = np.flatnonzero(proj.visible)
    dirs = view_directions(cloud.position[rows], view.camera_center)
    colors = np.zeros((cloud.count, nch))
    if isinstance(model, ColorDecoder):
        decoded, cache = decode_forward(cloud.feature[rows], _spherical(dirs), model)
        colors[rows] = decoded[:, ch]
    else:
        band_colors, cache = sh_eval(model, dirs, band, rows=rows)
        colors[rows] = band_colors
    image, aux = rasterize_forward(proj, colors, cloud.opacity[:, 0], band_background(background, nch),
                                   threads=threads, early_stop=early_stop)
    return RenderState(cloud, model, view, band, proj, rows, cache, aux, image)


def _spherical(dirs: np.ndarray) -> np.ndarray:
    if dirs.shape[0] == 0:
        return np.zeros((0, 2))
    return direction_to_spherical(dirs)


@dataclass
class RenderGrads:
    cloud: dict[str, np.ndarray]
    model: dict[str, np.ndarray]
    homodir: np.ndarray
    participated: np.ndarray
    touched: np.ndarray


def render_backward(state: RenderState, dimage: np.ndarray, band_set, geometry: bool = True,
                    threads: int = 1) -> RenderGrads:
    """Gradients of a scalar loss w.r.t. every cloud array and color-model parameter.

    With ``geometry=False`` the projection backward is skipped and position,
    rotation, log-scale and opacity gradients are returned as zeros.
    """
    cloud, model = state.cloud, state.model
    rg = rasterize_backward(state.aux, dimage, threads=threads)
    grads = {k: np.zeros_like(v) for k, v in cloud.arrays().items()}
    rows = state.rows
    if isinstance(model, ColorDecoder):
        dfull = np.zeros((rows.size, model.out_dim))
        dfull[:, band_set.channel_slice(state.band)] = rg.color[rows]
        dfeat, dmodel = decode_backward(state.color_cache, dfull, model)
        grads["feature"][rows] = dfeat
    else:
        dmodel = {"coeffs": sh_backward(model, state.color_cache, rg.color[rows])}
    if geometry:
        op = cloud.opacity[:, 0]
        grads["opacity_logit"][:, 0] = rg.opacity * op * (1.0 - op)
        geo = project_backward(cloud, state.view, state.projected, rg.mean2d, rg.conic)
        grads.update(geo)
    return RenderGrads(grads, dmodel, rg.homodir, state.projected.visible.copy(), rg.touched)


def render_view(cloud: GaussianCloud, model: ColorModel, view: CameraView, band: int, band_set,
                background=None, threads: int = 1) -> np.ndarray:
    """Render one band of ``view`` as an (H, W, C) float image."""
    return render_forward(cloud, model, view, band, band_set, background, threads).image
