"""Scene builders and independent oracles shared by the tests."""

import numpy as np

from msplat.color import SHColorModel, init_decoder
from msplat.raster import render_backward, render_forward
from msplat.scene import CameraView, GaussianCloud, Intrinsics, SpectralBandSet

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


def front_view(size=8, focal=None, distance=4.0, band=0):
    """Camera at (0, 0, -distance) looking down +z."""
    f = focal if focal is not None else 2.0 * size
    intr = Intrinsics(f, f, size / 2.0, size / 2.0, size, size)
    return CameraView(1, band, intr, np.eye(3), np.array([0.0, 0.0, distance]), name="img/0000.png")


def random_cloud(rng, n, spread=0.4, scale=(0.05, 0.2), feature_dim=8, opacity=(0.3, 0.9)):
    pos = rng.uniform(-spread, spread, (n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    log_scale = np.log(rng.uniform(*scale, (n, 3)))
    op = rng.uniform(*opacity, (n, 1))
    return GaussianCloud(pos, q, log_scale, np.log(op / (1 - op)), rng.normal(0, 0.5, (n, feature_dim)))


def single_band(channels=1):
    from msplat.scene import Band
    return SpectralBandSet((Band("X", channels),))


def brute_force_composite(proj, colors, opacities, background, early_stop=True):
    """Per-pixel reference: full depth sort, footprint test, front-to-back loop."""
    H, W = proj.height, proj.width
    C = colors.shape[1]
    out = np.zeros((H, W, C))
    tsum = np.zeros((H, W))
    tfinal = np.zeros((H, W))
    ids = [i for i in range(proj.count) if proj.visible[i]]
    ids.sort(key=lambda i: (proj.depth[i], i))
    for y in range(H):
        for x in range(W):
            px, py = x + 0.5, y + 0.5
            T = 1.0
            acc = np.zeros(C)
            wsum = 0.0
            for i in ids:
                dx, dy = px - proj.mean2d[i, 0], py - proj.mean2d[i, 1]
                r = proj.radius[i]
                if abs(dx) > r or abs(dy) > r:
                    continue
                a, b, c = proj.conic[i]
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0:
                    continue
                alpha = min(ALPHA_MAX, opacities[i] * np.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                t_next = T * (1.0 - alpha)
                if early_stop and t_next < T_MIN:
                    break
                acc += alpha * T * colors[i]
                wsum += alpha * T
                T = t_next
            out[y, x] = acc + T * background
            tsum[y, x] = wsum
            tfinal[y, x] = T
    return out, tsum, tfinal


def contributor_signature(state):
    """Everything that decides which Gaussians contribute where; FD steps that change it cross a kink."""
    proj = state.projected
    parts = [proj.visible.tobytes(), proj.radius.tobytes()]
    for t in state.aux.tiles:
        parts.append(t.gauss.tobytes())
        if t.included is not None:
            parts.append(t.included.tobytes())
            parts.append((t.raw < ALPHA_MAX).tobytes())
    return b"|".join(parts)


def pipeline_loss(cloud, model, view, band_set, weights, background=None):
    st = render_forward(cloud, model, view, 0, band_set, background)
    return float(np.sum(st.image * weights)), st


def pipeline_grads(cloud, model, view, band_set, weights, background=None):
    st = render_forward(cloud, model, view, 0, band_set, background)
    return render_backward(st, weights, band_set), st


def default_decoder(channels, seed=0, feature_dim=8):
    return init_decoder(feature_dim, 16, 1, channels, seed=seed)


FD_ARRAYS = ("position", "log_scale", "rotation", "opacity_logit")


def rasterizer_fd_check(seed, h=1e-4, n_max=5, size=8, channels=3, atol=1e-6):
    """Central differences against the analytic render gradients of one random tiny scene.

    Returns ``(worst relative error, coordinates checked, coordinates skipped)``.
    A coordinate is skipped when the +h or -h render has a different set of
    contributing (Gaussian, pixel) pairs or alpha-clamp pattern: the loss is
    not differentiable across that boundary.
    """
    from msplat.raster import rasterize_backward, rasterize_forward, project

    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    cloud = random_cloud(rng, n, spread=0.3, scale=(0.06, 0.25))
    bs = single_band(channels)
    # view-independent colors: the decoder's direction input carries no gradient by design
    model = SHColorModel(rng.uniform(-1.0, 1.0, (n, channels)), bs, degree=0)
    view = front_view(size)
    weights = rng.normal(size=(size, size, channels))
    bg = rng.uniform(0, 1, channels)
    grads, st0 = pipeline_grads(cloud, model, view, bs, weights, bg)
    sig0 = contributor_signature(st0)

    worst, checked, skipped = 0.0, 0, 0
    for name in FD_ARRAYS:
        arr = getattr(cloud, name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp, sp = pipeline_loss(cloud, model, view, bs, weights, bg)
            arr[idx] = old - h
            fm, sm = pipeline_loss(cloud, model, view, bs, weights, bg)
            arr[idx] = old
            if contributor_signature(sp) != sig0 or contributor_signature(sm) != sig0:
                skipped += 1
                continue
            fd = (fp - fm) / (2 * h)
            an = grads.cloud[name][idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), atol))
            checked += 1

    # per-Gaussian colors, directly at the compositing stage
    proj = project(cloud, view)
    colors = rng.uniform(0, 1, (n, channels))
    op = cloud.opacity[:, 0]
    _, aux = rasterize_forward(proj, colors, op, bg)
    rg = rasterize_backward(aux, weights)
    for idx in np.ndindex(colors.shape):
        old = colors[idx]
        colors[idx] = old + h
        fp = float(np.sum(rasterize_forward(proj, colors, op, bg)[0] * weights))
        colors[idx] = old - h
        fm = float(np.sum(rasterize_forward(proj, colors, op, bg)[0] * weights))
        colors[idx] = old
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(rg.color[idx] - fd) / max(abs(rg.color[idx]), abs(fd), atol))
        checked += 1
    return worst, checked, skipped
