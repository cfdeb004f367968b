"""COLMAP-text multi-camera datasets, image IO and synthetic scene generation.

Layout on disk::

    root/
      bands.toml            band manifest (name, channels, camera ids)
      sparse/cameras.txt
      sparse/images.txt
      sparse/points3D.txt
      images_<band>/...     one folder per band

Only the PINHOLE and SIMPLE_PINHOLE camera models are accepted.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import tomli
import tomli_w

from .checkpoint import Checkpoint, save_checkpoint
from .color import SH_C0, SHColorModel
from .errors import (
    ChannelMismatchError,
    DataError,
    DimensionMismatchError,
    ManifestError,
    UnsupportedCameraModelError,
)
from .raster import render_view
from .scene import (
    Band,
    CameraView,
    GaussianCloud,
    Intrinsics,
    SparsePoints,
    SpectralBandSet,
    logit,
    quaternion_to_rotation,
    rotation_to_quaternion,
)

log = logging.getLogger(__name__)

MANIFEST = "bands.toml"
SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


# ---------------------------------------------------------------- images

def read_image(path) -> np.ndarray:
    """Decode an image to float64 (H, W, C) in [0, 1]; integer max maps to exactly 1.0."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        out = img.astype(np.float64) / 255.0
    elif img.dtype == np.uint16:
        out = img.astype(np.float64) / 65535.0
    elif np.issubdtype(img.dtype, np.floating):
        out = img.astype(np.float64)
    else:
        raise DataError(f"unsupported pixel type {img.dtype} in {path}")
    if out.ndim == 2:
        return out[..., None]
    if out.shape[2] == 4:
        out = out[..., :3]
    return out[..., ::-1].copy()  # BGR -> RGB


def quantize(img, bits: int = 16) -> np.ndarray:
    """Round a [0, 1] image to the integer grid used when it is stored."""
    top = (1 << bits) - 1
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top).astype(
        np.uint16 if bits == 16 else np.uint8)


def write_image(path, img, bits: int = 16) -> None:
    """Write an (H, W[, C]) [0, 1] image as an 8- or 16-bit PNG/TIFF."""
    data = quantize(img, bits)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    elif data.ndim == 3:
        data = np.ascontiguousarray(data[..., ::-1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data):
        raise DataError(f"cannot write image {path}")


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling by an integer factor (trailing rows/cols dropped)."""
    if factor == 1:
        return img
    h, w = img.shape[0] // factor, img.shape[1] // factor
    c = img.shape[2]
    return img[:h * factor, :w * factor].reshape(h, factor, w, factor, c).mean(axis=(1, 3))


# ---------------------------------------------------------------- COLMAP text

def _data_lines(path):
    with open(path) as fh:
        return [ln.rstrip("\n") for ln in fh if not ln.lstrip().startswith("#")]


def _malformed_is_data_error(fn):
    """Turn stray int/float parse failures into a DataError naming the file."""
    @functools.wraps(fn)
    def wrapper(path, *args, **kwargs):
        try:
            return fn(path, *args, **kwargs)
        except DataError:
            raise
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: malformed line ({exc})") from None
    return wrapper


@_malformed_is_data_error
def parse_cameras(path) -> dict[int, Intrinsics]:
    cams = {}
    for ln in _data_lines(path):
        tok = ln.split()
        if not tok:
            continue
        cam_id, model = int(tok[0]), tok[1]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedCameraModelError(f"camera {cam_id}: unsupported camera model {model}")
        w, h = int(tok[2]), int(tok[3])
        p = [float(x) for x in tok[4:]]
        if model == "PINHOLE":
            if len(p) != 4:
                raise DataError(f"camera {cam_id}: PINHOLE needs fx fy cx cy")
            fx, fy, cx, cy = p
        else:
            if len(p) != 3:
                raise DataError(f"camera {cam_id}: SIMPLE_PINHOLE needs f cx cy")
            fx = fy = p[0]
            cx, cy = p[1], p[2]
        cams[cam_id] = Intrinsics(fx, fy, cx, cy, w, h)
    return cams


@dataclass
class ImageRecord:
    image_id: int
    qvec: np.ndarray   # (w, x, y, z), world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str


@_malformed_is_data_error
def parse_images(path) -> list[ImageRecord]:
    """Pose rows are followed by a 2D-points row, which may be empty."""
    lines = _data_lines(path)
    out, i = [], 0
    while i < len(lines):
        tok = lines[i].split()
        if not tok:
            i += 1
            continue
        if len(tok) < 10:
            raise DataError(f"{path}: malformed image row {lines[i]!r}")
        out.append(ImageRecord(int(tok[0]), np.array([float(x) for x in tok[1:5]]),
                               np.array([float(x) for x in tok[5:8]]), int(tok[8]), " ".join(tok[9:])))
        i += 2
    return out


@_malformed_is_data_error
def parse_points3d(path) -> SparsePoints:
    pos, col = [], []
    for ln in _data_lines(path):
        tok = ln.split()
        if not tok:
            continue
        pos.append([float(x) for x in tok[1:4]])
        col.append([int(x) for x in tok[4:7]])
    if not pos:
        return SparsePoints(np.zeros((0, 3)), np.zeros((0, 3)))
    return SparsePoints(np.array(pos), np.array(col, dtype=np.float64) / 255.0)


def write_colmap(sparse_dir, cameras: dict[int, Intrinsics], images: Sequence[ImageRecord],
                 points: SparsePoints) -> None:
    sparse_dir = Path(sparse_dir)
    sparse_dir.mkdir(parents=True, exist_ok=True)
    with open(sparse_dir / "cameras.txt", "w") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cid in sorted(cameras):
            k = cameras[cid]
            params = " ".join(repr(float(v)) for v in (k.fx, k.fy, k.cx, k.cy))
            fh.write(f"{cid} PINHOLE {k.width} {k.height} {params}\n")
    with open(sparse_dir / "images.txt", "w") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for r in images:
            vals = " ".join(repr(float(v)) for v in (*r.qvec, *r.tvec))
            fh.write(f"{r.image_id} {vals} {r.camera_id} {r.name}\n\n")
    with open(sparse_dir / "points3D.txt", "w") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        cols = points.colors if points.colors is not None else np.full((points.count, 3), 0.5)
        for i, (p, c) in enumerate(zip(points.positions, cols)):
            rgb = " ".join(str(int(v)) for v in np.round(np.clip(c, 0, 1) * 255))
            xyz = " ".join(repr(float(v)) for v in p)
            fh.write(f"{i + 1} {xyz} {rgb} 0\n")


# ---------------------------------------------------------------- manifest

def read_manifest(path) -> tuple[SpectralBandSet, dict[int, int]]:
    """Band set and camera_id -> band index mapping from ``bands.toml``."""
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"missing band manifest {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ManifestError(f"invalid band manifest {path}: {exc}") from None
    entries = doc.get("band")
    if not entries:
        raise ManifestError(f"{path} declares no [[band]] entries")
    bands, mapping = [], {}
    for i, e in enumerate(entries):
        try:
            bands.append(Band(str(e["name"]), int(e["channels"]), e.get("wavelength_nm")))
        except KeyError as exc:
            raise ManifestError(f"band entry {i} lacks {exc.args[0]!r}") from None
        for cid in e.get("camera_ids", []):
            if int(cid) in mapping:
                raise ManifestError(f"camera {cid} mapped to more than one band")
            mapping[int(cid)] = i
    return SpectralBandSet(tuple(bands)), mapping


def write_manifest(path, band_set: SpectralBandSet, mapping: dict[int, int]) -> None:
    entries = []
    for i, b in enumerate(band_set.bands):
        e = {"name": b.name, "channels": b.channel_count,
             "camera_ids": sorted(c for c, j in mapping.items() if j == i)}
        if b.wavelength_nm is not None:
            e["wavelength_nm"] = float(b.wavelength_nm)
        entries.append(e)
    with open(path, "wb") as fh:
        tomli_w.dump({"band": entries}, fh)


# ---------------------------------------------------------------- dataset

@dataclass
class Dataset:
    root: Path
    band_set: SpectralBandSet
    views: list[CameraView]
    points: SparsePoints

    def views_of(self, band: int) -> list[CameraView]:
        return [v for v in self.views if v.band_index == band]


def load_dataset(root, load_images: bool = True) -> Dataset:
    root = Path(root)
    band_set, mapping = read_manifest(root / MANIFEST)
    cams = parse_cameras(root / "sparse" / "cameras.txt")
    records = parse_images(root / "sparse" / "images.txt")
    points = parse_points3d(root / "sparse" / "points3D.txt")
    views = []
    for r in records:
        if r.camera_id not in cams:
            raise DataError(f"image {r.name!r} uses unknown camera {r.camera_id}")
        if r.camera_id not in mapping:
            raise ManifestError(f"camera {r.camera_id} (image {r.name!r}) has no band in {MANIFEST}")
        band = mapping[r.camera_id]
        view = CameraView(r.camera_id, band, cams[r.camera_id], quaternion_to_rotation(r.qvec), r.tvec,
                          name=r.name, image_path=str(root / r.name))
        if load_images:
            attach_image(view, band_set)
        views.append(view)
    return Dataset(root, band_set, views, points)


def attach_image(view: CameraView, band_set: SpectralBandSet) -> None:
    img = read_image(view.image_path)
    want = band_set[view.band_index].channel_count
    if img.shape[2] != want:
        if want == 1 and img.shape[2] == 3 and np.array_equal(img[..., 0], img[..., 1]):
            img = img[..., :1]
        else:
            raise ChannelMismatchError(f"{view.name}: {img.shape[2]} channels, band "
                                       f"{band_set[view.band_index].name} expects {want}")
    if img.shape[:2] != (view.height, view.width):
        raise DimensionMismatchError(f"{view.name}: image {img.shape[1]}x{img.shape[0]} vs camera "
                                     f"{view.width}x{view.height}")
    view.image = img


def split_train_eval(views: Sequence[CameraView], holdout_every: int = 10):
    """Per band, images 0, k, 2k, ... in filename order go to eval; the rest train."""
    train, held = [], []
    bands = sorted({v.band_index for v in views})
    for b in bands:
        ordered = sorted((v for v in views if v.band_index == b), key=lambda v: v.name)
        for i, v in enumerate(ordered):
            (held if i % holdout_every == 0 else train).append(v)
    return train, held


# ---------------------------------------------------------------- synthetic scenes

# smooth spectral basis over wavelength (nm) shared by all materials
_BASIS_CENTERS = (450.0, 600.0, 750.0, 900.0)
_BASIS_WIDTH = 120.0
_RGB_WAVELENGTHS = (640.0, 550.0, 460.0)


def _spectral_basis(wavelengths: np.ndarray) -> np.ndarray:
    lam = np.asarray(wavelengths, dtype=np.float64)[:, None]
    return np.exp(-0.5 * ((lam - np.array(_BASIS_CENTERS)) / _BASIS_WIDTH) ** 2)


def band_wavelengths(band_set: SpectralBandSet) -> np.ndarray:
    """One wavelength per output channel; RGB defaults to 640/550/460 nm."""
    out = []
    for i, b in enumerate(band_set.bands):
        if b.channel_count == 3 and b.wavelength_nm is None:
            out.extend(_RGB_WAVELENGTHS)
        else:
            w = b.wavelength_nm if b.wavelength_nm is not None else 500.0 + 100.0 * i
            out.extend([float(w)] * b.channel_count)
    return np.array(out)


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)):
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target`` (x right, y down, z forward)."""
    f = target - center
    f = f / np.linalg.norm(f)
    x = np.cross(f, up)
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return R, -R @ center


def _stations(rng, count: int, radius: float, phase: float = 0.0):
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(count)
    az = phase + k * golden + rng.uniform(-0.1, 0.1, count)
    elev = np.deg2rad(np.clip(55.0 * (2.0 * (k + 0.5) / count - 1.0) + rng.uniform(-3, 3, count), -60, 60))
    return radius * np.stack([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)], axis=1)


@dataclass
class SyntheticScene:
    root: Path
    checkpoint: Checkpoint   # ground truth (SH DC colors)
    dataset: Dataset


def make_synthetic_scene(out_dir, seed: int = 1, n_gaussians: int = 100, n_views_per_band: int = 16,
                         band_set: Optional[SpectralBandSet] = None, image_size: int = 64,
                         nir_texture: float = 0.0, interleave: bool = False,
                         point_noise: float = 0.02, views_per_band: Optional[dict] = None) -> SyntheticScene:
    """Render a random Gaussian scene into a COLMAP-text dataset.

    Colors are smooth functions of wavelength driven by per-primitive material
    latents, so all bands are correlated. ``nir_texture`` adds a per-primitive
    random offset to the NIR channel only (texture absent from RGB).
    ``interleave`` gives every band its own set of stations instead of one rig
    shared by all bands. ``views_per_band`` overrides the view count by band name.
    """
    band_set = band_set or SpectralBandSet.default()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    # ground-truth geometry
    n = n_gaussians
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    position = u * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / 3.0)
    q = rng.normal(size=(n, 4))
    rotation = q / np.linalg.norm(q, axis=1, keepdims=True)
    log_scale = np.log(rng.uniform(0.08, 0.25, (n, 3)))
    opacity_logit = logit(rng.uniform(0.6, 0.95, (n, 1)))
    cloud = GaussianCloud(position, rotation, log_scale, opacity_logit, np.zeros((n, 0)))

    # band-correlated colors from material latents
    latents = rng.normal(0.0, 1.2, (n, len(_BASIS_CENTERS)))
    raw = latents @ _spectral_basis(band_wavelengths(band_set)).T
    if nir_texture > 0:
        for i, b in enumerate(band_set.bands):
            if b.name.upper() == "NIR":
                raw[:, band_set.channel_slice(i)] += nir_texture * rng.choice([-1.0, 1.0], (n, 1))
    colors = 1.0 / (1.0 + np.exp(-raw))
    coeffs = (colors - 0.5) / SH_C0   # degree-0 SH, one coefficient per channel
    model = SHColorModel(coeffs, band_set, degree=0)
    gt = Checkpoint(band_set, cloud, model, 0, {"synthetic_seed": seed})

    # cameras: one physical camera per band, small rig offsets
    cameras, mapping, records = {}, {}, []
    counts = {b.name: n_views_per_band for b in band_set.bands}
    counts.update(views_per_band or {})
    shared = _stations(rng, max(counts.values()), 4.0)
    image_id = 1
    for bi, b in enumerate(band_set.bands):
        cid = bi + 1
        f = (1.7 if b.channel_count == 3 else 1.6) * image_size
        cameras[cid] = Intrinsics(f, f, image_size / 2.0, image_size / 2.0, image_size, image_size)
        mapping[cid] = bi
        stations = _stations(rng, counts[b.name], 4.0, phase=0.7 * bi) if interleave else shared
        offset = 0.03 * np.array([bi - (len(band_set) - 1) / 2.0, 0.0, 0.0])
        for s in range(counts[b.name]):
            R, _ = look_at(stations[s], np.zeros(3))
            center = stations[s] + R.T @ offset
            R, t = look_at(center, np.zeros(3))
            records.append(ImageRecord(image_id, rotation_to_quaternion(R), t, cid, f"images_{b.name}/{s:04d}.png"))
            image_id += 1

    for r in records:
        bi = mapping[r.camera_id]
        view = CameraView(r.camera_id, bi, cameras[r.camera_id], quaternion_to_rotation(r.qvec), r.tvec, r.name)
        write_image(out / r.name, render_view(cloud, model, view, bi, band_set))

    noisy = position + rng.normal(0.0, point_noise, position.shape)
    pt_rgb = colors[:, band_set.channel_slice(0)] if band_set[0].channel_count == 3 else np.repeat(
        colors[:, :1], 3, axis=1)
    write_colmap(out / "sparse", cameras, records, SparsePoints(noisy, pt_rgb))
    write_manifest(out / MANIFEST, band_set, mapping)
    save_checkpoint(gt, out / "ground_truth.ckpt")
    return SyntheticScene(out, gt, load_dataset(out))
