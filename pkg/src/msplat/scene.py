"""Shared-geometry Gaussian scene, cameras and spectral band bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BandNotFoundError,
    DataError,
    DimensionMismatchError,
    InsufficientPointsError,
    InvalidRotationError,
)

GEOMETRY_FLOATS = 11  # 3 position + 4 quaternion + 3 scale + 1 opacity
INITIAL_OPACITY = 0.1


@dataclass(frozen=True)
class Band:
    name: str
    channel_count: int
    wavelength_nm: Optional[float] = None

    def __post_init__(self):
        if self.channel_count < 1:
            raise DataError(f"band {self.name!r} needs at least one channel")


@dataclass(frozen=True)
class SpectralBandSet:
    """Ordered bands; decoder output channels are laid out in this order."""

    bands: tuple[Band, ...]

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        if not self.bands:
            raise DataError("band set is empty")
        names = [b.name for b in self.bands]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate band names in {names}")

    @classmethod
    def default(cls) -> "SpectralBandSet":
        """RGB plus the four single-channel multi-spectral cameras (B = 7)."""
        return cls((
            Band("RGB", 3),
            Band("G", 1, 560.0),
            Band("R", 1, 650.0),
            Band("RE", 1, 730.0),
            Band("NIR", 1, 840.0),
        ))

    @property
    def total_channels(self) -> int:
        return sum(b.channel_count for b in self.bands)

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.bands]

    def __len__(self) -> int:
        return len(self.bands)

    def __getitem__(self, i: int) -> Band:
        return self.bands[i]

    def index_of(self, name: str) -> int:
        for i, b in enumerate(self.bands):
            if b.name == name:
                return i
        # case-insensitive fallback so "nir" finds "NIR"
        for i, b in enumerate(self.bands):
            if b.name.lower() == name.lower():
                return i
        raise BandNotFoundError(f"band {name!r} not in {self.names}")

    def channel_slice(self, index: int) -> slice:
        start = sum(b.channel_count for b in self.bands[:index])
        return slice(start, start + self.bands[index].channel_count)

    def spectral_indices(self) -> list[int]:
        """Indices of single-channel bands, i.e. the multi-spectral stack."""
        return [i for i, b in enumerate(self.bands) if b.channel_count == 1]

    def to_dict(self) -> list[dict]:
        return [
            {"name": b.name, "channel_count": b.channel_count, "wavelength_nm": b.wavelength_nm}
            for b in self.bands
        ]

    @classmethod
    def from_dict(cls, items: Sequence[dict]) -> "SpectralBandSet":
        return cls(tuple(Band(d["name"], int(d["channel_count"]), d.get("wavelength_nm")) for d in items))


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first; a zero quaternion raises.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidRotationError("zero quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quaternion_to_rotation` for a single matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def covariance_of(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World-space covariance R diag(exp(2 log_scale)) R^T.

    Works on a single Gaussian ((4,), (3,)) or a batch ((N, 4), (N, 3)).
    """
    R = quaternion_to_rotation(rotation)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    cov = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian primitives.

    Attributes:
        position: (S, 3) world-space means.
        rotation: (S, 4) quaternions (w, x, y, z); normalized at use.
        log_scale: (S, 3) log of per-axis standard deviations.
        opacity_logit: (S, 1) pre-sigmoid opacity.
        feature: (S, d) appearance features decoded by the shared MLP.
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    feature: np.ndarray

    ARRAYS = ("position", "rotation", "log_scale", "opacity_logit", "feature")

    def __post_init__(self):
        n = self.position.shape[0]
        expected = {"position": 3, "rotation": 4, "log_scale": 3, "opacity_logit": 1}
        for name in self.ARRAYS:
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected leading dimension {n}")
            if name in expected and arr.shape[1] != expected[name]:
                raise DimensionMismatchError(f"{name} has shape {arr.shape}")

    @classmethod
    def empty(cls, feature_dim: int = 8) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 1)), np.zeros((0, feature_dim)))

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.ARRAYS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.arrays().items()})

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(**{k: v[index] for k, v in self.arrays().items()})

    def covariances(self) -> np.ndarray:
        return covariance_of(self.rotation, self.log_scale)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image downsampled by an integer factor."""
        if factor == 1:
            return self
        w, h = self.width // factor, self.height // factor
        return Intrinsics(self.fx / factor, self.fy / factor,
                          min(self.cx / factor, w - 1e-6), min(self.cy / factor, h - 1e-6), w, h)


@dataclass
class CameraView:
    """One image of one physical camera: pinhole intrinsics plus world-to-camera pose."""

    camera_id: int
    band_index: int
    intrinsics: Intrinsics
    rotation: np.ndarray
    translation: np.ndarray
    name: str = ""
    image: Optional[np.ndarray] = field(default=None, repr=False)
    image_path: Optional[str] = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise InvalidRotationError("world_to_camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) <= 0:
            raise InvalidRotationError("world_to_camera rotation has negative determinant")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def capture_key(self) -> str:
        """File stem shared by images of all bands taken at the same capture."""
        base = self.name.replace("\\", "/").rsplit("/", 1)[-1]
        return base.rsplit(".", 1)[0]

    def scaled(self, factor: int) -> "CameraView":
        return replace(self, intrinsics=self.intrinsics.scaled(factor), image=None)


@dataclass
class SparsePoints:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def knn_mean_distance(points: np.ndarray, k: int, chunk_elems: int = 1 << 22) -> np.ndarray:
    """Mean Euclidean distance of each point to its k nearest other points (brute force)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    sq = np.einsum("ij,ij->i", points, points)
    out = np.empty(n)
    step = max(1, chunk_elems // max(n, 1))
    for start in range(0, n, step):
        block = points[start:start + step]
        d2 = sq[start:start + step, None] + sq[None, :] - 2.0 * block @ points.T
        np.maximum(d2, 0.0, out=d2)
        d2[np.arange(block.shape[0]), np.arange(start, start + block.shape[0])] = np.inf
        nearest = np.partition(d2, k - 1, axis=1)[:, :k]
        out[start:start + step] = np.sqrt(nearest).mean(axis=1)
    return out


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """(P, k) indices of the k nearest other points, nearest first, ties by index."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((n, 0), dtype=np.int64)
    out = np.empty((n, k), dtype=np.int64)
    step = max(1, (1 << 22) // n)
    for start in range(0, n, step):
        block = points[start:start + step]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        d2[np.arange(block.shape[0]), np.arange(start, start + block.shape[0])] = np.inf
        out[start:start + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def init_from_points(points: SparsePoints, feature_dim: int = 8, knn_k: int = 3, seed: int = 0,
                     feature_std: float = 0.2) -> GaussianCloud:
    """One isotropic Gaussian per sparse point.

    Scale is the mean distance to the ``knn_k`` nearest neighbours, rotations are
    identity, opacity starts at 0.1 and features are drawn from N(0, 0.2^2).
    Point colors are ignored.
    """
    pos = np.asarray(points.positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise DimensionMismatchError(f"points must be (P, 3), got {pos.shape}")
    if pos.shape[0] < knn_k + 1:
        raise InsufficientPointsError(f"need at least {knn_k + 1} points, got {pos.shape[0]}")
    rng = np.random.default_rng(seed)
    n = pos.shape[0]
    dist = np.maximum(knn_mean_distance(pos, knn_k), 1e-7)
    log_scale = np.repeat(np.log(dist)[:, None], 3, axis=1)
    rotation = np.zeros((n, 4))
    rotation[:, 0] = 1.0
    opacity_logit = np.full((n, 1), float(logit(INITIAL_OPACITY)))
    feature = rng.normal(0.0, feature_std, size=(n, feature_dim))
    return GaussianCloud(pos.copy(), rotation, log_scale, opacity_logit, feature)


def payload_floats_per_primitive(color_model: str, feature_dim: int = 8, sh_degree: int = 3,
                                 band_set: Optional[SpectralBandSet] = None) -> int:
    """Floats stored per primitive for a color model.

    ``"neural"`` stores a ``feature_dim`` vector; ``"sh"`` stores (degree+1)^2
    coefficients for every channel of every band.
    """
    if color_model == "neural":
        return GEOMETRY_FLOATS + feature_dim
    if color_model == "sh":
        band_set = band_set or SpectralBandSet.default()
        return GEOMETRY_FLOATS + (sh_degree + 1) ** 2 * band_set.total_channels
    raise DataError(f"unknown color model {color_model!r}")
