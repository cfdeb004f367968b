"""Per-primitive color models.

The neural model decodes each primitive's feature vector, concatenated with
the spherical angles of the viewing direction, through one small MLP shared by
the whole scene into all B spectral channels at once. Forward and backward
passes are written out by hand so gradients are exact.

The spherical-harmonics model is the per-band baseline: every channel of every
band carries its own 16 degree-3 coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, InvalidDirectionError, StaleCacheError
from .scene import SpectralBandSet, sigmoid

ELU_ALPHA = 1.0


def direction_to_spherical(v: np.ndarray) -> np.ndarray:
    """(..., 3) directions -> (..., 2) array of (theta, phi) in radians.

    theta = acos(z) in [0, pi], phi = atan2(y, x) in (-pi, pi]. Inputs are
    normalized first.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidDirectionError("zero direction vector")
    v = v / norm
    theta = np.arccos(np.clip(v[..., 2], -1.0, 1.0))
    phi = np.arctan2(v[..., 1], v[..., 0])
    return np.stack([theta, phi], axis=-1)


def view_directions(positions: np.ndarray, camera_center: np.ndarray) -> np.ndarray:
    """Unit vectors from the camera center to each primitive mean."""
    d = np.asarray(positions, dtype=np.float64) - camera_center
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / np.where(norm > 0, norm, 1.0)


def elu(x):
    return np.where(x > 0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0.0)))


@dataclass
class ColorDecoder:
    """Shared MLP: (d + 2) -> W -> [W -> W] x L -> B.

    ``weights[k]`` has shape (fan_in, fan_out). ELU follows every layer except
    the last, which is squashed by a logistic function into [0, 1].
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0] - 2

    @property
    def width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 2

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
        return out

    def copy(self) -> "ColorDecoder":
        return ColorDecoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_decoder(feature_dim: int = 8, width: int = 32, hidden_layers: int = 1, out_dim: int = 7,
                 seed: int = 0) -> ColorDecoder:
    """Kaiming-uniform init as in a default torch ``nn.Linear``.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), i.e.
    Kaiming-uniform with negative slope sqrt(5). The larger ReLU-gain bound
    sqrt(6 / fan_in) lets the raw-radian direction input dominate the initial
    colors.
    """
    if min(feature_dim, width, out_dim) < 1 or hidden_layers < 0:
        raise DimensionMismatchError("decoder dimensions must be positive")
    rng = np.random.default_rng(seed)
    dims = [feature_dim + 2] + [width] * (hidden_layers + 1) + [out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ColorDecoder(weights, biases)


@dataclass
class DecoderCache:
    decoder: ColorDecoder
    inputs: list[np.ndarray]       # input of every affine layer
    preacts: list[np.ndarray]      # output of every affine layer
    output: np.ndarray


def decode_forward(features: np.ndarray, directions: np.ndarray,
                   decoder: ColorDecoder) -> tuple[np.ndarray, DecoderCache]:
    """Decode (N, d) features and (N, 2) spherical directions into (N, B) colors."""
    features = np.asarray(features, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != decoder.feature_dim:
        raise DimensionMismatchError(
            f"features {features.shape} do not match decoder feature_dim {decoder.feature_dim}")
    if directions.shape != (features.shape[0], 2):
        raise DimensionMismatchError(f"directions {directions.shape} must be ({features.shape[0]}, 2)")
    x = np.concatenate([features, directions], axis=1)
    inputs, preacts = [], []
    last = len(decoder.weights) - 1
    for k, (w, b) in enumerate(zip(decoder.weights, decoder.biases)):
        inputs.append(x)
        z = x @ w + b
        preacts.append(z)
        x = sigmoid(z) if k == last else elu(z)
    return x, DecoderCache(decoder, inputs, preacts, x)


def decode_backward(cache: DecoderCache, dcolors: np.ndarray,
                    decoder: Optional[ColorDecoder] = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Reverse pass of :func:`decode_forward`.

    Returns (dL/dfeatures of shape (N, d), dL/dparams keyed like
    :meth:`ColorDecoder.params`). The gradient reaching the direction inputs is
    dropped.
    """
    decoder = decoder or cache.decoder
    if decoder is not cache.decoder:
        raise StaleCacheError("cache was produced by a different decoder")
    dcolors = np.asarray(dcolors, dtype=np.float64)
    if dcolors.shape != cache.output.shape:
        raise StaleCacheError(f"dcolors {dcolors.shape} does not match cached output {cache.output.shape}")
    grads = {}
    y = cache.output
    dz = dcolors * y * (1.0 - y)
    for k in range(len(decoder.weights) - 1, -1, -1):
        grads[f"W{k}"] = cache.inputs[k].T @ dz
        grads[f"b{k}"] = dz.sum(axis=0)
        dx = dz @ decoder.weights[k].T
        if k > 0:
            dz = dx * elu_grad(cache.preacts[k - 1])
    d = decoder.feature_dim
    return dx[:, :d], {key: grads[key] for key in decoder.params()}


# Real spherical-harmonics constants, degree <= 3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def sh_basis(directions: np.ndarray, degree: int = 3) -> np.ndarray:
    """(N, (degree+1)^2) real SH basis evaluated at unit directions."""
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        cols += [SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2 * zz - xx - yy),
                 SH_C2[3] * xz, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        cols += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * xy * z, SH_C3[2] * y * (4 * zz - xx - yy),
                 SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
                 SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(cols, axis=1)


@dataclass
class SHColorModel:
    """Per-band SH coefficients stored as (S, K * B), channel-major, K = (degree+1)^2."""

    coeffs: np.ndarray
    band_set: SpectralBandSet
    degree: int = 3

    def __post_init__(self):
        k = (self.degree + 1) ** 2
        if self.coeffs.ndim != 2 or self.coeffs.shape[1] != k * self.band_set.total_channels:
            raise DimensionMismatchError(
                f"SH coefficients {self.coeffs.shape} must be (S, {k * self.band_set.total_channels})")

    @classmethod
    def zeros(cls, count: int, band_set: SpectralBandSet, degree: int = 3) -> "SHColorModel":
        return cls(np.zeros((count, (degree + 1) ** 2 * band_set.total_channels)), band_set, degree)

    @property
    def basis_size(self) -> int:
        return (self.degree + 1) ** 2

    def band_columns(self, band: int) -> slice:
        ch = self.band_set.channel_slice(band)
        k = self.basis_size
        return slice(ch.start * k, ch.stop * k)

    def copy(self) -> "SHColorModel":
        return SHColorModel(self.coeffs.copy(), self.band_set, self.degree)


@dataclass
class SHCache:
    basis: np.ndarray
    active: np.ndarray = field(repr=False)
    band: int = 0
    rows: Optional[np.ndarray] = None


def sh_eval(model: SHColorModel, directions: np.ndarray, band: int,
            rows: Optional[np.ndarray] = None) -> tuple[np.ndarray, SHCache]:
    """Colors of one band, max(sum coeff * basis + 0.5, 0), reading only that band's coefficients."""
    basis = sh_basis(directions, model.degree)
    coeffs = model.coeffs[:, model.band_columns(band)]
    if rows is not None:
        coeffs = coeffs[rows]
    coeffs = coeffs.reshape(coeffs.shape[0], -1, model.basis_size)
    raw = np.einsum("nck,nk->nc", coeffs, basis) + 0.5
    active = raw > 0
    return np.where(active, raw, 0.0), SHCache(basis, active, band, rows)


def sh_backward(model: SHColorModel, cache: SHCache, dcolors: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the full coefficient array; only the band's columns are non-zero."""
    g = np.where(cache.active, dcolors, 0.0)
    block = (g[:, :, None] * cache.basis[:, None, :]).reshape(g.shape[0], -1)
    out = np.zeros_like(model.coeffs)
    cols = model.band_columns(cache.band)
    if cache.rows is None:
        out[:, cols] = block
    else:
        out[cache.rows, cols] = block
    return out
