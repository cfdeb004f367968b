import numpy as np
import pytest

from msplat.color import (
    SH_C0,
    ColorDecoder,
    SHColorModel,
    decode_backward,
    decode_forward,
    direction_to_spherical,
    init_decoder,
    sh_backward,
    sh_basis,
    sh_eval,
)
from msplat.errors import DimensionMismatchError, InvalidDirectionError, StaleCacheError
from msplat.scene import SpectralBandSet


def test_spherical_axes():
    out = direction_to_spherical(np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, -2.0]]))
    assert np.allclose(out, [[0, 0], [np.pi / 2, 0], [np.pi / 2, np.pi / 2], [np.pi, 0]])
    with pytest.raises(InvalidDirectionError):
        direction_to_spherical(np.zeros(3))


def test_init_decoder_shapes_bounds_determinism():
    dec = init_decoder(8, 32, 1, 7, seed=4)
    assert dec.layer_shapes == [(10, 32), (32, 32), (32, 7)]
    for w, b in zip(dec.weights, dec.biases):
        bound = 1 / np.sqrt(w.shape[0])
        assert np.abs(w).max() <= bound and np.abs(b).max() <= bound
    assert np.abs(dec.weights[0]).max() > 0.9 / np.sqrt(10)
    assert dec.param_count() == 10 * 32 + 32 + 32 * 32 + 32 + 32 * 7 + 7 == 1639
    again = init_decoder(8, 32, 1, 7, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(dec.weights, again.weights))
    with pytest.raises(DimensionMismatchError):
        init_decoder(0, 32, 1, 7)


def test_decode_forward_basic_properties():
    rng = np.random.default_rng(0)
    dec = init_decoder(8, 32, 1, 7, seed=1)
    f = rng.normal(size=(20, 8))
    d = rng.uniform(0, np.pi, (20, 2))
    out, _ = decode_forward(f, d, dec)
    assert out.shape == (20, 7) and np.all((out > 0) & (out < 1))
    perm = rng.permutation(20)
    out_p, _ = decode_forward(f[perm], d[perm], dec)
    assert np.array_equal(out_p, out[perm])
    one, _ = decode_forward(f[3:4], d[3:4], dec)
    assert np.allclose(one, out[3:4], rtol=0, atol=1e-15)
    empty, _ = decode_forward(np.zeros((0, 8)), np.zeros((0, 2)), dec)
    assert empty.shape == (0, 7)
    zero = ColorDecoder([np.zeros_like(w) for w in dec.weights], [np.zeros_like(b) for b in dec.biases])
    assert np.all(decode_forward(f, d, zero)[0] == 0.5)
    with pytest.raises(DimensionMismatchError):
        decode_forward(f[:, :5], d, dec)


def _fd_decoder(dec, f, d, g, h=1e-5):
    def loss():
        return float(np.sum(decode_forward(f, d, dec)[0] * g))

    num_f = np.zeros_like(f)
    for idx in np.ndindex(f.shape):
        old = f[idx]
        f[idx] = old + h
        lp = loss()
        f[idx] = old - h
        lm = loss()
        f[idx] = old
        num_f[idx] = (lp - lm) / (2 * h)
    num_p = {}
    for name, p in dec.params().items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        num_p[name] = num
    return num_f, num_p


@pytest.mark.parametrize("layers", [0, 1, 2])
def test_decoder_gradients_match_finite_differences(layers):
    rng = np.random.default_rng(layers)
    dec = init_decoder(4, 6, layers, 5, seed=layers)
    for b in dec.biases:
        b[:] = rng.normal(0, 0.3, b.shape)
    f = rng.normal(size=(3, 4))
    d = rng.uniform(0, 3, (3, 2))
    g = rng.normal(size=(3, 5))
    out, cache = decode_forward(f, d, dec)
    df, dp = decode_backward(cache, g)
    num_f, num_p = _fd_decoder(dec, f, d, g)
    assert np.all(np.abs(df - num_f) / (np.abs(num_f) + 1e-8) < 1e-5)
    for name in dp:
        assert np.all(np.abs(dp[name] - num_p[name]) / (np.abs(num_p[name]) + 1e-8) < 1e-5), name


def test_decode_backward_zero_and_dead_input_and_stale_cache():
    rng = np.random.default_rng(3)
    dec = init_decoder(8, 16, 1, 7, seed=2)
    f = rng.normal(size=(5, 8))
    d = rng.uniform(0, 3, (5, 2))
    _, cache = decode_forward(f, d, dec)
    df, dp = decode_backward(cache, np.zeros((5, 7)))
    assert not df.any() and not any(v.any() for v in dp.values())
    dec.weights[0][2, :] = 0.0
    _, cache = decode_forward(f, d, dec)
    df, _ = decode_backward(cache, rng.normal(size=(5, 7)))
    assert np.all(df[:, 2] == 0)
    with pytest.raises(StaleCacheError):
        decode_backward(cache, np.zeros((4, 7)))
    with pytest.raises(StaleCacheError):
        decode_backward(cache, np.zeros((5, 7)), dec.copy())


def test_sh_constant_and_parity():
    bs = SpectralBandSet.default()
    model = SHColorModel.zeros(4, bs)
    dirs = np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 0.6, 0.8], [-0.6, 0, 0.8]])
    cols, _ = sh_eval(model, dirs, 0)
    assert np.all(cols == 0.5)
    model.coeffs[:, model.band_columns(2).start] = 0.7
    cols, _ = sh_eval(model, dirs, 2)
    assert np.allclose(cols, 0.7 * SH_C0 + 0.5)
    # degree-1 only: opposite directions reflect about 0.5
    m1 = SHColorModel.zeros(4, bs)
    cols_idx = np.arange(m1.band_columns(1).start + 1, m1.band_columns(1).start + 4)
    m1.coeffs[:, cols_idx] = np.random.default_rng(0).normal(0, 0.3, (4, 3))
    a, _ = sh_eval(m1, dirs, 1)
    b, _ = sh_eval(m1, -dirs, 1)
    assert np.allclose(a + b, 1.0)
    assert sh_basis(dirs).shape == (4, 16)


def test_sh_backward_matches_finite_differences_and_touches_one_band():
    rng = np.random.default_rng(5)
    bs = SpectralBandSet.default()
    model = SHColorModel(rng.normal(0, 0.1, (3, 16 * 7)), bs)
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    g = rng.normal(size=(3, 3))
    _, cache = sh_eval(model, dirs, 0)
    grad = sh_backward(model, cache, g)
    cols = model.band_columns(0)
    assert not np.delete(grad, np.arange(cols.start, cols.stop), axis=1).any()
    h = 1e-6
    for idx in [(0, 0), (1, 5), (2, 47)]:
        old = model.coeffs[idx]
        model.coeffs[idx] = old + h
        lp = np.sum(sh_eval(model, dirs, 0)[0] * g)
        model.coeffs[idx] = old - h
        lm = np.sum(sh_eval(model, dirs, 0)[0] * g)
        model.coeffs[idx] = old
        assert np.isclose(grad[idx], (lp - lm) / (2 * h), rtol=1e-6, atol=1e-9)
