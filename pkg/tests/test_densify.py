import numpy as np
import pytest

from helpers import random_cloud
from msplat import densify as dens
from msplat.errors import DimensionMismatchError, IndexOutOfRangeError
from msplat.optim import Adam, Moments, adam_step


def test_criterion_uses_max_over_bands():
    state = dens.DensifyState.zeros(3, 2)
    state.grad_sum[:] = [[0.0002, 0.0009], [0.0005, 0.0005], [0.0, 0.0]]
    state.count[:] = [[1, 1], [1, 1], [0, 0]]
    assert dens.criterion(state, 0.0008).tolist() == [True, False, False]


def test_unseen_bands_are_ignored_and_averages_divide_by_events():
    state = dens.DensifyState.zeros(2, 3)
    norms = np.array([[0.001, 0.0], [0.0004, 0.0003]])
    vis = np.array([True, True])
    dens.accumulate(state, 1, norms, vis)
    dens.accumulate(state, 1, np.zeros((2, 2)), vis)
    avg = state.averages()
    assert np.isnan(avg[0, 0]) and np.isclose(avg[0, 1], 0.0005) and np.isclose(avg[1, 1], 0.00025)
    assert dens.criterion(state, 0.0004).tolist() == [True, False]
    with pytest.raises(IndexOutOfRangeError):
        dens.accumulate(state, 3, norms, vis)
    with pytest.raises(DimensionMismatchError):
        dens.accumulate(state, 0, norms[:1], vis)


def test_accumulate_skips_non_participants():
    state = dens.DensifyState.zeros(2, 1)
    dens.accumulate(state, 0, np.ones((2, 2)), np.array([True, False]))
    assert state.count[:, 0].tolist() == [1, 0]
    assert np.isclose(state.grad_sum[0, 0], np.sqrt(2))


def test_split_and_clone_layout_and_optimizer_moments():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 4)
    cloud.log_scale[0] = np.log(0.5)    # large -> split
    cloud.log_scale[1] = np.log(0.001)  # small -> clone
    opt = Adam()
    for name, arr in cloud.arrays().items():
        opt.step(name, arr.copy(), np.ones_like(arr), 0.1)
    mask = np.array([True, True, False, False])
    state = dens.DensifyState.zeros(4, 2)
    new, _ = dens.apply(cloud, opt, mask, scene_extent=1.0, rng=rng, state=state)
    # keep 1, 2, 3 then the clone of 1 then two children of 0
    assert new.count == 4 - 1 + 1 + 2
    assert np.array_equal(new.position[:3], cloud.position[1:])
    assert np.array_equal(new.position[3], cloud.position[1])
    assert np.allclose(new.log_scale[4:], cloud.log_scale[0] - np.log(1.6))
    assert np.array_equal(new.feature[4], cloud.feature[0])
    for name in cloud.arrays():
        m = opt.state[name].m
        assert m.shape == getattr(new, name).shape
        assert np.all(m[3:] == 0) and np.all(m[:3] != 0)
    assert state.grad_sum.shape == (6, 2)


def test_prune_by_opacity_and_world_scale():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 5, scale=(0.01, 0.02))
    cloud.opacity_logit[1] = -10.0
    cloud.log_scale[3, 2] = np.log(0.5)
    extra = {"sh": np.arange(10.0).reshape(5, 2)}
    new, out = dens.prune(cloud, None, scene_extent=1.0, extra=extra)
    assert new.count == 3
    assert np.array_equal(out["sh"], extra["sh"][[0, 2, 4]])


def test_adam_one_step_and_zero_gradient():
    st = Moments(np.zeros(1), np.zeros(1))
    out = adam_step(np.zeros(1), np.ones(1), st, 0.005)
    assert np.isclose(out[0], -0.005)
    st = Moments(np.zeros(3), np.zeros(3))
    p = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(adam_step(p, np.zeros(3), st, 0.1), p)
    with pytest.raises(DimensionMismatchError):
        Adam().step("x", np.zeros(3), np.zeros(2), 0.1)
