import numpy as np
import pytest
from scipy import stats

from msplat.checkpoint import to_bytes
from msplat.dataset import make_synthetic_scene
from msplat.errors import EmptyViewsError
from msplat.scene import init_from_points
from msplat.trainer import (
    GEOMETRY,
    TrainConfig,
    interleaved_view,
    resolution_factor,
    sample_view,
    train,
)


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    return make_synthetic_scene(tmp_path_factory.mktemp("syn"), seed=4, n_gaussians=30,
                                n_views_per_band=4, image_size=16)


def _cfg(**kw):
    base = dict(iterations=60, warmup_iters=20, densify_start=20, densify_interval=10,
                resolution_schedule=((10, 2),), tau_grad=1e-6)
    base.update(kw)
    return TrainConfig(**base)


def test_sampling_frequencies_match_weights(small_scene):
    ds = small_scene.dataset
    rng = np.random.default_rng(0)
    draws = 20000
    counts = np.zeros(len(ds.band_set))
    for _ in range(draws):
        counts[sample_view(rng, ds.views, ds.band_set, 4.0).band_index] += 1
    per_band = np.array([len(ds.views_of(b)) for b in range(len(ds.band_set))], float)
    w = per_band * np.array([4.0 if b.channel_count == 3 else 1.0 for b in ds.band_set.bands])
    expected = draws * w / w.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.01
    with pytest.raises(EmptyViewsError):
        sample_view(rng, [], ds.band_set)


def test_interleave_puts_rgb_after_four_multispectral(small_scene):
    ds = small_scene.dataset
    rng = np.random.default_rng(0)
    kinds = [ds.band_set[interleaved_view(rng, ds.views, ds.band_set, i).band_index].channel_count
             for i in range(10)]
    assert kinds == [1, 1, 1, 1, 3] * 2


def test_resolution_schedule():
    sched = ((250, 4), (500, 2))
    assert [resolution_factor(sched, i) for i in (0, 249, 250, 499, 500)] == [4, 4, 2, 2, 1]


def test_zero_iterations_returns_initialization(small_scene):
    ds = small_scene.dataset
    ck = train(ds, TrainConfig(iterations=0, seed=3))
    init = init_from_points(ds.points, feature_dim=8, knn_k=3, seed=3)
    for name, arr in init.arrays().items():
        assert np.array_equal(getattr(ck.cloud, name), arr)
    assert ck.iteration == 0


def test_warmup_freezes_geometry_only(small_scene):
    ds = small_scene.dataset
    init = train(ds, TrainConfig(iterations=0, seed=1))
    snaps = {}

    def cb(kind, payload):
        if kind == "step":
            snaps[payload["report"].iteration] = payload["state"].checkpoint()

    train(ds, _cfg(iterations=25, warmup_iters=20, seed=1), callback=cb)
    for it in range(20):
        for name in GEOMETRY:
            assert np.array_equal(getattr(snaps[it].cloud, name), getattr(init.cloud, name)), (it, name)
    last = snaps[19]
    assert not np.array_equal(last.cloud.feature, init.cloud.feature)
    assert not np.array_equal(last.model.params()["W0"], init.model.params()["W0"])
    assert not np.array_equal(snaps[24].cloud.position, init.cloud.position)


def test_same_seed_same_checkpoint_bytes(small_scene):
    ds = small_scene.dataset
    a = train(ds, _cfg(seed=7))
    b = train(ds, _cfg(seed=7))
    assert to_bytes(a) == to_bytes(b)


def test_optimizer_state_tracks_count_through_densify(small_scene):
    ds = small_scene.dataset
    counts = []

    def cb(kind, payload):
        if kind == "step":
            st = payload["state"]
            for name, arr in st.cloud.arrays().items():
                if name in st.optimizer.state:
                    assert st.optimizer.state[name].m.shape == arr.shape
            counts.append(st.cloud.count)

    train(ds, _cfg(), callback=cb)
    assert len(set(counts)) > 1


def test_sh_mode_trains(small_scene):
    ds = small_scene.dataset
    ck = train(ds, _cfg(color_model="sh", sh_degree=1))
    assert ck.color_model == "sh" and ck.model.coeffs.shape[0] == ck.cloud.count


def test_log_has_one_record_per_iteration(small_scene, tmp_path):
    import json
    path = tmp_path / "log.jsonl"
    train(small_scene.dataset, _cfg(iterations=30), log_path=path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["iter"] for r in rows] == list(range(1, 31))
    assert all(np.isfinite(r["loss"]) for r in rows)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=100, warmup_iters=500)
    with pytest.raises(ValueError):
        TrainConfig(color_model="mlp")
    assert TrainConfig(iterations=2000).stop == 1200
    d = TrainConfig().to_dict()
    assert TrainConfig.from_dict(d) == TrainConfig()
