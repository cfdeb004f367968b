import struct

import numpy as np
import pytest

from helpers import random_cloud
from msplat.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from msplat.color import SHColorModel, init_decoder
from msplat.dataset import (
    load_dataset,
    make_synthetic_scene,
    parse_cameras,
    parse_images,
    quantize,
    read_image,
    read_manifest,
    split_train_eval,
    write_image,
)
from msplat.errors import (
    CheckpointTruncatedError,
    CheckpointVersionError,
    ChecksumError,
    DataError,
    ManifestError,
    UnsupportedCameraModelError,
)
from msplat.metrics import psnr
from msplat.raster import render_view
from msplat.scene import SpectralBandSet


def _ckpt(seed=0, sh=False):
    rng = np.random.default_rng(seed)
    bs = SpectralBandSet.default()
    cloud = random_cloud(rng, 7)
    model = SHColorModel(rng.normal(size=(7, 16 * 7)), bs) if sh else init_decoder(8, 32, 1, 7, seed=seed)
    return Checkpoint(bs, cloud, model, 1234, {"seed": seed, "schedule": [[250, 4]]})


@pytest.mark.parametrize("sh", [False, True])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, sh):
    ck = _ckpt(3, sh)
    path = tmp_path / "a.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert to_bytes(back) == path.read_bytes()
    for name, arr in ck.cloud.arrays().items():
        assert np.array_equal(getattr(back.cloud, name), arr)
    assert back.iteration == 1234 and back.config == ck.config
    assert back.color_model == ("sh" if sh else "neural")


def test_checkpoint_corruption_truncation_and_version(tmp_path):
    data = bytearray(to_bytes(_ckpt()))
    bad = bytearray(data)
    bad[100] ^= 0xFF
    with pytest.raises(ChecksumError):
        from_bytes(bytes(bad))
    with pytest.raises(CheckpointTruncatedError):
        from_bytes(bytes(data[:-10]))
    future = bytearray(data)
    struct.pack_into("<I", future, 8, 99)
    with pytest.raises(CheckpointVersionError):
        from_bytes(bytes(future))


def test_colmap_parsing(tmp_path):
    cams = tmp_path / "cameras.txt"
    cams.write_text("# comment\n1 PINHOLE 64 64 100 100 32 32\n2 SIMPLE_PINHOLE 32 16 50 16 8\n")
    k = parse_cameras(cams)
    assert (k[1].fx, k[1].fy, k[1].cx, k[1].cy) == (100, 100, 32, 32)
    assert (k[2].fx, k[2].fy, k[2].width, k[2].height) == (50, 50, 32, 16)
    cams.write_text("1 OPENCV 64 64 100 100 32 32 0 0 0 0\n")
    with pytest.raises(UnsupportedCameraModelError, match="OPENCV"):
        parse_cameras(cams)
    imgs = tmp_path / "images.txt"
    imgs.write_text("# header\n1 1 0 0 0 0 0 4 1 images_RGB/a.png\n\n"
                    "2 0.7071067811865476 0.7071067811865476 0 0 1 2 3 1 images_RGB/b.png\n10 20 -1\n")
    rec = parse_images(imgs)
    assert [r.name for r in rec] == ["images_RGB/a.png", "images_RGB/b.png"]
    from msplat.scene import quaternion_to_rotation
    assert np.allclose(quaternion_to_rotation(rec[0].qvec), np.eye(3))
    cams.write_text("1 PINHOLE 64 64 100 abc 32 32\n")
    with pytest.raises(DataError, match="cameras.txt"):
        parse_cameras(cams)


def test_image_io_maps_max_to_one(tmp_path):
    img = np.zeros((4, 5, 3))
    img[0, 0] = [1.0, 0.5, 0.0]
    write_image(tmp_path / "a.png", img, bits=16)
    back = read_image(tmp_path / "a.png")
    assert back.shape == (4, 5, 3) and back[0, 0, 0] == 1.0
    assert np.isclose(back[0, 0, 1], 0.5, atol=1e-5) and back[0, 0, 2] == 0.0
    write_image(tmp_path / "g.png", np.full((3, 3, 1), 1.0), bits=8)
    g = read_image(tmp_path / "g.png")
    assert g.shape == (3, 3, 1) and np.all(g == 1.0)
    assert quantize(np.array([0.0, 1.0]), 8).tolist() == [0, 255]


def test_split_every_tenth_per_band():
    from msplat.scene import CameraView, Intrinsics
    k = Intrinsics(10, 10, 4, 4, 8, 8)
    views = [CameraView(1, 0, k, np.eye(3), np.zeros(3), name=f"a/{i:03d}.png") for i in range(20)]
    views += [CameraView(2, 1, k, np.eye(3), np.zeros(3), name=f"b/{i:03d}.png") for i in range(9)]
    train, held = split_train_eval(views[::-1])
    assert sorted(v.name for v in held) == ["a/000.png", "a/010.png", "b/000.png"]
    assert len(train) == 26
    assert [v.name for v in split_train_eval(views)[1]] == [v.name for v in held]


def test_synthetic_scene_is_self_consistent_and_deterministic(tmp_path):
    bs = SpectralBandSet.default()
    a = make_synthetic_scene(tmp_path / "a", seed=2, n_gaussians=20, n_views_per_band=3, image_size=16)
    b = make_synthetic_scene(tmp_path / "b", seed=2, n_gaussians=20, n_views_per_band=3, image_size=16)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    ds = load_dataset(tmp_path / "a")
    assert ds.band_set == bs and len(ds.views) == 15
    assert read_manifest(tmp_path / "a" / "bands.toml")[0].names == bs.names
    for v in ds.views:
        ref = render_view(a.checkpoint.cloud, a.checkpoint.model, v, v.band_index, bs)
        assert psnr(quantize(ref) / 65535.0, v.image) == np.inf
        assert v.image.shape[2] == bs[v.band_index].channel_count


def test_missing_band_mapping_is_a_manifest_error(tmp_path):
    make_synthetic_scene(tmp_path, seed=0, n_gaussians=10, n_views_per_band=1, image_size=16)
    import tomli
    import tomli_w

    doc = tomli.loads((tmp_path / "bands.toml").read_text())
    doc["band"][-1]["camera_ids"] = []
    (tmp_path / "bands.toml").write_text(tomli_w.dumps(doc))
    with pytest.raises(ManifestError):
        load_dataset(tmp_path)
