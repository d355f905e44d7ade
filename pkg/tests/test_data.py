import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from csrcnn.data import (
    DatasetSpec, ImageY, augment, bicubic_resample, cubic_kernel, load_image_y,
    make_samples, modcrop, prepare_dataset, resize_matrix, rotate, save_image_y)
from csrcnn.errors import ConfigError
from csrcnn.model import build_cascade, StageConfig
from csrcnn.data import model_ladder

from oracles import keys_kernel, resize_1d_direct


def write_rgb(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def test_white_and_black_luma(tmp_path):
    write_rgb(tmp_path / "w.png", np.full((2, 2, 3), 255))
    write_rgb(tmp_path / "b.bmp", np.zeros((2, 2, 3)))
    assert np.allclose(load_image_y(tmp_path / "w.png").values, 235 / 255)
    assert np.allclose(load_image_y(tmp_path / "b.bmp").values, 16 / 255)


def test_gray_round_trip(tmp_path):
    ramp = np.array([[0.0, 0.25], [0.5, 1.0]])
    save_image_y(ImageY(ramp), tmp_path / "r.png")
    back = load_image_y(tmp_path / "r.png")
    assert np.abs(back.values - ramp).max() <= 1 / 255


def test_unreadable(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="bad.png"):
        load_image_y(bad)
    with pytest.raises(OSError, match="missing.png"):
        load_image_y(tmp_path / "missing.png")


def test_kernel_values():
    assert cubic_kernel(0) == 1
    assert cubic_kernel(1) == 0
    assert cubic_kernel(0.5) == 0.5625
    assert cubic_kernel(2) == 0 and cubic_kernel(-1.5) == keys_kernel(1.5)


@pytest.mark.parametrize("shape", [(5, 7), (8, 8), (16, 3)])
@pytest.mark.parametrize("out", [(2, 3), (8, 8), (13, 29)])
def test_constant_preserved(shape, out):
    img = np.full(shape, 0.37)
    np.testing.assert_allclose(bicubic_resample(img, *out), 0.37, atol=1e-12)


def test_identity_resize(rng):
    img = rng.random((9, 6))
    np.testing.assert_array_equal(bicubic_resample(img, 9, 6), img)


def test_rows_sum_to_one():
    for n_in, n_out in [(8, 4), (8, 3), (5, 17), (96, 12)]:
        np.testing.assert_allclose(resize_matrix(n_in, n_out).sum(axis=1), 1, atol=1e-9)


def test_downscale_ramp_matches_direct():
    ramp = np.add.outer(np.arange(8), 2 * np.arange(8)) / 30.0
    out = bicubic_resample(ramp, 4, 4)
    rows = np.array([resize_1d_direct(r, 4) for r in ramp.T]).T
    ref = np.array([resize_1d_direct(r, 4) for r in rows])
    np.testing.assert_allclose(out, np.clip(ref, 0, 1), atol=1e-12)


def test_upscale_matches_direct(rng):
    img = rng.random((5, 6))
    out = bicubic_resample(img, 11, 13)
    rows = np.array([resize_1d_direct(c, 11) for c in img.T]).T
    ref = np.array([resize_1d_direct(r, 13) for r in rows])
    np.testing.assert_allclose(out, np.clip(ref, 0, 1), atol=1e-12)


def test_plain_kernel_option(rng):
    img = rng.random((8, 8))
    out = bicubic_resample(img, 4, 4, antialias=False)
    rows = np.array([resize_1d_direct(c, 4, antialias=False) for c in img.T]).T
    ref = np.array([resize_1d_direct(r, 4, antialias=False) for r in rows])
    np.testing.assert_allclose(out, np.clip(ref, 0, 1), atol=1e-12)


def test_constant_down_up_identity():
    img = np.full((32, 24), 0.6)
    back = bicubic_resample(bicubic_resample(img, 4, 3), 32, 24)
    np.testing.assert_allclose(back, img, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 40), st.integers(1, 40))
def test_values_stay_in_unit_range(h, w, oh, ow):
    img = np.random.default_rng(h * 100 + w).random((h, w))
    out = bicubic_resample(img, oh, ow)
    assert out.shape == (oh, ow)
    assert out.min() >= 0 and out.max() <= 1


def test_rotations(rng):
    img = ImageY(rng.random((4, 7)))
    r = rotate(img, 90)
    assert r.shape == (7, 4)
    np.testing.assert_array_equal(rotate(rotate(img, 180), 180).values, img.values)


def test_augment_count():
    img = ImageY(np.random.default_rng(0).random((20, 30)), ("src",))
    variants = augment(img)
    assert len(variants) == 20
    assert len({v.provenance for v in variants}) == 20
    assert variants[0].shape == (20, 30) and variants[1].shape == (30, 20)
    assert variants[-1].shape == (round(30 * 0.6), round(20 * 0.6))


def test_make_samples_ladder():
    img = ImageY(np.random.default_rng(0).random((96, 96)))
    (s,) = make_samples(img, 96, 48)
    assert s.input.shape == (1, 12, 12)
    assert [t.shape for t in s.targets] == [(1, 24, 24), (1, 48, 48), (1, 96, 96)]
    np.testing.assert_allclose(s.targets[-1][0], img.values, atol=1e-7)
    # each level is taken from the HR crop directly
    np.testing.assert_allclose(s.input[0], bicubic_resample(img.values, 12, 12), atol=1e-6)


def test_make_samples_counts():
    assert make_samples(ImageY(np.zeros((95, 96))), 96, 48) == []
    assert len(make_samples(ImageY(np.zeros((128, 128))), 96, 32)) == ((128 - 96) // 32 + 1) ** 2
    with pytest.raises(ConfigError):
        make_samples(ImageY(np.zeros((96, 96))), 90, 48)


def test_model_ladder():
    assert model_ladder(build_cascade(stage_count=3)) == (8, 4, 2)
    assert model_ladder(build_cascade([StageConfig(upscale=4)])) == (4,)
    s = make_samples(ImageY(np.zeros((96, 96))), 96, 96, ladder=(4,))[0]
    assert s.input.shape == (1, 24, 24) and len(s.targets) == 1


def test_modcrop():
    img = ImageY(np.zeros((255, 250)))
    c = modcrop(img, 8)
    assert c.shape == (248, 248)


def write_gray(path, h, w, seed=0):
    vals = (np.random.default_rng(seed).random((h, w)) * 255).astype(np.uint8)
    Image.fromarray(vals, mode="L").save(path)


def test_prepare_test_role(tmp_path):
    for i, (h, w) in enumerate([(50, 61), (64, 64), (33, 90)]):
        write_gray(tmp_path / f"img{i}.png", h, w, i)
    prep = prepare_dataset(DatasetSpec("set5", str(tmp_path), "test"))
    assert [img.shape for _, img in prep.images] == [(48, 56), (64, 64), (32, 88)]
    assert len(prep.manifest) == 3 and not prep.samples


def test_prepare_train_role(tmp_path):
    write_gray(tmp_path / "a.bmp", 96, 96)
    prep = prepare_dataset(DatasetSpec("custom", str(tmp_path), "train"))
    img = load_image_y(tmp_path / "a.bmp")
    expected = sum(len(make_samples(v, 96, 48)) for v in augment(img))
    assert len(prep.samples) == len(prep.manifest) == expected == 4
    again = prepare_dataset(DatasetSpec("custom", str(tmp_path), "train"))
    assert again.manifest_text() == prep.manifest_text()


def test_prepare_empty(tmp_path):
    with pytest.raises(ConfigError, match="empty"):
        prepare_dataset(DatasetSpec("custom", str(tmp_path), "train"))
    with pytest.raises(ConfigError):
        prepare_dataset(DatasetSpec("custom", str(tmp_path / "nope"), "train"))
