import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ldct import data
from ldct.errors import ConfigError, DataError


def digest(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def test_phantom_requires_ellipse():
    with pytest.raises(ConfigError):
        data.generate_phantom(data.PhantomSpec(size=32, ellipses=[], background=0.0))
    with pytest.raises(ConfigError):
        data.generate_phantom(data.PhantomSpec(size=0, ellipses=[data.Ellipse(0, 0, .1, .1, 0, 1)]))


def test_centered_disk_is_binary():
    n = 64
    spec = data.PhantomSpec(size=n, ellipses=[data.Ellipse(0, 0, 0.25, 0.25, 0, 1.0)])
    img = data.generate_phantom(spec, 0)
    assert set(np.unique(img)) == {0.0, 1.0}
    c = np.arange(n) + 0.5 - n / 2
    y, x = np.meshgrid(c, c, indexing="ij")
    assert np.array_equal(img, (x ** 2 + y ** 2 <= (0.25 * n) ** 2).astype(float))


def test_random_phantom_deterministic_and_clipped():
    spec = data.random_phantom_spec(64, 42, n_ellipses=8)
    a = data.generate_phantom(spec, 42)
    b = data.generate_phantom(data.random_phantom_spec(64, 42, n_ellipses=8), 42)
    assert digest(a) == digest(b)
    assert a.min() >= 0 and a.max() <= 1
    assert len(spec.ellipses) == 8


def test_gradient_texture_is_monotone_ramp():
    img = data.generate_texture(data.TextureSpec(48, 3, {"gradient": 1.0}))
    dx = np.diff(img, axis=1)
    dy = np.diff(img, axis=0)
    assert np.all(dx >= -1e-12) or np.all(dx <= 1e-12)
    assert np.all(dy >= -1e-12) or np.all(dy <= 1e-12)
    assert img.min() == pytest.approx(0) and img.max() == pytest.approx(1)


def test_texture_deterministic_and_bounded():
    spec = data.TextureSpec(64, 11)
    a, b = data.generate_texture(spec), data.generate_texture(spec)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, data.generate_texture(data.TextureSpec(64, 12)))


def test_texture_rejects_zero_weights():
    with pytest.raises(ConfigError):
        data.generate_texture(data.TextureSpec(32, 0, {"smooth": 0.0, "edges": 0.0}))
    with pytest.raises(ConfigError):
        data.generate_texture(data.TextureSpec(32, 0, {"fractal": 1.0}))


def test_texture_corpus_not_degenerate():
    stds = [data.generate_texture(data.TextureSpec(32, s)).std() for s in range(1000)]
    assert min(stds) > 0.05


def test_rotate_identity_and_involution(rng):
    a, b = rng.random((20, 20)), rng.random((20, 20))
    ra, rb = data.augment_rotate((a, b), 0)
    assert np.array_equal(ra, a) and np.array_equal(rb, b)
    twice = data.augment_rotate(data.augment_rotate((a, b), 2), 2)
    assert np.array_equal(twice[0], a) and np.array_equal(twice[1], b)


def test_rotate_matches_index_permutation():
    n = 5
    pattern = np.arange(n * n, dtype=float).reshape(n, n)  # asymmetric
    expected = np.empty_like(pattern)
    for i in range(n):
        for j in range(n):
            expected[i, j] = pattern[j, n - 1 - i]  # quarter turn counter-clockwise
    out, gt = data.augment_rotate((pattern, pattern * 2), 1)
    assert np.array_equal(out, expected)
    assert np.array_equal(gt, expected * 2)


def test_rotate_errors(rng):
    with pytest.raises(DataError):
        data.augment_rotate((rng.random((4, 4)), rng.random((4, 5))), 1)
    with pytest.raises(DataError):
        data.augment_rotate((rng.random((4, 6)), rng.random((4, 6))), 1)
    out = data.augment_rotate((rng.random((4, 6)), rng.random((4, 6))), 2)
    assert out[0].shape == (4, 6)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-10, 10)), st.integers(0, 3))
def test_rotate_preserves_multiset(img, k):
    out, _ = data.augment_rotate((img, img), k)
    assert np.array_equal(np.sort(out, axis=None), np.sort(img, axis=None))


def test_noise_sigma_zero_identity(rng):
    img = rng.random((32, 32))
    out = data.augment_noise(img, 0.0, 1)
    assert np.array_equal(out, img) and out is not img


def test_noise_statistics_and_determinism():
    zero = np.zeros((256, 256))
    out = data.augment_noise(zero, 0.01, 9)
    assert out.std() == pytest.approx(0.01, rel=0.05)
    assert np.array_equal(out, data.augment_noise(zero, 0.01, 9))
    with pytest.raises(ConfigError):
        data.augment_noise(zero, -0.1, 0)


def _pairs(rng, count, shape=(20, 24)):
    return [(rng.random(shape).astype(np.float32), rng.standard_normal(shape).astype(np.float32))
            for _ in range(count)]


def test_dataset_round_trip(tmp_path, rng):
    pairs = _pairs(rng, 10)
    manifest = data.write_dataset(pairs, tmp_path)
    back = list(data.read_dataset(data.DatasetManifest.load(tmp_path)))
    assert len(back) == 10
    for (g, i), (g2, i2) in zip(pairs, back):
        assert np.array_equal(g, g2) and np.array_equal(i, i2)
    meta = json.loads((tmp_path / "manifest.json").read_text())
    assert meta["height"] == 20 and meta["width"] == 24 and meta["version"] == 1
    assert set(meta["entries"][0]) == {"id", "gt", "input", "crc32"}
    assert manifest.ids == [e["id"] for e in meta["entries"]]


@settings(max_examples=10, deadline=None)
@given(arrays(np.float32, (16, 16), elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_dataset_round_trip_any_finite(tmp_path_factory, img):
    d = tmp_path_factory.mktemp("ds")
    data.write_dataset([(img, -img)], d)
    (g, i), = data.read_dataset(d)
    assert np.array_equal(g, img) and np.array_equal(i, -img)


def test_dataset_missing_file(tmp_path, rng):
    data.write_dataset(_pairs(rng, 2), tmp_path)
    (tmp_path / "00001_in.f32").unlink()
    with pytest.raises(DataError):
        list(data.read_dataset(tmp_path))


def test_dataset_corruption_detected(tmp_path, rng):
    data.write_dataset(_pairs(rng, 1), tmp_path)
    raw = bytearray((tmp_path / "00000_gt.f32").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "00000_gt.f32").write_bytes(bytes(raw))
    with pytest.raises(DataError):
        list(data.read_dataset(tmp_path))


def test_dataset_dims_mismatch(tmp_path, rng):
    data.write_dataset(_pairs(rng, 1), tmp_path)
    (tmp_path / "00000_gt.f32").write_bytes(b"\0" * 16)
    with pytest.raises(DataError):
        list(data.read_dataset(tmp_path))
    with pytest.raises(DataError):
        data.write_dataset(_pairs(rng, 1, (20, 20)) + _pairs(rng, 1, (24, 24)), tmp_path / "x")


def test_dataset_rejects_duplicate_ids(tmp_path, rng):
    with pytest.raises(DataError):
        data.write_dataset(_pairs(rng, 2), tmp_path, ids=["a", "a"])


def test_dataset_of_71_pairs(tmp_path, rng):
    manifest = data.write_dataset(_pairs(rng, 71, (16, 16)), tmp_path)
    assert len(manifest) == 71 and len(set(manifest.ids)) == 71


def test_image_minimum_size():
    with pytest.raises(DataError):
        data.write_dataset([(np.zeros((8, 8)), np.zeros((8, 8)))], "/tmp/never")


def test_ingest_images(tmp_path):
    from PIL import Image

    paths = []
    for k in range(3):
        p = tmp_path / f"img{k}.png"
        Image.fromarray((np.arange(32 * 32) % 256).reshape(32, 32).astype(np.uint8) + k).save(p)
        paths.append(p)
    manifest = data.ingest_images(paths, tmp_path / "corpus", size=16)
    gts, inputs = data.load_arrays(manifest)
    assert gts.shape == (3, 16, 16) and np.array_equal(gts, inputs)
    assert gts.min() >= 0 and gts.max() <= 1
