import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagedtrain.augment import (
    AugConfig,
    Augmenter,
    CGParams,
    cg_backward,
    cg_compose,
    cg_forward,
    color_jitter,
    cutout,
    gaussian_filter,
    gaussian_kernel,
    grayscale,
    hflip,
    random_crop,
)
from stagedtrain.data import (
    ImageDataset,
    load_cifar10_binary,
    read_image_records,
    synth_shortcut_dataset,
    write_cifar10_binary,
    write_image_records,
)
from stagedtrain.errors import BadKernel, IoFailure, MalformedFile


def colourful(seed=0, shape=(3, 10, 10)):
    return np.random.default_rng(seed).uniform(0.1, 0.9, size=shape).astype(np.float32)


def test_cifar_single_record(tmp_path):
    path = tmp_path / "one.bin"
    path.write_bytes(bytes([7]) + bytes([255]) * 3072)
    data = load_cifar10_binary(path)
    assert len(data) == 1 and data.labels.tolist() == [7]
    assert data.image_shape == (3, 32, 32)
    assert np.all(data.images == 1.0)


def test_cifar_truncated_and_missing(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(3072))
    with pytest.raises(MalformedFile):
        load_cifar10_binary(path)
    with pytest.raises(IoFailure):
        load_cifar10_binary(tmp_path / "absent.bin")


def test_cifar_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, size=(5, 3, 32, 32)).astype(np.float32) / 255
    data = ImageDataset(pix, rng.integers(0, 10, 5), 10)
    path = write_cifar10_binary(data, tmp_path / "d.bin")
    raw = path.read_bytes()
    back = load_cifar10_binary(path)
    assert np.array_equal(back.labels, data.labels)
    assert np.array_equal(back.images, data.images)
    assert write_cifar10_binary(back, tmp_path / "e.bin").read_bytes() == raw


def test_cifar_concatenates_batches_and_limit(tmp_path):
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    a.write_bytes((bytes([1]) + bytes(3072)) * 2)
    b.write_bytes(bytes([2]) + bytes(3072))
    data = load_cifar10_binary(a, b)
    assert data.labels.tolist() == [1, 1, 2]
    assert len(load_cifar10_binary(a, b, limit=2)) == 2


def test_image_records_roundtrip_any_shape(tmp_path):
    tr, _ = synth_shortcut_dataset(k=3, n_per_class=4, size=12, seed=0)
    path = write_image_records(tr, tmp_path / "s.bin")
    back = read_image_records(path, tr.image_shape, 3)
    assert np.array_equal(back.labels, tr.labels)
    assert np.max(np.abs(back.images - tr.images)) <= 0.5 / 255 + 1e-7


def test_synthetic_deterministic_and_uniform():
    a_tr, a_te = synth_shortcut_dataset(k=4, n_per_class=20, size=16, seed=3)
    b_tr, b_te = synth_shortcut_dataset(k=4, n_per_class=20, size=16, seed=3)
    c_tr, _ = synth_shortcut_dataset(k=4, n_per_class=20, size=16, seed=4)
    assert a_tr.images.tobytes() == b_tr.images.tobytes()
    assert a_te.images.tobytes() == b_te.images.tobytes()
    assert a_tr.images.tobytes() != c_tr.images.tobytes()
    assert np.all(a_tr.class_counts() == 20) and np.all(a_te.class_counts() == 10)
    assert a_tr.images.min() >= 0 and a_tr.images.max() <= 1
    assert a_tr.split == "train" and a_te.split == "test"


def test_synthetic_train_and_test_disjoint():
    tr, te = synth_shortcut_dataset(k=2, n_per_class=10, size=8, seed=0)
    rows = {img.tobytes() for img in tr.images}
    assert not any(img.tobytes() in rows for img in te.images)


def test_synthetic_validation():
    with pytest.raises(ValueError):
        synth_shortcut_dataset(k=1)
    with pytest.raises(ValueError):
        synth_shortcut_dataset(difficulty=1.5)


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        ImageDataset(np.zeros((2, 1, 2, 2)), [0, 3], 3)


def test_crop_and_flip_identities():
    img = colourful()
    rng = np.random.default_rng(0)
    assert np.array_equal(random_crop(img, 0, rng), img)
    assert np.array_equal(hflip(img, 0.0, rng), img)
    assert np.array_equal(hflip(hflip(img, 1.0), 1.0), img)
    with pytest.raises(ValueError):
        random_crop(img, -1, rng)


def test_crop_is_a_shifted_window():
    img = colourful(shape=(1, 6, 6))
    rng = np.random.default_rng(1)
    for _ in range(20):
        out = random_crop(img, 2, rng)
        padded = np.pad(img, ((0, 0), (2, 2), (2, 2)))
        assert any(np.array_equal(out, padded[:, dy:dy + 6, dx:dx + 6]) for dy in range(5) for dx in range(5))


def test_jitter_zero_strength_identity():
    img = colourful()
    assert np.allclose(color_jitter(img, (0, 0, 0), np.random.default_rng(0)), img)


def test_grayscale_properties():
    img = colourful()
    g = grayscale(img)
    assert np.all(g[0] == g[1]) and np.all(g[1] == g[2])
    expect = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    assert np.allclose(g[0], expect, atol=1e-6)
    already = np.broadcast_to(img[:1], img.shape).copy()
    assert np.allclose(grayscale(already), already, atol=1e-6)


def test_cg_skip_both_is_identity():
    img = colourful()
    cfg = AugConfig(jitter_p=0.0, gray_p=0.0)
    assert np.array_equal(cg_compose(img, cfg, np.random.default_rng(0)), img)


def test_cg_grayscale_frequency():
    img = colourful()
    rng = np.random.default_rng(0)
    cfg = AugConfig()
    grays = 0
    for _ in range(10000):
        out = cg_compose(img, cfg, rng)
        grays += bool(np.all(out[0] == out[1]) and np.all(out[1] == out[2]))
    assert abs(grays - 2000) <= 150


def test_cutout_and_gaussian_examples():
    img = colourful()
    rng = np.random.default_rng(0)
    assert np.all(cutout(img, 10, rng) == 0)
    out = cutout(img, 4, rng)
    assert int((np.all(out == 0, axis=0) & ~np.all(img == 0, axis=0)).sum()) == 16
    const = np.full((3, 9, 9), 0.37, dtype=np.float32)
    assert np.allclose(gaussian_filter(const, 1.5, 5), const, atol=1e-6)
    assert abs(gaussian_kernel(1.5, 5).sum() - 1) <= 1e-6
    assert np.isclose(np.outer(gaussian_kernel(1.5, 5), gaussian_kernel(1.5, 5)).sum(), 1)
    with pytest.raises(BadKernel):
        gaussian_kernel(1.5, 4)
    with pytest.raises(BadKernel):
        AugConfig(gaussian_kernel=6)
    with pytest.raises(ValueError):
        AugConfig(gray_p=1.5)


def test_gaussian_matches_direct_convolution():
    img = colourful(shape=(1, 7, 7)).astype(np.float64)
    k = np.outer(gaussian_kernel(1.5, 5), gaussian_kernel(1.5, 5))
    padded = np.pad(img[0], 2, mode="reflect")
    ref = np.array([[np.sum(padded[i:i + 5, j:j + 5] * k) for j in range(7)] for i in range(7)])
    assert np.allclose(gaussian_filter(img, 1.5, 5)[0], ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), ops=st.sets(st.sampled_from(["crop", "flip", "cg", "cutout", "gaussian"])))
def test_augmenter_range_shape_determinism(seed, ops):
    rng = np.random.default_rng(seed)
    x = rng.random((4, 3, 16, 16)).astype(np.float32)
    aug = Augmenter(AugConfig(enabled=tuple(sorted(ops)), cutout_size=8), seed=seed)
    a = aug(x, np.arange(4), epoch=2)
    b = aug(x, np.arange(4), epoch=2)
    assert a.shape == x.shape and a.dtype == x.dtype
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


def test_augmenter_stream_depends_on_epoch_and_index():
    x = np.repeat(colourful(shape=(1, 3, 16, 16)), 2, axis=0)
    aug = Augmenter(AugConfig(enabled=("crop", "flip", "cg")), seed=0)
    assert not np.array_equal(aug(x, [0, 1], 1)[0], aug(x, [0, 1], 1)[1])
    assert not np.array_equal(aug(x, [0, 1], 1), aug(x, [0, 1], 2))


def test_cg_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.6, size=(3, 3, 5, 5))
    params = CGParams(np.array([1.2, 0.9, 1.0]), np.array([0.8, 1.3, 1.0]),
                      np.array([1.1, 0.7, 1.0]), np.array([False, False, True]), np.zeros(3))
    w = rng.normal(size=x.shape)
    y, tape = cg_forward(x, params)
    grad = cg_backward(tape, w)
    step = 1e-6
    worst = 0.0
    for i in rng.choice(x.size, 40, replace=False):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        num = (np.sum(w * cg_forward(xp, params)[0]) - np.sum(w * cg_forward(xm, params)[0])) / (2 * step)
        worst = max(worst, abs(num - grad.flat[i]) / max(abs(num), 1e-4))
    assert worst <= 1e-5
    assert np.allclose(y[2, 0], y[2, 1])


def test_cg_identity_params_pass_through():
    x = colourful(shape=(2, 3, 4, 4))
    y, tape = cg_forward(x, CGParams.identity(2))
    assert np.allclose(y, x)
    g = np.ones_like(x)
    assert np.allclose(cg_backward(tape, g), g)
