import numpy as np
import pytest
from PIL import Image

from skipseg.data import (
    AugmentFlags,
    Sample,
    Transform,
    augment_batch,
    augment_sample,
    generate_synthetic_em,
    load_image_stack,
    sample_transform,
    save_image_stack,
    split_train_val,
    stack_samples,
)
from skipseg.exceptions import ConfigError, DimensionError
from skipseg.metrics import label_components

ALL = AugmentFlags(flip=True, rotate90=True, shear=True, elastic=True, rotate_small=True)


def test_synthetic_deterministic_and_binary():
    a = generate_synthetic_em(3, 4, 32)
    b = generate_synthetic_em(3, 4, 32)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.mask, t.mask)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert s.image.shape == (1, 32, 32) and 0 <= s.image.min() and s.image.max() <= 1
    assert not np.array_equal(a[0].mask, a[1].mask)


def test_synthetic_prefix_stable():
    # sample i depends only on (seed, i)
    np.testing.assert_array_equal(generate_synthetic_em(5, 2, 16)[1].mask, generate_synthetic_em(5, 6, 16)[1].mask)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_synthetic_membranes_separate_cells(size):
    min_cells = size * size // 160
    for s in generate_synthetic_em(11, 10, size):
        assert label_components(s.mask[0]).max() >= 0.5 * min_cells


def test_synthetic_edge_cases():
    assert generate_synthetic_em(0, 0, 16) == []
    for bad in (8, 48):
        with pytest.raises(ConfigError):
            generate_synthetic_em(0, 1, bad)


def test_image_stack_round_trip(tmp_path):
    samples = generate_synthetic_em(2, 3, 16)
    save_image_stack(samples, tmp_path)
    back = load_image_stack(tmp_path)
    assert [s.name for s in back] == sorted(s.name for s in samples)
    for s, t in zip(samples, back):
        np.testing.assert_array_equal(s.mask, t.mask)
        np.testing.assert_allclose(s.image, t.image, atol=0.5 / 255 + 1e-6)


def test_image_scaling_and_binarization(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    Image.fromarray(np.array([[0, 255]], np.uint8)).save(tmp_path / "images" / "a.png")
    Image.fromarray(np.array([[200, 100]], np.uint8)).save(tmp_path / "masks" / "a.png")
    (s,) = load_image_stack(tmp_path)
    np.testing.assert_array_equal(s.image[0], [[0.0, 1.0]])
    np.testing.assert_array_equal(s.mask[0], [[1.0, 0.0]])


def test_image_stack_errors(tmp_path):
    assert load_image_stack(tmp_path) == []
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "images" / "a.png")
    with pytest.raises(FileNotFoundError, match="mask"):
        load_image_stack(tmp_path)
    Image.fromarray(np.zeros((3, 2), np.uint8)).save(tmp_path / "masks" / "a.png")
    with pytest.raises(DimensionError):
        load_image_stack(tmp_path)
    (tmp_path / "images" / "b.png").write_bytes(b"not a png")
    (tmp_path / "masks" / "b.png").write_bytes(b"not a png")
    (tmp_path / "masks" / "a.png").unlink()
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "masks" / "a.png")
    with pytest.raises(OSError, match="b.png"):
        load_image_stack(tmp_path)


def test_sample_shape_check():
    with pytest.raises(DimensionError):
        Sample(np.zeros((4, 4)), np.zeros((4, 5)))


def test_augment_disabled_is_identity(rng):
    s = generate_synthetic_em(0, 1, 16)[0]
    assert augment_sample(s, rng, AugmentFlags.none()) is s


def test_hflip_is_involution(rng):
    arr = rng.random((5, 7))
    t = Transform(hflip=True)
    np.testing.assert_array_equal(t.apply(t.apply(arr, 0), 0), arr)


def test_masks_stay_binary_over_many_draws():
    s = generate_synthetic_em(1, 1, 16)[0]
    r = np.random.default_rng(0)
    for _ in range(1000):
        out = augment_sample(s, r, ALL)
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert 0.0 <= out.image.min() and out.image.max() <= 1.0


def test_mask_follows_the_same_transform():
    s = generate_synthetic_em(4, 1, 32)[0]
    for seed in range(50):
        t = sample_transform(np.random.default_rng(seed), ALL, (32, 32))
        out = augment_sample(s, np.random.default_rng(seed), ALL)
        np.testing.assert_array_equal(out.mask[0], t.apply(s.mask[0], 0))


def test_exact_transforms_move_image_and_mask_together():
    # for flips and quarter turns, a binary image must land exactly on its mask
    s = generate_synthetic_em(4, 1, 32)[0]
    twin = Sample(s.mask.copy(), s.mask)
    flags = AugmentFlags(flip=True, rotate90=True, shear=False, elastic=False)
    r = np.random.default_rng(3)
    for _ in range(20):
        out = augment_sample(twin, r, flags)
        np.testing.assert_array_equal(out.image, out.mask)


def test_augment_batch_shapes(rng):
    x, y = stack_samples(generate_synthetic_em(0, 3, 16))
    ax, ay = augment_batch(x, y, rng, ALL)
    assert ax.shape == x.shape and ay.shape == y.shape
    assert augment_batch(x, y, rng, AugmentFlags.none())[0] is x


def test_split_sizes_and_partition():
    samples = generate_synthetic_em(0, 30, 16)
    split = split_train_val(samples, 25 / 30, seed=1)
    assert (len(split.train), len(split.val)) == (25, 5)
    names = sorted(s.name for s in split.train + split.val)
    assert names == sorted(s.name for s in samples)
    again = split_train_val(samples, 25 / 30, seed=1)
    assert [s.name for s in again.val] == [s.name for s in split.val]


def test_split_errors():
    samples = generate_synthetic_em(0, 3, 16)
    with pytest.raises(ConfigError):
        split_train_val(samples, 1.0)
    with pytest.raises(ConfigError):
        split_train_val(samples[:1], 0.5)
