import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubuleseg.augmentation import (
    AugmentationConfig, ControlGrid, augment_dataset, augment_pair, bspline3,
    flip_horizontal, geometric_variants, grid_nodes, grid_to_field,
    iter_augment_pair, rotate90, sample_control_grid, warp_image, warp_mask,
)


def test_grid_node_count():
    # 512 px at spacing 64: 9 lattice nodes plus one ring outside the image
    assert grid_nodes(512, 64) == 11
    assert grid_nodes(64, 16) == 7
    assert grid_nodes(70, 16) == 8


def test_bspline_partition_of_unity():
    t = np.linspace(0, 1, 17)
    total = sum(bspline3(t - k) for k in range(-2, 3))
    np.testing.assert_allclose(total, 1.0, atol=1e-14)
    assert bspline3(np.array([2.0, -2.5]))[0] == 0.0


def test_zero_grid_gives_identity_warp():
    rng = np.random.default_rng(0)
    img = rng.random((20, 24))
    labels = rng.integers(0, 4, (20, 24))
    grid = sample_control_grid(20, 24, spacing=8, max_disp=0, rng=rng)
    field = grid_to_field(grid, 20, 24)
    assert not field.any()
    np.testing.assert_array_equal(warp_image(img, field), img)
    np.testing.assert_array_equal(warp_mask(labels, field), labels)


def test_constant_field_is_a_shift():
    img = np.zeros((10, 10))
    img[4, 4] = 1.0
    field = np.zeros((10, 10, 2))
    field[..., 0] = 1.0  # sample one pixel to the right
    out = warp_image(img, field)
    assert out[4, 3] == pytest.approx(1.0)
    assert out[4, 4] == pytest.approx(0.0)
    lab = np.zeros((10, 10), int)
    lab[2, 6] = 3
    assert warp_mask(lab, field)[2, 5] == 3


def test_uniform_displacement_reproduced_exactly():
    disp = np.zeros((grid_nodes(32, 8), grid_nodes(32, 8), 2))
    disp[..., 0] = 2.5
    disp[..., 1] = -1.0
    field = grid_to_field(ControlGrid(8, 3, disp), 32, 32)
    np.testing.assert_allclose(field[..., 0], 2.5, atol=1e-12)
    np.testing.assert_allclose(field[..., 1], -1.0, atol=1e-12)


def test_max_displacement_bound_over_many_grids():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        grid = sample_control_grid(64, 64, spacing=16, max_disp=15, rng=rng)
        worst = max(worst, float(np.abs(grid_to_field(grid, 64, 64)).max()))
    assert worst <= 15.0


def test_grid_too_small():
    grid = sample_control_grid(16, 16, spacing=8, max_disp=1, rng=0)
    with pytest.raises(ValueError):
        grid_to_field(grid, 32, 32)


def test_warp_mask_introduces_no_labels():
    rng = np.random.default_rng(3)
    lab = rng.integers(0, 5, (32, 32))
    grid = sample_control_grid(32, 32, spacing=8, max_disp=6, rng=rng)
    out = warp_mask(lab, grid_to_field(grid, 32, 32))
    assert set(np.unique(out)) <= set(np.unique(lab))


def test_warp_image_stays_in_unit_range():
    rng = np.random.default_rng(4)
    img = (rng.random((32, 32)) > 0.5).astype(float)  # sharp edges overshoot
    grid = sample_control_grid(32, 32, spacing=8, max_disp=6, rng=rng)
    out = warp_image(img, grid_to_field(grid, 32, 32))
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
def test_rotation_and_flip_group_laws(h, w, seed):
    a = np.random.default_rng(seed).random((h, w))
    r = a
    for _ in range(2):
        r = rotate90(r, 2)
    assert r.tobytes() == a.tobytes()
    assert flip_horizontal(flip_horizontal(a)).tobytes() == a.tobytes()
    if h == w:
        r = a
        for _ in range(4):
            r = rotate90(r, 1)
        assert r.tobytes() == a.tobytes()


def test_rotation_direction():
    a = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(rotate90(a, 1), [[2, 4], [1, 3]])


def test_odd_rotation_needs_square():
    with pytest.raises(ValueError):
        rotate90(np.zeros((2, 3)), 1)
    with pytest.raises(ValueError):
        rotate90(np.zeros((2, 2)), 4)


def test_geometric_variants_order_and_tags():
    a = np.arange(9.0).reshape(3, 3)
    tags = [t for t, _, _ in geometric_variants(a, a.astype(int))]
    assert tags == ["r0_n", "r0_f", "r90_n", "r90_f", "r180_n", "r180_f", "r270_n", "r270_f"]
    images = [v.tobytes() for _, v, _ in geometric_variants(a, a.astype(int))]
    assert len(set(images)) == 8


def test_augmentation_count_and_tags():
    img = np.random.default_rng(0).random((16, 16))
    lab = (img > 0.5).astype(int)
    cfg = AugmentationConfig(n_deformations=3, spacing=8, max_disp=2)
    out = list(iter_augment_pair(img, lab, cfg, np.random.default_rng(0)))
    assert len(out) == 24
    assert out[0][0] == "d0_r0_n" and out[-1][0] == "d2_r270_f"


def test_dataset_count_and_determinism():
    rng = np.random.default_rng(5)
    pairs = [(rng.random((16, 16)), rng.integers(0, 3, (16, 16))) for _ in range(5)]
    cfg = AugmentationConfig(n_deformations=2, spacing=8, max_disp=3, rng_seed=11)
    a = augment_dataset(pairs, cfg)
    b = augment_dataset(pairs, cfg)
    assert len(a) == 5 * 2 * 8
    assert all(x[0].tobytes() == y[0].tobytes() and x[1].tobytes() == y[1].tobytes()
               for x, y in zip(a, b))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        augment_pair(np.zeros((8, 8)), np.zeros((8, 9), int), AugmentationConfig(1), 0)


@pytest.mark.parametrize("kw", [dict(n_deformations=-1), dict(spacing=0), dict(max_disp=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AugmentationConfig(**kw)


def test_node_lattice_positions():
    grid = sample_control_grid(512, 512, spacing=64, max_disp=1, rng=0)
    assert grid.displacements.shape == (11, 11, 2)


def test_grid_sampling_is_deterministic():
    a = sample_control_grid(64, 64, 16, 4, rng=np.random.default_rng(8))
    b = sample_control_grid(64, 64, 16, 4, rng=np.random.default_rng(8))
    assert a.displacements.tobytes() == b.displacements.tobytes()
    assert np.abs(a.displacements).max() <= 4


def test_constant_image_survives_any_warp():
    rng = np.random.default_rng(6)
    grid = sample_control_grid(24, 24, spacing=8, max_disp=5, rng=rng)
    out = warp_image(np.full((24, 24), 0.37), grid_to_field(grid, 24, 24))
    np.testing.assert_allclose(out, 0.37, rtol=0, atol=1e-14)


def test_integer_translation_matches_shift_with_clamped_border():
    img = np.random.default_rng(7).random((12, 15))
    field = np.zeros((12, 15, 2))
    field[..., 0] = 3.0
    expected = img[:, np.minimum(np.arange(15) + 3, 14)]
    np.testing.assert_allclose(warp_image(img, field), expected, atol=1e-14)


def test_rotate_then_inverse_rotation():
    a = np.random.default_rng(9).random((5, 5))
    assert rotate90(rotate90(a, 1), 3).tobytes() == a.tobytes()


def test_single_deformation_gives_eight_pairs():
    img = np.zeros((16, 16))
    out = augment_pair(img, img.astype(int), AugmentationConfig(n_deformations=1, spacing=8), 0)
    assert len(out) == 8


def test_warped_mask_stays_aligned_with_warped_image():
    from tubuleseg.phantom import PhantomConfig, generate_phantom
    rng = np.random.default_rng(12)
    for seed in range(10):
        img, *_ = generate_phantom(PhantomConfig(noise_sigma=0, bias_amplitude=0), seed)
        mask = (img > 0.5).astype(np.int32)
        field = grid_to_field(sample_control_grid(64, 64, 16, 8, rng), 64, 64)
        a = warp_image(img, field) > 0.5
        b = warp_mask(mask, field) > 0
        assert 2 * (a & b).sum() / (a.sum() + b.sum()) >= 0.95
