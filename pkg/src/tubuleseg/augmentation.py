"""Elastic deformation, right-angle rotation and horizontal flips.

A coarse control grid (one node every `spacing` pixels plus one ring of
nodes outside the image) carries random per-axis displacements. A uniform
cubic B-spline turns the node values into a dense displacement field;
because the basis weights are non-negative and sum to one, the dense field
never exceeds the largest node displacement. Images are resampled with
Keys bicubic convolution and masks with nearest neighbour, both as
backward warps with edge clamping.
"""

from dataclasses import dataclass

import numpy as np

from .imagedata import relabel_sequential

ROTATIONS = (0, 90, 180, 270)
FLIPS = ("n", "f")


@dataclass
class ControlGrid:
    spacing: float
    max_disp: float
    # (rows, cols, 2) node displacements, last axis = (dx, dy); node (i, j)
    # sits at y = (i - 1) * spacing, x = (j - 1) * spacing
    displacements: np.ndarray

    @property
    def rows(self):
        return self.displacements.shape[0]

    @property
    def cols(self):
        return self.displacements.shape[1]


@dataclass
class AugmentationConfig:
    n_deformations: int = 100
    spacing: float = 64
    max_disp: float = 15
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_deformations < 0:
            raise ValueError("n_deformations must be >= 0")
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        if self.max_disp < 0:
            raise ValueError("max_disp must be >= 0")


def grid_nodes(length, spacing):
    """Number of nodes along an axis: interior lattice plus boundary ring."""
    interior = int(np.ceil(length / spacing)) + 1
    return interior + 2


def sample_control_grid(height, width, spacing=64, max_disp=15, rng=None):
    """Control grid with displacements drawn uniformly from
    ``[-max_disp, max_disp]`` independently per node and per axis."""
    if spacing <= 0:
        raise ValueError("spacing must be > 0")
    if max_disp < 0:
        raise ValueError("max_disp must be >= 0")
    rng = np.random.default_rng(rng)
    shape = (grid_nodes(height, spacing), grid_nodes(width, spacing), 2)
    if max_disp == 0:
        disp = np.zeros(shape)
    else:
        disp = rng.uniform(-max_disp, max_disp, size=shape)
    return ControlGrid(float(spacing), float(max_disp), disp)


def bspline3(t):
    """Uniform cubic B-spline kernel, support (-2, 2)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t < 1
    far = (t >= 1) & (t < 2)
    out[near] = 2.0 / 3.0 - t[near] ** 2 + 0.5 * t[near] ** 3
    out[far] = (2.0 - t[far]) ** 3 / 6.0
    return out


def _basis_matrix(length, n_nodes, spacing):
    pos = np.arange(length) / spacing  # pixel position in grid units
    node = np.arange(n_nodes) - 1.0
    return bspline3(pos[:, None] - node[None, :])


def grid_to_field(grid, height, width):
    """Dense (height, width, 2) displacement field from a control grid."""
    need_r, need_c = grid_nodes(height, grid.spacing), grid_nodes(width, grid.spacing)
    if grid.rows < need_r or grid.cols < need_c:
        raise ValueError(f"grid of {grid.rows}x{grid.cols} nodes does not cover a {height}x{width} image")
    by = _basis_matrix(height, grid.rows, grid.spacing)
    bx = _basis_matrix(width, grid.cols, grid.spacing)
    # separable tensor-product spline: one small matrix product per axis
    d = grid.displacements
    field = np.stack([by @ d[..., c] @ bx.T for c in range(2)], axis=-1)
    # rounding guard; the convex combination already respects the bound
    return np.clip(field, -grid.max_disp, grid.max_disp)


def _keys_weights(frac, a=-0.5):
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2."""
    t = np.stack([1 + frac, frac, 1 - frac, 2 - frac])
    at = np.abs(t)
    w = np.where(
        at <= 1,
        (a + 2) * at ** 3 - (a + 3) * at ** 2 + 1,
        np.where(at < 2, a * at ** 3 - 5 * a * at ** 2 + 8 * a * at - 4 * a, 0.0),
    )
    return w


def _check_field(shape, field):
    field = np.asarray(field, dtype=np.float64)
    if field.shape != tuple(shape) + (2,):
        raise ValueError(f"field shape {field.shape} does not match image shape {shape}")
    return field


def warp_image(img, field):
    """Backward warp: ``out[y, x] = bicubic(img, x + dx, y + dy)``."""
    img = np.asarray(img, dtype=np.float64)
    field = _check_field(img.shape, field)
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sx = xx + field[..., 0]
    sy = yy + field[..., 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = _keys_weights(sx - x0)
    wy = _keys_weights(sy - y0)
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    out = np.zeros_like(img)
    for i in range(4):
        yi = np.clip(y0 + i - 1, 0, h - 1)
        row = np.zeros_like(img)
        for j in range(4):
            xj = np.clip(x0 + j - 1, 0, w - 1)
            row += wx[j] * img[yi, xj]
        out += wy[i] * row
    return np.clip(out, 0.0, 1.0)


def warp_mask(labels, field):
    """Nearest-neighbour backward warp of a label image; no new labels."""
    labels = np.asarray(labels)
    field = _check_field(labels.shape, field)
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sx = np.clip(np.floor(xx + field[..., 0] + 0.5).astype(np.intp), 0, w - 1)
    sy = np.clip(np.floor(yy + field[..., 1] + 0.5).astype(np.intp), 0, h - 1)
    return labels[sy, sx]


def rotate90(a, quarter_turns):
    """Counter-clockwise rotation by ``quarter_turns * 90`` degrees."""
    k = int(quarter_turns)
    if k not in (0, 1, 2, 3):
        raise ValueError("quarter_turns must be 0, 1, 2 or 3")
    a = np.asarray(a)
    if k % 2 and a.shape[0] != a.shape[1]:
        raise ValueError("odd quarter turns need a square image to keep its size")
    return np.rot90(a, k).copy()


def flip_horizontal(a):
    return np.asarray(a)[:, ::-1].copy()


def geometric_variants(img, labels):
    """The 8 (rotation, flip) variants in emission order with their tags."""
    out = []
    for r in ROTATIONS:
        ri = rotate90(img, r // 90)
        rl = rotate90(labels, r // 90)
        out.append((f"r{r}_n", ri, rl))
        out.append((f"r{r}_f", flip_horizontal(ri), flip_horizontal(rl)))
    return out


def iter_augment_pair(img, labels, cfg, rng):
    """Yield ``(tag, image, labels)`` for every augmented variant.

    Tags look like ``d3_r90_f``. One deformation field is drawn per
    deformation index, in order, from `rng`.
    """
    img = np.asarray(img, dtype=np.float64)
    labels = np.asarray(labels)
    if img.shape != labels.shape:
        raise ValueError(f"image {img.shape} and mask {labels.shape} differ in shape")
    h, w = img.shape
    for d in range(cfg.n_deformations):
        grid = sample_control_grid(h, w, cfg.spacing, cfg.max_disp, rng)
        field = grid_to_field(grid, h, w)
        wi = warp_image(img, field)
        wl = relabel_sequential(warp_mask(labels, field))
        for tag, vi, vl in geometric_variants(wi, wl):
            yield f"d{d}_{tag}", vi, vl


def augment_pair(img, labels, cfg, rng):
    """List of ``n_deformations * 8`` augmented ``(image, labels)`` pairs."""
    return [(i, l) for _, i, l in iter_augment_pair(img, labels, cfg, rng)]


def augment_dataset(pairs, cfg):
    """Augment every pair with its own generator spawned from
    ``cfg.rng_seed``; the output order follows the input order."""
    children = np.random.SeedSequence(cfg.rng_seed).spawn(len(pairs))
    out = []
    for (img, labels), child in zip(pairs, children):
        out.extend(augment_pair(img, labels, cfg, np.random.default_rng(child)))
    return out
