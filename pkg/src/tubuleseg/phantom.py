"""Synthetic tubule phantoms with exact instance groundtruth.

A phantom is a dark background holding several non-overlapping tubules.
Each tubule is a rotated ellipse: a bright annular membrane around a dim
lumen. The clean image is multiplied by a smooth radial field (mean 1,
brightest at the center) and Gaussian noise is added.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class PhantomError(RuntimeError):
    """Could not place the requested number of tubules on the canvas."""


@dataclass
class PhantomConfig:
    size: int = 64
    n_tubules: tuple = (3, 8)
    membrane: float = 0.8
    lumen: float = 0.2
    background: float = 0.1
    jitter: float = 0.05
    thickness: tuple = (2, 4)
    # full ellipse axis lengths in pixels
    axes: tuple = (8, 24)
    noise_sigma: float = 0.03
    # max minus min of the bias field before mean normalization
    bias_amplitude: float = 0.4
    # background pixels kept between neighbouring tubules
    min_gap: int = 2
    max_attempts: int = 500
    # full re-layouts tried before giving up
    max_layouts: int = 20

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("size must be positive")
        lo, hi = self.n_tubules
        if lo < 0 or hi < lo:
            raise ValueError("n_tubules must be a non-empty range of counts")
        if self.axes[0] < 2 or self.axes[1] < self.axes[0]:
            raise ValueError("axes must be a range of lengths >= 2")
        if self.thickness[0] < 1 or self.thickness[1] < self.thickness[0]:
            raise ValueError("thickness must be a range of values >= 1")
        if self.noise_sigma < 0 or self.bias_amplitude < 0 or self.jitter < 0:
            raise ValueError("noise_sigma, bias_amplitude and jitter must be >= 0")


def radial_bias_field(shape, amplitude):
    """Quadratic radial field, brightest at the center, normalized to mean 1."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    rho2 = r2 / max(r2.max(), 1.0)
    field = 1.0 + amplitude * (0.5 - rho2)
    return field / field.mean()


def _ellipse(shape, cy, cx, a, b, theta):
    """Boolean mask of pixels whose centers fall inside the rotated ellipse."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _sample_tubule(shape, cfg, rng):
    lo, hi = cfg.axes
    a = rng.uniform(lo, hi) / 2.0
    b = rng.uniform(lo, hi) / 2.0
    theta = rng.uniform(0.0, np.pi)
    t = rng.uniform(*cfg.thickness)
    reach = max(a, b) + 1
    h, w = shape
    if 2 * reach >= min(h, w):
        return None
    cy = rng.uniform(reach, h - 1 - reach)
    cx = rng.uniform(reach, w - 1 - reach)
    outer = _ellipse(shape, cy, cx, a, b, theta)
    if a - t > 0.5 and b - t > 0.5:
        inner = _ellipse(shape, cy, cx, a - t, b - t, theta)
    else:
        inner = np.zeros(shape, dtype=bool)
    return outer, inner


def _place_tubules(shape, n, cfg, rng):
    labels = np.zeros(shape, dtype=np.int32)
    lumen = np.zeros(shape, dtype=bool)
    blocked = np.zeros(shape, dtype=bool)
    grow = ndimage.generate_binary_structure(2, 1)
    for k in range(1, n + 1):
        for _ in range(cfg.max_attempts):
            sample = _sample_tubule(shape, cfg, rng)
            if sample is None:
                continue
            outer, inner = sample
            if outer.any() and not (outer & blocked).any():
                break
        else:
            return None
        labels[outer] = k
        lumen |= inner
        blocked |= ndimage.binary_dilation(outer, grow, iterations=cfg.min_gap + 1)
    return labels, lumen


def generate_phantom(cfg=None, rng=None, return_clean=False):
    """Render one phantom.

    Returns
    -------
    image : ndarray (size, size) float64 in [0, 1]
    labels : ndarray (size, size) int32, 0 = background, 1..n tubules
    field : ndarray (size, size) float64, the multiplicative field (mean 1)
    clean : ndarray, only if `return_clean`; the image before field and noise
    """
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(rng)
    shape = (cfg.size, cfg.size)
    n = int(rng.integers(cfg.n_tubules[0], cfg.n_tubules[1] + 1))
    levels = {
        "membrane": cfg.membrane + rng.uniform(-cfg.jitter, cfg.jitter),
        "lumen": cfg.lumen + rng.uniform(-cfg.jitter, cfg.jitter),
        "background": cfg.background + rng.uniform(-cfg.jitter, cfg.jitter),
    }
    for _ in range(cfg.max_layouts):
        layout = _place_tubules(shape, n, cfg, rng)
        if layout is not None:
            labels, lumen = layout
            break
    else:
        raise PhantomError(f"could not place {n} tubules on a {cfg.size}x{cfg.size} canvas")

    clean = np.full(shape, levels["background"])
    clean[labels > 0] = levels["membrane"]
    clean[lumen] = levels["lumen"]
    clean = np.clip(clean, 0.0, 1.0)
    field = radial_bias_field(shape, cfg.bias_amplitude)
    image = field * clean
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=shape)
    image = np.clip(image, 0.0, 1.0)
    if return_clean:
        return image, labels, field, clean
    return image, labels, field


def generate_dataset(n, cfg=None, seed=0):
    """`n` independent phantoms as ``(image, labels)`` pairs, one child
    seed per phantom."""
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for child in children:
        image, labels, _ = generate_phantom(cfg, np.random.default_rng(child))
        out.append((image, labels))
    return out


def desk_gamma(size, gamma=100, reference=512):
    """Small-object threshold scaled from the 512x512 setting to `size`."""
    return int(round(gamma * (size / reference) ** 2))
