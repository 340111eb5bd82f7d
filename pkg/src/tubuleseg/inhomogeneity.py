"""Multiplicative intensity-inhomogeneity correction.

Observed intensities are modeled as ``observed = field * corrected + noise``
where ``field`` is smooth, positive and of mean one. The field is estimated
by alternating two steps:

1. Approximate the current corrected image by a piecewise-constant model:
   each pixel is assigned to one of a few intensity classes (1D k-means)
   and replaced by its class mean.
2. Fit the field to ``observed ~ field * model`` by Gaussian-weighted
   local least squares, with the field locally quadratic in (y, x), then
   renormalize it to mean one, shrink it towards 1 if any neighbour step
   exceeds ``max_step``, and divide it out.

A locally polynomial (rather than locally constant) fit keeps the estimate
unbiased at the image border, where fields that peak at the center are
steepest. The Gaussian weight is applied in-plane with ``sigma`` and, for
stacks deeper than one plane, along z with ``sigma / 4``; samples outside
the volume get zero weight. Noise is not modeled explicitly; the weighted
fit averages it out.
"""

from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np
from scipy import ndimage

from .imagedata import as_stack


class FieldEstimationError(ValueError):
    """The field is undefined for the given input (e.g. an all-zero stack)."""


@dataclass
class CorrectionConfig:
    # None selects min(height, width) / 4 at run time
    smoothing_sigma: Optional[float] = None
    iterations: int = 5
    epsilon: float = 1e-3
    n_classes: int = 4
    z_ratio: float = 0.25
    # in-plane Gaussian applied before classifying pixels (0 disables)
    denoise_sigma: float = 0.0
    fit_degree: int = 2
    max_step: float = 0.02

    def __post_init__(self):
        if self.smoothing_sigma is not None and not self.smoothing_sigma > 0:
            raise ValueError("smoothing_sigma must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.epsilon <= 0.1:
            raise ValueError("epsilon must lie in (0, 0.1]")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.fit_degree not in (0, 1, 2):
            raise ValueError("fit_degree must be 0, 1 or 2")
        if not self.max_step > 0:
            raise ValueError("max_step must be > 0")

    def sigma_for(self, shape):
        if self.smoothing_sigma is not None:
            return float(self.smoothing_sigma)
        return min(shape[-2:]) / 4.0


def kmeans_1d(values, k, iterations=50):
    """Lloyd's algorithm on scalars with quantile initialisation.

    Returns ``(centers, assignment)``; empty clusters keep their center.
    Centers are kept sorted so the result is deterministic.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    centers = np.quantile(v, (np.arange(k) + 0.5) / k)
    assign = np.zeros(v.shape, dtype=np.intp)
    for _ in range(iterations):
        edges = 0.5 * (centers[1:] + centers[:-1])
        new_assign = np.searchsorted(edges, v)
        sums = np.bincount(new_assign, weights=v, minlength=k)
        counts = np.bincount(new_assign, minlength=k)
        new_centers = np.where(counts > 0, sums / np.maximum(counts, 1), centers)
        new_centers.sort()
        converged = np.array_equal(new_assign, assign) and np.array_equal(new_centers, centers)
        assign, centers = new_assign, new_centers
        if converged:
            break
    return centers, assign


def class_model(image, k, denoise_sigma=0.0):
    """Piecewise-constant approximation: every pixel replaced by its class mean.

    With ``denoise_sigma > 0`` classes are found on an in-plane Gaussian
    smoothed copy.
    """
    image = np.asarray(image, dtype=np.float64)
    if denoise_sigma > 0:
        sig = (0.0,) * (image.ndim - 2) + (denoise_sigma, denoise_sigma)
        image = ndimage.gaussian_filter(image, sig, mode="nearest")
    centers, assign = kmeans_1d(image, k)
    return centers[assign].reshape(image.shape)


def _smoother(shape, sigma, z_ratio):
    sig = (0.0 if shape[0] == 1 else sigma * z_ratio, sigma, sigma)
    return lambda a: ndimage.gaussian_filter(a, sig, mode="constant", cval=0.0)


def _shifted_moment(raw, a, b, yy, xx):
    """Weighted sum of ``(Y - y)**a (X - x)**b`` from raw moments ``raw(p, q)``
    of ``Y**p X**q`` (binomial expansion about every evaluation point)."""
    out = 0.0
    for p in range(a + 1):
        for q in range(b + 1):
            out = out + (comb(a, p) * comb(b, q)) * (-yy) ** (a - p) * (-xx) ** (b - q) * raw(p, q)
    return out


def local_poly_ratio(observed, model, sigma, z_ratio=0.25, degree=2):
    """Per-voxel intercept of the weighted fit ``observed ~ poly(p - p0) * model``.

    ``poly`` is an in-plane polynomial of total degree `degree` centred on
    the evaluation point ``p0``. The weights are a Gaussian window around
    ``p0`` times ``model ** 2`` (least squares in ``observed``). Coordinates
    are scaled by ``sigma`` to keep the normal equations well conditioned.
    """
    g = _smoother(observed.shape, sigma, z_ratio)
    _, h, w = observed.shape
    yy, xx = np.meshgrid((np.arange(h) - h / 2) / sigma, (np.arange(w) - w / 2) / sigma,
                         indexing="ij")
    w2 = model * model
    wi = observed * model
    cache_m, cache_r = {}, {}

    def raw_m(p, q):
        if (p, q) not in cache_m:
            cache_m[p, q] = g(w2 * yy ** p * xx ** q)
        return cache_m[p, q]

    def raw_r(p, q):
        if (p, q) not in cache_r:
            cache_r[p, q] = g(wi * yy ** p * xx ** q)
        return cache_r[p, q]

    exps = [(i, j) for i in range(degree + 1) for j in range(degree + 1 - i)]
    n = len(exps)
    a = np.empty(observed.shape + (n, n))
    b = np.empty(observed.shape + (n,))
    for r, (ey, ex) in enumerate(exps):
        b[..., r] = _shifted_moment(raw_r, ey, ex, yy, xx)
        for c, (fy, fx) in enumerate(exps[r:], start=r):
            a[..., r, c] = a[..., c, r] = _shifted_moment(raw_m, ey + fy, ex + fx, yy, xx)
    # ridge guard for windows that hold no signal at all
    a += np.eye(n) * (1e-12 * max(float(a[..., 0, 0].max()), np.finfo(np.float64).tiny))
    return np.linalg.solve(a, b[..., None])[..., 0, 0]


def limit_steps(field, max_step):
    """Shrink ``field`` towards 1 until no 4-neighbour step exceeds `max_step`.

    ``1 + alpha (field - 1)`` keeps the mean and, for ``alpha <= 1``,
    positivity; alpha is the largest value meeting the bound.
    """
    steps = [np.abs(np.diff(field, axis=ax)).max(initial=0.0) for ax in (-1, -2)]
    worst = max(steps)
    if worst <= max_step:
        return field
    # the margin absorbs rounding in ``1 + alpha * d``
    alpha = max_step / worst * (1.0 - 1e-9)
    return 1.0 + (field - 1.0) * alpha


def estimate_field(stack, cfg=None):
    """Estimate the multiplicative field of an image or stack.

    Returns an array of the input's shape (a 2D input gives a 2D field)
    with strictly positive values and arithmetic mean 1.
    """
    cfg = cfg or CorrectionConfig()
    squeeze = np.ndim(stack) == 2
    observed = as_stack(stack)
    if not observed.any():
        raise FieldEstimationError("the field is undefined for an all-zero stack")
    sigma = cfg.sigma_for(observed.shape)
    corrected = observed
    field = np.ones_like(observed)
    for _ in range(cfg.iterations):
        model = class_model(corrected, cfg.n_classes, cfg.denoise_sigma)
        field = local_poly_ratio(observed, model, sigma, cfg.z_ratio, cfg.fit_degree)
        field = np.maximum(field, cfg.epsilon * field.mean())
        field /= field.mean()
        field = limit_steps(field, cfg.max_step)
        corrected = observed / np.maximum(field, cfg.epsilon)
    return field[0] if squeeze else field


def correct(stack, field, epsilon=1e-3):
    """``clip(observed / max(field, epsilon), 0, 1)``."""
    observed = np.asarray(stack, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if observed.shape != field.shape:
        raise ValueError(f"field shape {field.shape} does not match image shape {observed.shape}")
    return np.clip(observed / np.maximum(field, epsilon), 0.0, 1.0)


def correct_volume(stack, cfg=None):
    """Estimate the field of `stack` and divide it out."""
    cfg = cfg or CorrectionConfig()
    return correct(stack, estimate_field(stack, cfg), cfg.epsilon)


def field_violations(field, max_step=0.02, mean_tol=1e-6):
    """List of the ways `field` breaks the bias-field invariants (empty if valid)."""
    f = np.asarray(field, dtype=np.float64)
    problems = []
    if not np.isfinite(f).all():
        problems.append("non-finite values")
        return problems
    if not (f > 0).all():
        problems.append("non-positive values")
    if abs(f.mean() - 1.0) > mean_tol:
        problems.append(f"mean {f.mean()!r} differs from 1")
    steps = [np.abs(np.diff(f, axis=ax)).max(initial=0.0) for ax in (-1, -2)]
    if max(steps) > max_step:
        problems.append(f"neighbour step {max(steps):.4g} exceeds {max_step}")
    return problems
