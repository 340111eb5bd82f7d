"""Turn a raw network mask into an instance mask.

Order of operations: threshold (if given probabilities), 4-connected
components, removal of components smaller than ``gamma`` pixels, hole
filling, and a final 4-connected relabeling.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imagedata import relabel_sequential

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class PostprocessConfig:
    gamma: int = 100
    # fill every enclosed background region instead of the single-pixel rule
    flood_fill: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def connected_components(mask):
    """4-connected components labeled 1..n in row-major first-pixel order."""
    mask = np.asarray(mask) > 0
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n == 0:
        return labels.astype(np.int32)
    # enforce first-encounter order regardless of the labeling backend
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[fg], fg)
    order = np.argsort(first[1:], kind="stable") + 1
    lut = np.zeros(n + 1, dtype=np.int32)
    lut[order] = np.arange(1, n + 1, dtype=np.int32)
    return lut[labels]


def remove_small(labels, gamma):
    """Drop objects with fewer than `gamma` pixels and compact the rest."""
    labels = np.asarray(labels)
    if gamma <= 0:
        return relabel_sequential(labels)
    sizes = np.bincount(labels.ravel())
    small = sizes < gamma
    small[0] = True
    out = labels.copy()
    out[small[labels]] = 0
    return relabel_sequential(out)


def fill_holes_step(mask):
    """One synchronous pass: a background pixel whose four neighbours are
    all foreground becomes foreground. Pixels outside the image count as
    background, so border pixels are never filled."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    surrounded = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m | surrounded


def fill_holes(mask, flood_fill=False):
    """Iterate the four-neighbour rule to a fixpoint.

    Holes of two or more pixels in both directions are left open by this
    rule; ``flood_fill=True`` instead fills every background region not
    4-connected to the image border.
    """
    m = np.asarray(mask, dtype=bool)
    if flood_fill:
        return ndimage.binary_fill_holes(m, structure=FOUR_CONNECTED).astype(np.uint8)
    while True:
        nxt = fill_holes_step(m)
        if np.array_equal(nxt, m):
            return m.astype(np.uint8)
        m = nxt


def postprocess(mask_or_prob, cfg=None):
    """Threshold, clean and label a network output."""
    cfg = cfg or PostprocessConfig()
    a = np.asarray(mask_or_prob)
    if np.issubdtype(a.dtype, np.floating) and not np.isin(a, (0.0, 1.0)).all():
        binary = a > 0.5
    else:
        binary = a > 0
    labels = remove_small(connected_components(binary), cfg.gamma)
    filled = fill_holes(labels > 0, flood_fill=cfg.flood_fill)
    return connected_components(filled)
