"""Pixel-level and object-level segmentation metrics.

Pixel metrics are accuracy and the false-alarm / miss fractions. Object
metrics follow the gland-segmentation-challenge conventions: an object F1
with a 50 % overlap rule, and size-weighted object Dice and object
Hausdorff averaged over both matching directions (segmented -> groundtruth
and groundtruth -> segmented).
"""

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .imagedata import as_instance

CSV_COLUMNS = ("image", "PA", "TypeI", "TypeII", "Precision", "Recall", "F1", "OD", "OH")


class EmptySetError(ValueError):
    """A set-based metric is undefined for empty inputs."""


# ---------------------------------------------------------------------------
# pixel level
# ---------------------------------------------------------------------------

@dataclass
class PixelMetrics:
    pa: float
    type1: float
    type2: float
    tp: int
    tn: int
    fp: int
    fn: int
    total: int


def pixel_metrics(seg, gt):
    seg = np.asarray(seg) > 0
    gt = np.asarray(gt) > 0
    if seg.shape != gt.shape:
        raise ValueError(f"shape mismatch: {seg.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(seg & gt))
    fp = int(np.count_nonzero(seg & ~gt))
    fn = int(np.count_nonzero(~seg & gt))
    total = seg.size
    tn = total - tp - fp - fn
    return PixelMetrics((tp + tn) / total, fp / total, fn / total, tp, tn, fp, fn, total)


# ---------------------------------------------------------------------------
# object matching and F1
# ---------------------------------------------------------------------------

def overlap_matrix(seg_labels, gt_labels):
    """``M[i, j] = |S_i & G_j|`` with row/column 0 for background."""
    s = np.asarray(seg_labels).ravel().astype(np.int64)
    g = np.asarray(gt_labels).ravel().astype(np.int64)
    ns, ng = int(s.max(initial=0)), int(g.max(initial=0))
    m = np.bincount(s * (ng + 1) + g, minlength=(ns + 1) * (ng + 1))
    return m.reshape(ns + 1, ng + 1)


def _best_match(overlap_rows):
    """Column index (1-based label) of the maximal overlap per row, or 0
    when a row has no overlap at all. Ties go to the lowest label."""
    if overlap_rows.shape[1] == 0:
        return np.zeros(overlap_rows.shape[0], dtype=np.int64)
    best = overlap_rows.argmax(axis=1) + 1
    best[overlap_rows.max(axis=1) == 0] = 0
    return best


@dataclass
class ObjectMatching:
    overlap: np.ndarray
    seg_sizes: np.ndarray  # index 0 unused
    gt_sizes: np.ndarray
    seg_to_gt: np.ndarray  # per segmented object, 0 = no overlap
    gt_to_seg: np.ndarray
    seg_is_tp: np.ndarray
    gt_is_matched: np.ndarray

    @property
    def tp(self):
        return int(self.seg_is_tp.sum())

    @property
    def fp(self):
        return int((~self.seg_is_tp).sum())

    @property
    def fn(self):
        return int((~self.gt_is_matched).sum())


def match_objects(seg_labels, gt_labels):
    """Classify objects for the F1 count.

    A segmented object is a true positive when it covers at least half of
    the groundtruth object it overlaps most (area taken from the
    groundtruth object); otherwise it is a false positive. A groundtruth
    object with no true-positive partner is a false negative.
    """
    seg = as_instance(seg_labels)
    gt = as_instance(gt_labels)
    if seg.shape != gt.shape:
        raise ValueError(f"shape mismatch: {seg.shape} vs {gt.shape}")
    ov = overlap_matrix(seg, gt)
    seg_sizes = ov.sum(axis=1)
    gt_sizes = ov.sum(axis=0)
    s2g = _best_match(ov[1:, 1:])
    g2s = _best_match(ov[1:, 1:].T)
    ns = ov.shape[0] - 1
    tp = np.zeros(ns, dtype=bool)
    for i in range(ns):
        j = s2g[i]
        tp[i] = j > 0 and 2 * ov[i + 1, j] >= gt_sizes[j]
    matched = np.zeros(ov.shape[1] - 1, dtype=bool)
    matched[s2g[tp] - 1] = True
    return ObjectMatching(ov, seg_sizes, gt_sizes, s2g, g2s, tp, matched)


def f1_score(matching):
    """(precision, recall, F1); every 0/0 ratio is reported as 0."""
    tp, fp, fn = matching.tp, matching.fp, matching.fn
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


# ---------------------------------------------------------------------------
# set metrics
# ---------------------------------------------------------------------------

def dice(a, b):
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        raise EmptySetError("Dice is undefined for two empty sets")
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def boundary(mask):
    """Foreground pixels with a background 4-neighbour or on the image edge."""
    m = np.asarray(mask) > 0
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _directed(bnd_a, bnd_b):
    """max over a of the distance to the nearest pixel of b (exact)."""
    _, (iy, ix) = ndimage.distance_transform_edt(~bnd_b, return_indices=True)
    ya, xa = np.nonzero(bnd_a)
    dy = (ya - iy[ya, xa]).astype(np.float64)
    dx = (xa - ix[ya, xa]).astype(np.float64)
    return float(np.sqrt(dy * dy + dx * dx).max())


def hausdorff(a, b):
    """Symmetric Euclidean Hausdorff distance between the boundaries of two
    pixel sets given as same-shaped masks."""
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        raise EmptySetError("Hausdorff distance needs two non-empty sets")
    return max(_directed(ba, bb), _directed(bb, ba))


# ---------------------------------------------------------------------------
# object Dice / Hausdorff
# ---------------------------------------------------------------------------

def _boundary_centroids(labels, n):
    # per-object boundary: object pixels with a 4-neighbour of another label
    p = np.pad(labels, 1, constant_values=0)
    same = ((p[:-2, 1:-1] == labels) & (p[2:, 1:-1] == labels)
            & (p[1:-1, :-2] == labels) & (p[1:-1, 2:] == labels))
    bnd = (labels > 0) & ~same
    idx = labels[bnd]
    ys, xs = np.nonzero(bnd)
    cnt = np.bincount(idx, minlength=n + 1).astype(np.float64)
    cy = np.bincount(idx, weights=ys, minlength=n + 1)
    cx = np.bincount(idx, weights=xs, minlength=n + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.stack([cy / cnt, cx / cnt], axis=1)


def _nearest_by_centroid(src_centroids, dst_centroids):
    d = src_centroids[:, None, :] - dst_centroids[None, :, :]
    dist = np.sqrt((d ** 2).sum(axis=-1))
    return dist.argmin(axis=1) + 1


def _require_objects(seg, gt):
    if seg.max(initial=0) == 0 or gt.max(initial=0) == 0:
        raise EmptySetError("object metrics need at least one object in each mask")


def object_dice(seg_labels, gt_labels):
    seg = as_instance(seg_labels)
    gt = as_instance(gt_labels)
    _require_objects(seg, gt)
    m = match_objects(seg, gt)
    ov, ss, gs = m.overlap, m.seg_sizes, m.gt_sizes
    total_s = ss[1:].sum()
    total_g = gs[1:].sum()
    term_s = 0.0
    for i, j in enumerate(m.seg_to_gt, start=1):
        if j:
            term_s += ss[i] / total_s * (2.0 * ov[i, j] / (ss[i] + gs[j]))
    term_g = 0.0
    for j, i in enumerate(m.gt_to_seg, start=1):
        if i:
            term_g += gs[j] / total_g * (2.0 * ov[i, j] / (ss[i] + gs[j]))
    return 0.5 * (term_s + term_g)


def object_hausdorff(seg_labels, gt_labels):
    """Size-weighted object Hausdorff.

    Objects are paired by maximal overlap as in :func:`object_dice`. An
    object that overlaps nothing is paired with the counterpart whose
    boundary centroid is closest to its own (ties to the lowest label).
    """
    seg = as_instance(seg_labels)
    gt = as_instance(gt_labels)
    _require_objects(seg, gt)
    m = match_objects(seg, gt)
    ns, ng = len(m.seg_to_gt), len(m.gt_to_seg)
    s2g, g2s = m.seg_to_gt.copy(), m.gt_to_seg.copy()
    if (s2g == 0).any() or (g2s == 0).any():
        cs = _boundary_centroids(seg, ns)[1:]
        cg = _boundary_centroids(gt, ng)[1:]
        s2g[s2g == 0] = _nearest_by_centroid(cs[s2g == 0], cg)
        g2s[g2s == 0] = _nearest_by_centroid(cg[g2s == 0], cs)
    cache = {}

    def h(i, j):
        if (i, j) not in cache:
            cache[(i, j)] = hausdorff(seg == i, gt == j)
        return cache[(i, j)]

    ss, gs = m.seg_sizes, m.gt_sizes
    total_s, total_g = ss[1:].sum(), gs[1:].sum()
    term_s = sum(ss[i] / total_s * h(i, s2g[i - 1]) for i in range(1, ns + 1))
    term_g = sum(gs[j] / total_g * h(g2s[j - 1], j) for j in range(1, ng + 1))
    return 0.5 * (term_s + term_g)


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    image: str
    pa: float
    type1: float
    type2: float
    precision: float
    recall: float
    f1: float
    od: float
    oh: float
    # set when one of the masks holds no object: OD is then 0 and OH NaN
    empty: bool = False

    def row(self):
        return [self.image, self.pa, self.type1, self.type2, self.precision,
                self.recall, self.f1, self.od, self.oh]

    def asdict(self):
        return asdict(self)


def evaluate(seg_labels, gt_labels, image=""):
    seg = as_instance(seg_labels)
    gt = as_instance(gt_labels)
    px = pixel_metrics(seg, gt)
    p, r, f1 = f1_score(match_objects(seg, gt))
    empty = seg.max(initial=0) == 0 or gt.max(initial=0) == 0
    if empty:
        od, oh = 0.0, math.nan
    else:
        od, oh = object_dice(seg, gt), object_hausdorff(seg, gt)
    return EvaluationReport(str(image), px.pa, px.type1, px.type2, p, r, f1, od, oh, empty)


def reports_to_csv(reports, path=None):
    """Write reports as CSV (``repr`` floats for bit-exact round trips);
    returns the text when `path` is None."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        w.writerow([rep.image] + [repr(float(v)) for v in rep.row()[1:]])
    text = buf.getvalue()
    if path is None:
        return text
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text
