"""Pixel and object metrics on a hand-built pair of instance masks.

Run with ``python demos/metrics_walkthrough.py``.
"""

import numpy as np

from tubuleseg.metrics import evaluate, match_objects

gt = np.zeros((16, 16), np.int32)
gt[1:5, 1:5] = 1
gt[1:5, 9:13] = 2
gt[10:14, 4:10] = 3

seg = np.zeros_like(gt)
seg[1:5, 1:4] = 1     # covers 75 % of gt 1: true positive
seg[2:5, 9:13] = 2    # covers 75 % of gt 2: true positive
seg[10:13, 13:16] = 3  # on background: false positive; gt 3 is missed


def main():
    m = match_objects(seg, gt)
    print(f"tp {m.tp}  fp {m.fp}  fn {m.fn}")
    r = evaluate(seg, gt, "toy")
    print(f"PA {r.pa:.4f}  precision {r.precision:.3f}  recall {r.recall:.3f}  F1 {r.f1:.3f}")
    print(f"object Dice {r.od:.4f}  object Hausdorff {r.oh:.3f} px")


if __name__ == "__main__":
    main()
