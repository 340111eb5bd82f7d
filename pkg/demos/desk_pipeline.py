"""Short desk-scale run of the whole pipeline on synthetic data.

Trains for a few hundred iterations only, so the scores are well below
those of the default preset. Run with ``python demos/desk_pipeline.py [out_dir]``.
"""

import sys
import tempfile
from pathlib import Path

from tubuleseg import cli


def main(out_dir):
    cfg = cli.PipelineConfig(seed=7, n_test=5, augment_n=2, train_max_iterations=300)

    def progress(i, loss, model):
        if (i + 1) % 100 == 0:
            print(f"iteration {i + 1:4d}  loss {loss:.4f}")

    result, reports = cli.run_pipeline(cfg, out_dir, callback=progress)
    print(f"trained on {result.n_training_pairs} augmented pairs -> {result.checkpoint}")
    for r in reports:
        print(f"{Path(r.image).name}: F1 {r.f1:.3f}  OD {r.od:.3f}  OH {r.oh:.2f}")
    s = cli.summarize(reports)
    print(f"mean: PA {s['pa']:.4f}  F1 {s['f1']:.3f}  OD {s['od']:.3f}  OH {s['oh']:.2f}")
    print(f"overlays in {Path(out_dir) / 'infer' / 'overlays'}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as d:
            main(Path(d))
