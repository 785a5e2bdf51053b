"""Per-class mean vacuity of a trained checkpoint on a fresh balanced synthetic set.

    python3 scripts/class_vacuity.py runs/imbalanced/seed0/train/checkpoint.bin --seed 1000

Useful after training on an imbalanced profile: the rare class should carry
the most vacuity.
"""
import argparse

import numpy as np

from evsev import data
from evsev import model as M


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--n", type=int, default=450)
    ap.add_argument("--seed", type=int, default=1000)
    args = ap.parse_args()
    params, cfg, _ = M.load_checkpoint(args.checkpoint)
    fresh = data.synthesize_dataset(args.n, seed=args.seed)
    outs = M.predict_batch([e.patch for e in fresh], params, cfg)
    y = np.array([e.cls for e in fresh])
    pred = np.array([o.predicted for o in outs])
    vac = np.array([o.vacuity for o in outs])
    print(f"accuracy {np.mean(pred == y):.3f} on {len(y)} patches")
    for k, name in enumerate(("light", "moderate", "heavy")):
        m = y == k
        print(f"{name:<9} recall {np.mean(pred[m] == k):.3f}  mean vacuity {vac[m].mean():.4f}")


if __name__ == "__main__":
    main()
