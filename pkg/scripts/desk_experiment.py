"""Desk-scale experiment: dataset, train and full eval for several seeds.

    python3 scripts/desk_experiment.py --seeds 0 1 2 --out runs/balanced
    python3 scripts/desk_experiment.py --proportions 0.558,0.066,0.375 --out runs/imbalanced

Each seed gets its own run directory; a summary table is printed at the end.
"""
import argparse
import json
import time
from pathlib import Path

from evsev import cli


def run_seed(root: Path, seed: int, n: int, proportions: str | None, bootstrap: int) -> dict:
    out = root / f"seed{seed}"
    common = ["--out", str(out), "--seed", str(seed)]
    extra = ["--proportions", proportions] if proportions else []
    if cli.main(["dataset", *common, "--n", str(n), *extra]) != 0:
        raise SystemExit(f"dataset failed for seed {seed}")
    t0 = time.perf_counter()
    if cli.main(["train", *common]) != 0:
        raise SystemExit(f"training failed for seed {seed}")
    secs = time.perf_counter() - t0
    ev = ["eval", *common, "--selective", "--degrade"]
    if bootstrap:
        ev += ["--bootstrap", str(bootstrap)]
    if cli.main(ev) != 0:
        raise SystemExit(f"eval failed for seed {seed}")
    report = json.loads((out / "eval" / "report.json").read_text())
    report["train_seconds"] = secs
    return report


def summarize(seed: int, r: dict) -> None:
    c = r["classification"]
    sp = r["spearman"]
    sel = {row["fraction"]: row["accuracy"] for row in r["selective"]}
    print(f"\nseed {seed}: train {r['train_seconds']:.0f}s, n_test {c['n']}")
    print(f"  accuracy {c['accuracy']:.3f}  weighted {c['weighted_accuracy']:.3f}  ECE {r['ece']:.4f}")
    print(f"  spearman vacuity {sp['vacuity']['rho']:.3f} (p={sp['vacuity']['p_value']:.1e})"
          f"  dissonance {sp['dissonance']['rho']:.3f} (p={sp['dissonance']['p_value']:.1e})")
    print("  selective " + "  ".join(f"{f:.0%}:{a:.3f}" for f, a in sel.items()))
    for pc in c["per_class"]:
        print(f"  class {pc['class']}: recall {pc['recall']:.3f} support {pc['support']}"
              f" vacuity {pc['mean_vacuity']:.3f}")
    print(f"  {'condition':<13}{'accuracy':>9}{'vacuity':>9}{'dissonance':>11}")
    for row in r["degradation"]:
        print(f"  {row['condition']:<13}{row['accuracy']:>9.3f}{row['mean_vacuity']:>9.3f}"
              f"{row['mean_dissonance']:>11.3f}")
    for name, ci in (r.get("bootstrap") or {}).items():
        print(f"  bootstrap {name}: [{ci[0]:.3f}, {ci[1]:.3f}]")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n", type=int, default=600)
    ap.add_argument("--proportions", help="class proportions, e.g. 0.558,0.066,0.375")
    ap.add_argument("--bootstrap", type=int, default=0, help="bootstrap iterations (0 = skip)")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    root = Path(args.out)
    for seed in args.seeds:
        summarize(seed, run_seed(root, seed, args.n, args.proportions, args.bootstrap))


if __name__ == "__main__":
    main()
