"""Five-seed IcyLake comparison of VaR-CPO, expected-cost CPO and unconstrained training.

Writes per-seed metrics under OUT/<algorithm>/seed_<n>/, comparison SVGs under
OUT/plots/, and prints the final-window summary of every run.
"""

import argparse
from pathlib import Path

from varcpo.config import load_config
from varcpo.experiments import final_summary, run_seeds
from varcpo.plots import plot_groups

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ALGORITHMS = ("varcpo", "cpo", "unconstrained")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/icylake_study"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=200_000, help="environment steps per run")
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()

    groups = {}
    for algo in ALGORITHMS:
        base = load_config(CONFIGS / f"icylake_{algo}.cfg")
        groups[algo] = run_seeds(base, range(args.seeds), args.out / algo, args.steps, quiet=args.quiet)
    plot_groups(groups, args.out / "plots")
    print(f"{'run':28s} {'reward':>7s} {'cost':>7s} {'p95':>6s} {'ice':>7s} {'success':>7s}")
    for algo, paths in groups.items():
        for path in paths:
            s = final_summary(path)
            print(f"{algo + '/' + path.parent.name:28s} {s.reward_return:7.3f} {s.cost_return:7.2f} "
                  f"{s.cost_p95:6.1f} {s.ice_visitation:7.4f} {s.success_rate:7.3f}")


if __name__ == "__main__":
    main()
