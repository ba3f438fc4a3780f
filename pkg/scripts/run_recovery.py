"""Start VaR-CPO from a cost-seeking policy and check that recovery mode brings it back below rho."""

import argparse
from pathlib import Path

from varcpo.config import load_config
from varcpo.experiments import recovery_trace, run_recovery

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/recovery"))
    ap.add_argument("--iterations", type=int, default=40)
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()

    pre = load_config(CONFIGS / "icylake_costseeking.cfg")
    var = load_config(CONFIGS / "icylake_varcpo.cfg")
    metrics = run_recovery(pre, var, args.out, args.iterations, quiet=args.quiet)
    trace = recovery_trace(metrics, var.rho)
    for i, (mu, mode) in enumerate(zip(trace.mu, trace.modes)):
        print(f"iter {i:3d} mu {mu:8.2f} {mode}")
    for name, ok in trace.checks().items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")


if __name__ == "__main__":
    main()
