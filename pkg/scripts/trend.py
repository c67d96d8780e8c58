"""HoPA against the random coreset and the pairwise baselines on the default generated data.

    python3 scripts/trend.py --methods hopa 3pair tbind --seeds 0 1 2
"""

import argparse
import logging
import time

from omnidistill import experiments


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--methods", nargs="+", default=["hopa", "3pair", "tbind", "vbind", "rank2"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--n", type=int, default=50, help="random coreset size")
    p.add_argument("--own-objective", action="store_true", help="also evaluate each set with its own objective")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    data = experiments.default_data()
    t0 = time.perf_counter()
    results = [experiments.random_trend(*data, n=args.n, seeds=args.seeds)]
    for method in args.methods:
        results.append(experiments.method_trend(method, *data, seeds=args.seeds, own_objective=args.own_objective))

    print(f"{'method':<10} {'avg R@1':>8}  per seed")
    for r in results:
        extra = "".join(f"  {k}: {sum(v) / len(v):.2f}" for k, v in r.diagnostics.items())
        print(f"{r.method:<10} {r.mean:8.2f}  {[round(x, 2) for x in r.per_seed]}{extra}")
    hopa = next((r for r in results if r.method == "hopa"), None)
    if hopa:
        for r in results:
            if r is not hopa:
                print(experiments.margin_line(hopa, r))
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
