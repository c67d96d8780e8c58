"""Ablation sweep: full HoPA against versions without L_M, without wBCE and without mining.

    python3 scripts/ablation.py --seeds 0 1
"""

import argparse
import logging

from omnidistill import experiments

VARIANTS = ("hopa", "no_LM", "no_wBCE", "no_mining")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    data = experiments.default_data()
    rows = [experiments.method_trend(v, *data, seeds=args.seeds) for v in args.variants]
    print("variant,avg_R@1," + ",".join(f"seed{s}" for s in args.seeds))
    for r in rows:
        print(f"{r.method},{r.mean:.2f}," + ",".join(f"{x:.2f}" for x in r.per_seed))


if __name__ == "__main__":
    main()
