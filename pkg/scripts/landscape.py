"""Reward of single-DER reserve shifts around the capacity-based allocation.

Moves ``--step`` kW from each DER to each other DER and prints the change in
reserve cost, feeder loss, AVD and total reward. Useful for seeing which
directions the learner can profit from on a given case.

usage: python3 scripts/landscape.py [--case I] [--step 10]
"""

import argparse
import itertools

import numpy as np

from derreserve.allocators import CASES, capacity_based, evaluate
from derreserve.environment import EnvConfig, ReserveAction, reward
from derreserve.feeder import builtin_modified_ieee34


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--case", choices=sorted(CASES), default="I")
    p.add_argument("--step", type=float, default=10.0)
    args = p.parse_args()
    model, cfg, state = builtin_modified_ieee34(), EnvConfig(), CASES[args.case]
    base = capacity_based(state)
    ref, ref_rb = evaluate(base, state, model, cfg), reward(state, base, cfg, model)
    print(f"capacity: TRC {ref.trc_dollars_per_hour:.2f} $/h, loss {ref.total_loss_kw:.2f} kW, "
          f"AVD {ref.avd_pct:.3f}%, reward {ref_rb.total:.4f}")
    print(f"{'move':>10} {'dTRC':>8} {'dloss':>8} {'dAVD':>8} {'dreward':>9}")
    for i, j in itertools.permutations(range(state.n), 2):
        r = base.r.copy()
        r[i] -= args.step
        r[j] += args.step
        if r[i] < 0 or r[j] > state.r_max[j]:
            continue
        a = ReserveAction(r)
        rep, rb = evaluate(a, state, model, cfg), reward(state, a, cfg, model)
        print(f"{i + 1:>4} -> {j + 1:<3} {rep.trc_dollars_per_hour - ref.trc_dollars_per_hour:8.3f} "
              f"{rep.total_loss_kw - ref.total_loss_kw:8.3f} {rep.avd_pct - ref.avd_pct:8.4f} "
              f"{rb.total - ref_rb.total:9.4f}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
