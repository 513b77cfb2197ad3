"""Print the 50-episode running mean of a training run's reward log, every N episodes.

usage: python3 scripts/train_curve.py RUN_DIR [--every 100]
"""

import argparse
from pathlib import Path

from derreserve.cli import _read_rewards, running_mean


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir", type=Path)
    p.add_argument("--every", type=int, default=100)
    args = p.parse_args()
    rewards = _read_rewards(args.run_dir / "reward_log.csv")
    rm = running_mean(rewards)
    for ep in range(0, len(rm), args.every):
        print(f"{ep:6d} {rm[ep]:10.4f}")
    print(f"{len(rm) - 1:6d} {rm[-1]:10.4f}")


if __name__ == "__main__":
    main()
