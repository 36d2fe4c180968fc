"""Train toy CC and CR at two channel sizes and compare how much each degrades.

With a narrow condition, CC loses more of the prediction than CR, which still
subtracts the full-resolution pixel prediction. This is the slow experiment
behind acceptance criterion 7; results and checkpoints are cached so reruns are
instant. A cold run trains 4 models per seed (about 10-20 CPU minutes each).
"""

import argparse
import logging
from pathlib import Path

import torch

from condvc.config import TrainConfig, toy_model_config
from condvc.sweep import bottleneck_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--channels", type=int, nargs=2, default=[16, 4])
    ap.add_argument("--iters-per-epoch", type=int, default=60)
    ap.add_argument("--cache", type=Path, default=Path(".cache/trend"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)

    base = TrainConfig(model=toy_model_config("cc", max(args.channels)), iters_per_epoch=args.iters_per_epoch,
                       learning_rate=1e-3, epa_learning_rate=1e-4)
    res = bottleneck_trend(base, args.seeds, tuple(args.channels), 512, args.cache)
    wide, narrow = res["channels"]
    print(f"\nvalidation loss at lambda=512, C={wide} -> C={narrow}")
    for seed, r in res["seeds"].items():
        l, d = r["losses"], r["degradation"]
        print(f"seed {seed}: CC {l[f'cc_C{wide}_seed{seed}']:.3f} -> {l[f'cc_C{narrow}_seed{seed}']:.3f} (+{d['cc']:.3f})"
              f"   CR {l[f'cr_C{wide}_seed{seed}']:.3f} -> {l[f'cr_C{narrow}_seed{seed}']:.3f} (+{d['cr']:.3f})")
    print(f"CC degraded more in {res['wins']} of {len(res['seeds'])} seeds")


if __name__ == "__main__":
    main()
