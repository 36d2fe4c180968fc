"""Encoder/decoder kMACs per pixel and parameter counts across modes and channel sizes.

Counts come from the analytic layer graph, so full-size models cost nothing to
report. Percentages are relative to CC at the largest channel size.
"""

import argparse

from condvc.complexity import complexity_report, render_complexity_table
from condvc.config import CodingMode, ModelConfig, toy_model_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=["full", "toy"], default="full")
    ap.add_argument("--channels", type=int, nargs="+", default=[64, 32, 16, 8])
    args = ap.parse_args()

    chans = sorted(args.channels, reverse=True)
    if args.preset == "full":
        cfgs = [ModelConfig(mode=m, channels=c) for c in chans for m in CodingMode]
    else:
        cfgs = [toy_model_config(m, c) for c in chans for m in CodingMode]
    reports = complexity_report(cfgs, anchor=0)
    print(render_complexity_table(reports))
    cc, cr = reports[0], reports[1]
    print(f"\nCR adds {(cr.dec_kmacs_per_pixel - cc.dec_kmacs_per_pixel) * 1000:.0f} MACs/pixel "
          f"and {cr.model_size_params - cc.model_size_params} parameters at C={chans[0]}: the 3x3 pixel projection.")


if __name__ == "__main__":
    main()
