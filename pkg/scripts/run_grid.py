"""Hyperparameter curves: quantization depth, codebook size, code dimension,
and similarity resolution, each swept with the full model.

    python3 scripts/run_grid.py --scale micro --param codes --values 4,8,16 \
        --out runs/grid
"""

import argparse
import time
from pathlib import Path

import torch

from semrec import data
from semrec.config import config_dict
from semrec.evaluation import SWEEP_PARAMS, run_hyperparameter_sweep
from semrec.presets import desk_scale, micro_scale

DEFAULT_VALUES = {
    "levels": "2,3,4",
    "codes": "16,32,64",
    "dim": "16,32,64",
    "sim_buckets": "10,50,100,200",
}


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scale", choices=("micro", "desk"), default="desk")
    parser.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    parser.add_argument("--values", default=None,
                        help="Comma list; defaults depend on the parameter.")
    parser.add_argument("--seeds", default="0")
    parser.add_argument("--out", type=Path, default=Path("runs/grid"))
    args = parser.parse_args()
    torch.set_num_threads(1)

    synth_cfg, s1_cfg, gen_cfg, eval_cfg = \
        micro_scale() if args.scale == "micro" else desk_scale()
    values = tuple(int(v) for v in
                   (args.values or DEFAULT_VALUES[args.param]).split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))

    items, seqs, _ = data.synthesize(**config_dict(synth_cfg))
    t0 = time.time()
    result = run_hyperparameter_sweep(items, seqs, s1_cfg, gen_cfg, eval_cfg,
                                      param=args.param, values=values,
                                      seeds=seeds, out_dir=args.out)
    print(f"sweep finished in {(time.time() - t0) / 60:.1f} min")
    for metric, ys in result["curves"].items():
        pts = "  ".join(f"{v}:{y:.4f}" for v, y in zip(result["values"], ys))
        print(f"{metric}: {pts}")


if __name__ == "__main__":
    main()
