"""End-to-end synthetic pipeline: corpus, tokenizer, IDs, generator, metrics.

Runs the whole system at a chosen scale and prints each stage's artifacts and
timing. Example:

    python3 scripts/run_synthetic_pipeline.py --scale micro --out runs/micro
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

import torch

from semrec import data
from semrec.config import config_dict
from semrec.evaluation import collision_audit, evaluate_generator, \
    tokenizer_artifacts
from semrec.generator import save_generator, train_generator
from semrec.presets import desk_scale, micro_scale
from semrec.quantizer import save_id_table, write_semantic_ids_tsv
from semrec.stage1 import save_stage1, train_stage1
from semrec.util import write_json


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scale", choices=("micro", "desk"), default="micro")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("runs/pipeline"))
    args = parser.parse_args()
    torch.set_num_threads(1)

    synth_cfg, s1_cfg, gen_cfg, eval_cfg = \
        micro_scale() if args.scale == "micro" else desk_scale()
    s1_cfg = replace(s1_cfg, seed=args.seed)
    gen_cfg = replace(gen_cfg, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    items, seqs, _ = data.synthesize(**config_dict(synth_cfg))
    stats = data.save_dataset(args.out / "data", items, seqs)
    print(f"[{time.time() - t0:6.1f}s] corpus: {stats.n_items} items, "
          f"{stats.n_users} users, {stats.n_interactions} interactions")

    model, report = train_stage1(items, seqs, s1_cfg)
    save_stage1(args.out / "stage1", model, s1_cfg, report)
    last = report.epochs[-1]
    print(f"[{time.time() - t0:6.1f}s] stage-1: {len(report.epochs)} epochs, "
          f"total {report.epochs[0]['total']:.3f} -> {last['total']:.3f}, "
          f"val acc {last['val_accuracy']:.3f}")

    table, sim = tokenizer_artifacts(model, items, gen_cfg.sim_buckets)
    ids_dir = args.out / "ids"
    ids_dir.mkdir(exist_ok=True)
    save_id_table(ids_dir / "id_table.bin", table)
    sim.save(ids_dir / "sim_table.bin")
    write_semantic_ids_tsv(ids_dir / "semantic_ids.tsv", table)
    audit = collision_audit(table)
    write_json(ids_dir / "collisions.json", audit)
    print(f"[{time.time() - t0:6.1f}s] ids: full-ID collisions "
          f"{audit['full_id_colliding_items']} "
          f"({100 * audit['full_id_collision_rate']:.2f}%)")

    gen_model, gen_report = train_generator(seqs, table, sim, gen_cfg)
    save_generator(args.out / "generator", gen_model, gen_cfg, gen_report)
    print(f"[{time.time() - t0:6.1f}s] stage-2: {len(gen_report.epochs)} "
          f"epochs, valid loss "
          f"{gen_report.epochs[gen_report.best_epoch]['valid_loss']:.3f}")

    metrics, _, coverage = evaluate_generator(gen_model, table, sim, seqs,
                                              eval_cfg)
    write_json(args.out / "metrics.json",
               {"metrics": metrics, "coverage": coverage})
    line = "  ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
    print(f"[{time.time() - t0:6.1f}s] eval: {line} (coverage {coverage:.2f})")


if __name__ == "__main__":
    main()
