"""Command-line entry point wiring the pipeline end to end.

Subcommands compose through artifact directories: `synth`/`ingest` produce a
dataset, `train-quant` a tokenizer checkpoint, `assign-ids` the semantic-ID
and similarity tables, `train-gen` a generator checkpoint, and `evaluate`/
`bench`/`collisions`/`ablate`/`plot` consume those. Every output directory
carries a manifest recording the command, config, seed, and input hashes.

Config precedence is CLI flag > config file > built-in default. Exit code 2
signals a usage error (unknown flag or subcommand), 1 a failed precondition.
"""

import dataclasses
import functools
import json
from dataclasses import replace
from pathlib import Path

import click

from . import data as data_mod
from .config import (EvalConfig, GeneratorConfig, IngestConfig, Stage1Config,
                     SynthConfig, apply_overrides, config_dict)
from .evaluation import (MetricReport, collision_audit, evaluate_generator,
                         plot_metric_bars, plot_sweep_curves,
                         run_ablation_suite, tokenizer_artifacts)
from .generator import (SimilarityTable, benchmark_inference, generator_pairs,
                        load_generator, save_generator, train_generator)
from .manifest import read_manifest, write_manifest
from .quantizer import load_id_table, save_id_table, write_semantic_ids_tsv
from .stage1 import load_stage1, save_stage1, train_stage1
from .util import env_data_root, read_json, set_deterministic, write_json

VARIANT_ALIASES = {"s": "static_sim", "e": "inherit_emb", "u": "no_shared",
                   "no_u": "no_shared"}


def resolve(p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else env_data_root() / p


def parse_sets(pairs) -> dict:
    """`--set key=value` pairs; values parse as JSON, falling back to string."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.ClickException(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def parse_int_list(text) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise click.ClickException(f"expected comma-separated integers, got {text!r}")


def canon_variants(text) -> tuple:
    names = []
    for raw in str(text).split(","):
        key = raw.strip().replace("-", "_").lower()
        names.append(VARIANT_ALIASES.get(key, key))
    return tuple(names)


def guarded(f):
    """Map failed preconditions to exit code 1 with a clean diagnostic."""
    @functools.wraps(f)
    def wrapper(*a, **k):
        try:
            return f(*a, **k)
        except click.ClickException:
            raise
        except (ValueError, KeyError, FileNotFoundError, OSError,
                RuntimeError) as e:
            raise click.ClickException(str(e))
    return wrapper


@click.group()
@click.option("--workers", default=1, show_default=True,
              help="Torch thread count; 1 guarantees deterministic numerics.")
def main(workers):
    """Two-stage generative recommender: multi-signal item tokenization into
    shared-codebook semantic IDs, then seq2seq next-item generation."""
    set_deterministic(workers)


@main.command()
@click.option("--items", "n_items", type=int, default=None, help="Catalog size.")
@click.option("--users", "n_users", type=int, default=None, help="User count.")
@click.option("--clusters", "n_clusters", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True, help="Override any config key.")
@click.option("--out", required=True, help="Dataset output directory.")
@guarded
def synth(n_items, n_users, n_clusters, seed, config_file, sets, out):
    """Generate the clustered synthetic corpus with known dynamics."""
    over = {"n_items": n_items, "n_users": n_users, "n_clusters": n_clusters,
            "seed": seed}
    over.update(parse_sets(sets))
    cfg = apply_overrides(SynthConfig(), config_file, over)
    items, seqs, info = data_mod.synthesize(**dataclasses.asdict(cfg))
    out_dir = resolve(out)
    extra = {"clusters": info.clusters.tolist(),
             "subgroups": info.subgroups.tolist(),
             "transition": info.transition.tolist(),
             "routing": info.routing.tolist(),
             "successors": info.successors.tolist(),
             "config": config_dict(cfg)}
    stats = data_mod.save_dataset(out_dir, items, seqs, extra=extra)
    write_manifest(out_dir, "synth", config_dict(cfg), cfg.seed)
    click.echo(f"wrote {stats.n_items} items, {stats.n_users} sequences, "
               f"{stats.n_interactions} interactions to {out_dir}")


@main.command()
@click.option("--interactions", required=True, type=click.Path(exists=True),
              help="TSV of user, item key, timestamp.")
@click.option("--text-emb", required=True, type=click.Path(exists=True))
@click.option("--image-emb", required=True, type=click.Path(exists=True))
@click.option("--min-count", type=int, default=None)
@click.option("--max-len", type=int, default=None)
@click.option("--out", required=True)
@guarded
def ingest(interactions, text_emb, image_emb, min_count, max_len, out):
    """Build a dataset from interaction and embedding files (core filtering,
    dense ids, leave-one-out splits)."""
    cfg = apply_overrides(IngestConfig(), None,
                          {"min_count": min_count, "max_len": max_len})
    items, seqs, stats = data_mod.ingest(interactions, text_emb, image_emb,
                                         min_count=cfg.min_count,
                                         max_len=cfg.max_len)
    out_dir = resolve(out)
    data_mod.save_dataset(out_dir, items, seqs)
    write_manifest(out_dir, "ingest", config_dict(cfg), 0,
                   inputs={"interactions": interactions, "text_emb": text_emb,
                           "image_emb": image_emb})
    click.echo(f"wrote {stats.n_items} items, {stats.n_users} sequences "
               f"to {out_dir}")


@main.command("train-quant")
@click.option("--data", "data_dir", required=True, help="Dataset directory.")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--out", required=True)
@guarded
def train_quant(data_dir, config_file, sets, seed, epochs, out):
    """Train the multi-signal tokenizer (stage 1)."""
    data_p = resolve(data_dir)
    items, seqs, _ = data_mod.load_dataset(data_p)
    over = {"seed": seed, "epochs": epochs}
    over.update(parse_sets(sets))
    cfg = apply_overrides(Stage1Config(), config_file, over)
    model, report = train_stage1(items, seqs, cfg)
    out_dir = resolve(out)
    save_stage1(out_dir, model, cfg, report)
    write_manifest(out_dir, "train-quant", config_dict(cfg), cfg.seed,
                   inputs={"data": data_p})
    last = report.epochs[-1]
    click.echo(f"stage-1 finished: epochs={len(report.epochs)} "
               f"best={report.best_epoch} total={last['total']:.4f} "
               f"val_accuracy={last['val_accuracy']:.4f}")


@main.command("assign-ids")
@click.option("--checkpoint", required=True, help="Stage-1 output directory.")
@click.option("--data", "data_dir", default=None,
              help="Dataset directory; defaults to the checkpoint's input.")
@click.option("--sim-buckets", type=int, default=100, show_default=True)
@click.option("--out", required=True)
@guarded
def assign_ids(checkpoint, data_dir, sim_buckets, out):
    """Quantize the catalog into semantic IDs and build the bucketized
    item-similarity table."""
    ckpt = resolve(checkpoint)
    data_p = resolve(data_dir) if data_dir else \
        Path(read_manifest(ckpt)["inputs"]["data"])
    items, _, _ = data_mod.load_dataset(data_p)
    model, _ = load_stage1(ckpt)
    table, sim = tokenizer_artifacts(model, items, sim_buckets)
    out_dir = resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_id_table(out_dir / "id_table.bin", table)
    sim.save(out_dir / "sim_table.bin")
    write_semantic_ids_tsv(out_dir / "semantic_ids.tsv", table)
    audit = collision_audit(table)
    write_json(out_dir / "collisions.json", audit)
    write_manifest(out_dir, "assign-ids", {"sim_buckets": sim_buckets}, 0,
                   inputs={"checkpoint": ckpt, "data": data_p})
    click.echo(f"assigned IDs for {table.n_items} items; full-ID collisions: "
               f"{audit['full_id_colliding_items']} "
               f"({100 * audit['full_id_collision_rate']:.2f}%)")


@main.command("train-gen")
@click.option("--ids", "ids_dir", required=True,
              help="assign-ids output directory.")
@click.option("--data", "data_dir", default=None)
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--out", required=True)
@guarded
def train_gen(ids_dir, data_dir, config_file, sets, seed, epochs, out):
    """Train the seq2seq generator over semantic IDs (stage 2)."""
    ids_p = resolve(ids_dir)
    manifest = read_manifest(ids_p)
    data_p = resolve(data_dir) if data_dir else Path(manifest["inputs"]["data"])
    _, seqs, _ = data_mod.load_dataset(data_p)
    table = load_id_table(ids_p / "id_table.bin")
    sim = SimilarityTable.load(ids_p / "sim_table.bin")
    over = {"seed": seed, "epochs": epochs}
    over.update(parse_sets(sets))
    cfg = apply_overrides(GeneratorConfig(), config_file, over)
    if "sim_buckets" in over and over["sim_buckets"] not in (None, sim.n_buckets):
        raise click.ClickException(
            f"sim_buckets={over['sim_buckets']} conflicts with the similarity "
            f"table's {sim.n_buckets} buckets")
    cfg = replace(cfg, sim_buckets=sim.n_buckets)
    banks = signals = None
    if cfg.inherit_stage1_embeddings:
        s1_model, _ = load_stage1(Path(manifest["inputs"]["checkpoint"]))
        banks = {s: s1_model.bank_for(s) for s in s1_model.signals}
        signals = s1_model.signals
    model, report = train_generator(seqs, table, sim, cfg,
                                    stage1_banks=banks, signals=signals)
    out_dir = resolve(out)
    save_generator(out_dir, model, cfg, report)
    write_manifest(out_dir, "train-gen", config_dict(cfg), cfg.seed,
                   inputs={"ids": ids_p, "data": data_p})
    last = report.epochs[-1]
    click.echo(f"stage-2 finished: epochs={len(report.epochs)} "
               f"best={report.best_epoch} valid_loss={last['valid_loss']:.4f}")


@main.command()
@click.option("--checkpoint", required=True, help="train-gen output directory.")
@click.option("--ids", "ids_dir", default=None)
@click.option("--data", "data_dir", default=None)
@click.option("--split", type=click.Choice(["valid", "test"]), default="test",
              show_default=True)
@click.option("--k", "ks_text", default="5,10", show_default=True)
@click.option("--beam", type=int, default=None)
@click.option("--constrained/--unconstrained", default=True, show_default=True,
              help="Restrict decoding to catalog IDs.")
@click.option("--out", required=True)
@guarded
def evaluate(checkpoint, ids_dir, data_dir, split, ks_text, beam, constrained,
             out):
    """Rank held-out targets with beam search and report R@k / N@k."""
    gen_p = resolve(checkpoint)
    manifest = read_manifest(gen_p)
    ids_p = resolve(ids_dir) if ids_dir else Path(manifest["inputs"]["ids"])
    data_p = resolve(data_dir) if data_dir else Path(manifest["inputs"]["data"])
    model, gen_cfg = load_generator(gen_p)
    table = load_id_table(ids_p / "id_table.bin")
    sim = SimilarityTable.load(ids_p / "sim_table.bin")
    _, seqs, _ = data_mod.load_dataset(data_p)
    ks = parse_int_list(ks_text)
    ev = EvalConfig(ks=ks, beam_size=beam or max(gen_cfg.beam_size, max(ks)),
                    top_k=max(ks), constrained=constrained)
    rec_rows = []
    metrics, per_user, coverage = evaluate_generator(model, table, sim, seqs,
                                                     ev, split=split,
                                                     rec_rows=rec_rows)
    out_dir = resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"metrics": metrics, "coverage": coverage,
               "n_users": int(len(next(iter(per_user.values())))),
               "split": split, "ks": list(ks), "beam_size": ev.beam_size,
               "constrained": constrained}
    write_json(out_dir / "metrics.json", payload)
    with open(out_dir / "recommendations.jsonl", "w") as f:
        for row in rec_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    write_manifest(out_dir, "evaluate", config_dict(ev), gen_cfg.seed,
                   inputs={"checkpoint": gen_p, "ids": ids_p, "data": data_p})
    for name in sorted(metrics):
        click.echo(f"{name}: {metrics[name]:.4f}")


@main.command()
@click.option("--data", "data_dir", required=True)
@click.option("--variants", default="full,no_mim,no_rec,no_shared,static_sim,inherit_emb",
              show_default=True, help="Comma list; S, E, U aliases accepted.")
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--s1-config", type=click.Path(exists=True), default=None)
@click.option("--gen-config", type=click.Path(exists=True), default=None)
@click.option("--eval-config", type=click.Path(exists=True), default=None)
@click.option("--set-s1", "sets_s1", multiple=True)
@click.option("--set-gen", "sets_gen", multiple=True)
@click.option("--set-eval", "sets_eval", multiple=True)
@click.option("--out", required=True)
@guarded
def ablate(data_dir, variants, seeds, s1_config, gen_config, eval_config,
           sets_s1, sets_gen, sets_eval, out):
    """Train and evaluate tokenizer/generator variants with paired tests."""
    data_p = resolve(data_dir)
    items, seqs, _ = data_mod.load_dataset(data_p)
    s1 = apply_overrides(Stage1Config(), s1_config, parse_sets(sets_s1))
    gen = apply_overrides(GeneratorConfig(), gen_config, parse_sets(sets_gen))
    ev = apply_overrides(EvalConfig(), eval_config, parse_sets(sets_eval))
    names = canon_variants(variants)
    seed_list = parse_int_list(seeds)
    out_dir = resolve(out)
    report = run_ablation_suite(items, seqs, s1, gen, ev, variants=names,
                                seeds=seed_list, out_dir=out_dir)
    write_manifest(out_dir, "ablate",
                   {"variants": list(names), "seeds": list(seed_list),
                    "s1": config_dict(s1), "gen": config_dict(gen),
                    "eval": config_dict(ev)},
                   seed_list[0], inputs={"data": data_p})
    click.echo(report.markdown_table())


@main.command()
@click.option("--ids", "ids_dir", required=True,
              help="assign-ids output directory.")
@click.option("--out", type=click.Path(), default=None,
              help="Optional JSON output path.")
@guarded
def collisions(ids_dir, out):
    """Audit semantic-ID collisions by prefix length."""
    table = load_id_table(resolve(ids_dir) / "id_table.bin")
    audit = collision_audit(table)
    if out:
        write_json(resolve(out), audit)
    for prefix, count in sorted(audit["by_prefix"].items(), key=lambda kv: int(kv[0])):
        click.echo(f"prefix {prefix}: {count} colliding items")
    click.echo(f"full-ID collision rate: "
               f"{100 * audit['full_id_collision_rate']:.3f}% "
               f"of {audit['n_items']} items")


@main.command()
@click.option("--checkpoint", required=True, help="train-gen output directory.")
@click.option("--ids", "ids_dir", default=None)
@click.option("--data", "data_dir", default=None)
@click.option("--beam-sizes", default="50,100", show_default=True)
@click.option("--n-users", type=int, default=100, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--out", required=True)
@guarded
def bench(checkpoint, ids_dir, data_dir, beam_sizes, n_users, repeats, out):
    """Measure beam-search latency per user and record the hardware."""
    gen_p = resolve(checkpoint)
    manifest = read_manifest(gen_p)
    ids_p = resolve(ids_dir) if ids_dir else Path(manifest["inputs"]["ids"])
    data_p = resolve(data_dir) if data_dir else Path(manifest["inputs"]["data"])
    model, gen_cfg = load_generator(gen_p)
    table = load_id_table(ids_p / "id_table.bin")
    sim = SimilarityTable.load(ids_p / "sim_table.bin")
    _, seqs, _ = data_mod.load_dataset(data_p)
    histories = [h for h, _ in generator_pairs(seqs, "test")][:n_users]
    sizes = parse_int_list(beam_sizes)
    result = benchmark_inference(model, table, sim, histories,
                                 beam_sizes=sizes, top_k=gen_cfg.top_k,
                                 repeats=repeats)
    out_dir = resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "bench.json", result)
    write_manifest(out_dir, "bench",
                   {"beam_sizes": list(sizes), "n_users": n_users,
                    "repeats": repeats},
                   gen_cfg.seed,
                   inputs={"checkpoint": gen_p, "ids": ids_p, "data": data_p})
    for size in sizes:
        rec = result["latency"][str(size)]
        click.echo(f"beam {size}: {1000 * rec['mean_latency_s']:.2f} ms/user "
                   f"± {1000 * rec['std_latency_s']:.2f}")


@main.command()
@click.option("--report", "report_file", required=True,
              type=click.Path(exists=True), help="Suite or sweep JSON report.")
@click.option("--out", required=True)
@guarded
def plot(report_file, out):
    """Re-render plots from a saved ablation or sweep report."""
    obj = read_json(report_file)
    out_dir = resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if "curves" in obj:
        plot_sweep_curves(obj, out_dir / f"sweep_{obj['param']}.png")
        click.echo(f"wrote sweep_{obj['param']}.png")
    elif "variants" in obj:
        report = MetricReport(ks=tuple(obj["ks"]), seeds=tuple(obj["seeds"]),
                              baseline=obj["baseline"], variants=obj["variants"],
                              comparisons=obj["comparisons"],
                              coverage=obj["coverage"])
        for k in report.ks:
            for m in (f"R@{k}", f"N@{k}"):
                plot_metric_bars(report, m, out_dir / f"ablation_{m.replace('@', '')}.png")
        click.echo(f"wrote {2 * len(report.ks)} ablation plots")
    else:
        raise click.ClickException(f"{report_file}: unrecognized report format")


if __name__ == "__main__":
    main()
