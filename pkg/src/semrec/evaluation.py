"""Ranking metrics, paired significance tests, and the ablation suite.

Metrics are rank-based leave-one-out: each test user contributes one target
item and one ranked candidate list. The ablation suite trains tokenizer and
generator variants per seed end-to-end, evaluates them on the held-out
targets, and emits a JSON report, a Markdown table, and bar plots. Variants
that only change the generator reuse the seed's fully trained tokenizer.
"""

import dataclasses
import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from scipy import stats

from .config import EvalConfig, GeneratorConfig, Stage1Config
from .data import ItemTable
from .generator import (beam_generate, build_similarity_table, generator_pairs,
                        train_generator)
from .quantizer import collision_report
from .stage1 import assign_ids_from_model, train_stage1
from .util import write_json

VARIANTS = ("full", "no_mim", "no_rec", "no_shared", "static_sim",
            "inherit_emb", "no_id", "no_text", "no_image")
STAGE2_ONLY = frozenset({"full", "static_sim", "inherit_emb"})


def _check_k(ranked, k):
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if not ranked:
        raise ValueError("no ranked lists given")
    longest = max(len(r) for r in ranked)
    if k > longest:
        raise ValueError(f"k={k} exceeds the longest ranked list ({longest})")


def per_user_hits(ranked, targets, k) -> np.ndarray:
    """1.0 where the user's target appears in their top-k, else 0.0. Lists
    shorter than k (flagged incomplete generations) count as misses past
    their end."""
    _check_k(ranked, k)
    if len(ranked) != len(targets):
        raise ValueError("one target per ranked list required")
    return np.array([1.0 if t in r[:k] else 0.0
                     for r, t in zip(ranked, targets)])


def per_user_gains(ranked, targets, k) -> np.ndarray:
    """1 / log2(rank + 1) with 1-based rank when the target is in the top-k,
    else 0. One relevant item per user makes the ideal DCG exactly 1."""
    _check_k(ranked, k)
    if len(ranked) != len(targets):
        raise ValueError("one target per ranked list required")
    gains = np.zeros(len(ranked))
    for i, (r, t) in enumerate(zip(ranked, targets)):
        prefix = list(r[:k])
        if t in prefix:
            rank = prefix.index(t) + 1
            gains[i] = 1.0 / np.log2(rank + 1)
    return gains


def recall_at_k(ranked, targets, k) -> float:
    return float(per_user_hits(ranked, targets, k).mean())


def ndcg_at_k(ranked, targets, k) -> float:
    return float(per_user_gains(ranked, targets, k).mean())


def rank_by_score(item_ids, scores):
    """Deterministic ranking: score descending, item id ascending on ties."""
    order = sorted(range(len(item_ids)), key=lambda i: (-scores[i], item_ids[i]))
    return [item_ids[i] for i in order]


def compute_metrics(ranked, targets, ks=(5, 10)) -> dict:
    out = {}
    for k in ks:
        out[f"R@{k}"] = recall_at_k(ranked, targets, k)
        out[f"N@{k}"] = ndcg_at_k(ranked, targets, k)
    check_metric_invariants(out, ks)
    return out


def check_metric_invariants(metrics: dict, ks):
    """Bounds and orderings every report must satisfy."""
    for name, v in metrics.items():
        if not (0.0 - 1e-12 <= v <= 1.0 + 1e-12):
            raise ValueError(f"metric {name}={v} outside [0, 1]")
    for k in ks:
        if metrics[f"N@{k}"] > metrics[f"R@{k}"] + 1e-12:
            raise ValueError(f"N@{k} exceeds R@{k}")
    for small, large in zip(sorted(ks), sorted(ks)[1:]):
        if metrics[f"R@{small}"] > metrics[f"R@{large}"] + 1e-12:
            raise ValueError(f"R@{small} exceeds R@{large}")


def paired_ttest(a, b):
    """Paired t-test of per-user values. Returns (t, p_two_sided,
    p_one_sided) for the alternative mean(a) > mean(b); degenerate identical
    inputs give (0, 1, 1)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired test needs equal-length samples")
    if np.allclose(a, b):
        return 0.0, 1.0, 1.0
    t, p = stats.ttest_rel(a, b)
    t, p = float(t), float(p)
    p_one = p / 2.0 if t > 0 else 1.0 - p / 2.0
    return t, p, p_one


@dataclass
class MetricReport:
    """Suite-level result table: per-variant per-seed metrics plus paired
    comparisons of each variant against the baseline."""
    ks: tuple
    seeds: tuple
    baseline: str
    variants: dict = field(default_factory=dict)  # name -> {"per_seed", "mean", "std"}
    comparisons: dict = field(default_factory=dict)
    coverage: dict = field(default_factory=dict)  # name -> mean complete-list rate

    def validate(self):
        for name, rec in self.variants.items():
            for seed_metrics in rec["per_seed"].values():
                check_metric_invariants(seed_metrics, self.ks)
            check_metric_invariants(rec["mean"], self.ks)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def markdown_table(self) -> str:
        names = [f"R@{k}" for k in self.ks] + [f"N@{k}" for k in self.ks]
        head = "| variant | " + " | ".join(names) + " | p (R@{}) |".format(max(self.ks))
        rule = "|---" * (len(names) + 2) + "|"
        rows = [head, rule]
        for v, rec in self.variants.items():
            cells = [f"{rec['mean'][m]:.4f} ± {rec['std'][m]:.4f}" for m in names]
            if v == self.baseline:
                p = "n/a"
            else:
                comp = self.comparisons.get(v, {})
                p = f"{comp.get('p_one_sided', float('nan')):.4f}"
            rows.append(f"| {v} | " + " | ".join(cells) + f" | {p} |")
        return "\n".join(rows) + "\n"


def stage1_variant_config(variant: str, base: Stage1Config) -> Stage1Config:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if variant in STAGE2_ONLY:
        return base
    flags = {"no_mim": {"no_mim": True},
             "no_rec": {"no_rec": True},
             "no_shared": {"no_shared_codebook": True},
             "no_id": {"drop_id": True},
             "no_text": {"drop_text": True},
             "no_image": {"drop_image": True}}[variant]
    cfg = replace(base, **flags)
    cfg.active_signals()  # conflicting drop flags surface here
    return cfg


def stage2_variant_config(variant: str, base: GeneratorConfig) -> GeneratorConfig:
    if variant == "static_sim":
        return replace(base, sim_mode="ones")
    if variant == "inherit_emb":
        return replace(base, inherit_stage1_embeddings=True)
    return base


def item_tensors(items: ItemTable):
    return (torch.arange(len(items)), torch.from_numpy(items.text_emb),
            torch.from_numpy(items.image_emb))


def tokenizer_artifacts(model, items: ItemTable, sim_buckets: int):
    """Semantic-ID table plus the bucketized similarity table of the
    tokenizer's straight-through item vectors."""
    table = assign_ids_from_model(model, items)
    ids, text, image = item_tensors(items)
    with torch.no_grad():
        v = model.behavior_vectors(ids, text, image).numpy()
    return table, build_similarity_table(v, sim_buckets)


def evaluate_generator(model, table, sim, seqs, eval_cfg: EvalConfig,
                       split: str = "test", rec_rows=None):
    """Leave-one-out ranking metrics on the held-out targets, with per-user
    values for paired tests. Passing a list as rec_rows collects one
    {user_id, item_ids, log_probs} row per user for a JSONL dump."""
    if rec_rows is not None and split == "train":
        raise ValueError("recommendation rows need one sample per user")
    samples = generator_pairs(seqs, split)
    targets = [t for _, t in samples]
    ranked, complete = [], []
    top_k = max(eval_cfg.top_k, max(eval_cfg.ks))
    beam = max(eval_cfg.beam_size, top_k)
    for start in range(0, len(samples), eval_cfg.eval_batch):
        chunk = samples[start:start + eval_cfg.eval_batch]
        results = beam_generate(model, table, sim, [h for h, _ in chunk],
                                beam_size=beam, top_k=top_k,
                                constrained=eval_cfg.constrained)
        for j, r in enumerate(results):
            ranked.append(rank_by_score(r.item_ids, r.log_probs))
            complete.append(r.complete)
            if rec_rows is not None:
                by_id = dict(zip(r.item_ids, r.log_probs))
                rec_rows.append({
                    "user_id": int(seqs[start + j].user_id),
                    "item_ids": [int(i) for i in ranked[-1]],
                    "log_probs": [float(by_id[i]) for i in ranked[-1]]})
    metrics = compute_metrics(ranked, targets, eval_cfg.ks)
    per_user = {f"R@{k}": per_user_hits(ranked, targets, k) for k in eval_cfg.ks}
    per_user.update(
        {f"N@{k}": per_user_gains(ranked, targets, k) for k in eval_cfg.ks})
    return metrics, per_user, float(np.mean(complete))


def train_and_evaluate_variant(items, seqs, variant: str, s1_base: Stage1Config,
                               gen_base: GeneratorConfig, eval_cfg: EvalConfig,
                               seed: int, stage1_cache: dict):
    """One (variant, seed) cell of the suite. Stage-2-only variants share the
    cached full tokenizer of the seed."""
    s1_cfg = replace(stage1_variant_config(variant, s1_base), seed=seed)
    key = ("full" if variant in STAGE2_ONLY else variant, seed)
    if key not in stage1_cache:
        stage1_cache[key] = train_stage1(items, seqs, s1_cfg,
                                         collect_collisions=False)
    s1_model, _ = stage1_cache[key]
    table, sim = tokenizer_artifacts(s1_model, items, gen_base.sim_buckets)
    gen_cfg = replace(stage2_variant_config(variant, gen_base), seed=seed)
    banks = {s: s1_model.bank_for(s) for s in s1_model.signals}
    gen_model, gen_report = train_generator(
        seqs, table, sim, gen_cfg,
        stage1_banks=banks if gen_cfg.inherit_stage1_embeddings else None,
        signals=s1_model.signals if gen_cfg.inherit_stage1_embeddings else None)
    metrics, per_user, coverage = evaluate_generator(gen_model, table, sim,
                                                     seqs, eval_cfg)
    return metrics, per_user, coverage, gen_report


def run_ablation_suite(items, seqs, s1_base: Stage1Config,
                       gen_base: GeneratorConfig, eval_cfg: EvalConfig,
                       variants=("full", "no_mim", "no_rec", "no_shared",
                                 "static_sim", "inherit_emb"),
                       seeds=(0, 1, 2), out_dir=None,
                       baseline: str = "full") -> MetricReport:
    """Train and evaluate every (variant, seed), pair each variant against the
    baseline per (seed, user), and emit report artifacts."""
    for v in variants:
        stage1_variant_config(v, s1_base)  # validate names and flag conflicts
    metric_names = [f"R@{k}" for k in eval_cfg.ks] + \
                   [f"N@{k}" for k in eval_cfg.ks]
    stage1_cache = {}
    per_seed = {v: {} for v in variants}
    per_user_all = {v: {m: [] for m in metric_names} for v in variants}
    coverage = {v: [] for v in variants}

    for seed, variant in itertools.product(seeds, variants):
        metrics, per_user, cov, _ = train_and_evaluate_variant(
            items, seqs, variant, s1_base, gen_base, eval_cfg, seed,
            stage1_cache)
        per_seed[variant][seed] = metrics
        coverage[variant].append(cov)
        for m in metric_names:
            per_user_all[variant][m].append(per_user[m])

    report = MetricReport(ks=tuple(eval_cfg.ks), seeds=tuple(seeds),
                          baseline=baseline)
    for v in variants:
        vals = {m: [per_seed[v][s][m] for s in seeds] for m in metric_names}
        report.variants[v] = {
            "per_seed": {str(s): per_seed[v][s] for s in seeds},
            "mean": {m: float(np.mean(vals[m])) for m in metric_names},
            "std": {m: float(np.std(vals[m])) for m in metric_names},
        }
        report.coverage[v] = float(np.mean(coverage[v]))
    if baseline in report.variants:
        base_user = {m: np.concatenate(per_user_all[baseline][m])
                     for m in metric_names}
        for v in variants:
            if v == baseline:
                continue
            m = f"R@{max(eval_cfg.ks)}"
            t, p2, p1 = paired_ttest(base_user[m],
                                     np.concatenate(per_user_all[v][m]))
            report.comparisons[v] = {
                "metric": m, "t": t, "p_two_sided": p2, "p_one_sided": p1,
                "mean_gap": float(report.variants[baseline]["mean"][m]
                                  - report.variants[v]["mean"][m]),
            }
    report.validate()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "ablation_report.json", report.to_dict())
        (out_dir / "ablation_table.md").write_text(report.markdown_table())
        plot_dir = out_dir / "reports"
        for m in metric_names:
            plot_metric_bars(report, m,
                             plot_dir / f"ablation_{m.replace('@', '')}.png")
    return report


def plot_metric_bars(report: MetricReport, metric: str, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    names = list(report.variants)
    means = [report.variants[v]["mean"][metric] for v in names]
    stds = [report.variants[v]["std"][metric] for v in names]
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="#4878cf")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


SWEEP_PARAMS = ("levels", "codes", "dim", "sim_buckets")


def run_hyperparameter_sweep(items, seqs, s1_base: Stage1Config,
                             gen_base: GeneratorConfig, eval_cfg: EvalConfig,
                             param: str, values, seeds=(0,), out_dir=None):
    """Full-variant metric curves along one hyperparameter axis. Tokenizer
    parameters retrain stage 1 per value; the similarity resolution reuses
    each seed's tokenizer."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; "
                         f"choose from {SWEEP_PARAMS}")
    metric_names = [f"R@{k}" for k in eval_cfg.ks] + \
                   [f"N@{k}" for k in eval_cfg.ks]
    curves = {m: [] for m in metric_names}
    stage1_cache = {}
    for value in values:
        if param == "sim_buckets":
            s1_cfg, gen_cfg = s1_base, replace(gen_base, sim_buckets=int(value))
        else:
            s1_cfg = replace(s1_base, **{param: int(value)})
            gen_cfg = gen_base
            if param == "dim" and gen_base.inherit_stage1_embeddings:
                raise ValueError("dim sweep conflicts with inherited embeddings")
            stage1_cache = {}
        seed_metrics = []
        for seed in seeds:
            key = (param, seed) if param == "sim_buckets" else (value, seed)
            if key not in stage1_cache:
                stage1_cache[key] = train_stage1(
                    items, seqs, replace(s1_cfg, seed=seed),
                    collect_collisions=False)
            model, _ = stage1_cache[key]
            table, sim = tokenizer_artifacts(model, items, gen_cfg.sim_buckets)
            gen_model, _ = train_generator(seqs, table, sim,
                                           replace(gen_cfg, seed=seed))
            metrics, _, _ = evaluate_generator(gen_model, table, sim, seqs,
                                               eval_cfg)
            seed_metrics.append(metrics)
        for m in metric_names:
            curves[m].append(float(np.mean([sm[m] for sm in seed_metrics])))
    result = {"param": param, "values": [int(v) for v in values],
              "curves": curves, "seeds": list(seeds)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / f"sweep_{param}.json", result)
        plot_sweep_curves(result, out_dir / f"sweep_{param}.png")
    return result


def plot_sweep_curves(result: dict, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for m, ys in result["curves"].items():
        ax.plot(result["values"], ys, marker="o", label=m)
    ax.set_xlabel(result["param"])
    ax.set_ylabel("metric")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def collision_audit(table) -> dict:
    """Collision counts by prefix length plus the full-ID collision rate."""
    report = collision_report(table.codes)
    n = table.n_items
    full = report[table.levels]
    return {"n_items": n, "by_prefix": {str(k): v for k, v in report.items()},
            "full_id_colliding_items": full,
            "full_id_collision_rate": full / n}
