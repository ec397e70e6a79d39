"""Curated configuration presets.

Three scales trade fidelity for runtime: `micro` exercises every code path in
seconds (CI smoke), `desk` reproduces the directional ablation findings on a
single CPU core in tens of minutes, and `corpus` is the 2,000-item synthetic
catalog used for collision auditing and training-sanity checks.
"""

from .config import EvalConfig, GeneratorConfig, Stage1Config, SynthConfig


def micro_scale():
    synth = SynthConfig(n_items=40, n_users=30, n_clusters=4, seed=0,
                        text_dim=12, image_dim=10, min_len=5, max_len=12)
    s1 = Stage1Config(levels=2, codes=8, dim=8, batch_size=32, epochs=2,
                      max_len=12, seq_heads=2, dropout=0.0, kmeans_iters=5)
    gen = GeneratorConfig(d_model=24, enc_layers=1, dec_layers=1, heads=2,
                          ffn_mult=2, dropout=0.0, sim_buckets=10, max_hist=8,
                          batch_size=16, epochs=2, beam_size=16, top_k=5)
    ev = EvalConfig(ks=(2, 5), beam_size=16, top_k=5, eval_batch=16)
    return synth, s1, gen, ev


def desk_scale():
    """Ablation-suite scale: large enough for stable orderings, small enough
    for a single core. Stage-1 dim times the signal count equals the
    generator width so the inherit-embeddings variant is runnable.

    The heavy nuisance half (4x the cluster noise) makes reconstruction
    pressure genuinely harmful to undisentangled codes, and the softened
    mutual-information weight keeps the bound from distorting the behavior
    channel at this reduced scale."""
    synth = SynthConfig(n_items=400, n_users=1500, n_clusters=20, seed=7,
                        nuisance_scale=4.0, text_dim=32, image_dim=24,
                        min_len=6, max_len=20)
    s1 = Stage1Config(levels=3, codes=32, dim=32, batch_size=256, epochs=12,
                      patience=4, kmeans_iters=15, max_len=20, gamma=0.25)
    gen = GeneratorConfig(d_model=96, enc_layers=1, dec_layers=1, heads=4,
                          ffn_mult=2, dropout=0.1, sim_buckets=100,
                          max_hist=20, batch_size=256, epochs=10, patience=3,
                          beam_size=20, top_k=10)
    ev = EvalConfig(ks=(5, 10), beam_size=20, top_k=10, eval_batch=256)
    return synth, s1, gen, ev


def corpus_scale():
    """Collision-audit scale: the 2,000-item catalog with near-default
    tokenizer settings (reduced epochs and code dim for CPU budgets)."""
    synth = SynthConfig(n_items=2000, n_users=3000, n_clusters=50, seed=7)
    s1 = Stage1Config(levels=3, codes=256, dim=64, batch_size=256, epochs=8,
                      patience=10, kmeans_iters=15, max_len=20)
    return synth, s1
