"""Dataclass configs for every pipeline stage.

Precedence when assembling a config: explicit CLI flag > config file entry >
dataclass default. `apply_overrides` implements the merge; the CLI passes only
flags the user actually set.
"""

import dataclasses
from dataclasses import dataclass, field

from .util import read_json


@dataclass
class SynthConfig:
    n_items: int = 2000
    n_users: int = 5000
    n_clusters: int = 50
    seed: int = 7
    noise_scale: float = 0.5
    # nuisance dims get this multiple of noise_scale as std; they carry no
    # behavior signal and exist so reconstruction alone overfits to them
    nuisance_scale: float = 2.0
    n_subgroups: int = 2
    # probability that a subgroup routes to its preferred successor cluster
    routing_bias: float = 0.8
    text_dim: int = 64
    image_dim: int = 48
    min_len: int = 6
    max_len: int = 20


@dataclass
class IngestConfig:
    min_count: int = 5
    max_len: int = 20


@dataclass
class Stage1Config:
    levels: int = 3            # residual quantization depth L
    codes: int = 256           # codebook entries per level N
    dim: int = 128             # code / signal vector width D
    beta: float = 1.0          # weight of the sequence contrastive loss
    gamma: float = 1.0         # weight of the mutual-information penalty
    tau: float = 0.1           # contrastive temperature
    alpha: float = 0.25        # commitment weight inside the RQ loss
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    max_len: int = 20
    seq_layers: int = 2
    seq_heads: int = 2
    dropout: float = 0.1
    kmeans_init: bool = True
    kmeans_iters: int = 25
    # ablation switches
    no_mim: bool = False
    no_rec: bool = False
    no_shared_codebook: bool = False
    drop_id: bool = False
    drop_text: bool = False
    drop_image: bool = False
    # keep the modality-specific encoders when no_mim is set, so loss
    # trajectories can be compared against a gamma=0 run at fixed architecture
    keep_specific_encoders: bool = False
    # MI penalty gradient also flows into the modality-specific encoders
    mim_grad_to_specific: bool = True
    # block codebook updates coming through the contrastive item vectors
    freeze_codebook_in_contrastive: bool = False

    def active_signals(self) -> tuple:
        signals = []
        if not (self.drop_id or self.no_rec):
            signals.append("id")
        if not self.drop_text:
            signals.append("text")
        if not self.drop_image:
            signals.append("image")
        if len(signals) < 2:
            raise ValueError("at least two signals must remain active")
        return tuple(signals)


@dataclass
class GeneratorConfig:
    d_model: int = 192
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    sim_buckets: int = 100     # K; table has K+1 embedding rows
    sim_in_encoder: bool = True
    sim_mode: str = "learned"  # "learned" or "ones" (frozen identity table)
    inherit_stage1_embeddings: bool = False
    batch_size: int = 256
    lr: float = 1e-3
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    max_hist: int = 20
    beam_size: int = 20
    top_k: int = 10
    constrained: bool = False


@dataclass
class EvalConfig:
    ks: tuple = (5, 10)
    beam_size: int = 20
    top_k: int = 10
    seed: int = 0
    eval_batch: int = 128
    constrained: bool = True  # catalog-constrained decoding for full top-k lists


def apply_overrides(cfg, file_path=None, overrides=None):
    """Return a copy of cfg updated from a JSON config file, then from
    explicit overrides. Unknown keys are rejected."""
    values = {}
    if file_path is not None:
        values.update(read_json(file_path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cfg)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    coerced = {}
    for f in dataclasses.fields(cfg):
        if f.name not in values:
            continue
        v = values[f.name]
        if f.type == "tuple" and isinstance(v, (list, tuple)):
            v = tuple(v)
        coerced[f.name] = v
    return dataclasses.replace(cfg, **coerced)


def config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
