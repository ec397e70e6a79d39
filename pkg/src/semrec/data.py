"""Dataset construction: log ingestion and synthetic corpus generation.

An interaction log becomes per-user chronological sequences with a
leave-one-out split (last item = test target, second-to-last = validation
target). Item content arrives as text/image embedding files keyed by the raw
item key; missing modalities are mean-imputed and flagged.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .util import load_arrays, read_json, save_arrays, write_json


@dataclass
class DatasetStats:
    n_users: int
    n_items: int
    n_interactions: int
    avg_len: float

    def to_dict(self):
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_interactions": self.n_interactions,
            "avg_len": self.avg_len,
        }


@dataclass
class ItemRecord:
    item_id: int
    text_emb: np.ndarray
    image_emb: np.ndarray
    has_text: bool
    has_image: bool


@dataclass
class InteractionSequence:
    user_id: int
    items: np.ndarray  # chronological item ids, len >= 3

    @property
    def train_items(self) -> np.ndarray:
        return self.items[:-2]

    @property
    def valid_target(self) -> int:
        return int(self.items[-2])

    @property
    def test_target(self) -> int:
        return int(self.items[-1])

    def split_labels(self) -> list:
        return ["train"] * (len(self.items) - 2) + ["valid", "test"]


class ItemTable:
    """Column store for item content; rows indexed by dense item id."""

    def __init__(self, keys, text_emb, image_emb, has_text, has_image):
        self.keys = list(keys)
        self.text_emb = np.asarray(text_emb, dtype=np.float32)
        self.image_emb = np.asarray(image_emb, dtype=np.float32)
        self.has_text = np.asarray(has_text, dtype=bool)
        self.has_image = np.asarray(has_image, dtype=bool)
        if not (len(self.keys) == len(self.text_emb) == len(self.image_emb)):
            raise ValueError("item table column lengths disagree")

    def __len__(self):
        return len(self.keys)

    def __getitem__(self, i: int) -> ItemRecord:
        return ItemRecord(
            item_id=i,
            text_emb=self.text_emb[i],
            image_emb=self.image_emb[i],
            has_text=bool(self.has_text[i]),
            has_image=bool(self.has_image[i]),
        )

    @property
    def text_dim(self):
        return self.text_emb.shape[1]

    @property
    def image_dim(self):
        return self.image_emb.shape[1]


class SequenceSet:
    def __init__(self, sequences):
        self.sequences = sorted(sequences, key=lambda s: s.user_id)
        for s in self.sequences:
            if len(s.items) < 3:
                raise ValueError(f"user {s.user_id}: sequence shorter than 3")

    def __len__(self):
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def stats(self, n_items: int) -> DatasetStats:
        n_inter = int(sum(len(s.items) for s in self.sequences))
        n_users = len(self.sequences)
        return DatasetStats(
            n_users=n_users,
            n_items=n_items,
            n_interactions=n_inter,
            avg_len=round(n_inter / n_users, 4) if n_users else 0.0,
        )


def read_interactions_tsv(path):
    """Rows of (user_key, item_key, timestamp) from a tab-separated log."""
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 3 tab-separated fields")
            rows.append((parts[0], parts[1], float(parts[2])))
    return rows


def read_embedding_file(path):
    """Embedding file: header line `count dim`, then `key v1 ... vdim` lines."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: header must be `count dim`")
        count, dim = int(header[0]), int(header[1])
        table = {}
        for line in f:
            parts = line.split()
            if not parts:
                continue
            key, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise ValueError(f"{path}: key {key}: expected {dim} values, got {len(vals)}")
            table[key] = np.asarray(vals, dtype=np.float32)
    if len(table) != count:
        raise ValueError(f"{path}: header says {count} entries, file has {len(table)}")
    return table, dim


def write_embedding_file(path, table: dict, dim: int):
    with open(path, "w") as f:
        f.write(f"{len(table)} {dim}\n")
        for key in table:
            vals = " ".join(f"{v:.6f}" for v in table[key])
            f.write(f"{key} {vals}\n")


def five_core_filter(rows, min_count: int = 5):
    """Drop users and items with fewer than min_count events, repeating until
    no further row is removed (the filter interacts with itself)."""
    rows = list(rows)
    while True:
        user_counts, item_counts = {}, {}
        for u, i, _ in rows:
            user_counts[u] = user_counts.get(u, 0) + 1
            item_counts[i] = item_counts.get(i, 0) + 1
        kept = [
            r for r in rows
            if user_counts[r[0]] >= min_count and item_counts[r[1]] >= min_count
        ]
        if len(kept) == len(rows):
            return kept
        rows = kept


def ingest(interactions_path, text_emb_path, image_emb_path,
           min_count: int = 5, max_len: int = 20):
    """Build (ItemTable, SequenceSet, DatasetStats) from raw files.

    Events whose item key appears in neither embedding file are rejected with
    a warning count; an item missing one modality gets the dataset mean for
    that modality and has_* = False. Timestamp ties keep file order.
    """
    rows = read_interactions_tsv(interactions_path)
    text_table, text_dim = read_embedding_file(text_emb_path)
    image_table, image_dim = read_embedding_file(image_emb_path)

    known = set(text_table) | set(image_table)
    rejected = sum(1 for r in rows if r[1] not in known)
    if rejected:
        warnings.warn(f"rejected {rejected} events with unknown item keys")
    rows = [r for r in rows if r[1] in known]

    rows = five_core_filter(rows, min_count=min_count)
    if not rows:
        raise ValueError("no interactions remain after core filtering")

    item_keys = sorted({r[1] for r in rows})
    key_to_id = {k: i for i, k in enumerate(item_keys)}

    text_mean = np.mean([text_table[k] for k in item_keys if k in text_table], axis=0) \
        if any(k in text_table for k in item_keys) else np.zeros(text_dim, dtype=np.float32)
    image_mean = np.mean([image_table[k] for k in item_keys if k in image_table], axis=0) \
        if any(k in image_table for k in item_keys) else np.zeros(image_dim, dtype=np.float32)

    text_emb = np.stack([text_table.get(k, text_mean) for k in item_keys])
    image_emb = np.stack([image_table.get(k, image_mean) for k in item_keys])
    has_text = np.array([k in text_table for k in item_keys])
    has_image = np.array([k in image_table for k in item_keys])
    items = ItemTable(item_keys, text_emb, image_emb, has_text, has_image)

    by_user = {}
    for order, (u, i, ts) in enumerate(rows):
        by_user.setdefault(u, []).append((ts, order, key_to_id[i]))
    sequences = []
    for uid, user_key in enumerate(sorted(by_user)):
        events = sorted(by_user[user_key])  # ties resolved by original order
        item_ids = np.array([e[2] for e in events], dtype=np.int64)[-max_len:]
        sequences.append(InteractionSequence(user_id=uid, items=item_ids))
    seqs = SequenceSet(sequences)
    return items, seqs, seqs.stats(len(items))


@dataclass
class SynthInfo:
    clusters: np.ndarray        # item -> cluster
    subgroups: np.ndarray       # item -> subgroup within cluster
    transition: np.ndarray      # cluster-level Markov chain, rows sum to 1
    routing: np.ndarray         # (n_subgroups, 2) successor-choice probs
    successors: np.ndarray      # (n_clusters, 2) successor cluster ids


def synthesize(n_items: int, n_users: int, n_clusters: int, seed: int,
               noise_scale: float = 0.5, nuisance_scale: float = 2.0,
               n_subgroups: int = 2, routing_bias: float = 0.8,
               text_dim: int = 64, image_dim: int = 48,
               min_len: int = 6, max_len: int = 20):
    """Clustered synthetic corpus with a known cluster-level Markov chain.

    Each modality vector is half cluster centroid plus noise and half
    behavior-irrelevant nuisance. Subgroups within a cluster share the
    modality distribution but prefer different successor clusters, so the
    per-item id carries behavior signal that content cannot. The marginal
    cluster transition matrix equals `SynthInfo.transition` because
    subgroups are balanced.
    """
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n_items > 1 and n_clusters <= 1:
        raise ValueError("clustered corpus needs n_clusters > 1")
    if n_clusters > n_items:
        raise ValueError("more clusters than items")
    if not 3 <= min_len <= max_len:
        raise ValueError("need 3 <= min_len <= max_len")
    rng = np.random.default_rng(seed)

    clusters = np.arange(n_items) % n_clusters
    subgroups = (np.arange(n_items) // n_clusters) % n_subgroups

    def modality(dim):
        sig = dim // 2
        centroids = rng.normal(size=(n_clusters, sig))
        embs = np.empty((n_items, dim), dtype=np.float32)
        embs[:, :sig] = centroids[clusters] + noise_scale * rng.normal(size=(n_items, sig))
        embs[:, sig:] = nuisance_scale * noise_scale * rng.normal(size=(n_items, dim - sig))
        return embs

    text_emb = modality(text_dim)
    image_emb = modality(image_dim)
    items = ItemTable(
        [str(i) for i in range(n_items)], text_emb, image_emb,
        np.ones(n_items, bool), np.ones(n_items, bool),
    )

    # two successors per cluster at equal marginal mass; the offset pattern
    # keeps the chain doubly stochastic so cluster visits stay near-uniform
    shift = max(2, n_clusters // 3) if n_clusters > 2 else 1
    succ = np.stack([(np.arange(n_clusters) + 1) % n_clusters,
                     (np.arange(n_clusters) + shift) % n_clusters], axis=1)
    transition = np.zeros((n_clusters, n_clusters))
    for c in range(n_clusters):
        if succ[c, 0] == succ[c, 1]:
            transition[c, succ[c, 0]] = 1.0
        else:
            transition[c, succ[c, 0]] += 0.5
            transition[c, succ[c, 1]] += 0.5
    if n_subgroups >= 2:
        routing = np.array([[routing_bias, 1 - routing_bias],
                            [1 - routing_bias, routing_bias]])
        routing = np.vstack([routing[i % 2] for i in range(n_subgroups)])
    else:
        routing = np.array([[0.5, 0.5]])

    cluster_items = [np.flatnonzero(clusters == c) for c in range(n_clusters)]

    sequences = []
    for uid in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        c = int(rng.integers(n_clusters))
        seq = np.empty(length, dtype=np.int64)
        for t in range(length):
            pool = cluster_items[c]
            item = int(pool[rng.integers(len(pool))])
            seq[t] = item
            branch = rng.random() < routing[subgroups[item], 0]
            c = int(succ[c, 0] if branch else succ[c, 1])
        sequences.append(InteractionSequence(user_id=uid, items=seq))

    info = SynthInfo(clusters=clusters, subgroups=subgroups,
                     transition=transition, routing=routing, successors=succ)
    return items, SequenceSet(sequences), info


def empirical_transition(seqs: SequenceSet, clusters: np.ndarray, n_clusters: int):
    """Row-normalized next-cluster counts; rows with no visits stay zero."""
    counts = np.zeros((n_clusters, n_clusters))
    for s in seqs:
        cs = clusters[s.items]
        for a, b in zip(cs[:-1], cs[1:]):
            counts[a, b] += 1
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return probs, counts


def transition_tv_distance(seqs: SequenceSet, info: SynthInfo) -> float:
    """Total-variation gap between empirical and configured cluster chains,
    averaged over rows weighted by visit counts."""
    n = info.transition.shape[0]
    probs, counts = empirical_transition(seqs, info.clusters, n)
    row_visits = counts.sum(axis=1)
    total = row_visits.sum()
    tv_rows = 0.5 * np.abs(probs - info.transition).sum(axis=1)
    return float((tv_rows * row_visits).sum() / total)


def save_dataset(out_dir, items: ItemTable, seqs: SequenceSet, extra: dict = None):
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_arrays(out_dir / "items.bin", {
        "keys": np.array(items.keys, dtype="U32"),
        "text_emb": items.text_emb,
        "image_emb": items.image_emb,
        "has_text": items.has_text,
        "has_image": items.has_image,
    })
    flat = np.concatenate([s.items for s in seqs]) if len(seqs) else np.zeros(0, np.int64)
    save_arrays(out_dir / "sequences.bin", {
        "user_ids": np.array([s.user_id for s in seqs], dtype=np.int64),
        "lengths": np.array([len(s.items) for s in seqs], dtype=np.int64),
        "flat_items": flat.astype(np.int64),
    })
    stats = seqs.stats(len(items))
    write_json(out_dir / "stats.json", stats.to_dict())
    if extra:
        write_json(out_dir / "synth_info.json", extra)
    return stats


def load_dataset(data_dir):
    from pathlib import Path
    data_dir = Path(data_dir)
    it = load_arrays(data_dir / "items.bin")
    items = ItemTable(list(it["keys"]), it["text_emb"], it["image_emb"],
                      it["has_text"], it["has_image"])
    sq = load_arrays(data_dir / "sequences.bin")
    sequences, offset = [], 0
    for uid, length in zip(sq["user_ids"], sq["lengths"]):
        sequences.append(InteractionSequence(
            user_id=int(uid), items=sq["flat_items"][offset:offset + length]))
        offset += length
    seqs = SequenceSet(sequences)
    stats = DatasetStats(**read_json(data_dir / "stats.json"))
    return items, seqs, stats
