"""Stage-2 generative recommender over semantic IDs.

The encoder reads the history's ID tokens (one composite position per
quantization level, three sub-token embeddings concatenated) with
similarity-modulated self-attention: each key's value contribution is scaled
elementwise by an embedding of the bucketized cosine similarity between the
query's item and the key's item. The decoder autoregressively emits the
target's levels, each through parallel per-signal classification heads; beam
search expands per-head top-B candidates exactly and filters against the
catalog's valid IDs.
"""

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import GeneratorConfig, config_dict
from .layers import DecoderBlock, EncoderBlock, build_blocks, causal_mask
from .quantizer import SemanticIdTable
from .util import load_arrays, np_generator, read_json, save_arrays, seed_component, \
    state_dict_hash, write_json


def bucketize_similarity(d, buckets: int):
    """Map cosine values in [-1, 1] to integer buckets 0..K via
    Round((d + 1) / 2 * K) with round-half-up."""
    x = (np.asarray(d, dtype=np.float64) + 1.0) / 2.0 * buckets
    return np.clip(np.floor(x + 0.5).astype(np.int64), 0, buckets)


@dataclass
class SimilarityTable:
    buckets: np.ndarray  # (n_items, n_items) int16
    n_buckets: int       # K; bucket values lie in 0..K

    def lookup(self, i: int, j: int) -> int:
        return int(self.buckets[i, j])

    def save(self, path):
        save_arrays(path, {"buckets": self.buckets,
                           "n_buckets": np.array([self.n_buckets])})

    @classmethod
    def load(cls, path):
        a = load_arrays(path)
        return cls(buckets=a["buckets"], n_buckets=int(a["n_buckets"][0]))


def build_similarity_table(v: np.ndarray, n_buckets: int = 100) -> SimilarityTable:
    """Bucketized pairwise cosine similarities of item behavior vectors."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if (norms == 0).any():
        raise ValueError("zero-norm item vector in similarity table input")
    unit = v / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    return SimilarityTable(
        buckets=bucketize_similarity(cos, n_buckets).astype(np.int16),
        n_buckets=n_buckets)


class SemanticSeq2Seq(nn.Module):
    """Encoder-decoder over semantic-ID token sequences.

    Sub-token embedding tables are fresh parameters, one per (level, signal),
    each d_model / n_signals wide; optionally initialized from a stage-1
    codebook bank (and still learnable). The similarity embedding holds K+1
    vectors initialized near all-ones so training starts at standard
    attention.
    """

    def __init__(self, cfg: GeneratorConfig, levels: int, codes: int,
                 n_signals: int = 3):
        super().__init__()
        if cfg.d_model % n_signals:
            raise ValueError(f"d_model {cfg.d_model} not divisible by "
                             f"{n_signals} signals")
        self.cfg = cfg
        self.levels, self.codes, self.n_signals = levels, codes, n_signals
        d, sub = cfg.d_model, cfg.d_model // n_signals

        seed_component(cfg.seed, "gen_embeddings")
        self.sub_emb = nn.ModuleList([
            nn.ModuleList([nn.Embedding(codes, sub) for _ in range(n_signals)])
            for _ in range(levels)])
        for table in self.sub_emb:
            for e in table:
                nn.init.uniform_(e.weight, 0.0, 0.01)
        max_tokens = cfg.max_hist * levels
        self.enc_pos = nn.Parameter(torch.rand(max_tokens, d) * 0.01)
        self.level_emb = nn.Parameter(torch.rand(levels, d) * 0.01)
        self.dec_pos = nn.Parameter(torch.rand(levels, d) * 0.01)
        self.bos = nn.Parameter(torch.rand(d) * 0.01)

        seed_component(cfg.seed, "gen_sim")
        if cfg.sim_mode == "ones":
            self.sim_emb = nn.Embedding(cfg.sim_buckets + 1, d)
            with torch.no_grad():
                self.sim_emb.weight.fill_(1.0)
            self.sim_emb.weight.requires_grad_(False)
        else:
            self.sim_emb = nn.Embedding(cfg.sim_buckets + 1, d)
            with torch.no_grad():
                self.sim_emb.weight.copy_(
                    1.0 + 0.01 * torch.randn(cfg.sim_buckets + 1, d))

        self.enc_blocks = build_blocks(cfg.enc_layers, EncoderBlock, d, cfg.heads,
                                       cfg.ffn_mult, cfg.dropout, cfg.seed, "gen_enc")
        self.dec_blocks = build_blocks(cfg.dec_layers, DecoderBlock, d, cfg.heads,
                                       cfg.ffn_mult, cfg.dropout, cfg.seed, "gen_dec")
        seed_component(cfg.seed, "gen_heads")
        self.heads = nn.ModuleList(
            [nn.Linear(d, codes) for _ in range(n_signals)])

    def inherit_codebooks(self, banks: dict, signals: tuple):
        """Copy stage-1 codebook entries into the sub-token tables (variant E).
        Requires the stage-1 code dim to equal d_model / n_signals."""
        sub = self.cfg.d_model // self.n_signals
        with torch.no_grad():
            for l in range(self.levels):
                for s_idx, s in enumerate(signals):
                    entries = banks[s].level_entries(l).detach()
                    if entries.shape != (self.codes, sub):
                        raise ValueError(
                            f"stage-1 entries {tuple(entries.shape)} cannot seed "
                            f"stage-2 tables of shape {(self.codes, sub)}")
                    self.sub_emb[l][s_idx].weight.copy_(entries)

    def token_embeddings(self, codes):
        """codes: (..., levels, signals) -> (..., levels, d_model)."""
        parts = [torch.cat([self.sub_emb[l][s](codes[..., l, s])
                            for s in range(self.n_signals)], dim=-1)
                 for l in range(self.levels)]
        return torch.stack(parts, dim=-2)

    def encode(self, hist_codes, hist_items, lengths, sim_table: SimilarityTable):
        """hist_codes: (B, T, L, S); hist_items: (B, T) item ids for similarity
        lookups; lengths: (B,). Returns (memory, token_valid)."""
        b, t, lv, s = hist_codes.shape
        tok = self.token_embeddings(hist_codes)              # (B, T, L, d)
        tok = tok + self.level_emb.view(1, 1, lv, -1)
        x = tok.reshape(b, t * lv, -1)
        if t * lv > self.enc_pos.shape[0]:
            raise ValueError(f"history of {t} items exceeds max_hist "
                             f"{self.cfg.max_hist}")
        x = x + self.enc_pos[:t * lv]

        item_valid = (torch.arange(t, device=x.device).unsqueeze(0)
                      < lengths.unsqueeze(1))                # (B, T)
        token_valid = item_valid.repeat_interleave(lv, dim=1)
        mask = token_valid.unsqueeze(1).expand(b, t * lv, t * lv)

        pair_mod = None
        if self.cfg.sim_in_encoder:
            if int(hist_items.max()) >= sim_table.buckets.shape[0]:
                raise ValueError("history item id missing from similarity table")
            grid = torch.from_numpy(sim_table.buckets.astype(np.int64))
            pair_buckets = grid[hist_items.unsqueeze(2), hist_items.unsqueeze(1)]
            pair_buckets = pair_buckets.repeat_interleave(lv, dim=1) \
                                       .repeat_interleave(lv, dim=2)
            pair_mod = self.sim_emb(pair_buckets)            # (B, TL, TL, d)
        for block in self.enc_blocks:
            x = block(x, mask=mask, pair_mod=pair_mod)
        return x, token_valid

    def decode(self, memory, token_valid, target_codes_in):
        """target_codes_in: (B, steps-1, S) previously generated levels (empty
        tensor for the first step). Returns decoder states (B, steps, d)."""
        b = memory.shape[0]
        steps = target_codes_in.shape[1] + 1
        xs = [self.bos.expand(b, 1, -1)]
        for l in range(steps - 1):
            emb = torch.cat([self.sub_emb[l][s](target_codes_in[:, l, s])
                             for s in range(self.n_signals)], dim=-1)
            xs.append(emb.unsqueeze(1))
        x = torch.cat(xs, dim=1) + self.dec_pos[:steps]
        self_mask = causal_mask(steps, device=x.device)
        mem_mask = token_valid.unsqueeze(1).expand(b, steps, token_valid.shape[1])
        for block in self.dec_blocks:
            x = block(x, memory, self_mask=self_mask, memory_mask=mem_mask)
        return x

    def head_logits(self, states):
        """(B, steps, d) -> (B, steps, S, N)."""
        return torch.stack([h(states) for h in self.heads], dim=2)

    def forward_teacher(self, hist_codes, hist_items, lengths, target_codes,
                        sim_table):
        """Teacher-forced logits (B, L, S, N) for full target code grids."""
        memory, token_valid = self.encode(hist_codes, hist_items, lengths, sim_table)
        states = self.decode(memory, token_valid, target_codes[:, :-1])
        return self.head_logits(states)


def generation_loss(logits, target_codes):
    """Summed cross entropy over all level/signal predictions, batch mean.
    With uniform heads this starts near levels * signals * ln(codes)."""
    b, lv, s, n = logits.shape
    ce = nn.functional.cross_entropy(
        logits.reshape(b * lv * s, n), target_codes.reshape(b * lv * s),
        reduction="none")
    return ce.view(b, lv * s).sum(-1).mean()


def teacher_forced_accuracy(logits, target_codes) -> float:
    return float((logits.argmax(-1) == target_codes).float().mean())


def history_batch(table: SemanticIdTable, histories, max_hist: int):
    """histories: list of 1-D item-id arrays -> padded (codes, items, lengths)."""
    b = len(histories)
    lengths = np.array([min(len(h), max_hist) for h in histories], dtype=np.int64)
    if (lengths == 0).any():
        raise ValueError("empty history")
    t = int(lengths.max())
    hist_items = np.zeros((b, t), dtype=np.int64)
    for r, h in enumerate(histories):
        h = np.asarray(h)[-max_hist:]
        hist_items[r, :len(h)] = h
    hist_codes = table.codes[hist_items]  # (B, T, L, S)
    return (torch.from_numpy(hist_codes), torch.from_numpy(hist_items),
            torch.from_numpy(lengths))


@dataclass
class GenerationResult:
    item_ids: list            # ranked valid items, best first
    log_probs: list           # aligned scores, non-increasing
    codes: np.ndarray         # (n_beams, L, S) final beam code grids
    beam_scores: np.ndarray   # (n_beams,) sorted descending
    complete: bool            # False when fewer than top_k valid items emerged
    n_invalid_beams: int


def _merge_heads(head_logps, beam_width):
    """Exact top-candidate enumeration for summed per-head scores.

    head_logps: (B, W, S, N) float64. Returns (scores, code triples) of shape
    (B, W, C) and (B, W, C, S) with C = min(beam_width, N^S) candidates per
    beam, each guaranteed to contain the true top-C by successive exact merges
    (any top-C sum must use a top-C coordinate in every head).
    """
    b, w, s, n = head_logps.shape
    k = min(beam_width, n)
    scores, idx = torch.topk(head_logps[:, :, 0], k, dim=-1)   # (B, W, k)
    combo = idx.unsqueeze(-1)                                  # (B, W, k, 1)
    for h in range(1, s):
        sh, ih = torch.topk(head_logps[:, :, h], k, dim=-1)
        sums = scores.unsqueeze(-1) + sh.unsqueeze(-2)         # (B, W, C, k)
        flat = sums.reshape(b, w, -1)
        keep = min(beam_width, flat.shape[-1])
        scores, pick = torch.topk(flat, keep, dim=-1)
        left = pick // k
        right = pick % k
        combo = torch.cat([
            torch.gather(combo, 2, left.unsqueeze(-1).expand(-1, -1, -1, combo.shape[-1])),
            torch.gather(ih, 2, right).unsqueeze(-1)], dim=-1)
    return scores, combo


def beam_generate(model: SemanticSeq2Seq, table: SemanticIdTable,
                  sim_table: SimilarityTable, histories, beam_size: int,
                  top_k: int, constrained: bool = False):
    """Beam search over ID sequences for a batch of histories.

    Candidates per step come from exact per-head top-B expansion with summed
    head log-probs. By default the search is unconstrained and final beams are
    filtered against the valid-ID map; with constrained=True only code triples
    that extend some catalog prefix are expanded. Final ordering breaks score
    ties lexicographically on the code grid.
    """
    model.eval()
    if top_k > beam_size:
        raise ValueError("top_k cannot exceed beam_size")
    hist_codes, hist_items, lengths = history_batch(table, histories,
                                                    model.cfg.max_hist)
    b = hist_codes.shape[0]
    lv, s = model.levels, model.n_signals
    trie = _prefix_trie(table) if constrained else None

    with torch.no_grad():
        memory, token_valid = model.encode(hist_codes, hist_items, lengths, sim_table)
        beams = torch.zeros(b, 1, 0, s, dtype=torch.int64)
        scores = torch.zeros(b, 1, dtype=torch.float64)
        for step in range(lv):
            w = beams.shape[1]
            mem_rep = memory.repeat_interleave(w, dim=0)
            valid_rep = token_valid.repeat_interleave(w, dim=0)
            states = model.decode(mem_rep, valid_rep, beams.reshape(b * w, step, s))
            logits = model.head_logits(states)[:, -1]          # (B*W, S, N)
            logps = torch.log_softmax(logits.double(), dim=-1).view(b, w, s, -1)
            if constrained:
                cand_scores, cand_codes = _constrained_expand(
                    logps, beams, trie, beam_size)
            else:
                cand_scores, cand_codes = _merge_heads(logps, beam_size)
            total = scores.unsqueeze(-1) + cand_scores         # (B, W, C)
            flat = total.reshape(b, -1)
            keep = min(beam_size, flat.shape[-1])
            # push -inf (dead constrained branches) to the bottom
            top_scores, pick = torch.topk(flat, keep, dim=-1)
            w_idx = pick // cand_scores.shape[-1]
            prev = torch.gather(
                beams, 1, w_idx.view(b, keep, 1, 1).expand(-1, -1, step, s))
            new = torch.gather(
                cand_codes.reshape(b, -1, s), 1,
                pick.unsqueeze(-1).expand(-1, -1, s))
            beams = torch.cat([prev, new.unsqueeze(2)], dim=2)
            scores = top_scores

    resolution = table.resolution_map()
    results = []
    for i in range(b):
        order = _final_order(scores[i].numpy(), beams[i].numpy())
        items, logs = [], []
        n_invalid = 0
        for rank in order:
            key = tuple(beams[i, rank].reshape(-1).tolist())
            score = float(scores[i, rank])
            if not np.isfinite(score):
                n_invalid += 1
                continue
            members = resolution.get(key)
            if members is None:
                n_invalid += 1
                continue
            for item in members:
                if len(items) < top_k:
                    items.append(int(item))
                    logs.append(score)
        results.append(GenerationResult(
            item_ids=items, log_probs=logs,
            codes=beams[i].numpy()[order],
            beam_scores=scores[i].numpy()[order],
            complete=len(items) >= top_k,
            n_invalid_beams=n_invalid))
    return results


def _final_order(scores, codes):
    """Indices sorted by score desc, then code grid ascending lexicographic."""
    flat = codes.reshape(codes.shape[0], -1)
    keys = [flat[:, k] for k in range(flat.shape[1] - 1, -1, -1)]
    keys.append(-scores)
    return np.lexsort(keys)


def _prefix_trie(table: SemanticIdTable):
    """prefix tuple (flattened levels) -> sorted unique next-level triples."""
    trie = {}
    n, lv, s = table.codes.shape
    for i in range(n):
        for l in range(lv):
            prefix = tuple(table.codes[i, :l].reshape(-1).tolist())
            nxt = tuple(table.codes[i, l].tolist())
            trie.setdefault(prefix, set()).add(nxt)
    return {k: sorted(v) for k, v in trie.items()}


def _constrained_expand(logps, beams, trie, beam_size):
    """Score only code triples that extend a catalog prefix; dead prefixes
    yield a single -inf candidate so they fall out at selection."""
    b, w, s, n = logps.shape
    step = beams.shape[2]
    cand_scores = torch.full((b, w, beam_size), float("-inf"), dtype=torch.float64)
    cand_codes = torch.zeros(b, w, beam_size, s, dtype=torch.int64)
    for i in range(b):
        for j in range(w):
            prefix = tuple(beams[i, j].reshape(-1).tolist())
            allowed = trie.get(prefix, [])
            if not allowed:
                continue
            arr = torch.tensor(allowed, dtype=torch.int64)     # (A, S)
            sums = sum(logps[i, j, h][arr[:, h]] for h in range(s))
            keep = min(beam_size, len(allowed))
            top, pick = torch.topk(sums, keep)
            cand_scores[i, j, :keep] = top
            cand_codes[i, j, :keep] = arr[pick]
    return cand_scores, cand_codes


@dataclass
class GenTrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    state_hash: str = ""

    def to_dict(self):
        return dataclasses.asdict(self)


def generator_pairs(seqs, kind: str = "train"):
    """(history array, target) samples; train targets are positions
    1..len-3, validation the second-to-last, test the last."""
    samples = []
    for s in seqs:
        items = s.items
        if kind == "train":
            for t in range(1, len(items) - 2):
                samples.append((items[:t], int(items[t])))
        elif kind == "valid":
            samples.append((items[:-2], int(items[-2])))
        elif kind == "test":
            samples.append((items[:-1], int(items[-1])))
        else:
            raise ValueError(f"unknown split {kind}")
    return samples


def train_generator(seqs, table: SemanticIdTable, sim_table: SimilarityTable,
                    cfg: GeneratorConfig, stage1_banks=None, signals=None):
    """Train the seq2seq model on next-item ID prediction with teacher forcing;
    early stop on validation loss. Returns (model, report)."""
    model = SemanticSeq2Seq(cfg, table.levels, cfg_codes(table),
                            len(table.signals))
    if cfg.inherit_stage1_embeddings:
        if stage1_banks is None or signals is None:
            raise ValueError("inheriting stage-1 embeddings requires banks")
        model.inherit_codebooks(stage1_banks, signals)

    train_samples = generator_pairs(seqs, "train")
    valid_samples = generator_pairs(seqs, "valid")
    rng = np_generator(cfg.seed, "gen_batches")
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                           lr=cfg.lr)
    report = GenTrainReport(config=config_dict(cfg))
    seed_component(cfg.seed, "gen_train")
    best_loss, best_state, bad = np.inf, None, 0

    def run_batch(samples, train: bool):
        hists = [h for h, _ in samples]
        targets = np.array([t for _, t in samples], dtype=np.int64)
        hc, hi, ln = history_batch(table, hists, cfg.max_hist)
        tc = torch.from_numpy(table.codes[targets])
        logits = model.forward_teacher(hc, hi, ln, tc, sim_table)
        loss = generation_loss(logits, tc)
        if train:
            opt.zero_grad()
            loss.backward()
            opt.step()
        return float(loss.detach())

    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_samples))
        total, steps = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[k] for k in order[start:start + cfg.batch_size]]
            total += run_batch(batch, train=True)
            steps += 1
        model.eval()
        with torch.no_grad():
            vtotal, vsteps = 0.0, 0
            for start in range(0, len(valid_samples), cfg.batch_size):
                batch = valid_samples[start:start + cfg.batch_size]
                vtotal += run_batch(batch, train=False)
                vsteps += 1
        entry = {"epoch": epoch, "train_loss": total / max(steps, 1),
                 "valid_loss": vtotal / max(vsteps, 1)}
        report.epochs.append(entry)
        if entry["valid_loss"] < best_loss:
            best_loss, bad = entry["valid_loss"], 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            report.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                report.stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    report.state_hash = state_dict_hash(model.state_dict())
    return model, report


def cfg_codes(table: SemanticIdTable) -> int:
    """Stage-2 vocabulary per head: the stage-1 codebook size when the table
    records it, else a tight bound from the assigned codes."""
    return table.n_codes if table.n_codes > 0 else int(table.codes.max()) + 1


def save_generator(out_dir, model: SemanticSeq2Seq, cfg: GeneratorConfig,
                   report: GenTrainReport):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_arrays(out_dir / "generator.ckpt", state)
    write_json(out_dir / "generator_meta.json", {
        "config": config_dict(cfg),
        "levels": model.levels,
        "codes": model.codes,
        "n_signals": model.n_signals,
        "state_hash": state_dict_hash(state),
        "shapes": {k: list(v.shape) for k, v in sorted(state.items())},
    })
    write_json(out_dir / "gen_train_report.json", report.to_dict())


def load_generator(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    meta = read_json(ckpt_dir / "generator_meta.json")
    cfg = GeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in meta["config"].items()})
    model = SemanticSeq2Seq(cfg, meta["levels"], meta["codes"], meta["n_signals"])
    state = load_arrays(ckpt_dir / "generator.ckpt")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    model.eval()
    return model, cfg


def benchmark_inference(model, table, sim_table, histories, beam_sizes=(50, 100),
                        top_k: int = 10, repeats: int = 3):
    """Mean per-sample beam-search latency after a warm-up pass."""
    import platform
    results = {}
    beam_generate(model, table, sim_table, histories[:2], max(beam_sizes),
                  min(top_k, max(beam_sizes)), constrained=False)  # warm-up
    for beam in beam_sizes:
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            beam_generate(model, table, sim_table, histories, beam,
                          min(top_k, beam), constrained=False)
            times.append((time.perf_counter() - start) / len(histories))
        results[str(beam)] = {
            "mean_latency_s": float(np.mean(times)),
            "std_latency_s": float(np.std(times)),
            "n_samples": len(histories),
            "repeats": repeats,
        }
    return {
        "beam_sizes": list(beam_sizes),
        "top_k": top_k,
        "latency": results,
        "hardware": {
            "platform": platform.platform(),
            "processor": platform.processor() or "unknown",
            "torch_version": torch.__version__,
            "torch_threads": torch.get_num_threads(),
        },
    }
