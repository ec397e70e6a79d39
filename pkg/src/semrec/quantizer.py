"""Residual quantization over a codebook bank shared by all behavior signals.

Quantization is greedy: at each level pick the nearest entry under squared
Euclidean distance (ties to the lowest index), subtract it, and recurse on
the residual. The quantized output is the sum of the selected entries; a
straight-through estimator keeps the encoder differentiable through the
discrete choice.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .disentangle import mlp
from .util import load_arrays, save_arrays, seed_component


class CodebookBank(nn.Module):
    """(levels, codes, dim) bank. One instance serves every signal, so an
    update through any signal moves the entries all signals quantize against."""

    def __init__(self, levels: int, codes: int, dim: int, seed: int = 0,
                 name: str = "codebook"):
        super().__init__()
        seed_component(seed, name)
        self.levels, self.codes, self.dim = levels, codes, dim
        self.entries = nn.Parameter(torch.rand(levels, codes, dim) * 0.01)

    def level_entries(self, level: int):
        return self.entries[level]


def nearest_code(residual, entries):
    """Lowest-index argmin of squared Euclidean distance.

    torch.argmin's tie behavior is not contractual, so ties are resolved
    explicitly in favor of the smallest index.
    """
    dists = ((residual.unsqueeze(1) - entries.unsqueeze(0)) ** 2).sum(-1)
    min_d = dists.min(dim=1, keepdim=True).values
    n = entries.shape[0]
    idx_grid = torch.arange(n, device=dists.device).expand_as(dists)
    candidates = torch.where(dists == min_d, idx_grid, torch.full_like(idx_grid, n))
    return candidates.min(dim=1).values


@dataclass
class QuantizationResult:
    codes: torch.Tensor        # (B, L) int64
    quantized: torch.Tensor    # (B, D), sum of selected entries, grads to bank
    residuals: torch.Tensor    # (B, L, D) level inputs z^l, grads to encoder
    final_residual: torch.Tensor  # (B, D) = z - sum of selected entries


def rq_quantize(z, bank: CodebookBank, levels: int = None) -> QuantizationResult:
    """Greedy level-by-level quantization of a (B, D) or (D,) batch.

    The residual recursion subtracts detached entries, so the commitment term
    built from `residuals` moves only the encoder; `quantized` sums live
    entries, so losses on it can move the bank.
    """
    squeeze = z.dim() == 1
    if squeeze:
        z = z.unsqueeze(0)
    if z.shape[-1] != bank.dim:
        raise ValueError(f"input dim {z.shape[-1]} != codebook dim {bank.dim}")
    levels = bank.levels if levels is None else levels
    residual = z
    codes, residuals, quantized = [], [], 0.0
    for l in range(levels):
        entries = bank.level_entries(l).to(z.dtype)
        idx = nearest_code(residual.detach(), entries.detach())
        selected = entries[idx]
        codes.append(idx)
        residuals.append(residual)
        quantized = quantized + selected
        residual = residual - selected.detach()
    result = QuantizationResult(
        codes=torch.stack(codes, dim=1),
        quantized=quantized,
        residuals=torch.stack(residuals, dim=1),
        final_residual=residual,
    )
    if squeeze:
        result = QuantizationResult(
            codes=result.codes[0], quantized=result.quantized[0],
            residuals=result.residuals[0], final_residual=result.final_residual[0])
    return result


def straight_through(z, quantized):
    """Forward value = quantized; gradient w.r.t. z = identity. The quantized
    argument keeps its own graph, so callers decide whether bank gradients
    flow by passing it live or detached."""
    return quantized + (z - z.detach())


def rq_loss(result: QuantizationResult, bank: CodebookBank, alpha: float = 0.25,
            levels: int = None):
    """Per level: ||sg[z^l] - c^l||^2 + alpha ||z^l - sg[c^l]||^2, summed over
    levels and averaged over the batch. First term moves bank entries, second
    moves the encoder."""
    codes, residuals = result.codes, result.residuals
    if codes.dim() == 1:
        codes, residuals = codes.unsqueeze(0), residuals.unsqueeze(0)
    levels = codes.shape[1] if levels is None else levels
    total = 0.0
    for l in range(levels):
        selected = bank.level_entries(l).to(residuals.dtype)[codes[:, l]]
        z_l = residuals[:, l]
        total = total + ((z_l.detach() - selected) ** 2).sum(-1).mean()
        total = total + alpha * ((z_l - selected.detach()) ** 2).sum(-1).mean()
    return total


def rq_loss_frozen(z, bank_entries, codes, z_levels_const, selected_const,
                   alpha: float = 0.25):
    """Evaluation of the RQ loss with every stop-gradient argument held at the
    supplied base-point constants (z_levels_const for the dictionary term,
    selected_const for the commitment term and the residual recursion).
    Finite differences of this function are the reference for the production
    loss's analytic gradients: perturbing z or bank_entries must not move
    anything that sits inside a stop-gradient."""
    total = 0.0
    levels = codes.shape[1]
    running = z
    for l in range(levels):
        live_entry = bank_entries[l][codes[:, l]]
        total = total + ((z_levels_const[:, l] - live_entry) ** 2).sum(-1).mean()
        total = total + alpha * ((running - selected_const[l]) ** 2).sum(-1).mean()
        running = running - selected_const[l]
    return total


class ReconstructionDecoder(nn.Module):
    """Maps concat(quantized behavior vector, modality-specific vector) back to
    the modality input space; without the specific branch the input is just
    the quantized vector."""

    def __init__(self, dim: int, out_dim: int, with_specific: bool = True,
                 seed: int = 0, name: str = "dec"):
        super().__init__()
        seed_component(seed, name)
        in_dim = 2 * dim if with_specific else dim
        self.with_specific = with_specific
        self.net = mlp(in_dim, 2 * dim, out_dim)

    def forward(self, q_beh, z_spec=None):
        if self.with_specific:
            if z_spec is None:
                raise ValueError("decoder expects a modality-specific vector")
            x = torch.cat([q_beh, z_spec], dim=-1)
        else:
            x = q_beh
        return self.net(x)


def kmeans(x: torch.Tensor, k: int, iters: int = 25, seed: int = 0):
    """Lloyd iterations with seeded D^2-weighted init.

    In-package rather than a library call so results are bit-reproducible
    regardless of BLAS threading; empty clusters re-seed to random points.
    """
    n = x.shape[0]
    g = torch.Generator().manual_seed(seed)
    if n >= k:
        first = int(torch.randint(0, n, (1,), generator=g))
        centers = [x[first].clone()]
        d2 = ((x - centers[0]) ** 2).sum(-1)
        for _ in range(k - 1):
            total = d2.sum()
            if total <= 0:
                pick = int(torch.randint(0, n, (1,), generator=g))
            else:
                u = torch.rand(1, generator=g, dtype=torch.float64) * total.double()
                pick = int(torch.searchsorted(d2.double().cumsum(0), u).clamp(max=n - 1))
            centers.append(x[pick].clone())
            d2 = torch.minimum(d2, ((x - centers[-1]) ** 2).sum(-1))
        centers = torch.stack(centers)
    else:
        picks = torch.randint(0, n, (k,), generator=g)
        centers = x[picks] + 1e-4 * torch.randn(k, x.shape[1], generator=g, dtype=x.dtype)
    for _ in range(iters):
        assign = ((x.unsqueeze(1) - centers.unsqueeze(0)) ** 2).sum(-1).argmin(dim=1)
        new_centers = centers.clone()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new_centers[j] = members.mean(dim=0)
            else:
                new_centers[j] = x[int(torch.randint(0, n, (1,), generator=g))]
        if torch.allclose(new_centers, centers):
            centers = new_centers
            break
        centers = new_centers
    return centers


def kmeans_init_bank(bank: CodebookBank, vectors: torch.Tensor, iters: int = 25,
                     seed: int = 0):
    """Fit level l on the residuals left by levels < l, mirroring how the
    quantizer will consume the bank."""
    residual = vectors.detach()
    with torch.no_grad():
        for l in range(bank.levels):
            centers = kmeans(residual, bank.codes, iters=iters, seed=seed + l)
            bank.entries[l].copy_(centers)
            idx = nearest_code(residual, centers)
            residual = residual - centers[idx]


def reseed_dead_codes(bank: CodebookBank, usage: torch.Tensor,
                      sample_residuals: torch.Tensor, seed: int = 0):
    """Re-seed entries unused over a full epoch to random in-batch residuals;
    returns the number of reseeded entries.

    sample_residuals: (levels, M, dim) level-wise residual samples, or (M, dim)
    to draw every level from the same pool.
    """
    g = torch.Generator().manual_seed(seed)
    if sample_residuals.dim() == 2:
        sample_residuals = sample_residuals.unsqueeze(0).expand(
            bank.levels, *sample_residuals.shape)
    n_reseeded = 0
    with torch.no_grad():
        for l in range(bank.levels):
            dead = torch.nonzero(usage[l] == 0).flatten()
            if not len(dead):
                continue
            pool = sample_residuals[l]
            picks = torch.randint(0, pool.shape[0], (len(dead),), generator=g)
            bank.entries[l][dead] = pool[picks].to(bank.entries.dtype)
            n_reseeded += len(dead)
    return n_reseeded


@dataclass
class SemanticIdTable:
    """Per-item discrete IDs: codes[i, l, s] is the level-l code of signal s.

    Items whose full code grid collides get a disambiguation index (order
    within the colliding group, sorted by item id); unique items carry -1.
    """
    codes: np.ndarray          # (n_items, L, S) int64
    signals: tuple             # signal names, column order of the S axis
    disambiguation: np.ndarray # (n_items,) int64, -1 when unique
    n_codes: int = 0           # codebook size; 0 when unknown (TSV roundtrip)

    @property
    def n_items(self):
        return self.codes.shape[0]

    @property
    def levels(self):
        return self.codes.shape[1]

    def key(self, i: int) -> tuple:
        return tuple(self.codes[i].reshape(-1).tolist())

    def resolution_map(self) -> dict:
        """Full-ID tuple -> item ids sharing it, in disambiguation order."""
        groups = {}
        for i in range(self.n_items):
            groups.setdefault(self.key(i), []).append(i)
        return {k: sorted(v) for k, v in groups.items()}


def collision_report(codes: np.ndarray) -> dict:
    """{prefix_len: number of items whose first prefix_len levels coincide
    with at least one other item's}, for prefix lengths 1..L."""
    n, levels = codes.shape[0], codes.shape[1]
    report = {}
    for p in range(1, levels + 1):
        seen = {}
        for i in range(n):
            k = tuple(codes[i, :p].reshape(-1).tolist())
            seen[k] = seen.get(k, 0) + 1
        report[p] = int(sum(c for c in seen.values() if c >= 2))
    return report


def assign_semantic_ids(signal_vectors: dict, banks: dict, signals: tuple) -> SemanticIdTable:
    """Quantize each signal's frozen vectors and assemble the per-item ID grid.

    signal_vectors: name -> (n_items, D) tensor; banks: name -> CodebookBank
    (the same object for every name when the bank is shared).
    """
    per_signal = []
    with torch.no_grad():
        for s in signals:
            result = rq_quantize(signal_vectors[s], banks[s])
            per_signal.append(result.codes.cpu().numpy())
    codes = np.stack(per_signal, axis=2)  # (n, L, S)

    groups = {}
    for i in range(codes.shape[0]):
        groups.setdefault(tuple(codes[i].reshape(-1).tolist()), []).append(i)
    disambiguation = np.full(codes.shape[0], -1, dtype=np.int64)
    for members in groups.values():
        if len(members) >= 2:
            for rank, i in enumerate(sorted(members)):
                disambiguation[i] = rank
    return SemanticIdTable(codes=codes, signals=tuple(signals),
                           disambiguation=disambiguation,
                           n_codes=banks[signals[0]].codes)


def write_semantic_ids_tsv(path, table: SemanticIdTable):
    """item_id <tab> level groups joined by ` | `, each group the per-signal
    codes comma-joined; colliding items append their disambiguation index as
    an extra sub-token in the final group."""
    with open(path, "w") as f:
        for i in range(table.n_items):
            parts = []
            for l in range(table.levels):
                vals = [str(int(c)) for c in table.codes[i, l]]
                if l == table.levels - 1 and table.disambiguation[i] >= 0:
                    vals.append(str(int(table.disambiguation[i])))
                parts.append(",".join(vals))
            f.write(f"{i}\t{' | '.join(parts)}\n")


def read_semantic_ids_tsv(path, signals: tuple) -> SemanticIdTable:
    rows, dis = [], []
    with open(path) as f:
        for line in f:
            _, id_part = line.rstrip("\n").split("\t")
            groups = [g.strip() for g in id_part.split("|")]
            grid = []
            d = -1
            for l, g in enumerate(groups):
                vals = [int(v) for v in g.split(",")]
                if l == len(groups) - 1 and len(vals) == len(signals) + 1:
                    d = vals.pop()
                grid.append(vals)
            rows.append(grid)
            dis.append(d)
    return SemanticIdTable(codes=np.array(rows, dtype=np.int64),
                           signals=tuple(signals),
                           disambiguation=np.array(dis, dtype=np.int64))


def save_id_table(path, table: SemanticIdTable):
    """Lossless binary form of the ID table (the TSV is the readable view)."""
    save_arrays(path, {
        "codes": table.codes,
        "disambiguation": table.disambiguation,
        "signals": np.array(table.signals, dtype="U16"),
        "n_codes": np.array([table.n_codes], dtype=np.int64),
    })


def load_id_table(path) -> SemanticIdTable:
    a = load_arrays(path)
    return SemanticIdTable(codes=a["codes"],
                           signals=tuple(str(s) for s in a["signals"]),
                           disambiguation=a["disambiguation"],
                           n_codes=int(a["n_codes"][0]))
