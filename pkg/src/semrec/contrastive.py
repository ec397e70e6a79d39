"""Sequence-to-item contrastive alignment for stage-1 training.

A causal self-attention encoder summarizes the quantized item vectors of a
user's history; the summary is pulled toward the next item's quantized vector
and pushed from the other targets in the batch under a temperature-scaled
cosine InfoNCE loss.
"""

import torch
import torch.nn as nn

from .layers import EncoderBlock, build_blocks, causal_mask
from .util import seed_component


class SequenceEncoder(nn.Module):
    """Two-block causal transformer over item behavior vectors with learned
    positional embeddings; operates at the vectors' own width."""

    def __init__(self, width: int, max_len: int, layers: int = 2, heads: int = 2,
                 dropout: float = 0.0, seed: int = 0, name: str = "seq_encoder"):
        super().__init__()
        seed_component(seed, name + "_pos")
        self.pos = nn.Parameter(torch.rand(max_len, width) * 0.01)
        self.blocks = build_blocks(layers, EncoderBlock, width, heads, 2, dropout,
                                   seed, name + "_blocks")
        self.max_len = max_len

    def forward(self, v, lengths=None):
        """v: (B, T, W) right-padded item vectors; lengths: (B,) valid counts.
        Returns per-position states (B, T, W); the state at position t-1
        summarizes the first t items and ignores everything after."""
        b, t, _ = v.shape
        if t == 0:
            raise ValueError("empty sequence")
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.max_len}")
        x = v + self.pos[:t]
        mask = causal_mask(t, device=v.device)
        if lengths is not None:
            key_valid = (torch.arange(t, device=v.device).unsqueeze(0)
                         < lengths.unsqueeze(1))
            mask = mask.unsqueeze(0) & key_valid.unsqueeze(1)
        for block in self.blocks:
            x = block(x, mask=mask)
        return x

    def final_state(self, v, lengths):
        states = self.forward(v, lengths)
        idx = (lengths - 1).clamp(min=0)
        return states[torch.arange(v.shape[0]), idx]


def rec_contrastive_loss(h, v_pos, target_ids=None, tau: float = 0.1):
    """InfoNCE over cosine similarities at temperature tau.

    Row i's positive is v_pos[i]; negatives are the other in-batch targets,
    excluding any j whose target item duplicates i's (a duplicate positive is
    not a negative). Zero-norm vectors are rejected rather than silently
    normalized.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    b = h.shape[0]
    if b < 2:
        raise ValueError("contrastive batch needs at least 2 sequences")
    if v_pos.shape[0] != b:
        raise ValueError("h and v_pos batch sizes differ")
    h_norm = h.norm(dim=-1)
    v_norm = v_pos.norm(dim=-1)
    if (h_norm == 0).any() or (v_norm == 0).any():
        raise ValueError("zero-norm vector in contrastive batch")
    sims = (h / h_norm.unsqueeze(-1)) @ (v_pos / v_norm.unsqueeze(-1)).T / tau
    if target_ids is not None:
        target_ids = torch.as_tensor(target_ids)
        dup = target_ids.unsqueeze(0) == target_ids.unsqueeze(1)
        allowed = ~dup
        allowed.fill_diagonal_(True)
        sims = sims.masked_fill(~allowed, float("-inf"))
    log_denom = torch.logsumexp(sims, dim=1)
    return (log_denom - sims.diagonal()).mean()


def contrastive_accuracy(h, v_pos, target_ids=None) -> float:
    """Fraction of rows whose own target has the highest cosine among the
    batch candidates (duplicates of the positive excluded)."""
    with torch.no_grad():
        sims = (h / h.norm(dim=-1, keepdim=True)) @ \
               (v_pos / v_pos.norm(dim=-1, keepdim=True)).T
        if target_ids is not None:
            target_ids = torch.as_tensor(target_ids)
            dup = target_ids.unsqueeze(0) == target_ids.unsqueeze(1)
            allowed = ~dup
            allowed.fill_diagonal_(True)
            sims = sims.masked_fill(~allowed, float("-inf"))
        return float((sims.argmax(dim=1) == torch.arange(h.shape[0])).float().mean())
