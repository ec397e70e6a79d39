"""Transformer building blocks shared by the stage-1 sequence encoder and the
stage-2 generator.

Attention supports an optional per-pair multiplicative value modulation: for
query position i and key position j, the value contribution is scaled
elementwise by a supplied (B, Tq, Tk, d_model) tensor before the weighted sum
over j. Attention weights themselves stay a standard softmax, so rows still
sum to one; a modulation of all ones reproduces standard attention exactly
(same code path, multiplication by 1.0 is bit-exact).
"""

import math

import torch
import torch.nn as nn

from .util import seed_component


def causal_mask(t: int, device=None) -> torch.Tensor:
    """(t, t) bool mask, True where query i may attend key j (j <= i)."""
    return torch.tril(torch.ones(t, t, dtype=torch.bool, device=device))


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.d_model, self.heads, self.head_dim = d_model, heads, d_model // heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def attention_weights(self, x_q, x_kv, mask=None):
        b, tq, _ = x_q.shape
        tk = x_kv.shape[1]
        q = self.wq(x_q).view(b, tq, self.heads, self.head_dim).transpose(1, 2)
        k = self.wk(x_kv).view(b, tk, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            if mask.dim() == 2:
                mask = mask.unsqueeze(0)
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        return torch.softmax(scores, dim=-1)  # (b, heads, tq, tk)

    def forward(self, x_q, x_kv, mask=None, pair_mod=None):
        attn = self.dropout(self.attention_weights(x_q, x_kv, mask))
        v = self.wv(x_kv)  # (b, tk, d_model)
        # spread each head's weights over its slice of the value dims so the
        # per-pair modulation can act on full-width value vectors
        attn_full = attn.permute(0, 2, 3, 1).repeat_interleave(self.head_dim, dim=-1)
        if pair_mod is not None:
            attn_full = attn_full * pair_mod
        out = torch.einsum("bijd,bjd->bid", attn_full, v)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, mult * d_model), nn.ReLU(),
            nn.Dropout(dropout), nn.Linear(mult * d_model, d_model))

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    """Post-norm residual block: x + attn, layernorm, x + ffn, layernorm."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, dropout)
        self.ffn = FeedForward(d_model, ffn_mult, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None, pair_mod=None):
        x = self.norm1(x + self.dropout(self.attn(x, x, mask=mask, pair_mod=pair_mod)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x


class DecoderBlock(nn.Module):
    """Causal self-attention, cross-attention to encoder memory, feed-forward.
    Both attentions are standard (no pair modulation)."""

    def __init__(self, d_model: int, heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout)
        self.ffn = FeedForward(d_model, ffn_mult, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, self_mask=None, memory_mask=None):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, mask=self_mask)))
        x = self.norm2(x + self.dropout(self.cross_attn(x, memory, mask=memory_mask)))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x


def build_blocks(n: int, block_cls, d_model: int, heads: int, ffn_mult: int,
                 dropout: float, seed: int, name: str) -> nn.ModuleList:
    seed_component(seed, name)
    return nn.ModuleList(
        [block_cls(d_model, heads, ffn_mult, dropout) for _ in range(n)])
