"""Disentangling encoders and the variational mutual-information penalty.

Each content modality gets two parallel encoders: one for modality-specific
residue and one for the behavior-aligned component that feeds quantization.
A conditional Gaussian estimator upper-bounds the mutual information between
the two components; minimizing that bound pushes nuisance content out of the
behavior channel. Training alternates one estimator likelihood step (its
parameters only) with one joint step on the full objective.
"""

import math

import torch
import torch.nn as nn

from .util import seed_component

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class ModalityEncoderPair(nn.Module):
    """Two 2-layer MLPs (hidden = 2*out_dim) mapping one modality embedding to
    a modality-specific vector and a behavior-aligned vector."""

    def __init__(self, in_dim: int, out_dim: int, with_specific: bool = True,
                 seed: int = 0, name: str = "enc"):
        super().__init__()
        seed_component(seed, name)
        hidden = 2 * out_dim
        self.behavior = mlp(in_dim, hidden, out_dim)
        self.specific = mlp(in_dim, hidden, out_dim) if with_specific else None

    def forward(self, x):
        z_beh = self.behavior(x)
        z_spec = self.specific(x) if self.specific is not None else None
        return z_spec, z_beh


class IdEmbedding(nn.Module):
    """Learnable per-item behavior vector, init uniform in (0, 0.01).

    Receives gradient only through the quantizer commitment term and the
    sequence contrastive loss; the MI penalty covers content modalities only.
    """

    def __init__(self, n_items: int, dim: int, seed: int = 0):
        super().__init__()
        seed_component(seed, "id_embedding")
        weight = torch.rand(n_items, dim) * 0.01
        self.weight = nn.Parameter(weight)

    def forward(self, item_ids):
        return self.weight[item_ids]


class ConditionalGaussianEstimator(nn.Module):
    """q(z_specific | z_behavior) as a diagonal Gaussian with MLP mean and
    log-variance heads; log-variance clamped to [-8, 8]."""

    def __init__(self, dim: int, seed: int = 0, name: str = "club"):
        super().__init__()
        seed_component(seed, name)
        hidden = 2 * dim
        self.mean_net = mlp(dim, hidden, dim)
        self.logvar_net = mlp(dim, hidden, dim)

    def params_for(self, z_beh):
        mu = self.mean_net(z_beh)
        logvar = torch.clamp(self.logvar_net(z_beh), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def log_prob_matrix(self, z_spec, z_beh):
        """(i, j) entry: log q(z_spec_j | z_beh_i), full Gaussian density."""
        mu, logvar = self.params_for(z_beh)
        diff = z_spec.unsqueeze(0) - mu.unsqueeze(1)          # (i, j, D)
        var = torch.exp(logvar).unsqueeze(1)
        log_density = -0.5 * (diff ** 2 / var + logvar.unsqueeze(1) + math.log(2 * math.pi))
        return log_density.sum(-1)


def gaussian_nll(z_spec, mu, logvar):
    """Mean negative log density of z_spec under N(mu, diag exp(logvar))."""
    log_density = -0.5 * ((z_spec - mu) ** 2 / torch.exp(logvar) + logvar + math.log(2 * math.pi))
    return -log_density.sum(-1).mean()


def club_mim_loss(z_beh, z_spec, estimator: ConditionalGaussianEstimator,
                  grad_to_specific: bool = True):
    """Variational upper bound on I(z_beh; z_spec) for one modality:
    mean_i [ log q(z_spec_i | z_beh_i) - mean_j log q(z_spec_j | z_beh_i) ].

    Exactly zero for a singleton batch and for batches whose z_spec rows are
    all identical, because positive and contrast terms then coincide.
    """
    if z_beh.shape[0] != z_spec.shape[0]:
        raise ValueError("z_beh and z_spec batch sizes differ")
    if not grad_to_specific:
        z_spec = z_spec.detach()
    logq = estimator.log_prob_matrix(z_spec, z_beh)
    positive = logq.diagonal()
    # subtract elementwise before reducing: with identical z_spec rows every
    # row of logq is constant, each difference is an exact 0.0, and the mean
    # of exact zeros is zero for any batch size and reduction order
    return (positive.unsqueeze(1) - logq).mean()


def estimator_nll_loss(z_beh, z_spec, estimator: ConditionalGaussianEstimator):
    """Likelihood objective for the estimator itself; encoder inputs are
    detached so this step can only move estimator parameters."""
    z_beh = z_beh.detach()
    z_spec = z_spec.detach()
    mu, logvar = estimator.params_for(z_beh)
    return gaussian_nll(z_spec, mu, logvar)
