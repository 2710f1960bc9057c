"""Building blocks: instance statistics, MixStyle, grouped SE gating and masked attention.

All tensors are ``(batch, channels, length)`` unless stated otherwise.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigurationError

EPS = 1e-5


def instance_stats(x: torch.Tensor, eps: float = EPS):
    """Per-instance, per-channel mean and std over the temporal axis.

    Returns ``(mu, sigma)``, each shaped ``(B, C)``; ``sigma = sqrt(var + eps)``
    with the population variance.
    """
    mu = x.mean(dim=-1)
    var = x.var(dim=-1, unbiased=False)
    return mu, torch.sqrt(var + eps)


def instance_norm(x: torch.Tensor, gamma=None, beta=None, eps: float = EPS) -> torch.Tensor:
    mu, sigma = instance_stats(x, eps)
    out = (x - mu.unsqueeze(-1)) / sigma.unsqueeze(-1)
    if gamma is not None:
        out = out * gamma.view(1, -1, 1)
    if beta is not None:
        out = out + beta.view(1, -1, 1)
    return out


def mix_statistics(x: torch.Tensor, lam: torch.Tensor, perm, eps: float = EPS):
    """Return ``(gamma_mix, beta_mix)`` for mixing ``x`` with ``x[perm]``."""
    mu, sigma = instance_stats(x, eps)
    lam = lam.to(x.dtype).view(-1, 1)
    gamma_mix = lam * sigma + (1 - lam) * sigma[perm]
    beta_mix = lam * mu + (1 - lam) * mu[perm]
    return gamma_mix, beta_mix


def mixstyle(x: torch.Tensor, rng: np.random.Generator | None = None, alpha: float = 0.1,
             training: bool = True, lam=None, perm=None, eps: float = EPS) -> torch.Tensor:
    """Normalize each instance by its own statistics and re-style it with a
    Beta-weighted mix of its own and a batch-shuffled partner's statistics.

    ``lam`` (scalar or length-B) and ``perm`` override the random draws. In
    eval mode the input is returned unchanged.
    """
    if not training:
        return x
    b = x.shape[0]
    if rng is None:
        rng = np.random.default_rng()
    if perm is None:
        perm = rng.permutation(b)
    perm = torch.as_tensor(np.asarray(perm), dtype=torch.long)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=b)
    lam = torch.as_tensor(np.broadcast_to(np.asarray(lam, dtype=np.float64), (b,)).copy())
    gamma_mix, beta_mix = mix_statistics(x, lam, perm, eps)
    mu, sigma = instance_stats(x, eps)
    normed = (x - mu.unsqueeze(-1)) / sigma.unsqueeze(-1)
    return normed * gamma_mix.unsqueeze(-1) + beta_mix.unsqueeze(-1)


class MixStyle(nn.Module):
    """Module wrapper around :func:`mixstyle` with its own seeded generator.

    ``fixed_lambda`` / ``fixed_perm`` pin the random draws; ``per_batch``
    draws one λ for the whole batch instead of one per instance.
    """

    def __init__(self, alpha: float = 0.1, eps: float = EPS, seed: int | None = None,
                 per_batch: bool = False):
        super().__init__()
        self.alpha = alpha
        self.eps = eps
        self.per_batch = per_batch
        self.rng = np.random.default_rng(seed)
        self.fixed_lambda = None
        self.fixed_perm = None

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        if not self.training:
            return x
        lam = self.fixed_lambda
        if lam is None and self.per_batch:
            lam = float(self.rng.beta(self.alpha, self.alpha))
        return mixstyle(x, self.rng, self.alpha, True, lam=lam, perm=self.fixed_perm, eps=self.eps)

    def extra_repr(self):
        return f"alpha={self.alpha}, per_batch={self.per_batch}"


def se_gate(x, w1, b1, w2, b2, groups: int = 1, gate=None) -> torch.Tensor:
    """Squeeze-and-excitation within channel groups, weights shared across groups.

    ``w1``: ``(C_g // r, C_g)``, ``w2``: ``(C_g, C_g // r)`` in ``nn.Linear`` layout.
    """
    b, c, _ = x.shape
    if c % groups:
        raise ConfigurationError(f"{c} channels not divisible into {groups} groups")
    if gate is None:
        squeeze = x.mean(dim=-1).view(b, groups, c // groups)
        hidden = F.relu(F.linear(squeeze, w1, b1))
        gate = torch.sigmoid(F.linear(hidden, w2, b2)).view(b, c, 1)
    return x * gate


class SEGate(nn.Module):
    def __init__(self, channels: int, groups: int = 1, reduction: int = 8):
        super().__init__()
        if channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible into {groups} groups")
        per_group = channels // groups
        # grouped widths such as 11 or 43 do not divide by r; floor, keep >= 1
        hidden = max(1, per_group // reduction)
        self.groups = groups
        self.fc1 = nn.Linear(per_group, hidden)
        self.fc2 = nn.Linear(hidden, per_group)
        # test hook: a constant gate value (e.g. 1.0) bypasses the excitation path
        self.force_gate = None

    def forward(self, x):
        gate = None
        if self.force_gate is not None:
            gate = torch.as_tensor(self.force_gate, dtype=x.dtype)
        return se_gate(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias,
                       self.groups, gate=gate)


def masked_attention(q, k, v, key_mask, return_weights=False):
    """Scaled dot-product attention with a key padding mask.

    ``q, k, v``: ``(B, heads, tokens, d_k)``; ``key_mask``: ``(B, tokens)`` bool,
    ``True`` = attend. Masked keys get weight exactly zero.
    """
    key_mask = torch.as_tensor(key_mask, dtype=torch.bool, device=q.device)
    if not bool(key_mask.any(dim=-1).all()):
        raise ValueError("no valid leads: every key in a batch row is masked")
    d_k = q.shape[-1]
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(d_k)
    scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    # 0 * v is NaN for non-finite v at a masked key; select instead of multiply
    v = v.masked_fill(~key_mask[:, None, :, None], 0.0)
    out = torch.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ConfigurationError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.d_k).transpose(1, 2)

    def forward(self, tokens, key_mask, return_weights=False):
        b, t, _ = tokens.shape
        q = self._split(self.q_proj(tokens))
        k = self._split(self.k_proj(tokens))
        v = self._split(self.v_proj(tokens))
        out, weights = masked_attention(q, k, v, key_mask, return_weights=True)
        out = out.transpose(1, 2).reshape(b, t, self.d_model)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out
