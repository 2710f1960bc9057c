"""Grouped pre-activation SE-ResNet backbone with MixStyle, masked lead attention head.

Every convolution is grouped with one group per lead, so each lead keeps its
own contiguous slice of channels all the way to the lead tokens. Lead
tokens are then mixed only through the masked attention head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
import torch.nn as nn

from .exceptions import ConfigurationError
from .layers import MixStyle, MultiHeadAttention, SEGate

# Per-lead-count settings that differ between configurations.
LEAD_PRESETS = {
    12: {"d_model": 650, "resb_kernel": 7, "n_mix": 2},
    6: {"d_model": 520, "resb_kernel": 5, "n_mix": 2},
    4: {"d_model": 650, "resb_kernel": 13, "n_mix": 2},
    3: {"d_model": 520, "resb_kernel": 7, "n_mix": 2},
    2: {"d_model": 650, "resb_kernel": 7, "n_mix": 1},
}

HEAD_TYPES = ("mha", "pool")


@dataclass(frozen=True)
class ModelConfig:
    n_leads: int = 12
    d_class: int = 26
    d_model: int = 650
    heads: int = 26
    n_resblocks: int = 8
    n_mix: int = 2
    first_conv_kernel: int = 11
    resb_kernel: int = 7
    stride: int = 3
    first_conv_channels: int = 128
    window_seconds: float = 15.0
    fs: float = 500.0
    dropout: float = 0.2
    se_reduction: int = 8
    mixstyle_alpha: float = 0.1
    head: str = "mha"
    seed: int = 0

    def __post_init__(self):
        if self.n_leads < 1:
            raise ConfigurationError(f"n_leads must be positive, got {self.n_leads}")
        if self.head not in HEAD_TYPES:
            raise ConfigurationError(f"head must be one of {HEAD_TYPES}, got {self.head!r}")
        if self.head == "mha":
            if self.heads != self.d_class:
                raise ConfigurationError(
                    f"heads ({self.heads}) must equal d_class ({self.d_class})"
                )
            if self.d_model % self.heads:
                raise ConfigurationError(
                    f"d_model={self.d_model} not divisible by heads={self.heads}"
                )
        if not 0 <= self.n_mix <= self.n_resblocks:
            raise ConfigurationError(
                f"n_mix must be within [0, n_resblocks={self.n_resblocks}], got {self.n_mix}"
            )
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("first_conv_kernel", "resb_kernel", "stride", "first_conv_channels",
                     "n_resblocks", "d_model", "d_class", "se_reduction"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def for_leads(cls, n_leads: int, **overrides) -> "ModelConfig":
        """Defaults for a lead count, with keyword overrides."""
        if n_leads not in LEAD_PRESETS:
            raise ConfigurationError(f"no preset for {n_leads} leads; choose from {sorted(LEAD_PRESETS)}")
        return cls(n_leads=n_leads, **{**LEAD_PRESETS[n_leads], **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @property
    def stem_channels(self) -> int:
        """Nominal first-layer width rounded up to a multiple of the lead count."""
        return self.n_leads * math.ceil(self.first_conv_channels / self.n_leads)

    def block_channels(self, i: int) -> int:
        return self.stem_channels * 2 ** (i // 2)

    def is_downsampling(self, i: int) -> bool:
        return i > 0 and i % 2 == 0

    @property
    def window_samples(self) -> int:
        return int(round(self.window_seconds * self.fs))


def _conv(cin, cout, k, stride, groups):
    return nn.Conv1d(cin, cout, k, stride=stride, padding=k // 2, groups=groups, bias=False)


class ResBlock(nn.Module):
    """Pre-activation residual unit: (BN, ReLU, conv) x 2, SE gate, optional MixStyle."""

    def __init__(self, cin, cout, kernel, stride, groups, se_reduction=8,
                 use_mixstyle=False, alpha=0.1, seed=None):
        super().__init__()
        self.bn1 = nn.BatchNorm1d(cin, eps=1e-5, momentum=0.1)
        self.conv1 = _conv(cin, cout, kernel, stride, groups)
        self.bn2 = nn.BatchNorm1d(cout, eps=1e-5, momentum=0.1)
        self.conv2 = _conv(cout, cout, kernel, 1, groups)
        self.se = SEGate(cout, groups, se_reduction)
        self.mixstyle = MixStyle(alpha, seed=seed) if use_mixstyle else None
        if cin != cout or stride != 1:
            self.skip = nn.Conv1d(cin, cout, 1, stride=stride, groups=groups, bias=False)
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        h = self.conv1(torch.relu(self.bn1(x)))
        h = self.conv2(torch.relu(self.bn2(h)))
        h = self.se(h)
        if self.mixstyle is not None and self.training:
            h = self.mixstyle(h)
        return h + self.skip(x)


class Backbone(nn.Module):
    """Maps ``(B, n_leads, L)`` signals to lead tokens ``(B, n_leads, d_model)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.n_leads
        self.stem = _conv(g, cfg.stem_channels, cfg.first_conv_kernel, cfg.stride, g)
        blocks = []
        cin = cfg.stem_channels
        for i in range(cfg.n_resblocks):
            cout = cfg.block_channels(i)
            stride = cfg.stride if cfg.is_downsampling(i) else 1
            blocks.append(ResBlock(
                cin, cout, cfg.resb_kernel, stride, g, cfg.se_reduction,
                use_mixstyle=i < cfg.n_mix, alpha=cfg.mixstyle_alpha, seed=cfg.seed + i,
            ))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = cin
        self.bn_out = nn.BatchNorm1d(cin, eps=1e-5, momentum=0.1)
        self.embed = nn.Linear(cin // g, cfg.d_model)

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.cfg.n_leads:
            raise ConfigurationError(
                f"expected input (B, {self.cfg.n_leads}, L), got {tuple(x.shape)}"
            )
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        h = torch.relu(self.bn_out(h))
        b = h.shape[0]
        pooled = h.mean(dim=-1).view(b, self.cfg.n_leads, -1)
        return self.embed(pooled)


def masked_mean(tokens, mask):
    """Mean of ``tokens[b, t]`` over the positions where ``mask[b, t]`` is set."""
    w = mask.to(tokens.dtype).unsqueeze(-1)
    # select rather than multiply so non-finite masked tokens cannot leak
    summed = torch.where(mask.unsqueeze(-1), tokens, torch.zeros_like(tokens)).sum(dim=1)
    return summed / w.sum(dim=1)


class AttentionHead(nn.Module):
    """Masked MHA over lead tokens, masked mean-pool, per-class scoring of each head slice."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.attention = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.dropout = nn.Dropout(cfg.dropout)
        d_k = cfg.d_model // cfg.d_class
        self.class_weight = nn.Parameter(torch.empty(cfg.d_class, d_k))
        self.class_bias = nn.Parameter(torch.zeros(cfg.d_class))
        nn.init.uniform_(self.class_weight, -1 / math.sqrt(d_k), 1 / math.sqrt(d_k))

    def forward(self, tokens, mask, return_weights=False):
        attended, weights = self.attention(tokens, mask, return_weights=True)
        pooled = self.dropout(masked_mean(attended, mask))
        per_class = pooled.view(pooled.shape[0], self.cfg.d_class, -1)
        logits = (per_class * self.class_weight).sum(dim=-1) + self.class_bias
        return (logits, weights) if return_weights else logits


class PoolHead(nn.Module):
    """Ablation head: masked mean of lead tokens followed by one dense layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(cfg.d_model, cfg.d_class)

    def forward(self, tokens, mask, return_weights=False):
        logits = self.fc(self.dropout(masked_mean(tokens, mask)))
        return (logits, None) if return_weights else logits


class MDARsn(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.head = AttentionHead(cfg) if cfg.head == "mha" else PoolHead(cfg)
        self.reset_parameters()

    def reset_parameters(self):
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            self._init_weights()
        self.reseed_mixstyle(self.cfg.seed)

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv1d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm1d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                m.reset_parameters()
        if isinstance(self.head, AttentionHead):
            d_k = self.head.class_weight.shape[1]
            nn.init.uniform_(self.head.class_weight, -1 / math.sqrt(d_k), 1 / math.sqrt(d_k))
            nn.init.zeros_(self.head.class_bias)

    def reseed_mixstyle(self, seed):
        for i, m in enumerate(mod for mod in self.modules() if isinstance(mod, MixStyle)):
            m.reseed(seed + i)

    def mixstyle_layers(self):
        return [m for m in self.modules() if isinstance(m, MixStyle)]

    def forward(self, x, mask=None, return_weights=False):
        if mask is None:
            mask = torch.ones(x.shape[0], self.cfg.n_leads, dtype=torch.bool)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape != (x.shape[0], self.cfg.n_leads):
            raise ConfigurationError(
                f"mask shape {tuple(mask.shape)} does not match (B={x.shape[0]}, {self.cfg.n_leads})"
            )
        if not bool(mask.any(dim=1).all()):
            raise ValueError("no valid leads: a mask row is all false")
        tokens = self.backbone(x)
        return self.head(tokens, mask, return_weights=return_weights)


def count_parameters(cfg: ModelConfig) -> int:
    """Number of learnable scalars of the model built from ``cfg``."""
    model = MDARsn(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)
