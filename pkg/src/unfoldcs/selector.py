"""Per-stage execute/skip gating conditioned on features and a cost multiplier.

A squeeze-style head turns stage features into two-way logits; the Gumbel
softmax trick hardens them into one-hot execute/skip decisions while keeping
the soft probabilities differentiable (hard forward, soft backward). The
controllable unit scales and shifts the head's input features from a binary
encoding of the Lagrange multiplier, which is how a user steers the
quality/compute tradeoff at test time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DomainError, NumericError

MU_PRESETS = (0.00001, 0.00005, 0.0001, 0.0005, 0.001, 0.002)
ENCODING_DIM = 6


def encode_mu(mu: float, encoding_dim: int = ENCODING_DIM) -> np.ndarray:
    """One-hot encoding of a preset multiplier; the largest preset maps to the
    highest-order bit (index 0), the smallest to the lowest-order bit."""
    presets = MU_PRESETS
    if encoding_dim != len(presets):
        raise DomainError(f"no preset table for encoding_dim {encoding_dim}")
    for i, value in enumerate(presets):
        if np.isclose(mu, value, rtol=1e-9, atol=0.0):
            enc = np.zeros(encoding_dim, dtype=np.float64)
            enc[encoding_dim - 1 - i] = 1.0
            return enc
    raise DomainError(f"mu {mu} is not one of the presets {presets}")


@dataclass(frozen=True)
class ModulationInput:
    """Lagrange multiplier plus the binary vector fed to the controllable unit."""

    mu: float
    encoding: np.ndarray

    @classmethod
    def from_mu(cls, mu: float, encoding_dim: int = ENCODING_DIM) -> "ModulationInput":
        return cls(mu=float(mu), encoding=encode_mu(mu, encoding_dim))

    @classmethod
    def from_encoding(cls, bits, mu: float = 0.0) -> "ModulationInput":
        enc = np.asarray(bits, dtype=np.float64)
        if enc.ndim != 1:
            raise DomainError(f"encoding must be a flat bit vector, got shape {enc.shape}")
        if not np.all((enc == 0) | (enc == 1)):
            raise DomainError("encoding entries must be 0 or 1")
        return cls(mu=float(mu), encoding=enc)


@dataclass(frozen=True)
class GateDecision:
    """Hardened execute/skip pairs for one stage of one image."""

    h_g: np.ndarray  # (2,), one-hot in eval
    h_p: np.ndarray
    soft_g: np.ndarray  # (2,), sums to 1
    soft_p: np.ndarray
    stage_index: int

    @property
    def gdm_executed(self) -> bool:
        return bool(self.h_g[0] >= 0.5)

    @property
    def pmm_executed(self) -> bool:
        return bool(self.h_p[0] >= 0.5)


class GateTensors(NamedTuple):
    """Batched gate values for one stage: each tensor is (B, 2)."""

    h_g: torch.Tensor
    s_g: torch.Tensor
    h_p: torch.Tensor
    s_p: torch.Tensor


def sample_gumbel(shape, rng: torch.Generator | None = None,
                  dtype=torch.float64) -> torch.Tensor:
    u = torch.rand(shape, generator=rng, dtype=dtype)
    u = u.clamp_min(torch.finfo(dtype).tiny)  # rand may return exactly 0
    return -torch.log(-torch.log(u))


def gumbel_softmax(alpha: torch.Tensor, tau: float = 1.0, mode: str = "eval",
                   rng: torch.Generator | None = None,
                   noise: torch.Tensor | None = None):
    """Harden two-way logits into a one-hot decision.

    Returns (hard, soft). In train mode Gumbel(0,1) noise perturbs the logits
    (pass ``noise`` to freeze it); in eval the decision is the plain argmax.
    ``hard`` carries straight-through gradients: its value is one-hot but its
    gradient w.r.t. ``alpha`` equals that of ``soft``. Ties go to index 0.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    if not torch.isfinite(alpha).all():
        raise NumericError("non-finite selector logits")
    if mode == "train":
        if noise is None:
            noise = sample_gumbel(alpha.shape, rng=rng, dtype=alpha.dtype)
        logits = (alpha + noise.to(alpha.dtype)) / tau
    elif mode == "eval":
        logits = alpha / tau
    else:
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    soft = F.softmax(logits, dim=-1)
    index = (soft[..., 1] > soft[..., 0]).long()  # index 0 wins ties
    onehot = F.one_hot(index, num_classes=2).to(soft.dtype)
    hard = onehot + (soft - soft.detach())
    return hard, soft


class ControllableUnit(nn.Module):
    """Scale/shift modulation of conv features from the multiplier encoding.

    With ``controllable=False`` the affine pair is pinned to (1, 0) and only
    the convolution runs (the plain dynamic-path variant).
    """

    def __init__(self, channels: int, encoding_dim: int = ENCODING_DIM,
                 controllable: bool = True):
        super().__init__()
        self.controllable = controllable
        self.encoding_dim = encoding_dim
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        if controllable:
            self.fc1 = nn.Linear(encoding_dim, channels)
            self.fc2 = nn.Linear(encoding_dim, channels)

    def forward(self, x: torch.Tensor, encoding: torch.Tensor | None) -> torch.Tensor:
        feat = self.conv3(x)
        if not self.controllable:
            return feat
        if encoding is None or encoding.shape[-1] != self.encoding_dim:
            got = None if encoding is None else encoding.shape[-1]
            raise DomainError(f"encoding length {got} does not match {self.encoding_dim}")
        q = F.softplus(self.fc1(encoding))  # strictly positive scale
        p = self.fc2(encoding)
        return q[:, :, None, None] * feat + p[:, :, None, None]


class SelectorHeads(nn.Module):
    """Two gate heads over pooled features; the squeeze layer is shared."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc3 = nn.Linear(channels, channels // 4, bias=False)
        self.fc4 = nn.Linear(channels // 4, 2)  # gradient-module gate
        self.fc5 = nn.Linear(channels // 4, 2)  # proximal-module gate

    def logits(self, feat: torch.Tensor):
        pooled = feat.mean(dim=(-2, -1))
        z = F.relu(self.fc3(pooled))
        return self.fc4(z), self.fc5(z)

    def forward(self, feat: torch.Tensor, tau: float = 1.0, mode: str = "eval",
                rng: torch.Generator | None = None,
                noise: tuple[torch.Tensor, torch.Tensor] | None = None) -> GateTensors:
        alpha_g, alpha_p = self.logits(feat)
        noise_g, noise_p = noise if noise is not None else (None, None)
        h_g, s_g = gumbel_softmax(alpha_g, tau, mode, rng, noise_g)
        h_p, s_p = gumbel_softmax(alpha_p, tau, mode, rng, noise_p)
        return GateTensors(h_g, s_g, h_p, s_p)


class PathControllableSelector(nn.Module):
    """Controllable unit followed by the selector heads."""

    def __init__(self, channels: int, encoding_dim: int = ENCODING_DIM,
                 controllable: bool = True):
        super().__init__()
        self.cu = ControllableUnit(channels, encoding_dim, controllable)
        self.heads = SelectorHeads(channels)

    def forward(self, x: torch.Tensor, encoding: torch.Tensor | None,
                tau: float = 1.0, mode: str = "eval",
                rng: torch.Generator | None = None,
                noise: tuple[torch.Tensor, torch.Tensor] | None = None) -> GateTensors:
        return self.heads(self.cu(x, encoding), tau=tau, mode=mode, rng=rng, noise=noise)
