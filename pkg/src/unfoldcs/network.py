"""K-stage unrolled proximal-gradient reconstruction network with gated stages.

Each stage carries a C-channel feature tensor whose channel 0 is the current
image estimate. A stage applies a gated gradient-descent update (block-wise
measurement consistency) followed by a gated convolutional proximal mapping;
the per-stage selector decides whether each residual branch runs. Skipped
branches are exact passthroughs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DomainError, NumericError
from .flops import FlopsModel
from .selector import (ENCODING_DIM, GateDecision, GateTensors, ModulationInput,
                       PathControllableSelector)
from .sensing import (BlockLayout, MeasurementMatrix, Measurements, fold_batch,
                      unfold_batch)

CHECKPOINT_FORMAT_VERSION = 1


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv_a = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv_b = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv_b(F.relu(self.conv_a(x)))


class ProximalMapper(nn.Module):
    """Residual branch of the proximal stage: conv, two residual blocks, conv.

    Entry/exit convolutions are bias-free; the residual blocks keep biases.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.rb1 = ResidualBlock(channels)
        self.rb2 = ResidualBlock(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, r):
        return self.conv2(self.rb2(self.rb1(self.conv1(r))))


class Stage(nn.Module):
    def __init__(self, channels: int, encoding_dim: int, controllable: bool):
        super().__init__()
        self.rho = nn.Parameter(torch.tensor(1.0))
        self.pmm = ProximalMapper(channels)
        self.selector = PathControllableSelector(channels, encoding_dim, controllable)


@dataclass(frozen=True)
class PathTrace:
    """Per-image record of gate decisions and the compute they imply."""

    decisions: list[GateDecision]
    n_am_g: int
    n_am_p: int
    dynamic_flops: float
    static_flops: float

    @property
    def gdm_mask(self) -> np.ndarray:
        return np.array([d.gdm_executed for d in self.decisions], dtype=bool)

    @property
    def pmm_mask(self) -> np.ndarray:
        return np.array([d.pmm_executed for d in self.decisions], dtype=bool)


def gradient_step(x: torch.Tensor, y_blocks: torch.Tensor, phi_matrix: torch.Tensor,
                  layout: BlockLayout) -> torch.Tensor:
    """Block-wise back-projected residual: fold(phi^T (y - phi unfold(x)))."""
    blocks = unfold_batch(x, layout)
    residual = y_blocks - blocks @ phi_matrix.T
    return fold_batch(residual @ phi_matrix, layout)


def _forced_pair(spec, batch: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    pair = torch.as_tensor(spec, dtype=dtype)
    if pair.shape != (2,):
        raise DomainError(f"forced gate must be a pair, got shape {tuple(pair.shape)}")
    hard = pair.expand(batch, 2).clone()
    total = hard.sum(dim=-1, keepdim=True).clamp(min=1.0)
    return hard, hard / total


def _resolve_override(gate_override, k: int, batch: int, dtype) -> GateTensors:
    if gate_override == "execute":
        spec_g = spec_p = (1.0, 1.0)
    elif gate_override == "skip":
        spec_g = spec_p = (0.0, 1.0)
    else:
        spec_g, spec_p = gate_override[k]
    h_g, s_g = _forced_pair(spec_g, batch, dtype)
    h_p, s_p = _forced_pair(spec_p, batch, dtype)
    return GateTensors(h_g, s_g, h_p, s_p)


class ReconNet(nn.Module):
    """The full unrolled reconstruction network.

    ``controllable=True`` conditions every stage selector on the multiplier
    encoding; ``False`` is the plain dynamic-path variant.
    """

    def __init__(self, stages: int = 25, channels: int = 32,
                 encoding_dim: int = ENCODING_DIM, controllable: bool = True,
                 tau: float = 1.0, dtype: torch.dtype = torch.float64):
        super().__init__()
        if channels % 4 != 0:
            raise DomainError(f"channels must be divisible by 4, got {channels}")
        self.num_stages = stages
        self.channels = channels
        self.encoding_dim = encoding_dim
        self.controllable = controllable
        self.tau = tau
        self.init_conv = nn.Conv2d(1, channels - 1, 3, padding=1)
        self.stages = nn.ModuleList(
            Stage(channels, encoding_dim, controllable) for _ in range(stages))
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.init_conv.weight.dtype

    def init_features(self, x0: torch.Tensor) -> torch.Tensor:
        """Concatenate the image estimate with learned feature channels."""
        return torch.cat([x0, self.init_conv(x0)], dim=1)

    def _encoding_batch(self, encoding, batch: int) -> torch.Tensor | None:
        if not self.controllable:
            return None
        if encoding is None:
            raise DomainError("controllable network requires a multiplier encoding")
        enc = torch.as_tensor(np.asarray(encoding), dtype=self.dtype)
        if enc.ndim == 1:
            enc = enc.expand(batch, -1)
        return enc

    def forward(self, y_blocks: torch.Tensor, phi_matrix: torch.Tensor,
                layout: BlockLayout, encoding=None, mode: str = "eval",
                rng: torch.Generator | None = None, frozen_noise=None,
                gate_mode: str = "hard", gate_override=None):
        """Run the unrolled stages; returns (reconstruction, per-stage gates).

        ``gate_mode='soft'`` multiplies by the soft probabilities instead of
        the hardened one-hots (used for smooth gradient checks); the default
        straight-through hard gating is exact one-hot in the forward value.
        ``gate_override`` bypasses the selectors with forced pairs:
        'execute', 'skip', or a length-K list of ((g1,g2),(p1,p2)).
        """
        if mode not in ("train", "eval"):
            raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
        if gate_mode not in ("hard", "soft"):
            raise DomainError(f"gate_mode must be 'hard' or 'soft', got {gate_mode!r}")
        batch = y_blocks.shape[0]
        enc = self._encoding_batch(encoding, batch)
        x0 = fold_batch(y_blocks @ phi_matrix, layout)
        feats = self.init_features(x0)
        eager = mode == "train"  # residual branches must run for gradient flow
        gates_per_stage: list[GateTensors] = []
        for k, stage in enumerate(self.stages):
            if gate_override is not None:
                gates = _resolve_override(gate_override, k, batch, self.dtype)
            else:
                noise = frozen_noise[k] if frozen_noise is not None else None
                gates = stage.selector(feats, enc, tau=self.tau, mode=mode,
                                       rng=rng, noise=noise)
            g_gate = gates.s_g if gate_mode == "soft" else gates.h_g
            p_gate = gates.s_p if gate_mode == "soft" else gates.h_p

            x_prev, carried = feats[:, :1], feats[:, 1:]
            if not eager and bool((g_gate[:, 0] == 0).all()):
                r = x_prev
            else:
                grad = stage.rho * gradient_step(x_prev, y_blocks, phi_matrix, layout)
                r = g_gate[:, 0, None, None, None] * grad \
                    + g_gate[:, 1, None, None, None] * x_prev
            pre_prox = torch.cat([r, carried], dim=1)

            if not eager and bool((p_gate[:, 0] == 0).all()):
                feats = pre_prox
            else:
                branch = stage.pmm(pre_prox)
                feats = p_gate[:, 0, None, None, None] * branch \
                    + p_gate[:, 1, None, None, None] * pre_prox
            if not torch.isfinite(feats).all():
                raise NumericError(f"non-finite features after stage {k}", stage_index=k)
            gates_per_stage.append(gates)
        return feats[:, :1], gates_per_stage

    def recover(self, meas: Measurements, phi: MeasurementMatrix,
                mu: ModulationInput | float | None = None, mode: str = "eval",
                rng: torch.Generator | None = None,
                gate_override=None) -> tuple[np.ndarray, PathTrace]:
        """Reconstruct one image from its measurements.

        Eval mode is deterministic (no gate noise). Returns the image and the
        path trace of gate decisions with static/dynamic FLOPs tallies.
        """
        if isinstance(mu, (int, float)):
            mu = ModulationInput.from_mu(float(mu), self.encoding_dim)
        encoding = mu.encoding if mu is not None else None
        y = torch.as_tensor(meas.per_block, dtype=self.dtype)[None]
        phi_t = torch.as_tensor(phi.matrix, dtype=self.dtype)
        with torch.no_grad():
            recon, gates = self.forward(y, phi_t, meas.layout, encoding=encoding,
                                        mode=mode, rng=rng, gate_override=gate_override)
        trace = self.build_trace(gates, meas.layout, phi)
        return recon[0, 0].numpy(), trace

    def build_trace(self, gates: list[GateTensors], layout: BlockLayout,
                    phi: MeasurementMatrix, sample_index: int = 0) -> PathTrace:
        decisions = []
        for k, g in enumerate(gates):
            decisions.append(GateDecision(
                h_g=g.h_g[sample_index].detach().numpy().copy(),
                h_p=g.h_p[sample_index].detach().numpy().copy(),
                soft_g=g.s_g[sample_index].detach().numpy().copy(),
                soft_p=g.s_p[sample_index].detach().numpy().copy(),
                stage_index=k))
        model = self.flops_model(layout, phi)
        g_mask = np.array([d.gdm_executed for d in decisions])
        p_mask = np.array([d.pmm_executed for d in decisions])
        return PathTrace(decisions=decisions,
                         n_am_g=int(g_mask.sum()), n_am_p=int(p_mask.sum()),
                         dynamic_flops=model.dynamic_total(g_mask, p_mask),
                         static_flops=model.static_total())

    def flops_model(self, layout: BlockLayout, phi: MeasurementMatrix) -> FlopsModel:
        return FlopsModel(h_pad=layout.padded_h, w_pad=layout.padded_w,
                          channels=self.channels, m=phi.m, n=phi.n,
                          num_blocks=layout.num_blocks, stages=self.num_stages,
                          encoding_dim=self.encoding_dim)


def save_checkpoint(path: str | Path, model: ReconNet, *, ratio: float,
                    phi_seed: int, block_size: int, stride: int,
                    mu_set=None, training_config_hash: str = "") -> Path:
    """Persist parameters as named float32 arrays with JSON metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: tensor.detach().numpy().astype(np.float32)
              for name, tensor in model.state_dict().items()}
    meta = {
        "K": model.num_stages,
        "C": model.channels,
        "ratio": ratio,
        "mu_set": list(mu_set) if mu_set is not None else [],
        "training_config_hash": training_config_hash,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoding_dim": model.encoding_dim,
        "controllable": model.controllable,
        "tau": model.tau,
        "phi_seed": phi_seed,
        "block_size": block_size,
        "stride": stride,
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def read_checkpoint_meta(path: str | Path) -> dict:
    with np.load(Path(path), allow_pickle=False) as data:
        return json.loads(str(data["__meta__"]))


def scan_checkpoints(ckpt_dir: str | Path) -> dict[float, Path]:
    """Map sampling ratio -> checkpoint path for every model under a directory."""
    ckpt_dir = Path(ckpt_dir)
    found: dict[float, Path] = {}
    if not ckpt_dir.is_dir():
        return found
    for path in sorted(ckpt_dir.glob("*.npz")):
        try:
            meta = read_checkpoint_meta(path)
        except (KeyError, ValueError, OSError):
            continue
        found[round(float(meta["ratio"]), 6)] = path
    return found


def load_checkpoint(path: str | Path,
                    dtype: torch.dtype = torch.float64) -> tuple[ReconNet, dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {name: data[name] for name in data.files if name != "__meta__"}
    model = ReconNet(stages=meta["K"], channels=meta["C"],
                     encoding_dim=meta["encoding_dim"],
                     controllable=meta["controllable"], tau=meta["tau"],
                     dtype=dtype)
    state = {name: torch.as_tensor(arr, dtype=dtype) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model, meta
