"""Training loop: luminance block pipeline, multiplier-conditioned loss, finetunes.

The main phase trains on single blocks; the deblocking finetune switches to
larger crops sampled through the overlapping unfold so stage updates see the
same block geometry used at inference. The noise finetune perturbs the
measurements, not the pixels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DomainError, StateError
from .network import PathTrace, ReconNet, save_checkpoint, load_checkpoint
from .selector import GateTensors, MU_PRESETS, encode_mu
from .sensing import (DEFAULT_BLOCK_SIZE, DEFAULT_OVERLAP_STRIDE,
                      MeasurementMatrix, generate_phi, make_layout, unfold_batch)

log = logging.getLogger(__name__)

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TrainConfig:
    data_dir: str = ""
    out_dir: str = "runs"
    ratio: float = 0.3
    epochs_main: int = 400
    epochs_finetune: int = 10
    block_main: int = 33
    block_finetune: int = 99
    batch_size: int = 64
    K: int = 25
    C: int = 32
    mu_set: tuple = MU_PRESETS
    tau: float = 1.0
    optimizer_decay_rates: tuple = (0.9, 0.999)
    learning_rate: float = 1e-4
    noise_sigma_range: tuple = (0.0, 10.0)
    seed: int = 0
    phi_seed: int = 2023
    stride: int = DEFAULT_OVERLAP_STRIDE
    steps_per_epoch: int = 100
    controllable: bool = True

    def __post_init__(self):
        for name in ("epochs_main", "epochs_finetune", "block_main",
                     "block_finetune", "batch_size", "K", "C", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        mus = tuple(float(m) for m in self.mu_set)
        if any(m <= 0 for m in mus) or list(mus) != sorted(mus):
            raise ConfigError("mu_set must be strictly positive and sorted")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must be in (0, 1], got {self.ratio}")
        lo, hi = self.noise_sigma_range
        if not 0.0 <= lo <= hi:
            raise ConfigError(f"noise_sigma_range must satisfy 0 <= lo <= hi, got {self.noise_sigma_range}")
        object.__setattr__(self, "mu_set", mus)
        object.__setattr__(self, "optimizer_decay_rates",
                           tuple(float(b) for b in self.optimizer_decay_rates))
        object.__setattr__(self, "noise_sigma_range", (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mu_set"] = list(self.mu_set)
        out["optimizer_decay_rates"] = list(self.optimizer_decay_rates)
        out["noise_sigma_range"] = list(self.noise_sigma_range)
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LossReport:
    l_rec: float
    l_select: float
    total: float
    mu_used: float


def _to_luminance(img: Image.Image) -> np.ndarray:
    if len(img.getbands()) == 1:
        return np.asarray(img, dtype=np.float64) / 255.0
    rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return rgb @ _LUMA_WEIGHTS


def load_named_luminance_images(image_dir: str | Path, min_size: int = 1,
                                ) -> list[tuple[str, np.ndarray]]:
    """Decode every image under a directory to a (name, [0,1] luminance) pair."""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise ConfigError(f"image directory not found: {image_dir}")
    out = []
    for path in sorted(p for p in image_dir.iterdir() if p.is_file()):
        try:
            with Image.open(path) as img:
                arr = _to_luminance(img)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping undecodable file %s: %s", path.name, exc)
            continue
        if min(arr.shape) < min_size:
            log.warning("skipping %s: smaller than %dpx", path.name, min_size)
            continue
        out.append((path.name, arr))
    return out


def load_luminance_images(image_dir: str | Path,
                          min_size: int = 1) -> list[np.ndarray]:
    return [arr for _, arr in load_named_luminance_images(image_dir, min_size)]


def dihedral(block: np.ndarray, variant: int) -> np.ndarray:
    """One of the 8 flip/rotation symmetries of a square block."""
    if not 0 <= variant < 8:
        raise DomainError(f"dihedral variant must be in [0, 8), got {variant}")
    block = np.rot90(block, variant % 4)
    if variant >= 4:
        block = block[:, ::-1]
    return np.ascontiguousarray(block)


def make_dataset(image_dir: str | Path, block_size: int, augment: bool = True,
                 seed: int = 0):
    """Endless stream of randomly cropped luminance blocks, seeded."""
    images = load_luminance_images(image_dir, min_size=block_size)
    if not images:
        raise ConfigError(f"no usable images of size >= {block_size} in {image_dir}")
    rng = np.random.default_rng(seed)
    while True:
        img = images[rng.integers(len(images))]
        i = rng.integers(img.shape[0] - block_size + 1)
        j = rng.integers(img.shape[1] - block_size + 1)
        crop = img[i:i + block_size, j:j + block_size]
        yield dihedral(crop, int(rng.integers(8))) if augment else crop.copy()


def batch_stream(dataset, batch_size: int):
    while True:
        yield np.stack([next(dataset) for _ in range(batch_size)])[:, None]


def loss_rec(truth: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean absolute error over the whole batch."""
    if truth.shape != recon.shape:
        raise DomainError(f"shape mismatch: {tuple(truth.shape)} vs {tuple(recon.shape)}")
    return (truth - recon).abs().mean()


def loss_select(trace) -> torch.Tensor | float:
    """Mean executed-branch count per stage, in [0, 2].

    Accepts a PathTrace (returns a float) or the per-stage gate tensors from
    a forward pass (returns a differentiable scalar: straight-through values
    keep the hard count in the forward value and route gradients through the
    soft probabilities).
    """
    if isinstance(trace, PathTrace):
        k = len(trace.decisions)
        return float(sum(d.h_g[0] + d.h_p[0] for d in trace.decisions) / k)
    gates: list[GateTensors] = list(trace)
    k = len(gates)
    per_sample = sum(g.h_g[:, 0] + g.h_p[:, 0] for g in gates) / k
    return per_sample.mean()


def _encoding_for_mu(mu: float, config: TrainConfig, model: ReconNet) -> np.ndarray:
    """One-hot encoding for the multiplier; rank-based for non-preset sets."""
    if mu == 0.0:
        return np.zeros(model.encoding_dim)
    try:
        return encode_mu(mu, model.encoding_dim)
    except DomainError:
        ranked = sorted(config.mu_set)
        matches = [i for i, v in enumerate(ranked) if np.isclose(v, mu)]
        if not matches or len(ranked) > model.encoding_dim:
            raise
        enc = np.zeros(model.encoding_dim)
        enc[model.encoding_dim - 1 - matches[0]] = 1.0
        return enc


def _mean_executed(gates: list[GateTensors]) -> tuple[float, float]:
    g = torch.stack([t.h_g[:, 0] for t in gates]).detach()
    p = torch.stack([t.h_p[:, 0] for t in gates]).detach()
    return float(g.sum(dim=0).mean()), float(p.sum(dim=0).mean())


def train_step(batch: np.ndarray, phi: MeasurementMatrix, model: ReconNet,
               optimizer: torch.optim.Optimizer, config: TrainConfig,
               rng: np.random.Generator, torch_gen: torch.Generator | None = None,
               mu: float | None = None, noise_sigma: float | None = None,
               ) -> tuple[LossReport, list[GateTensors]]:
    """One optimizer step on a batch of ground-truth blocks.

    mu defaults to a uniform draw from config.mu_set; pass an explicit value
    (including 0.0) to pin it. noise_sigma, if given, perturbs the
    measurements with Gaussian noise of that 8-bit-scale deviation.
    """
    if mu is None:
        mu = config.mu_set[int(rng.integers(len(config.mu_set)))]
    mu = float(mu)
    x = torch.as_tensor(batch, dtype=model.dtype)
    layout = make_layout(x.shape[-2], x.shape[-1], DEFAULT_BLOCK_SIZE,
                         min(config.stride, DEFAULT_BLOCK_SIZE))
    phi_t = torch.as_tensor(phi.matrix, dtype=model.dtype)
    y = unfold_batch(x, layout) @ phi_t.T
    if noise_sigma is not None and noise_sigma > 0:
        y = y + (noise_sigma / 255.0) * torch.randn(
            y.shape, generator=torch_gen, dtype=y.dtype)
    encoding = _encoding_for_mu(mu, config, model) if model.controllable else None

    optimizer.zero_grad()
    recon, gates = model(y, phi_t, layout, encoding=encoding, mode="train",
                         rng=torch_gen)
    l_r = loss_rec(x, recon)
    l_s = loss_select(gates)
    total = l_r + mu * l_s
    if not torch.isfinite(total):
        raise StateError(f"non-finite loss (l_rec={float(l_r)}, l_select={float(l_s)})")
    total.backward()
    optimizer.step()
    l_r_val, l_s_val = l_r.detach().item(), l_s.detach().item()
    report = LossReport(l_rec=l_r_val, l_select=l_s_val,
                        total=l_r_val + mu * l_s_val, mu_used=mu)
    return report, gates


def _make_optimizer(model: ReconNet, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                            betas=config.optimizer_decay_rates)


def _run_epochs(model, optimizer, phi, config, dataset, epochs, *, log_file=None,
                torch_gen=None, rng=None, noise_range=None, start_epoch=0):
    history = []
    batches = batch_stream(dataset, config.batch_size)
    for epoch in range(start_epoch, start_epoch + epochs):
        sums = {"l_rec": 0.0, "l_select": 0.0, "n_am_g": 0.0, "n_am_p": 0.0}
        mu_hist: dict[str, int] = {}
        for _ in range(config.steps_per_epoch):
            sigma = None
            if noise_range is not None:
                sigma = float(rng.uniform(noise_range[0], noise_range[1]))
            report, gates = train_step(next(batches), phi, model, optimizer,
                                       config, rng, torch_gen=torch_gen,
                                       noise_sigma=sigma)
            n_g, n_p = _mean_executed(gates)
            sums["l_rec"] += report.l_rec
            sums["l_select"] += report.l_select
            sums["n_am_g"] += n_g
            sums["n_am_p"] += n_p
            key = f"{report.mu_used:g}"
            mu_hist[key] = mu_hist.get(key, 0) + 1
        steps = config.steps_per_epoch
        entry = {"epoch": epoch,
                 "l_rec": sums["l_rec"] / steps,
                 "l_select": sums["l_select"] / steps,
                 "mean_n_am_g": sums["n_am_g"] / steps,
                 "mean_n_am_p": sums["n_am_p"] / steps,
                 "mu_histogram": mu_hist}
        history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
        log.info("epoch %d: l_rec=%.5f l_select=%.3f n_am=%.1f/%.1f",
                 epoch, entry["l_rec"], entry["l_select"],
                 entry["mean_n_am_g"], entry["mean_n_am_p"])
    return history


def run_training(config: TrainConfig, phi: MeasurementMatrix | None = None,
                 epochs: int | None = None) -> tuple[ReconNet, list[dict], Path]:
    """Main training phase; writes a per-epoch JSONL log and a checkpoint."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if phi is None:
        phi = generate_phi(config.ratio, n=DEFAULT_BLOCK_SIZE ** 2,
                           seed=config.phi_seed)
    model = ReconNet(stages=config.K, channels=config.C, tau=config.tau,
                     controllable=config.controllable)
    optimizer = _make_optimizer(model, config)
    dataset = make_dataset(config.data_dir, config.block_main, augment=True,
                           seed=config.seed)
    rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)
    with open(out_dir / "train_log.jsonl", "w") as log_file:
        history = _run_epochs(model, optimizer, phi, config, dataset,
                              epochs if epochs is not None else config.epochs_main,
                              log_file=log_file, torch_gen=torch_gen, rng=rng)
    ckpt = save_checkpoint(out_dir / "main.npz", model, ratio=config.ratio,
                           phi_seed=config.phi_seed,
                           block_size=DEFAULT_BLOCK_SIZE, stride=config.stride,
                           mu_set=config.mu_set,
                           training_config_hash=config.config_hash())
    return model, history, ckpt


def _finetune(ckpt_path: str | Path, config: TrainConfig, *, block_size: int,
              noise: bool, tag: str) -> tuple[ReconNet, list[dict], Path]:
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.is_file():
        raise StateError(f"checkpoint not found: {ckpt_path}")
    model, meta = load_checkpoint(ckpt_path)
    phi = generate_phi(float(meta["ratio"]), n=meta["block_size"] ** 2,
                       seed=meta["phi_seed"])
    torch.manual_seed(config.seed)
    optimizer = _make_optimizer(model, config)
    dataset = make_dataset(config.data_dir, block_size, augment=True,
                           seed=config.seed)
    rng = np.random.default_rng(config.seed)
    torch_gen = torch.Generator().manual_seed(config.seed)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"finetune_{tag}_log.jsonl", "w") as log_file:
        history = _run_epochs(
            model, optimizer, phi, config, dataset, config.epochs_finetune,
            log_file=log_file, torch_gen=torch_gen, rng=rng,
            noise_range=config.noise_sigma_range if noise else None)
    ckpt = save_checkpoint(out_dir / f"{tag}.npz", model,
                           ratio=float(meta["ratio"]), phi_seed=meta["phi_seed"],
                           block_size=meta["block_size"], stride=config.stride,
                           mu_set=config.mu_set,
                           training_config_hash=config.config_hash())
    return model, history, ckpt


def finetune_deblock(ckpt_path: str | Path,
                     config: TrainConfig) -> tuple[ReconNet, list[dict], Path]:
    """Continue training on larger crops seen through the overlapping unfold."""
    return _finetune(ckpt_path, config, block_size=config.block_finetune,
                     noise=False, tag="deblock")


def finetune_noise(ckpt_path: str | Path,
                   config: TrainConfig) -> tuple[ReconNet, list[dict], Path]:
    """Continue training with Gaussian measurement noise, sigma ~ U[lo, hi]/255."""
    return _finetune(ckpt_path, config, block_size=config.block_finetune,
                     noise=True, tag="noise")
