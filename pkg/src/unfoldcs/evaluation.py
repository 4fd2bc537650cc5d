"""Quality metrics, analytic compute accounting and the benchmark runner."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DomainError
from .flops import FlopsModel
from .network import PathTrace, load_checkpoint, scan_checkpoints
from .sensing import BlockLayout, generate_phi, make_layout, sample
from .training import load_named_luminance_images

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(truth: np.ndarray, recon: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for (near-)identical pairs."""
    truth = np.asarray(truth, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if truth.shape != recon.shape:
        raise DomainError(f"shape mismatch: {truth.shape} vs {recon.shape}")
    mse = float(np.mean((truth - recon) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    radius = (size - 1) // 2
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(truth: np.ndarray, recon: np.ndarray, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over the valid (fully-windowed) region.

    Gaussian-weighted 11x11 window, sigma 1.5, population statistics.
    """
    x = np.asarray(truth, dtype=np.float64)
    y = np.asarray(recon, dtype=np.float64)
    if x.shape != y.shape:
        raise DomainError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise DomainError(
            f"ssim needs 2-D images of at least {SSIM_WINDOW}px per side, got {x.shape}")
    win = _gaussian_window()

    def filt(img):
        return convolve2d(img, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class ImageResult:
    dataset: str
    image: str
    ratio: float
    mu: float | None
    psnr_db: float
    ssim: float
    n_am_g: float
    n_am_p: float
    dynamic_gflops: float
    static_gflops: float


@dataclass(frozen=True)
class MetricResult:
    """Aggregate over a (dataset, ratio, mu) cell; means of the per-image rows."""

    psnr_db: float
    ssim: float
    n_am_g: float
    n_am_p: float
    dynamic_gflops: float
    static_gflops: float
    per_image: list[ImageResult]

    @classmethod
    def from_rows(cls, rows: list[ImageResult]) -> "MetricResult":
        def mean(attr):
            return float(np.mean([getattr(r, attr) for r in rows]))
        return cls(psnr_db=mean("psnr_db"), ssim=mean("ssim"),
                   n_am_g=mean("n_am_g"), n_am_p=mean("n_am_p"),
                   dynamic_gflops=mean("dynamic_gflops"),
                   static_gflops=mean("static_gflops"), per_image=rows)


def flops_report(trace: PathTrace, layout: BlockLayout, ratio: float,
                 channels: int, encoding_dim: int = 6) -> tuple[float, float]:
    """Recompute (static, dynamic) FLOPs for a trace from first principles."""
    n = layout.block_pixels
    model = FlopsModel(h_pad=layout.padded_h, w_pad=layout.padded_w,
                       channels=channels, m=int(np.floor(ratio * n)), n=n,
                       num_blocks=layout.num_blocks,
                       stages=len(trace.decisions), encoding_dim=encoding_dim)
    return model.static_total(), model.dynamic_total(trace.gdm_mask, trace.pmm_mask)


CSV_COLUMNS = ("dataset", "image", "ratio", "mu", "psnr_db", "ssim",
               "n_am_g", "n_am_p", "dynamic_gflops", "static_gflops")


def _row_dict(r: ImageResult) -> dict:
    d = asdict(r)
    d["mu"] = "" if r.mu is None else f"{r.mu:g}"
    return d


def run_benchmark(ckpt_dir: str | Path, dataset_dirs: dict[str, str | Path],
                  ratios, mu_values, out_dir: str | Path,
                  stride: int | None = None, limit: int | None = None) -> dict:
    """Evaluate every (dataset, ratio, mu) cell; write CSV and JSON tables.

    Ratios without a matching checkpoint are recorded as absent and skipped.
    Whole images are reconstructed through the overlapping unfold/fold path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    available = scan_checkpoints(ckpt_dir)
    rows: list[ImageResult] = []
    aggregates: list[dict] = []
    absent: list[float] = []
    for ratio in ratios:
        ckpt = available.get(round(float(ratio), 6))
        if ckpt is None:
            absent.append(float(ratio))
            continue
        model, meta = load_checkpoint(ckpt)
        phi = generate_phi(float(meta["ratio"]), n=meta["block_size"] ** 2,
                           seed=meta["phi_seed"])
        eval_stride = stride if stride is not None else meta["stride"]
        mus = list(mu_values) if meta["controllable"] else [None]
        for ds_name, ds_dir in dataset_dirs.items():
            named = load_named_luminance_images(ds_dir, min_size=meta["block_size"])
            if limit is not None:
                named = named[:limit]
            for mu in mus:
                cell: list[ImageResult] = []
                for name, img in named:
                    layout = make_layout(*img.shape, meta["block_size"], eval_stride)
                    meas = sample(img, phi, layout)
                    recon, trace = model.recover(meas, phi, mu=mu)
                    cell.append(ImageResult(
                        dataset=ds_name, image=name, ratio=float(meta["ratio"]),
                        mu=mu, psnr_db=psnr(img, recon), ssim=ssim(img, recon),
                        n_am_g=trace.n_am_g, n_am_p=trace.n_am_p,
                        dynamic_gflops=trace.dynamic_flops / 1e9,
                        static_gflops=trace.static_flops / 1e9))
                rows.extend(cell)
                agg = MetricResult.from_rows(cell)
                aggregates.append({
                    "dataset": ds_name, "image": "(mean)",
                    "ratio": float(meta["ratio"]),
                    "mu": "" if mu is None else f"{mu:g}",
                    "psnr_db": agg.psnr_db, "ssim": agg.ssim,
                    "n_am_g": agg.n_am_g, "n_am_p": agg.n_am_p,
                    "dynamic_gflops": agg.dynamic_gflops,
                    "static_gflops": agg.static_gflops})
    csv_path = out_dir / "benchmark.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow(_row_dict(r))
        for agg in aggregates:
            writer.writerow(agg)
    report = {"rows": [_row_dict(r) for r in rows], "aggregates": aggregates,
              "absent_ratios": absent}
    with open(out_dir / "benchmark.json", "w") as fh:
        json.dump(report, fh, indent=2)
    return report
