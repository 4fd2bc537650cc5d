"""Block-wise random sampling and overlapping unfold/fold.

The measurement operator is a row-orthogonal Gaussian matrix applied to
flattened image blocks. Images are reflect-padded so the block grid covers
them fully; overlapping blocks are averaged back together by ``fold`` using
a per-pixel multiplicity map, which is what suppresses blocking artifacts
at inference time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, StateError

DEFAULT_BLOCK_SIZE = 33
DEFAULT_BLOCK_PIXELS = DEFAULT_BLOCK_SIZE * DEFAULT_BLOCK_SIZE  # 1089
DEFAULT_OVERLAP_STRIDE = 16


@dataclass(frozen=True)
class MeasurementMatrix:
    """Row-orthogonal sampling operator for one CS ratio."""

    ratio: float
    n: int
    m: int
    matrix: np.ndarray  # (m, n), float64
    seed: int

    def max_orthogonality_deviation(self) -> float:
        gram = self.matrix @ self.matrix.T
        return float(np.abs(gram - np.eye(self.m)).max())


@dataclass(frozen=True)
class BlockLayout:
    """Geometry of the block grid covering one image."""

    block_size: int
    stride: int
    image_h: int
    image_w: int
    padded_h: int
    padded_w: int
    count_map: np.ndarray  # (padded_h, padded_w), float64, entries >= 1

    @property
    def blocks_per_col(self) -> int:
        return (self.padded_h - self.block_size) // self.stride + 1

    @property
    def blocks_per_row(self) -> int:
        return (self.padded_w - self.block_size) // self.stride + 1

    @property
    def num_blocks(self) -> int:
        return self.blocks_per_col * self.blocks_per_row

    @property
    def block_pixels(self) -> int:
        return self.block_size * self.block_size


def _padded_extent(size: int, block_size: int, stride: int) -> int:
    target = max(size, block_size)
    rem = (target - block_size) % stride
    return target if rem == 0 else target + (stride - rem)


def make_layout(image_h: int, image_w: int, block_size: int = DEFAULT_BLOCK_SIZE,
                stride: int | None = None) -> BlockLayout:
    """Build the smallest padded block grid covering an image_h x image_w image."""
    if stride is None:
        stride = block_size
    if block_size < 1 or stride < 1:
        raise DomainError(f"block_size and stride must be positive, got {block_size}, {stride}")
    if stride > block_size:
        raise DomainError(f"stride {stride} larger than block_size {block_size} leaves gaps")
    if image_h < 1 or image_w < 1:
        raise DomainError(f"image dimensions must be positive, got {image_h}x{image_w}")
    padded_h = _padded_extent(image_h, block_size, stride)
    padded_w = _padded_extent(image_w, block_size, stride)
    # reflect padding cannot exceed image extent - 1
    if padded_h - image_h >= image_h or padded_w - image_w >= image_w:
        raise DomainError(
            f"image {image_h}x{image_w} too small to reflect-pad to {padded_h}x{padded_w}")
    ones = torch.ones(1, 1, padded_h, padded_w, dtype=torch.float64)
    patches = F.unfold(ones, kernel_size=block_size, stride=stride)
    count = F.fold(patches, output_size=(padded_h, padded_w),
                   kernel_size=block_size, stride=stride)
    return BlockLayout(block_size=block_size, stride=stride,
                       image_h=image_h, image_w=image_w,
                       padded_h=padded_h, padded_w=padded_w,
                       count_map=count[0, 0].numpy())


@dataclass(frozen=True)
class Measurements:
    """Per-block measurements y = phi @ block for one image."""

    per_block: np.ndarray  # (num_blocks, m)
    layout: BlockLayout
    ratio: float


def generate_phi(ratio: float, n: int = DEFAULT_BLOCK_PIXELS, seed: int = 0) -> MeasurementMatrix:
    """Sample an i.i.d. Gaussian matrix and orthonormalize its rows.

    The number of rows is floor(ratio * n). Deterministic per (ratio, n, seed).
    """
    if not 0.0 < ratio <= 1.0:
        raise DomainError(f"ratio must lie in (0, 1], got {ratio}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    m = int(np.floor(ratio * n))
    if m < 1:
        raise DomainError(f"ratio {ratio} with n {n} yields zero measurements")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((m, n))
    # QR of the transpose gives orthonormal columns; sign-fix makes it canonical
    q, r = np.linalg.qr(gauss.T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    phi = (q * signs).T
    return MeasurementMatrix(ratio=ratio, n=n, m=m, matrix=phi, seed=seed)


def _as_batch(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        if image.ndim != 2:
            raise DomainError(f"expected H x W image, got shape {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    if image.ndim != 4:
        raise DomainError(f"expected (B, 1, H, W) tensor, got shape {tuple(image.shape)}")
    return image


def reflect_pad(x: torch.Tensor, layout: BlockLayout) -> torch.Tensor:
    pad_h = layout.padded_h - x.shape[-2]
    pad_w = layout.padded_w - x.shape[-1]
    if pad_h == 0 and pad_w == 0:
        return x
    if pad_h < 0 or pad_w < 0:
        raise DomainError(
            f"image {tuple(x.shape[-2:])} exceeds padded canvas "
            f"{layout.padded_h}x{layout.padded_w}")
    return F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")


def unfold_batch(x: torch.Tensor, layout: BlockLayout) -> torch.Tensor:
    """Reflect-pad (B, 1, H, W) and extract flattened blocks -> (B, L, n)."""
    if x.shape[-2] != layout.image_h or x.shape[-1] != layout.image_w:
        raise DomainError(
            f"image {tuple(x.shape[-2:])} does not match layout "
            f"{layout.image_h}x{layout.image_w}")
    padded = reflect_pad(x, layout)
    patches = F.unfold(padded, kernel_size=layout.block_size, stride=layout.stride)
    return patches.transpose(1, 2)  # (B, L, block_pixels), row-major within blocks


def fold_batch(blocks: torch.Tensor, layout: BlockLayout) -> torch.Tensor:
    """Sum (B, L, n) blocks onto the canvas, average overlaps, crop -> (B, 1, H, W)."""
    if blocks.shape[-2] != layout.num_blocks or blocks.shape[-1] != layout.block_pixels:
        raise DomainError(
            f"block stack {tuple(blocks.shape[-2:])} does not match layout "
            f"({layout.num_blocks}, {layout.block_pixels})")
    summed = F.fold(blocks.transpose(1, 2),
                    output_size=(layout.padded_h, layout.padded_w),
                    kernel_size=layout.block_size, stride=layout.stride)
    count = torch.from_numpy(layout.count_map).to(blocks.dtype)
    averaged = summed / count
    return averaged[..., :layout.image_h, :layout.image_w]


def unfold(image: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Extract the layout's blocks from an H x W image as a (num_blocks, n) stack."""
    return unfold_batch(_as_batch(image), layout)[0].numpy()


def fold(blocks: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Overlap-average a (num_blocks, n) block stack back into an H x W image."""
    if blocks.ndim != 2:
        raise DomainError(f"expected (num_blocks, n) stack, got shape {blocks.shape}")
    t = torch.from_numpy(np.ascontiguousarray(blocks, dtype=np.float64))[None]
    return fold_batch(t, layout)[0, 0].numpy()


def sample(image: np.ndarray, phi: MeasurementMatrix, layout: BlockLayout) -> Measurements:
    """Measure each block of the image: per_block[i] = phi @ block_i."""
    if phi.n != layout.block_pixels:
        raise DomainError(
            f"phi.n {phi.n} does not match layout block pixels {layout.block_pixels}")
    blocks = unfold(image, layout)
    return Measurements(per_block=blocks @ phi.matrix.T, layout=layout, ratio=phi.ratio)


def initialize(meas: Measurements, phi: MeasurementMatrix) -> np.ndarray:
    """Back-project measurements (phi^T y per block) and fold into an image."""
    if meas.per_block.shape != (meas.layout.num_blocks, phi.m):
        raise DomainError(
            f"measurements {meas.per_block.shape} do not match layout/phi "
            f"({meas.layout.num_blocks}, {phi.m})")
    # batched torch matmul, so a gated network that skips every stage returns
    # this initialization bit-for-bit
    y = torch.as_tensor(meas.per_block, dtype=torch.float64)[None]
    phi_t = torch.as_tensor(phi.matrix, dtype=torch.float64)
    return fold_batch(y @ phi_t, meas.layout)[0, 0].numpy()


def save_matrix(phi: MeasurementMatrix, path: str | Path) -> Path:
    """Write the raw float32 row-major matrix plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    phi.matrix.astype(np.float32).tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(
        {"ratio": phi.ratio, "n": phi.n, "m": phi.m, "seed": phi.seed}, indent=2))
    return path


def load_matrix(path: str | Path) -> MeasurementMatrix:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not path.is_file() or not sidecar.is_file():
        raise StateError(f"matrix file or sidecar missing for {path}")
    meta = json.loads(sidecar.read_text())
    raw = np.fromfile(path, dtype=np.float32)
    if raw.size != meta["m"] * meta["n"]:
        raise StateError(
            f"matrix payload holds {raw.size} values, sidecar says "
            f"{meta['m']}x{meta['n']}")
    matrix = raw.reshape(meta["m"], meta["n"]).astype(np.float64)
    return MeasurementMatrix(ratio=meta["ratio"], n=meta["n"], m=meta["m"],
                             matrix=matrix, seed=meta["seed"])
