"""Analytic FLOPs and parameter accounting for the unrolled network.

Convention: one multiply-accumulate counts as 2 FLOPs; biases, activations
and pooling are ignored. Convolution costs are charged on the padded canvas.
The per-stage selector cost appears twice (one path-selector head gates the
gradient module, one gates the proximal module).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class FlopsModel:
    h_pad: int
    w_pad: int
    channels: int
    m: int
    n: int
    num_blocks: int
    stages: int
    encoding_dim: int = 6

    def gdm_flops(self) -> float:
        # two m x n matrix products per block: phi x and phi^T residual
        return 2.0 * 2 * self.m * self.n * self.num_blocks

    def pmm_flops(self) -> float:
        # six 3x3 C->C convolutions
        c = self.channels
        return 2.0 * 6 * (9 * c * c) * self.h_pad * self.w_pad

    def cu_flops(self) -> float:
        c = self.channels
        conv = 2.0 * (9 * c * c) * self.h_pad * self.w_pad
        fcs = 2.0 * 2 * self.encoding_dim * c
        return conv + fcs

    def ps_flops(self) -> float:
        c = self.channels
        return 2.0 * (c * (c // 4) + 2 * ((c // 4) * 2))

    def stage_static_flops(self) -> float:
        return (self.gdm_flops() + self.pmm_flops()
                + self.cu_flops() + 2 * self.ps_flops())

    def static_total(self) -> float:
        return self.stages * self.stage_static_flops()

    def dynamic_total(self, gdm_executed, pmm_executed) -> float:
        """Cost actually spent given per-stage execute flags.

        Skipped residual branches cost nothing; the selector and controllable
        unit always run.
        """
        g = np.asarray(gdm_executed, dtype=float)
        p = np.asarray(pmm_executed, dtype=float)
        if g.shape != (self.stages,) or p.shape != (self.stages,):
            raise DomainError(
                f"expected {self.stages} execute flags per branch, "
                f"got {g.shape} and {p.shape}")
        overhead = self.stages * (self.cu_flops() + 2 * self.ps_flops())
        return float(g.sum() * self.gdm_flops() + p.sum() * self.pmm_flops() + overhead)

    # parameter counts under the documented bias conventions:
    # proximal module entry/exit convs bias-free, residual-block convs biased;
    # selector fc3 bias-free, its two heads biased; CU conv bias-free, FCs biased.

    def gdm_params(self) -> int:
        return 1  # the step size

    def pmm_params(self) -> int:
        c = self.channels
        return 2 * (9 * c * c) + 4 * (9 * c * c + c)

    def cu_params(self) -> int:
        c = self.channels
        return 9 * c * c + 2 * (self.encoding_dim * c + c)

    def ps_params(self) -> int:
        c = self.channels
        return c * (c // 4) + 2 * ((c // 4) * 2 + 2)
