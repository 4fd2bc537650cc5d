"""HTTP reconstruction service: the backend a tradeoff-explorer client drives.

Models are loaded once at startup and shared read-only across requests; every
endpoint is deterministic per (image, ratio, encoding) so a slider UI can rely
on byte-identical replies. Request latency travels in the X-Latency-Ms header,
keeping response bodies reproducible.
"""

from __future__ import annotations

import base64
import io
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel

from .errors import DomainError, NumericError
from .evaluation import psnr, ssim
from .network import load_checkpoint, scan_checkpoints
from .selector import MU_PRESETS, ModulationInput
from .sensing import generate_phi, make_layout, sample

DEFAULT_MAX_PIXELS = 4_000_000


class ReconstructRequest(BaseModel):
    image: str | list[list[float]]
    ratio: float
    mu: float | None = None
    encoding: list[int] | None = None
    return_truth_metrics: bool = False


class ReconstructResponse(BaseModel):
    reconstruction: str
    psnr_db: float | None = None
    ssim: float | None = None
    path_mask: list[list[bool]]
    n_am: list[int]
    dynamic_gflops: float
    static_gflops: float
    model_id: str


class _ServedModel:
    def __init__(self, path: Path):
        self.model, self.meta = load_checkpoint(path)
        self.model.eval()
        self.phi = generate_phi(float(self.meta["ratio"]),
                                n=self.meta["block_size"] ** 2,
                                seed=self.meta["phi_seed"])
        self.model_id = path.stem

    @property
    def ratio(self) -> float:
        return round(float(self.meta["ratio"]), 6)


def _decode_image(payload, max_pixels: int) -> np.ndarray:
    if isinstance(payload, str):
        try:
            raw = base64.b64decode(payload, validate=True)
            with Image.open(io.BytesIO(raw)) as img:
                img = img.convert("L")
                if img.width * img.height > max_pixels:
                    raise HTTPException(413, detail=(
                        f"image has {img.width * img.height} pixels; "
                        f"cap is {max_pixels}"))
                arr = np.asarray(img, dtype=np.float64) / 255.0
        except HTTPException:
            raise
        except (ValueError, UnidentifiedImageError, OSError) as exc:
            raise HTTPException(400, detail=f"undecodable image payload: {exc}")
    else:
        arr = np.asarray(payload, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise HTTPException(400, detail="raw image must be a non-empty 2-D array")
        if arr.size > max_pixels:
            raise HTTPException(413, detail=(
                f"image has {arr.size} pixels; cap is {max_pixels}"))
        if not np.isfinite(arr).all():
            raise HTTPException(400, detail="raw image contains non-finite values")
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def _encode_png(image: np.ndarray) -> str:
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(quantized, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(ckpt_dir: str | Path, max_pixels: int = DEFAULT_MAX_PIXELS,
               stride: int | None = None) -> FastAPI:
    app = FastAPI(title="unfoldcs reconstruction service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    served: dict[float, _ServedModel] = {}
    for _ratio, path in scan_checkpoints(ckpt_dir).items():
        sm = _ServedModel(path)
        served[sm.ratio] = sm

    def require_models() -> dict[float, _ServedModel]:
        if not served:
            raise HTTPException(503, detail=f"no model checkpoints under {ckpt_dir}")
        return served

    @app.get("/presets")
    def presets():
        models = require_models()
        any_model = next(iter(models.values()))
        return {"ratios": sorted(models),
                "mu_values": list(MU_PRESETS),
                "K": any_model.model.num_stages,
                "C": any_model.model.channels,
                "model_ids": {f"{r:g}": m.model_id for r, m in sorted(models.items())}}

    @app.post("/reconstruct", response_model=ReconstructResponse,
              response_model_exclude_none=True)
    def reconstruct(req: ReconstructRequest, response: Response):
        t0 = time.perf_counter()
        models = require_models()
        sm = models.get(round(float(req.ratio), 6))
        if sm is None:
            raise HTTPException(400, detail=(
                f"unknown ratio {req.ratio:g}; served: {sorted(models)}"))
        if (req.mu is None) == (req.encoding is None):
            raise HTTPException(400, detail="provide exactly one of mu / encoding")
        try:
            if req.mu is not None:
                mod = ModulationInput.from_mu(req.mu, sm.model.encoding_dim)
            else:
                mod = ModulationInput.from_encoding(req.encoding)
                if mod.encoding.size != sm.model.encoding_dim:
                    raise DomainError(
                        f"encoding must have {sm.model.encoding_dim} bits, "
                        f"got {mod.encoding.size}")
        except DomainError as exc:
            raise HTTPException(400, detail=str(exc))

        image = _decode_image(req.image, max_pixels)
        eval_stride = stride if stride is not None else sm.meta["stride"]
        try:
            layout = make_layout(*image.shape, sm.meta["block_size"], eval_stride)
        except DomainError as exc:
            raise HTTPException(400, detail=str(exc))
        meas = sample(image, sm.phi, layout)
        try:
            recon, trace = sm.model.recover(
                meas, sm.phi, mu=mod if sm.model.controllable else None)
        except NumericError as exc:
            raise HTTPException(500, detail=(
                f"numeric failure at stage {exc.stage_index}"))

        payload = ReconstructResponse(
            reconstruction=_encode_png(recon),
            path_mask=[[d.gdm_executed, d.pmm_executed] for d in trace.decisions],
            n_am=[trace.n_am_g, trace.n_am_p],
            dynamic_gflops=trace.dynamic_flops / 1e9,
            static_gflops=trace.static_flops / 1e9,
            model_id=sm.model_id)
        if req.return_truth_metrics:
            try:
                payload.psnr_db = psnr(image, np.clip(recon, 0.0, 1.0))
                payload.ssim = ssim(image, np.clip(recon, 0.0, 1.0))
            except DomainError as exc:
                raise HTTPException(400, detail=str(exc))
        response.headers["X-Latency-Ms"] = f"{(time.perf_counter() - t0) * 1e3:.1f}"
        return payload

    return app
