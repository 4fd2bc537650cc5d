"""Command-line entry point: train, finetune, eval, reconstruct, serve, export-matrix.

Every run that produces artifacts drops a resolved-config snapshot next to
them so it can be replayed exactly. Exit codes: 0 success, 1 usage/config
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import evaluation, training
from .errors import ConfigError, DomainError, NumericError, StateError
from .network import load_checkpoint
from .selector import MU_PRESETS, ModulationInput
from .sensing import DEFAULT_BLOCK_PIXELS, generate_phi, make_layout, sample, save_matrix

log = logging.getLogger(__name__)

DATA_DIR_ENV = "UNFOLDCS_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through our own code
    def error(self, message):
        raise UsageError(message)


def _load_config_file(path: str) -> dict:
    cfg_path = Path(path)
    if not cfg_path.is_file():
        raise UsageError(f"config file not found: {cfg_path}")
    try:
        return json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(
            f"malformed JSON in {cfg_path} at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}")


def _apply_overrides(payload: dict, overrides: list[str]) -> dict:
    seen = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key in seen and seen[key] != raw:
            raise UsageError(f"conflicting overrides for {key!r}: "
                             f"{seen[key]!r} vs {raw!r}")
        seen[key] = raw
        try:
            payload[key] = json.loads(raw)
        except json.JSONDecodeError:
            payload[key] = raw  # bare strings are fine unquoted
    return payload


def _resolve_data_dir(value: str | None) -> str:
    if value:
        return value
    env = os.environ.get(DATA_DIR_ENV, "")
    if env:
        return env
    raise UsageError(
        f"no dataset directory given and {DATA_DIR_ENV} is not set")


def _write_snapshot(out_dir: Path, config: training.TrainConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)


def _build_train_config(args) -> training.TrainConfig:
    payload = _load_config_file(args.config)
    payload = _apply_overrides(payload, args.set or [])
    if not payload.get("data_dir"):
        payload["data_dir"] = _resolve_data_dir(None)
    try:
        return training.TrainConfig.from_dict(payload)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc))


def _cmd_train(args) -> int:
    config = _build_train_config(args)
    _write_snapshot(Path(config.out_dir), config)
    _, _, ckpt = training.run_training(config)
    print(f"checkpoint written to {ckpt}")
    return 0


def _cmd_finetune(args) -> int:
    config = _build_train_config(args)
    _write_snapshot(Path(config.out_dir), config)
    runner = {"deblock": training.finetune_deblock,
              "noise": training.finetune_noise}[args.phase]
    _, _, ckpt = runner(args.ckpt, config)
    print(f"checkpoint written to {ckpt}")
    return 0


def _parse_ratios(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"bad ratio list: {text!r}")
    if not values:
        raise UsageError("empty ratio list")
    # accept either percentages (30) or fractions (0.3)
    return [v / 100.0 if v > 1.0 else v for v in values]


def _cmd_eval(args) -> int:
    data_root = Path(_resolve_data_dir(args.data))
    if not data_root.is_dir():
        raise UsageError(f"dataset directory not found: {data_root}")
    mu_values = list(MU_PRESETS) if args.mu_sweep else [args.mu]
    out_dir = Path(args.out)
    report = evaluation.run_benchmark(
        ckpt_dir=args.ckpt, dataset_dirs={data_root.name: data_root},
        ratios=_parse_ratios(args.ratios), mu_values=mu_values,
        out_dir=out_dir, stride=args.stride, limit=args.limit)
    snapshot = {"command": "eval", "ckpt": str(args.ckpt), "data": str(data_root),
                "ratios": args.ratios, "mu_values": mu_values,
                "stride": args.stride, "limit": args.limit}
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
    if report["absent_ratios"]:
        print(f"absent checkpoints for ratios: {report['absent_ratios']}")
    print(f"wrote {out_dir / 'benchmark.csv'} ({len(report['rows'])} rows)")
    return 0


def _cmd_reconstruct(args) -> int:
    if (args.mu is None) == (args.encoding is None):
        raise UsageError("provide exactly one of --mu / --encoding")
    model, meta = load_checkpoint(args.ckpt)
    phi = generate_phi(float(meta["ratio"]), n=meta["block_size"] ** 2,
                       seed=meta["phi_seed"])
    with Image.open(args.image) as img:
        image = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    stride = args.stride if args.stride is not None else meta["stride"]
    layout = make_layout(*image.shape, meta["block_size"], stride)
    meas = sample(image, phi, layout)
    if model.controllable:
        mod = (ModulationInput.from_mu(args.mu, model.encoding_dim)
               if args.mu is not None
               else ModulationInput.from_encoding(
                   [int(ch) for ch in args.encoding]))
    else:
        mod = None
    recon, trace = model.recover(meas, phi, mu=mod)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.clip(np.rint(recon * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="L").save(out_path, format="PNG")
    summary = {"output": str(out_path),
               "psnr_db": evaluation.psnr(image, np.clip(recon, 0.0, 1.0)),
               "n_am": [trace.n_am_g, trace.n_am_p],
               "dynamic_gflops": trace.dynamic_flops / 1e9,
               "static_gflops": trace.static_flops / 1e9}
    with open(out_path.with_suffix(".json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(args.ckpt_dir, max_pixels=args.max_pixels)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def _cmd_export_matrix(args) -> int:
    phi = generate_phi(args.ratio if args.ratio <= 1.0 else args.ratio / 100.0,
                       n=args.n, seed=args.seed)
    written = save_matrix(phi, args.out)
    print(f"wrote {written} ({phi.m}x{phi.n}, seed {phi.seed})")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="unfoldcs",
                     description="block-based compressive sensing reconstruction "
                                 "with controllable per-stage path skipping")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="main training phase")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config field")
    p_train.set_defaults(func=_cmd_train)

    p_ft = sub.add_parser("finetune", help="deblocking or noise finetune")
    p_ft.add_argument("--phase", required=True, choices=["deblock", "noise"])
    p_ft.add_argument("--ckpt", required=True)
    p_ft.add_argument("--config", required=True)
    p_ft.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_ft.set_defaults(func=_cmd_finetune)

    p_eval = sub.add_parser("eval", help="benchmark a checkpoint directory")
    p_eval.add_argument("--ckpt", required=True, help="checkpoint directory")
    p_eval.add_argument("--data", default=None)
    p_eval.add_argument("--ratios", default="30")
    p_eval.add_argument("--mu-sweep", action="store_true")
    p_eval.add_argument("--mu", type=float, default=MU_PRESETS[3])
    p_eval.add_argument("--stride", type=int, default=None)
    p_eval.add_argument("--limit", type=int, default=None)
    p_eval.add_argument("--out", default="eval_out")
    p_eval.set_defaults(func=_cmd_eval)

    p_rec = sub.add_parser("reconstruct", help="reconstruct one image")
    p_rec.add_argument("--ckpt", required=True)
    p_rec.add_argument("--image", required=True)
    p_rec.add_argument("--mu", type=float, default=None)
    p_rec.add_argument("--encoding", default=None,
                       help="bit string such as 010100")
    p_rec.add_argument("--stride", type=int, default=None)
    p_rec.add_argument("--out", default="reconstruction.png")
    p_rec.set_defaults(func=_cmd_reconstruct)

    p_serve = sub.add_parser("serve", help="run the HTTP reconstruction service")
    p_serve.add_argument("--ckpt-dir", required=True)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8008)
    p_serve.add_argument("--max-pixels", type=int, default=4_000_000)
    p_serve.set_defaults(func=_cmd_serve)

    p_mat = sub.add_parser("export-matrix", help="write a sampling matrix to disk")
    p_mat.add_argument("--ratio", type=float, required=True)
    p_mat.add_argument("--seed", type=int, default=0)
    p_mat.add_argument("--n", type=int, default=DEFAULT_BLOCK_PIXELS)
    p_mat.add_argument("--out", required=True)
    p_mat.set_defaults(func=_cmd_export_matrix)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, args.log_level))
    torch.manual_seed(0)
    np.random.seed(0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except (StateError, NumericError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("unhandled failure")
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
