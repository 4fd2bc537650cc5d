import time

import numpy as np
import pytest
import torch
from PIL import Image

import unfoldcs as u
from unfoldcs.network import ReconNet
from unfoldcs.training import TrainConfig, run_training


def synth_image(rng: np.random.Generator, size: int = 80) -> np.ndarray:
    """Smooth synthetic test image: a few low-frequency waves plus a ramp."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 3.0, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        img += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * fx * xx + ph[0]) \
            * np.sin(2 * np.pi * fy * yy + ph[1])
    img += rng.uniform(0.5, 1.5) * xx + rng.uniform(-1, 1) * yy
    img -= img.min()
    return img / max(img.max(), 1e-9)


def save_gray(path, arr01: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(arr01 * 255), 0, 255).astype(np.uint8),
                    mode="L").save(path)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """20 training images and 4 held-out images, plus their arrays."""
    root = tmp_path_factory.mktemp("toydata")
    train_dir = root / "train"
    held_dir = root / "held"
    train_dir.mkdir()
    held_dir.mkdir()
    rng = np.random.default_rng(42)
    for i in range(20):
        save_gray(train_dir / f"t{i:02d}.png", synth_image(rng))
    held = []
    for i in range(4):
        img = synth_image(rng)
        save_gray(held_dir / f"h{i}.png", img)
        held.append(np.asarray(Image.open(held_dir / f"h{i}.png"),
                               dtype=np.float64) / 255.0)
    return {"train_dir": train_dir, "held_dir": held_dir, "held": held}


@pytest.fixture(scope="session")
def toy_run(toy_data, tmp_path_factory):
    """One shared toy training run (checkpoint + history + phi)."""
    out_dir = tmp_path_factory.mktemp("toyrun")
    config = TrainConfig(data_dir=str(toy_data["train_dir"]), out_dir=str(out_dir),
                         ratio=0.3, K=5, C=16, batch_size=8, steps_per_epoch=40,
                         epochs_main=5, learning_rate=1e-3, seed=0)
    t0 = time.perf_counter()
    model, history, ckpt = run_training(config)
    seconds = time.perf_counter() - t0
    phi = u.generate_phi(config.ratio, seed=config.phi_seed)
    return {"model": model, "history": history, "ckpt": ckpt, "phi": phi,
            "config": config, "out_dir": out_dir, "seconds": seconds}


@pytest.fixture()
def small_net():
    torch.manual_seed(7)
    return ReconNet(stages=3, channels=8)


@pytest.fixture()
def small_problem(small_net):
    phi = u.generate_phi(0.3, seed=1)
    rng = np.random.default_rng(3)
    img = rng.random((66, 50))
    layout = u.make_layout(*img.shape, 33, 16)
    meas = u.sample(img, phi, layout)
    return {"net": small_net, "phi": phi, "img": img, "layout": layout,
            "meas": meas}
