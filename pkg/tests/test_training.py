import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

import unfoldcs as u
from unfoldcs.errors import ConfigError, DomainError, NumericError, StateError
from unfoldcs.network import PathTrace, ReconNet
from unfoldcs.selector import GateDecision, GateTensors
from unfoldcs.training import (LossReport, TrainConfig, batch_stream, dihedral,
                               finetune_deblock, finetune_noise, loss_rec,
                               loss_select, make_dataset, run_training,
                               train_step)

from conftest import save_gray


class TestTrainConfig:
    def test_defaults_match_training_protocol(self):
        cfg = TrainConfig()
        assert cfg.epochs_main == 400 and cfg.epochs_finetune == 10
        assert cfg.block_main == 33 and cfg.block_finetune == 99
        assert cfg.batch_size == 64 and cfg.K == 25 and cfg.C == 32
        assert cfg.mu_set == u.MU_PRESETS
        assert cfg.optimizer_decay_rates == (0.9, 0.999)
        assert cfg.learning_rate == 1e-4
        assert cfg.noise_sigma_range == (0.0, 10.0)

    @pytest.mark.parametrize("bad", [
        {"epochs_main": 0}, {"batch_size": -1}, {"K": 0}, {"C": 0},
        {"learning_rate": 0.0}, {"tau": 0.0}, {"ratio": 1.5},
        {"mu_set": (0.002, 0.001)}, {"mu_set": (0.0, 0.001)},
        {"noise_sigma_range": (5.0, 1.0)},
    ])
    def test_invalid_fields_rejected(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError) as err:
            TrainConfig.from_dict({"K": 5, "weight_decay": 0.1})
        assert "weight_decay" in str(err.value)

    def test_dict_round_trip_and_hash_stability(self):
        cfg = TrainConfig(K=5, C=16, seed=3)
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert again.config_hash() == cfg.config_hash()
        assert TrainConfig(K=6, C=16, seed=3).config_hash() != cfg.config_hash()


class TestDataset:
    def test_single_exact_block_no_augment(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (33, 33)).astype(np.uint8)
        Image.fromarray(img, mode="L").save(tmp_path / "one.png")
        stream = make_dataset(tmp_path, 33, augment=False, seed=0)
        block = next(stream)
        assert np.array_equal(block, img.astype(np.float64) / 255.0)

    def test_augment_covers_all_eight_symmetries(self, tmp_path):
        base = np.zeros((33, 33))
        base[0, 0] = 1.0
        base[0, 32] = 0.5  # asymmetric marker pattern
        save_gray(tmp_path / "asym.png", base)
        stream = make_dataset(tmp_path, 33, augment=True, seed=1)
        seen = {next(stream).tobytes() for _ in range(10_000)}
        expected = {dihedral(np.asarray(
            Image.open(tmp_path / "asym.png"), dtype=np.float64) / 255.0,
            t).tobytes() for t in range(8)}
        assert seen == expected

    def test_crops_stay_in_bounds(self, tmp_path):
        rng = np.random.default_rng(2)
        save_gray(tmp_path / "big.png", rng.random((180, 180)))
        stream = make_dataset(tmp_path, 99, augment=False, seed=0)
        for _ in range(50):
            block = next(stream)
            assert block.shape == (99, 99)
            assert np.isfinite(block).all()

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            next(make_dataset(tmp_path, 33, seed=0))

    def test_undecodable_file_skipped_with_warning(self, tmp_path, caplog):
        (tmp_path / "junk.png").write_text("not an image")
        save_gray(tmp_path / "ok.png", np.random.default_rng(0).random((40, 40)))
        with caplog.at_level("WARNING"):
            block = next(make_dataset(tmp_path, 33, seed=0))
        assert block.shape == (33, 33)
        assert any("junk.png" in rec.message for rec in caplog.records)

    def test_too_small_images_skipped(self, tmp_path, caplog):
        save_gray(tmp_path / "small.png", np.random.default_rng(0).random((20, 20)))
        with pytest.raises(ConfigError):
            with caplog.at_level("WARNING"):
                next(make_dataset(tmp_path, 33, seed=0))

    def test_deterministic_per_seed(self, tmp_path):
        rng = np.random.default_rng(3)
        for i in range(3):
            save_gray(tmp_path / f"i{i}.png", rng.random((64, 64)))
        s1 = make_dataset(tmp_path, 33, seed=7)
        s2 = make_dataset(tmp_path, 33, seed=7)
        s3 = make_dataset(tmp_path, 33, seed=8)
        run1 = [next(s1) for _ in range(10)]
        run2 = [next(s2) for _ in range(10)]
        run3 = [next(s3) for _ in range(10)]
        assert all(np.array_equal(x, y) for x, y in zip(run1, run2))
        assert not all(np.array_equal(x, y) for x, y in zip(run1, run3))

    def test_dihedral_variants_are_distinct_and_bounded(self):
        block = np.arange(9, dtype=np.float64).reshape(3, 3)
        variants = {dihedral(block, t).tobytes() for t in range(8)}
        assert len(variants) == 8
        with pytest.raises(DomainError):
            dihedral(block, 8)

    def test_batch_stream_shape(self, tmp_path):
        save_gray(tmp_path / "a.png", np.random.default_rng(1).random((50, 50)))
        batches = batch_stream(make_dataset(tmp_path, 33, seed=0), 4)
        assert next(batches).shape == (4, 1, 33, 33)


class TestLosses:
    def test_rec_identical_zero(self):
        x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        assert loss_rec(x, x).item() == 0.0

    def test_rec_unit_gap(self):
        a = torch.ones(3, 1, 4, 4, dtype=torch.float64)
        b = torch.zeros(3, 1, 4, 4, dtype=torch.float64)
        assert loss_rec(a, b).item() == 1.0

    def test_rec_batch_mean_of_per_sample_maes(self):
        truth = torch.zeros(2, 1, 5, 5, dtype=torch.float64)
        recon = torch.stack([torch.full((1, 5, 5), 0.2, dtype=torch.float64),
                             torch.full((1, 5, 5), 0.4, dtype=torch.float64)])
        assert abs(loss_rec(truth, recon).item() - 0.3) < 1e-12

    def test_rec_shape_mismatch(self):
        with pytest.raises(DomainError):
            loss_rec(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 5, 5))

    @staticmethod
    def _trace(pairs):
        decisions = [GateDecision(h_g=np.array([g, 1.0 - g]),
                                  h_p=np.array([p, 1.0 - p]),
                                  soft_g=np.array([0.5, 0.5]),
                                  soft_p=np.array([0.5, 0.5]), stage_index=k)
                     for k, (g, p) in enumerate(pairs)]
        return PathTrace(decisions=decisions, n_am_g=0, n_am_p=0,
                         dynamic_flops=0.0, static_flops=0.0)

    def test_select_endpoints(self):
        assert loss_select(self._trace([(1, 1)] * 4)) == 2.0
        assert loss_select(self._trace([(0, 0)] * 4)) == 0.0

    def test_select_partial_counts(self):
        # 3 of 4 gradient branches, 2 of 4 proximal branches
        trace = self._trace([(1, 1), (1, 1), (1, 0), (0, 0)])
        assert abs(loss_select(trace) - (3 + 2) / 4) < 1e-12

    def test_select_tensor_and_trace_agree(self):
        gen = torch.Generator().manual_seed(0)
        gates = []
        for k in range(5):
            h_g = torch.nn.functional.one_hot(
                torch.randint(0, 2, (3,), generator=gen), 2).to(torch.float64)
            h_p = torch.nn.functional.one_hot(
                torch.randint(0, 2, (3,), generator=gen), 2).to(torch.float64)
            soft = torch.full((3, 2), 0.5, dtype=torch.float64)
            gates.append(GateTensors(h_g, soft, h_p, soft))
        tensor_val = loss_select(gates).item()
        per_sample = []
        for b in range(3):
            trace = self._trace([(gates[k].h_g[b, 0].item(),
                                  gates[k].h_p[b, 0].item()) for k in range(5)])
            per_sample.append(loss_select(trace))
        assert abs(tensor_val - np.mean(per_sample)) < 1e-12

    def test_select_routes_gradient_through_soft_probabilities(self):
        alpha = torch.tensor([[2.0, -1.0]], dtype=torch.float64,
                             requires_grad=True)
        hard, soft = u.gumbel_softmax(alpha, mode="eval")
        gates = [GateTensors(hard, soft, hard, soft)]
        loss_select(gates).backward()
        assert alpha.grad is not None and alpha.grad.abs().sum() > 0

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)),
                    min_size=1, max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_select_bounds_property(self, pairs):
        val = loss_select(self._trace(pairs))
        assert 0.0 <= val <= 2.0


def _toy_setup(tmp_path, n_images=3, k=2, c=8, batch=2):
    data = tmp_path / "data"
    data.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(n_images):
        save_gray(data / f"i{i}.png", rng.random((50, 50)))
    torch.manual_seed(0)
    phi = u.generate_phi(0.3, seed=1)
    model = ReconNet(stages=k, channels=c)
    cfg = TrainConfig(data_dir=str(data), out_dir=str(tmp_path / "out"),
                      K=k, C=c, batch_size=batch, steps_per_epoch=2,
                      epochs_main=1, epochs_finetune=1, learning_rate=1e-3,
                      seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=cfg.optimizer_decay_rates)
    batch_arr = np.random.default_rng(1).random((batch, 1, 33, 33))
    return data, phi, model, cfg, opt, batch_arr


class TestTrainStep:
    def test_mu_zero_reduces_to_reconstruction_loss(self, tmp_path):
        _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
        report, _ = train_step(batch, phi, model, opt, cfg,
                               np.random.default_rng(0),
                               torch_gen=torch.Generator().manual_seed(0),
                               mu=0.0)
        assert report.mu_used == 0.0
        assert report.total == report.l_rec

    def test_total_reproducible_from_parts(self, tmp_path):
        _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
        report, _ = train_step(batch, phi, model, opt, cfg,
                               np.random.default_rng(0),
                               torch_gen=torch.Generator().manual_seed(0))
        assert report.total == report.l_rec + report.mu_used * report.l_select
        assert 0.0 <= report.l_select <= 2.0

    def test_seeded_determinism(self, tmp_path):
        reports = []
        for _ in range(2):
            _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
            report, _ = train_step(batch, phi, model, opt, cfg,
                                   np.random.default_rng(5),
                                   torch_gen=torch.Generator().manual_seed(5))
            reports.append(report)
        assert reports[0] == reports[1]

    def test_mu_sampled_from_config_set(self, tmp_path):
        _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "mu_set": [0.0005]})
        report, _ = train_step(batch, phi, model, opt, cfg,
                               np.random.default_rng(0),
                               torch_gen=torch.Generator().manual_seed(0))
        assert report.mu_used == 0.0005

    def test_poisoned_model_aborts_with_stage_diagnostics(self, tmp_path):
        _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
        with torch.no_grad():
            model.stages[0].pmm.conv1.weight[0, 0, 0, 0] = float("inf")
        with pytest.raises(NumericError) as err:
            train_step(batch, phi, model, opt, cfg, np.random.default_rng(0),
                       torch_gen=torch.Generator().manual_seed(0))
        assert err.value.stage_index == 0

    def test_sigma_zero_noise_matches_clean_run(self, tmp_path):
        outs = []
        for sigma in (None, 0.0):
            _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
            report, _ = train_step(batch, phi, model, opt, cfg,
                                   np.random.default_rng(2),
                                   torch_gen=torch.Generator().manual_seed(2),
                                   noise_sigma=sigma)
            outs.append(report)
        assert outs[0] == outs[1]

    def test_measurement_noise_changes_loss(self, tmp_path):
        outs = []
        for sigma in (None, 10.0):
            _, phi, model, cfg, opt, batch = _toy_setup(tmp_path)
            report, _ = train_step(batch, phi, model, opt, cfg,
                                   np.random.default_rng(2),
                                   torch_gen=torch.Generator().manual_seed(2),
                                   noise_sigma=sigma)
            outs.append(report)
        assert outs[0].l_rec != outs[1].l_rec


class TestRunTraining:
    def test_writes_log_and_checkpoint(self, tmp_path):
        data, phi, _, cfg, _, _ = _toy_setup(tmp_path)
        model, history, ckpt = run_training(cfg)
        assert ckpt.is_file()
        lines = [json.loads(line) for line in
                 (tmp_path / "out" / "train_log.jsonl").read_text().splitlines()]
        assert len(lines) == cfg.epochs_main == len(history)
        for entry in lines:
            assert set(entry) == {"epoch", "l_rec", "l_select", "mean_n_am_g",
                                  "mean_n_am_p", "mu_histogram"}
            assert sum(entry["mu_histogram"].values()) == cfg.steps_per_epoch

    def test_identical_config_reproduces_history(self, tmp_path):
        _, _, _, cfg, _, _ = _toy_setup(tmp_path)
        _, h1, _ = run_training(cfg)
        _, h2, _ = run_training(cfg)
        assert h1 == h2


class TestFinetune:
    def test_missing_checkpoint_rejected(self, tmp_path):
        _, _, _, cfg, _, _ = _toy_setup(tmp_path)
        with pytest.raises(StateError):
            finetune_deblock(tmp_path / "absent.npz", cfg)

    def test_deblock_runs_on_large_crops_and_saves(self, tmp_path):
        data, phi, _, cfg, _, _ = _toy_setup(tmp_path, n_images=3)
        # block_finetune crops must fit inside the images
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "block_finetune": 48})
        _, _, main_ckpt = run_training(cfg)
        model, history, ckpt = finetune_deblock(main_ckpt, cfg)
        assert ckpt.name == "deblock.npz"
        assert len(history) == cfg.epochs_finetune
        meta_ratio = u.load_checkpoint(ckpt)[1]["ratio"]
        assert meta_ratio == cfg.ratio

    def test_noise_finetune_saves(self, tmp_path):
        data, phi, _, cfg, _, _ = _toy_setup(tmp_path)
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "block_finetune": 48})
        _, _, main_ckpt = run_training(cfg)
        _, history, ckpt = finetune_noise(main_ckpt, cfg)
        assert ckpt.name == "noise.npz"
        assert len(history) == cfg.epochs_finetune
