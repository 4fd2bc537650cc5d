import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from unfoldcs.errors import DomainError, NumericError
from unfoldcs.flops import FlopsModel
from unfoldcs.selector import (ENCODING_DIM, MU_PRESETS, ControllableUnit,
                               GateDecision, ModulationInput,
                               PathControllableSelector, SelectorHeads,
                               encode_mu, gumbel_softmax, sample_gumbel)


class TestEncoding:
    def test_preset_onehots(self):
        # largest multiplier -> highest-order bit
        assert encode_mu(0.002).tolist() == [1, 0, 0, 0, 0, 0]
        assert encode_mu(0.001).tolist() == [0, 1, 0, 0, 0, 0]
        assert encode_mu(0.0005).tolist() == [0, 0, 1, 0, 0, 0]
        assert encode_mu(0.0001).tolist() == [0, 0, 0, 1, 0, 0]
        assert encode_mu(0.00005).tolist() == [0, 0, 0, 0, 1, 0]
        assert encode_mu(0.00001).tolist() == [0, 0, 0, 0, 0, 1]

    def test_every_preset_round_trips(self):
        seen = set()
        for mu in MU_PRESETS:
            enc = encode_mu(mu)
            assert enc.sum() == 1.0
            seen.add(int(np.argmax(enc)))
        assert seen == set(range(ENCODING_DIM))

    def test_non_preset_rejected(self):
        with pytest.raises(DomainError):
            encode_mu(0.0003)

    def test_from_encoding_accepts_arbitrary_bits(self):
        mod = ModulationInput.from_encoding([0, 1, 0, 1, 0, 0])
        assert mod.encoding.tolist() == [0, 1, 0, 1, 0, 0]

    def test_from_encoding_rejects_non_binary(self):
        with pytest.raises(DomainError):
            ModulationInput.from_encoding([0, 0.5, 0, 0, 0, 0])
        with pytest.raises(DomainError):
            ModulationInput.from_encoding([[0, 1], [1, 0]])

    def test_from_mu(self):
        mod = ModulationInput.from_mu(0.002)
        assert mod.mu == 0.002
        assert mod.encoding.tolist() == [1, 0, 0, 0, 0, 0]


class TestGumbelSoftmax:
    def test_eval_is_exactly_one_hot(self):
        alpha = torch.randn(64, 2, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(0))
        hard, soft = gumbel_softmax(alpha, mode="eval")
        assert torch.all((hard == 0) | (hard == 1))
        assert torch.all(hard.sum(dim=-1) == 1)
        assert torch.allclose(soft.sum(dim=-1),
                              torch.ones(64, dtype=torch.float64))

    def test_eval_deterministic(self):
        alpha = torch.randn(8, 2, dtype=torch.float64)
        h1, s1 = gumbel_softmax(alpha, mode="eval",
                                rng=torch.Generator().manual_seed(1))
        h2, s2 = gumbel_softmax(alpha, mode="eval",
                                rng=torch.Generator().manual_seed(99))
        assert torch.equal(h1, h2) and torch.equal(s1, s2)

    def test_soft_matches_plain_softmax_in_eval(self):
        alpha = torch.tensor([[0.3, -1.2], [2.0, 2.0]], dtype=torch.float64)
        _, soft = gumbel_softmax(alpha, tau=0.7, mode="eval")
        expected = np.exp(alpha.numpy() / 0.7)
        expected /= expected.sum(axis=-1, keepdims=True)
        assert np.abs(soft.numpy() - expected).max() < 1e-12

    def test_tie_goes_to_execute_index(self):
        alpha = torch.zeros(5, 2, dtype=torch.float64)
        hard, _ = gumbel_softmax(alpha, mode="eval")
        assert torch.all(hard[:, 0] == 1)

    def test_balanced_logits_sample_both_branches(self):
        # Gumbel-max marginals equal softmax(alpha): 0.5 each here
        alpha = torch.zeros(10_000, 2, dtype=torch.float64)
        hard, _ = gumbel_softmax(alpha, mode="train",
                                 rng=torch.Generator().manual_seed(0))
        freq = hard[:, 0].mean().item()
        assert abs(freq - 0.5) < 0.05

    def test_train_marginals_match_softmax_oracle(self):
        alpha = torch.tensor([1.0, 0.3], dtype=torch.float64).expand(20_000, 2)
        hard, _ = gumbel_softmax(alpha, mode="train",
                                 rng=torch.Generator().manual_seed(7))
        expected = torch.softmax(torch.tensor([1.0, 0.3], dtype=torch.float64),
                                 dim=-1)[0].item()
        freq = hard[:, 0].mean().item()
        # 3 sigma of a Bernoulli(expected) mean over 20k draws
        sigma = (expected * (1 - expected) / 20_000) ** 0.5
        assert abs(freq - expected) < 3 * sigma + 1e-9

    def test_straight_through_gradient_equals_soft_gradient(self):
        gen = torch.Generator().manual_seed(3)
        base = torch.randn(6, 2, dtype=torch.float64, generator=gen)
        weight = torch.randn(6, 2, dtype=torch.float64, generator=gen)
        noise = sample_gumbel((6, 2), rng=gen)

        a1 = base.clone().requires_grad_(True)
        hard, _ = gumbel_softmax(a1, mode="train", noise=noise)
        (hard * weight).sum().backward()

        a2 = base.clone().requires_grad_(True)
        _, soft = gumbel_softmax(a2, mode="train", noise=noise)
        (soft * weight).sum().backward()

        assert torch.equal(a1.grad, a2.grad)

    def test_frozen_noise_reproducible(self):
        alpha = torch.randn(4, 2, dtype=torch.float64)
        noise = sample_gumbel((4, 2), rng=torch.Generator().manual_seed(5))
        h1, s1 = gumbel_softmax(alpha, mode="train", noise=noise)
        h2, s2 = gumbel_softmax(alpha, mode="train", noise=noise)
        assert torch.equal(h1, h2) and torch.equal(s1, s2)

    def test_bad_temperature(self):
        with pytest.raises(DomainError):
            gumbel_softmax(torch.zeros(1, 2), tau=0.0)

    def test_bad_mode(self):
        with pytest.raises(DomainError):
            gumbel_softmax(torch.zeros(1, 2), mode="sample")

    def test_non_finite_logits(self):
        with pytest.raises(NumericError):
            gumbel_softmax(torch.tensor([[float("nan"), 0.0]]))

    @given(a0=st.floats(-30, 30), a1=st.floats(-30, 30),
           shift=st.floats(-10, 10))
    @settings(max_examples=50, deadline=None)
    def test_argmax_invariant_under_logit_shift(self, a0, a1, shift):
        alpha = torch.tensor([[a0, a1]], dtype=torch.float64)
        noise = sample_gumbel((1, 2), rng=torch.Generator().manual_seed(11))
        h1, _ = gumbel_softmax(alpha, mode="train", noise=noise)
        h2, _ = gumbel_softmax(alpha + shift, mode="train", noise=noise)
        assert torch.equal(h1, h2)

    @given(a0=st.floats(-50, 50), a1=st.floats(-50, 50))
    @settings(max_examples=50, deadline=None)
    def test_hard_one_hot_soft_normalized(self, a0, a1):
        alpha = torch.tensor([[a0, a1]], dtype=torch.float64)
        hard, soft = gumbel_softmax(alpha, mode="eval")
        assert hard.detach().sum().item() == 1.0
        assert set(hard.detach().flatten().tolist()) <= {0.0, 1.0}
        assert abs(soft.sum().item() - 1.0) < 1e-12


class TestGateDecision:
    def test_executed_flags(self):
        d = GateDecision(h_g=np.array([1.0, 0.0]), h_p=np.array([0.0, 1.0]),
                         soft_g=np.array([0.7, 0.3]), soft_p=np.array([0.2, 0.8]),
                         stage_index=3)
        assert d.gdm_executed and not d.pmm_executed


class TestControllableUnit:
    def _unit(self, controllable=True):
        torch.manual_seed(0)
        return ControllableUnit(8, controllable=controllable).to(torch.float64)

    def test_modulation_matches_manual_affine(self):
        cu = self._unit()
        x = torch.randn(2, 8, 7, 7, dtype=torch.float64)
        enc = torch.tensor([[0, 0, 1, 0, 0, 0]], dtype=torch.float64).expand(2, 6)
        out = cu(x, enc)
        feat = torch.nn.functional.conv2d(x, cu.conv3.weight, padding=1)
        q = torch.nn.functional.softplus(cu.fc1(enc))
        p = cu.fc2(enc)
        manual = q[:, :, None, None] * feat + p[:, :, None, None]
        assert torch.allclose(out, manual, atol=0, rtol=0)

    def test_scale_strictly_positive(self):
        cu = self._unit()
        enc = torch.eye(6, dtype=torch.float64)
        q = torch.nn.functional.softplus(cu.fc1(enc))
        assert (q > 0).all()

    def test_plain_variant_ignores_encoding(self):
        cu = self._unit(controllable=False)
        x = torch.randn(1, 8, 7, 7, dtype=torch.float64)
        out = cu(x, None)
        feat = torch.nn.functional.conv2d(x, cu.conv3.weight, padding=1)
        assert torch.equal(out, feat)
        assert not hasattr(cu, "fc1")

    def test_missing_encoding_rejected(self):
        cu = self._unit()
        with pytest.raises(DomainError):
            cu(torch.randn(1, 8, 7, 7, dtype=torch.float64), None)

    def test_wrong_encoding_length_rejected(self):
        cu = self._unit()
        with pytest.raises(DomainError):
            cu(torch.randn(1, 8, 7, 7, dtype=torch.float64),
               torch.ones(1, 4, dtype=torch.float64))


class TestSelectorHeads:
    def test_shapes_and_determinism(self):
        torch.manual_seed(1)
        heads = SelectorHeads(8).to(torch.float64)
        feat = torch.randn(3, 8, 5, 5, dtype=torch.float64)
        g1 = heads(feat, mode="eval")
        g2 = heads(feat, mode="eval")
        for a, b in zip(g1, g2):
            assert a.shape == (3, 2)
            assert torch.equal(a, b)

    def test_squeeze_layer_shared_between_heads(self):
        heads = SelectorHeads(16)
        assert heads.fc3.bias is None
        assert heads.fc3.out_features == 4
        assert heads.fc4.in_features == heads.fc5.in_features == 4

    def test_parameter_count_matches_analytic_model(self):
        for c in (16, 32):
            heads = SelectorHeads(c)
            counted = sum(p.numel() for p in heads.parameters())
            model = FlopsModel(h_pad=1, w_pad=1, channels=c, m=1, n=1,
                               num_blocks=1, stages=1)
            assert counted == model.ps_params()

    def test_cu_parameter_count_matches_analytic_model(self):
        for c in (16, 32):
            cu = ControllableUnit(c)
            counted = sum(p.numel() for p in cu.parameters())
            model = FlopsModel(h_pad=1, w_pad=1, channels=c, m=1, n=1,
                               num_blocks=1, stages=1)
            assert counted == model.cu_params()


class TestPathControllableSelector:
    def test_returns_gates_for_both_branches(self):
        torch.manual_seed(2)
        sel = PathControllableSelector(8).to(torch.float64)
        x = torch.randn(2, 8, 6, 6, dtype=torch.float64)
        enc = torch.tensor([[0, 0, 0, 1, 0, 0]], dtype=torch.float64).expand(2, 6)
        gates = sel(x, enc, mode="eval")
        assert gates.h_g.shape == gates.h_p.shape == (2, 2)
        assert torch.all(gates.h_g.sum(dim=-1) == 1)

    def test_encoding_can_flip_decisions(self):
        # weight surgery: make the shift path dominate so the two encodings
        # land on opposite sides of the squeeze layer's ReLU
        torch.manual_seed(4)
        sel = PathControllableSelector(8).to(torch.float64)
        with torch.no_grad():
            sel.cu.fc2.weight.zero_()
            sel.cu.fc2.bias.zero_()
            sel.cu.fc2.weight[:, 0] = 3.0
            sel.cu.fc2.weight[:, 5] = -3.0
            sel.heads.fc3.weight.copy_(sel.heads.fc3.weight.abs())
            sel.heads.fc4.weight[0].abs_()
            sel.heads.fc4.weight[1] = -sel.heads.fc4.weight[0]
        x = torch.randn(1, 8, 6, 6, dtype=torch.float64)
        enc_a = torch.tensor([[1, 0, 0, 0, 0, 0]], dtype=torch.float64)
        enc_b = torch.tensor([[0, 0, 0, 0, 0, 1]], dtype=torch.float64)
        ga = sel(x, enc_a, mode="eval")
        gb = sel(x, enc_b, mode="eval")
        assert not torch.equal(ga.s_g, gb.s_g)
