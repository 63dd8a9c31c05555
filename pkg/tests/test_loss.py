"""Symmetric InfoNCE: oracle equivalence, analytic properties, gradients."""

import math

import numpy as np
import pytest
import torch

from playerreid.encoders import reference_tiny_encoder
from playerreid.loss import (
    ContrastiveObjective,
    LossConfig,
    dual_view_forward,
    info_nce_symmetric,
    similarity_logits,
    smoothed_loss_floor,
)

from conftest import unit_rows
from oracles import central_difference_errors, naive_info_nce_symmetric


def torch_unit_rows(n, dim, seed):
    return torch.from_numpy(unit_rows(n, dim, np.random.default_rng(seed))).float()


class TestSimilarityLogits:
    def test_orthonormal_identity(self):
        q = torch.eye(4)
        logits = similarity_logits(q, q, 7.0)
        torch.testing.assert_close(logits, 7.0 * torch.eye(4))

    def test_single_pair(self):
        q = torch_unit_rows(1, 8, 0)
        g = torch_unit_rows(1, 8, 1)
        logits = similarity_logits(q, g, 3.0)
        assert logits.shape == (1, 1)
        torch.testing.assert_close(logits[0, 0], 3.0 * (q[0] @ g[0]))

    def test_matches_dot_product_oracle(self):
        q = torch_unit_rows(3, 4, 2)
        g = torch_unit_rows(3, 4, 3)
        logits = similarity_logits(q, g, 5.0).numpy()
        for i in range(3):
            for j in range(3):
                expected = 5.0 * float(np.dot(q[i].numpy(), g[j].numpy()))
                assert abs(logits[i, j] - expected) < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            similarity_logits(torch.eye(3), torch.eye(4), 1.0)

    def test_zero_norm_row(self):
        q = torch.zeros(2, 4)
        with pytest.raises(ValueError, match="zero-norm"):
            similarity_logits(q, torch.eye(2, 4), 1.0)

    def test_magnitude_bounded_by_scale(self):
        q = torch_unit_rows(6, 16, 4)
        g = torch_unit_rows(6, 16, 5)
        logits = similarity_logits(q, g, 11.0)
        assert logits.abs().max() <= 11.0 + 1e-5


class TestInfoNceSymmetric:
    def test_uniform_two_by_two_is_ln2(self):
        loss = info_nce_symmetric(torch.zeros(2, 2), 0.0)
        assert abs(float(loss) - math.log(2.0)) < 1e-7

    def test_uniform_logits_smoothing_invariant(self):
        for n in (2, 5, 9):
            for eps in (0.0, 0.1, 0.3):
                loss = info_nce_symmetric(torch.zeros(n, n), eps)
                assert abs(float(loss) - math.log(n)) < 1e-6

    def test_diag_five_hand_value(self):
        logits = 5.0 * torch.eye(3)
        # frozen from the independent brute-force computation
        assert abs(float(info_nce_symmetric(logits, 0.1)) - 0.34671923505478236) < 1e-6
        assert abs(float(info_nce_symmetric(logits, 0.0)) - 0.013385901721449045) < 1e-6

    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    @pytest.mark.parametrize("eps", [0.0, 0.1])
    def test_matches_bruteforce_oracle(self, n, eps):
        rng = np.random.default_rng(n * 31 + int(eps * 10))
        for _ in range(5):
            logits = rng.normal(0.0, 3.0, size=(n, n))
            ours = float(info_nce_symmetric(torch.from_numpy(logits), eps))
            reference = naive_info_nce_symmetric(logits, eps)
            assert abs(ours - reference) < 1e-6

    def test_rejects_tiny_or_rectangular(self):
        with pytest.raises(ValueError, match="n >= 2"):
            info_nce_symmetric(torch.zeros(1, 1), 0.0)
        with pytest.raises(ValueError, match="square"):
            info_nce_symmetric(torch.zeros(2, 3), 0.0)

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(7)
        logits = torch.from_numpy(rng.normal(size=(6, 6)))
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
        permuted = logits[perm][:, perm]
        a = float(info_nce_symmetric(logits, 0.1))
        b = float(info_nce_symmetric(permuted, 0.1))
        assert abs(a - b) < 1e-9

    def test_positive_logit_increase_decreases_loss_unsmoothed(self):
        # for eps = 0, raising a positive logit always lowers the loss
        rng = np.random.default_rng(3)
        for n in (2, 4, 8):
            logits = torch.from_numpy(rng.normal(0, 2, size=(n, n)))
            bumped = logits.clone()
            bumped[1, 1] += 0.5
            assert float(info_nce_symmetric(bumped, 0.0)) < float(info_nce_symmetric(logits, 0.0))

    def test_positive_logit_increase_decreases_loss_below_saturation(self):
        # with smoothing the row CE decreases in the positive logit only while
        # softmax(positive) < 1 - eps*(n-1)/n; test within that regime
        rng = np.random.default_rng(3)
        eps = 0.1
        for n in (2, 4, 8):
            assert eps < 1.0 - 1.0 / n
            logits = torch.from_numpy(rng.normal(0, 0.5, size=(n, n)))
            threshold = 1.0 - eps * (n - 1) / n
            row_p = torch.softmax(logits, dim=1)[1, 1]
            col_p = torch.softmax(logits, dim=0)[1, 1]
            assert max(float(row_p), float(col_p)) < threshold - 0.05
            bumped = logits.clone()
            bumped[1, 1] += 0.1
            assert float(info_nce_symmetric(bumped, eps)) < float(info_nce_symmetric(logits, eps))

    def test_negative_logit_increase_never_decreases_loss(self):
        rng = np.random.default_rng(4)
        logits = torch.from_numpy(rng.normal(size=(5, 5)))
        base = float(info_nce_symmetric(logits, 0.1))
        for (i, j) in [(0, 1), (2, 4), (3, 0)]:
            bumped = logits.clone()
            bumped[i, j] += 0.7
            assert float(info_nce_symmetric(bumped, 0.1)) >= base - 1e-12

    def test_loss_respects_analytic_floor(self):
        rng = np.random.default_rng(5)
        for n in (2, 4, 16):
            for eps in (0.0, 0.1, 0.4):
                floor = smoothed_loss_floor(n, eps)
                for _ in range(10):
                    logits = torch.from_numpy(rng.normal(0, 5, size=(n, n)))
                    assert float(info_nce_symmetric(logits, eps)) >= floor - 1e-9

    def test_floor_value_n16(self):
        # frozen: entropy of the smoothed target for n=16, eps=0.1
        assert abs(smoothed_loss_floor(16, 0.1) - 0.5650088611651813) < 1e-12


class TestContrastiveObjective:
    def test_scale_clamped(self):
        cfg = LossConfig(logit_scale_init=50.0, logit_scale_max=100.0)
        objective = ContrastiveObjective(cfg)
        with torch.no_grad():
            objective.log_logit_scale.fill_(math.log(500.0))
        objective.clamp_scale()
        assert float(objective.logit_scale.detach()) <= 100.0 + 1e-5

    def test_fixed_scale_not_trainable(self):
        objective = ContrastiveObjective(LossConfig(logit_scale_trainable=False))
        assert not objective.log_logit_scale.requires_grad

    def test_duplicate_image_positive_logit_is_scale(self):
        emb = torch_unit_rows(3, 8, 6)
        objective = ContrastiveObjective(LossConfig(logit_scale_init=10.0, logit_scale_trainable=False))
        _loss, logits = objective(emb, emb)
        torch.testing.assert_close(logits.diagonal(), torch.full((3,), 10.0))


class TestDualViewForward:
    def test_matches_two_pass_reference(self, tiny):
        tiny.eval()
        objective = ContrastiveObjective(LossConfig())
        q = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
        g = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            loss, logits = dual_view_forward(tiny, objective, q, g)
            q_emb = torch.nn.functional.normalize(tiny.embed(q), dim=1)
            g_emb = torch.nn.functional.normalize(tiny.embed(g), dim=1)
            ref_loss, ref_logits = objective(q_emb, g_emb)
        assert abs(float(loss) - float(ref_loss)) < 1e-6
        torch.testing.assert_close(logits, ref_logits, atol=1e-6, rtol=0)

    def test_shape_mismatch_rejected(self, tiny):
        objective = ContrastiveObjective(LossConfig())
        with pytest.raises(ValueError, match="differ"):
            dual_view_forward(tiny, objective, torch.rand(2, 3, 32, 32), torch.rand(3, 3, 32, 32))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        encoder = reference_tiny_encoder(seed=1).double()
        objective = ContrastiveObjective(LossConfig(logit_scale_trainable=False)).double()
        gen = torch.Generator().manual_seed(2)
        q = torch.rand(3, 3, 32, 32, generator=gen, dtype=torch.float64)
        g = torch.rand(3, 3, 32, 32, generator=gen, dtype=torch.float64)

        loss, _ = dual_view_forward(encoder, objective, q, g)
        loss.backward()

        def loss_fn():
            value, _ = dual_view_forward(encoder, objective, q, g)
            return value

        rng = np.random.default_rng(0)
        for name, param in encoder.named_parameters():
            grad = param.grad.reshape(-1)
            n_coords = min(10, param.numel())
            for idx in rng.choice(param.numel(), size=n_coords, replace=False):
                errors = central_difference_errors(loss_fn, param, int(idx), float(grad[idx]))
                assert min(errors) < 1e-3, f"{name}[{idx}]: {errors}"
