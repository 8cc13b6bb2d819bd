"""Mask estimation, masking, and the enhancement loss."""
import numpy as np
import pytest
import torch

from dualpath.enhance import MaskEstimator, apply_mask, enhancement_loss, estimate_mask
from dualpath.errors import InvalidInputError


def small_model(n_bins=6, hidden=4, n_layers=1, seed=0):
    torch.manual_seed(seed)
    return MaskEstimator(n_bins=n_bins, hidden=hidden, n_layers=n_layers)


class TestEstimateMask:
    def test_shape_contract(self):
        model = small_model()
        for shape in ((5, 6), (3, 5, 6)):
            mask = estimate_mask(torch.randn(*shape), model)
            assert mask.shape == shape

    def test_non_negative_everywhere(self):
        model = small_model(seed=3)
        mask = estimate_mask(torch.randn(11, 6) * 5, model)
        assert bool((mask >= 0).all())

    def test_zeroed_projection_gives_zero_mask(self):
        model = small_model()
        with torch.no_grad():
            model.proj.weight.zero_()
            model.proj.bias.zero_()
        mask = estimate_mask(torch.randn(4, 6), model)
        assert bool((mask == 0).all())

    def test_bin_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            estimate_mask(torch.randn(4, 7), small_model(n_bins=6))

    def test_packed_lengths_match_single_utterance(self):
        # Padding must not change an utterance's mask through the
        # bidirectional recurrence.
        model = small_model(seed=5)
        x1 = torch.randn(4, 6)
        x2 = torch.randn(7, 6)
        batch = torch.zeros(2, 7, 6)
        batch[0, :4] = x1
        batch[1] = x2
        out = model(batch, lengths=torch.tensor([4, 7]))
        single1 = model(x1)
        single2 = model(x2)
        assert torch.allclose(out[0, :4], single1, atol=1e-6)
        assert torch.allclose(out[1], single2, atol=1e-6)


class TestApplyMask:
    def test_identity_and_annihilator(self):
        noisy = torch.rand(3, 4)
        assert torch.equal(apply_mask(noisy, torch.ones(3, 4)), noisy)
        assert torch.equal(apply_mask(noisy, torch.zeros(3, 4)), torch.zeros(3, 4))

    def test_hand_product(self):
        out = apply_mask(np.array([[2.0, 3.0]]), np.array([[0.5, 2.0]]))
        np.testing.assert_allclose(out.numpy(), [[1.0, 6.0]])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            apply_mask(torch.zeros(2, 3), torch.zeros(3, 2))


class TestEnhancementLoss:
    def test_identity_zero(self):
        x = torch.rand(4, 5)
        assert float(enhancement_loss(x, x.clone())) == 0.0

    def test_single_entry(self):
        assert float(enhancement_loss(torch.tensor([[0.0]]), torch.tensor([[2.0]]))) == 4.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        e = rng.standard_normal((3, 4))
        c = rng.standard_normal((3, 4))
        total = 0.0
        for i in range(3):
            for j in range(4):
                total += (e[i, j] - c[i, j]) ** 2
        want = total / 12.0
        got = float(enhancement_loss(torch.tensor(e), torch.tensor(c)))
        assert got == pytest.approx(want, rel=1e-7)

    def test_symmetric(self):
        a = torch.rand(5, 3)
        b = torch.rand(5, 3)
        assert float(enhancement_loss(a, b)) == pytest.approx(
            float(enhancement_loss(b, a)), rel=1e-12
        )

    def test_masked_mean_excludes_padding(self):
        e = torch.arange(24, dtype=torch.float32).reshape(2, 3, 4)
        c = torch.zeros(2, 3, 4)
        mask = torch.tensor([[True, True, False], [True, False, False]])
        got = float(enhancement_loss(e, c, frame_mask=mask))
        want = float((e[0, :2] ** 2).sum() + (e[1, :1] ** 2).sum()) / (3 * 4)
        assert got == pytest.approx(want, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            enhancement_loss(torch.zeros(2, 3), torch.zeros(2, 4))


class TestGradients:
    def test_composite_gradient_matches_central_differences(self):
        # d enhancement_loss / d theta through apply_mask(estimate_mask(.)),
        # checked on >= 20 randomly chosen parameter entries in float64.
        torch.manual_seed(7)
        model = small_model(n_bins=6, hidden=4, n_layers=1, seed=7).double()
        noisy = torch.rand(5, 6, dtype=torch.float64) + 0.1
        clean = torch.rand(5, 6, dtype=torch.float64)

        def loss_value():
            return enhancement_loss(apply_mask(noisy, estimate_mask(noisy, model)), clean)

        loss = loss_value()
        loss.backward()
        params = dict(model.named_parameters())
        rng = np.random.default_rng(0)
        flat = [(name, i) for name, p in params.items() for i in range(p.numel())]
        picks = rng.choice(len(flat), size=24, replace=False)
        checked = 0
        for k in picks:
            name, i = flat[int(k)]
            p = params[name]
            analytic = float(p.grad.reshape(-1)[i])
            h = 1e-6 * max(1.0, abs(float(p.data.reshape(-1)[i])))
            with torch.no_grad():
                p.data.reshape(-1)[i] += h
                up = float(loss_value().detach())
                p.data.reshape(-1)[i] -= 2 * h
                down = float(loss_value().detach())
                p.data.reshape(-1)[i] += h
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-6)
            assert abs(analytic - numeric) / scale < 1e-4, (name, i, analytic, numeric)
            checked += 1
        assert checked >= 20
