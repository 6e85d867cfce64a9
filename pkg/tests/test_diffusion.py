import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mvsdiff.diffusion import (DiffusionState, ddim_infer, ddim_timesteps, forward_diffuse, gt_residual,
                               make_schedule, noise_scaling_finetune, reverse_refine)


class TestSchedule:
    def test_first_and_last(self):
        s = make_schedule()
        assert s.alpha_bar(1) == pytest.approx(1 - 1e-4, abs=1e-15)
        assert s.alpha_bar(1000) < 1e-3
        assert s.alpha_bar(0) == 1.0

    def test_strictly_decreasing(self):
        assert (np.diff(make_schedule().alpha_bars) < 0).all()

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            make_schedule(0)
        with pytest.raises(ValueError):
            make_schedule(10, sigma=0)

    def test_tensor_lookup_matches_scalar(self):
        s = make_schedule()
        t = torch.tensor([0, 5, 1000])
        np.testing.assert_allclose(s.alpha_bar(t).numpy(), [s.alpha_bar(i) for i in (0, 5, 1000)])


class TestForward:
    def test_noiseless_endpoint(self):
        x0 = torch.rand(1, 1, 3, 3)
        assert torch.equal(forward_diffuse(x0, 0, torch.randn(1, 1, 3, 3), make_schedule()), x0)

    def test_arithmetic(self):
        s = make_schedule(sigma=0.5)
        t = int(np.argmin(np.abs(s.alpha_bars - 0.25))) + 1
        ab = s.alpha_bar(t)
        got = forward_diffuse(torch.tensor(0.2, dtype=torch.float64), t, torch.tensor(1.0, dtype=torch.float64), s)
        assert float(got) == pytest.approx(ab ** 0.5 * 0.2 + (1 - ab) ** 0.5 * 0.5, abs=1e-12)
        # the same formula at exactly ab = 0.25
        assert 0.25 ** 0.5 * 0.2 + 0.75 ** 0.5 * 0.5 == pytest.approx(0.533013, abs=1e-6)

    def test_zero_noise(self):
        s = make_schedule()
        x0 = torch.rand(4, dtype=torch.float64)
        assert torch.allclose(forward_diffuse(x0, 300, torch.zeros(4, dtype=torch.float64), s),
                              s.alpha_bar(300) ** 0.5 * x0)

    def test_per_sample_timesteps(self):
        s = make_schedule(sigma=0.5)
        x0, eps = torch.rand(3, 1, 2, 2), torch.randn(3, 1, 2, 2)
        t = torch.tensor([1, 400, 1000])
        out = forward_diffuse(x0, t, eps, s)
        for i in range(3):
            assert torch.allclose(out[i], forward_diffuse(x0[i], int(t[i]), eps[i], s), atol=1e-6)

    def test_linearity_1000_draws(self):
        s = make_schedule(sigma=0.5)
        g = torch.Generator().manual_seed(0)
        worst = 0.0
        for _ in range(1000):
            t = int(torch.randint(0, 1001, (1,), generator=g))
            a = float(torch.randn(1, generator=g)) * 3
            x0 = torch.rand(8, generator=g, dtype=torch.float64) * 2 - 1
            eps = torch.randn(8, generator=g, dtype=torch.float64)
            lhs = forward_diffuse(a * x0, t, a * eps, s)
            rhs = a * forward_diffuse(x0, t, eps, s)
            worst = max(worst, float((lhs - rhs).abs().max()))
        assert worst < 1e-6


class TestResidual:
    def test_values(self):
        assert float(gt_residual(torch.tensor(0.7), torch.tensor(0.5))) == pytest.approx(0.2)
        x = torch.rand(5)
        assert (gt_residual(x, x) == 0).all()

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_range(self, a, b):
        assert -1 <= float(gt_residual(torch.tensor(a), torch.tensor(b))) <= 1


def scripted_step(deltas):
    def step(state, dbar_prev):
        d = deltas[state.k - 1]
        d = d if isinstance(d, torch.Tensor) else torch.full_like(dbar_prev, d)
        return d, torch.full_like(dbar_prev, 0.5), None
    return step


class TestReverseRefine:
    def test_zero_updates(self):
        x_t, d0 = torch.full((1, 1, 2, 2), 0.3), torch.full((1, 1, 2, 2), 0.4)
        r = reverse_refine(DiffusionState(x_t, torch.tensor([5])), d0, scripted_step([0.0] * 4), 4)
        assert torch.equal(r.x0_hat, x_t) and torch.allclose(r.depths[-1], d0 + x_t)

    def test_summation(self):
        x_t = torch.full((1, 1, 1, 1), 0.3, dtype=torch.float64)
        r = reverse_refine(DiffusionState(x_t, torch.tensor([5])), torch.zeros_like(x_t),
                           scripted_step([0.1, -0.05, 0.02]), 3)
        assert float(r.x0_hat) == pytest.approx(0.37, abs=1e-12)
        assert len(r.depths) == 3 and len(r.confidences) == 3

    def test_step_sees_previous_estimate(self):
        seen = []

        def step(state, dbar_prev):
            seen.append(float(dbar_prev))
            return torch.full_like(dbar_prev, 0.1), torch.zeros_like(dbar_prev), None

        x_t = torch.full((1, 1, 1, 1), 0.2, dtype=torch.float64)
        reverse_refine(DiffusionState(x_t, torch.tensor([1])), x_t * 0 + 0.5, step, 3)
        np.testing.assert_allclose(seen, [0.7, 0.8, 0.9], atol=1e-12)

    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_telescoping(self, K, seed):
        g = torch.Generator().manual_seed(seed)
        x_t = torch.randn(1, 1, 3, 3, generator=g, dtype=torch.float64)
        d0 = torch.rand(1, 1, 3, 3, generator=g, dtype=torch.float64)
        deltas = [torch.randn(1, 1, 3, 3, generator=g, dtype=torch.float64) * 0.1 for _ in range(K)]
        r = reverse_refine(DiffusionState(x_t, torch.tensor([7])), d0, scripted_step(deltas), K)
        assert torch.allclose(r.depths[-1] - (d0 + x_t), sum(deltas), atol=1e-6, rtol=0)
        for k in range(1, K):
            assert torch.allclose(r.depths[k] - r.depths[k - 1], deltas[k], atol=1e-6, rtol=0)

    def test_rejects_zero_k(self):
        with pytest.raises(ValueError):
            reverse_refine(DiffusionState(torch.zeros(1), torch.tensor([1])), torch.zeros(1), scripted_step([]), 0)


class TestDDIM:
    def test_perfect_denoiser_recovers_gt(self):
        g = torch.Generator().manual_seed(0)
        d0 = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
        gt = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64)
        x0 = gt_residual(gt, d0)
        s = make_schedule(sigma=0.5)

        def refine(x, t):
            # one iteration with the oracle update Δx = x0 - x_t
            return reverse_refine(DiffusionState(x, t), d0, scripted_step([x0 - x]), 1).x0_hat

        out, _ = ddim_infer(d0, refine, s, 1, g)
        assert (out - gt).abs().max() < 1e-12

    def test_timesteps(self):
        assert ddim_timesteps(1000, 1) == [1000]
        assert ddim_timesteps(1000, 2) == [1000, 500]
        with pytest.raises(ValueError):
            ddim_timesteps(10, 11)

    def test_multi_step_finite_and_bounded(self):
        s = make_schedule(sigma=0.5)
        d0 = torch.rand(1, 1, 4, 4)
        visited = []

        def refine(x, t):
            visited.append(int(t[0]))
            return 0.5 * x

        out, _ = ddim_infer(d0, refine, s, 3, torch.Generator().manual_seed(0))
        assert visited == ddim_timesteps(1000, 3)
        assert torch.isfinite(out).all() and (out >= 0).all() and (out <= 1).all()

    def test_start_is_scaled_noise_and_reproducible(self):
        s = make_schedule(sigma=0.25)
        seen = []

        def refine(x, t):
            seen.append(x.clone())
            return torch.zeros_like(x)

        d0 = torch.zeros(1, 1, 64, 64)
        ddim_infer(d0, refine, s, 1, torch.Generator().manual_seed(3))
        ddim_infer(d0, refine, s, 1, torch.Generator().manual_seed(3))
        assert torch.equal(seen[0], seen[1])
        assert float(seen[0].std()) == pytest.approx(0.25, rel=0.05)


class TestFinetune:
    def test_halving(self):
        s = make_schedule(sigma=0.5)
        assert noise_scaling_finetune(s, 0).sigma == 0.25
        assert noise_scaling_finetune(s, 7).sigma == 0.25
        assert noise_scaling_finetune(s, 8).sigma == 0.125

    def test_inactive(self):
        s = make_schedule(sigma=0.5)
        assert noise_scaling_finetune(s, 3, active=False) is s
        assert noise_scaling_finetune(s, None) is s
