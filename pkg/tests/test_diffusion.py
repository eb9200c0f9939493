import math

import pytest
import torch

from phenldiff.middleware.exceptions import ConfigError, NumericalError, ShapeError
from phenldiff.services.diffusion import (
    ClassCondition,
    DiffusionStepPlan,
    build_schedule,
    ddim_invert,
    ddim_sample,
    ddim_step,
    ddpm_reverse_step,
    forward_marginal,
    relative_l2,
    training_loss,
)
from phenldiff.services.training import make_generator
from tests.utils import FixedPredictor, GaussianOracle, manual_schedule


# Schedules
def test_single_step_schedule():
    schedule = build_schedule(T=1, kind="linear", beta_min=0.1, beta_max=0.1)
    assert schedule.betas.tolist() == pytest.approx([0.1])
    assert schedule.alpha_bars[1:].tolist() == pytest.approx([0.9])
    assert float(schedule.alpha_bar(0)) == 1.0


def test_two_step_schedule():
    schedule = build_schedule(T=2, kind="linear", beta_min=0.1, beta_max=0.3)
    assert schedule.alpha_bars[1:].tolist() == pytest.approx([0.9, 0.63])


def test_default_schedule_matches_running_product():
    T, lo, hi = 1000, 1e-4, 0.02
    expected = 1.0
    for i in range(T):
        expected *= 1.0 - (lo + (hi - lo) * i / (T - 1))

    schedule = build_schedule(T, "linear", lo, hi)

    assert float(schedule.alpha_bar(T)) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    schedule = build_schedule(T=200, kind=kind)
    assert bool(((schedule.betas > 0) & (schedule.betas < 1)).all())
    assert bool((schedule.alpha_bars[1:] < schedule.alpha_bars[:-1]).all())
    assert float(schedule.alpha_bars[-1]) > 0
    recomputed = torch.cumprod(1 - schedule.betas, dim=0)
    assert torch.allclose(recomputed, schedule.alpha_bars[1:], rtol=1e-12, atol=0)


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"T": 0}, "T"),
        ({"beta_min": 0.0}, "beta_min"),
        ({"beta_min": 0.3, "beta_max": 0.1}, "beta_min"),
        ({"beta_min": 0.1, "beta_max": 1.0}, "beta_max"),
        ({"kind": "quadratic"}, "kind"),
    ],
)
def test_schedule_rejects_bad_bounds(kwargs, field):
    with pytest.raises(ConfigError) as err:
        build_schedule(**kwargs)
    assert err.value.field == field


# Forward process
def test_forward_marginal_identity_at_t0():
    schedule = build_schedule(T=10)
    x0 = torch.randn(2, 3, 4, 4)
    out = forward_marginal(x0, 0, torch.randn_like(x0), schedule)
    assert torch.equal(out, x0)


def test_forward_marginal_zero_noise_scales():
    schedule = manual_schedule([0.25])
    x0 = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    out = forward_marginal(x0, 1, torch.zeros_like(x0), schedule)
    assert torch.allclose(out, 0.5 * x0)


def test_forward_marginal_shape_mismatch():
    schedule = build_schedule(T=10)
    with pytest.raises(ShapeError):
        forward_marginal(torch.zeros(1, 2, 4, 4), 3, torch.zeros(1, 2, 4, 5), schedule)


@pytest.mark.parametrize("t", [1, 100, 250, 500, 750])
def test_forward_marginal_moments(t):
    schedule = build_schedule(T=1000)
    n = 100_000
    x0 = torch.tensor([0.7, -0.3, 1.0, 0.4], dtype=torch.float64).expand(n, 4).clone()
    noise = torch.randn((n, 4), generator=make_generator(t), dtype=torch.float64)

    out = forward_marginal(x0, t, noise, schedule)

    ab = float(schedule.alpha_bar(t))
    expected_std = math.sqrt(1 - ab)
    standard_error = expected_std / math.sqrt(n)
    assert torch.allclose(out.mean(dim=0), math.sqrt(ab) * x0[0], atol=5 * standard_error, rtol=0)
    for std in out.std(dim=0).tolist():
        assert std == pytest.approx(expected_std, rel=0.01)


# Training loss
def test_loss_of_exact_noise_predictor_is_zero():
    schedule = build_schedule(T=10)
    z0 = torch.randn(2, 2, 4, 4)
    noise = torch.randn_like(z0)
    loss = training_loss(FixedPredictor(noise), z0, ClassCondition(0), 5, noise, schedule)
    assert float(loss) == 0.0


def test_loss_of_zero_predictor_is_noise_power():
    schedule = build_schedule(T=10)
    z0 = torch.randn(64, 4, 8, 8)
    noise = torch.randn(z0.shape, generator=make_generator(0))
    loss = training_loss(FixedPredictor(torch.zeros(1)), z0, ClassCondition(1), 7, noise, schedule)
    assert float(loss) == pytest.approx(1.0, abs=0.05)


def test_loss_four_elements_by_hand():
    schedule = build_schedule(T=10)
    noise = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    prediction = torch.tensor([0.5, 2.0, 2.0, 5.0]).reshape(1, 1, 2, 2)
    # squared errors 0.25, 0, 1, 1
    loss = training_loss(FixedPredictor(prediction), torch.zeros_like(noise), ClassCondition(0), 1, noise, schedule)
    assert float(loss) == pytest.approx(2.25 / 4)


def test_non_finite_loss_reports_timestep_and_condition():
    schedule = build_schedule(T=10)
    z0 = torch.zeros(1, 1, 2, 2)
    with pytest.raises(NumericalError) as err:
        training_loss(FixedPredictor(torch.full((1,), float("nan"))), z0, ClassCondition(1), 4, z0.clone(), schedule)
    assert err.value.timestep == 4
    assert err.value.condition == "1"


# Ancestral step
def test_reverse_step_degenerate_kernel_is_identity():
    schedule = manual_schedule([1 - 1e-12])
    z = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    out = ddpm_reverse_step(z, torch.zeros_like(z), 1, schedule)
    assert torch.allclose(out, z, atol=1e-9)


def test_reverse_step_adds_no_noise_at_t1():
    schedule = build_schedule(T=10)
    z = torch.randn(1, 2, 3, 3)
    eps = torch.randn_like(z)
    a = ddpm_reverse_step(z, eps, 1, schedule, make_generator(1))
    b = ddpm_reverse_step(z, eps, 1, schedule, make_generator(2))
    assert torch.equal(a, b)


def test_reverse_step_scalar_mean():
    # beta_2 = 0.1 and alpha_bar(2) = 0.5
    schedule = manual_schedule([0.5 / 0.9, 0.5])
    z = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    eps = torch.full_like(z, 0.5)

    out = ddpm_reverse_step(z, eps, 2, schedule, make_generator(7))

    mean = (1.0 - (0.1 / math.sqrt(0.5)) * 0.5) / math.sqrt(0.9)
    xi = torch.randn(z.shape, generator=make_generator(7), dtype=z.dtype)
    assert float(out) == pytest.approx(mean + math.sqrt(0.1) * float(xi), rel=1e-9)


# DDIM step
def test_ddim_step_equal_coefficients_is_identity():
    schedule = manual_schedule([0.5, 0.5])
    z = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    out = ddim_step(z, torch.randn_like(z), 2, 1, schedule)
    assert torch.allclose(out, z, atol=1e-12)


def test_ddim_step_to_t0_returns_predicted_clean_latent():
    schedule = manual_schedule([0.6])
    z = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    eps = torch.randn_like(z)
    out = ddim_step(z, eps, 1, 0, schedule)
    assert torch.allclose(out, (z - math.sqrt(0.4) * eps) / math.sqrt(0.6))


def test_ddim_step_scalar_by_hand():
    schedule = manual_schedule([0.9, 0.5])
    z = torch.full((1, 1, 1, 1), 0.8, dtype=torch.float64)
    eps = torch.full_like(z, 0.2)

    out = ddim_step(z, eps, 2, 1, schedule)

    x0 = (0.8 - math.sqrt(0.5) * 0.2) / math.sqrt(0.5)
    assert float(out) == pytest.approx(math.sqrt(0.9) * x0 + math.sqrt(0.1) * 0.2, rel=1e-12)


def test_ddim_step_rejects_non_decreasing_target():
    schedule = build_schedule(T=10)
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ConfigError):
        ddim_step(z, z, 3, 3, schedule)


def test_ddim_step_singular_alpha_bar():
    schedule = manual_schedule([0.5, 0.0])
    z = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    with pytest.raises(NumericalError):
        ddim_step(z, z, 2, 1, schedule)


# Plans
def test_inversion_and_sampling_plans():
    ascending = DiffusionStepPlan.inversion(1000, 200)
    descending = DiffusionStepPlan.sampling(1000, 200)
    assert len(ascending.timesteps) == 200
    assert ascending.timesteps[0] == 1 and ascending.timesteps[-1] == 1000
    assert ascending.is_ascending and descending.is_descending
    assert descending.timesteps == tuple(reversed(ascending.timesteps))
    assert descending.timesteps[-1] == 1


@pytest.mark.parametrize(
    "timesteps, eta",
    [((), 0.0), ((5, 3, 4, 1), 0.0), ((9, 5, 2), 0.0), ((3, 2, 1), 1.5), ((2, 1, 0), 0.0)],
)
def test_invalid_plans(timesteps, eta):
    with pytest.raises(ConfigError):
        DiffusionStepPlan(timesteps=timesteps, eta=eta)


# Sampling
def _chain(predictor, z, timesteps, schedule, labels):
    targets = list(timesteps[1:]) + [0]
    for t, t_prev in zip(timesteps, targets):
        ts = torch.full((z.shape[0],), t, dtype=torch.long)
        z = ddim_step(z, predictor(z, ts, labels), t, t_prev, schedule)
    return z


def test_guidance_one_is_purely_conditional():
    schedule = build_schedule(T=100)
    oracle = GaussianOracle(schedule, shift=0.3)
    plan = DiffusionStepPlan((60, 30, 10, 1))
    z_T = torch.randn((2, 2, 4, 4), generator=make_generator(0), dtype=torch.float64)

    out = ddim_sample(oracle, z_T, ClassCondition(1), plan, schedule, guidance_scale=1.0)

    assert oracle.calls == len(plan.timesteps)
    expected = _chain(oracle, z_T, plan.timesteps, schedule, torch.ones(2, dtype=torch.long))
    assert torch.allclose(out, expected, atol=1e-12)


def test_guidance_changes_samples():
    schedule = build_schedule(T=100)
    oracle = GaussianOracle(schedule, shift=0.3)
    plan = DiffusionStepPlan((60, 30, 10, 1))
    z_T = torch.randn((1, 2, 4, 4), generator=make_generator(0), dtype=torch.float64)
    plain = ddim_sample(oracle, z_T, ClassCondition(0), plan, schedule, guidance_scale=1.0)
    guided = ddim_sample(oracle, z_T, ClassCondition(0), plan, schedule, guidance_scale=3.0)
    assert not torch.allclose(plain, guided)


def test_single_step_plan_matches_ddim_step():
    schedule = build_schedule(T=20)
    oracle = GaussianOracle(schedule)
    z = torch.randn((1, 2, 4, 4), generator=make_generator(5), dtype=torch.float64)
    eps = oracle(z, torch.ones(1, dtype=torch.long), torch.zeros(1, dtype=torch.long))

    out = ddim_sample(oracle, z, ClassCondition(0), DiffusionStepPlan((1,)), schedule)

    assert torch.allclose(out, ddim_step(z, eps, 1, 0, schedule), atol=1e-12)


def test_step_composition_matches_plan():
    schedule = build_schedule(T=50)
    oracle = GaussianOracle(schedule)
    z = torch.randn((3, 2, 4, 4), generator=make_generator(9))
    labels = torch.zeros(3, dtype=torch.long)
    out = ddim_sample(oracle, z, ClassCondition(0), DiffusionStepPlan((40, 25, 10, 1)), schedule)
    assert torch.allclose(out, _chain(oracle, z, (40, 25, 10, 1), schedule, labels), atol=1e-6)


def test_sampling_is_deterministic(denoiser, small_schedule):
    plan = DiffusionStepPlan.sampling(small_schedule.T, 10)
    z = torch.randn((2, 2, 4, 4), generator=make_generator(11))
    a = ddim_sample(denoiser, z, ClassCondition(1), plan, small_schedule, guidance_scale=2.0)
    b = ddim_sample(denoiser, z, ClassCondition(1), plan, small_schedule, guidance_scale=2.0)
    assert torch.equal(a, b)


def test_sampling_preconditions():
    schedule = build_schedule(T=20)
    oracle = GaussianOracle(schedule)
    z = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ConfigError):
        ddim_sample(oracle, z, ClassCondition(0), DiffusionStepPlan((10, 1)), schedule, guidance_scale=-1.0)
    with pytest.raises(ConfigError):
        ddim_sample(oracle, z, ClassCondition(0), DiffusionStepPlan((1, 10)), schedule)
    with pytest.raises(ConfigError):
        ddim_sample(oracle, z, ClassCondition(0), DiffusionStepPlan((10, 1), eta=0.5), schedule)


def test_stochastic_sampling_follows_its_generator():
    schedule = build_schedule(T=20)
    oracle = GaussianOracle(schedule)
    plan = DiffusionStepPlan((15, 8, 1), eta=1.0)
    z = torch.randn((1, 2, 4, 4), generator=make_generator(2))
    a = ddim_sample(oracle, z, ClassCondition(0), plan, schedule, generator=make_generator(3))
    b = ddim_sample(oracle, z, ClassCondition(0), plan, schedule, generator=make_generator(3))
    c = ddim_sample(oracle, z, ClassCondition(0), plan, schedule, generator=make_generator(4))
    assert torch.equal(a, b)
    assert not torch.allclose(a, c)


# Inversion
def _round_trip_errors(steps, latents, schedule, oracle):
    plan = DiffusionStepPlan.inversion(schedule.T, steps)
    errors = []
    for z0 in latents:
        code = ddim_invert(oracle, z0[None], ClassCondition(0), plan, schedule)
        back = ddim_sample(oracle, code, ClassCondition(0), plan.reversed(), schedule)
        errors.append(relative_l2(z0[None], back))
    return errors


def test_inversion_round_trip_improves_with_steps():
    schedule = build_schedule(T=1000)
    oracle = GaussianOracle(schedule, std=0.5)
    latents = 0.5 * torch.randn((10, 2, 4, 4), generator=make_generator(21), dtype=torch.float64)

    coarse = _round_trip_errors(50, latents, schedule, oracle)
    fine = _round_trip_errors(200, latents, schedule, oracle)

    assert all(f <= c for f, c in zip(fine, coarse))
    assert max(fine) < 0.1


def test_inversion_is_deterministic(denoiser, small_schedule):
    plan = DiffusionStepPlan.inversion(small_schedule.T, 10)
    z0 = torch.randn((1, 2, 4, 4), generator=make_generator(12))
    a = ddim_invert(denoiser, z0, ClassCondition(0), plan, small_schedule)
    b = ddim_invert(denoiser, z0, ClassCondition(0), plan, small_schedule)
    assert torch.equal(a, b)


def test_inversion_preconditions():
    schedule = build_schedule(T=20)
    oracle = GaussianOracle(schedule)
    z = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ConfigError):
        ddim_invert(oracle, z, ClassCondition(0), DiffusionStepPlan((10, 1)), schedule)
    with pytest.raises(ConfigError):
        ddim_invert(oracle, z, ClassCondition(0), DiffusionStepPlan((1, 10), eta=0.2), schedule)


def test_relative_l2_of_zero_reference():
    with pytest.raises(NumericalError):
        relative_l2(torch.zeros(3), torch.ones(3))
