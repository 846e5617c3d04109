"""Straight-path flow matching: interpolation, losses, Euler integration."""

import numpy as np
import pytest

from groundedflow.flowmatch import (
    DEFAULT_SCHEDULE,
    MAX_HISTORY_FRAMES,
    TimestepSampler,
    euler_sample,
    fm_loss,
    fm_loss_grad,
    interpolate,
    masked_target,
    pick_training_mode,
    sample_timestep,
    velocity_target,
)


def test_interpolation_endpoints_exact():
    rng = np.random.Generator(np.random.PCG64(20))
    z0 = rng.standard_normal((3, 4, 4, 2))
    z1 = rng.standard_normal((3, 4, 4, 2))
    assert np.array_equal(interpolate(z0, z1, 0.0), z0)
    assert np.array_equal(interpolate(z0, z1, 1.0), z1)


def test_path_derivative_matches_velocity():
    rng = np.random.Generator(np.random.PCG64(21))
    z0 = rng.standard_normal((2, 5, 5, 3))
    z1 = rng.standard_normal((2, 5, 5, 3))
    h = 1e-6
    for t in (0.2, 0.5, 0.9):
        num = (interpolate(z0, z1, t + h) - interpolate(z0, z1, t - h)) / (2 * h)
        assert np.abs(num - velocity_target(z0, z1)).max() < 1e-8


def test_true_velocity_has_zero_loss():
    rng = np.random.Generator(np.random.PCG64(22))
    z0 = rng.standard_normal((2, 6, 6, 4))
    z1 = rng.standard_normal((2, 6, 6, 4))
    assert fm_loss(velocity_target(z0, z1), z0, z1) == 0.0


def test_one_step_euler_recovers_data_exactly():
    rng = np.random.Generator(np.random.PCG64(23))
    z0 = rng.standard_normal((2, 4, 4, 3))
    z1 = rng.standard_normal((2, 4, 4, 3))

    def oracle(z, t, cond):
        return z1 - z0

    out = euler_sample(oracle, z1, cond=None, steps=1)
    assert np.array_equal(out, z1 - (z1 - z0))
    assert np.abs(out - z0).max() < 1e-12
    # more steps with the constant oracle land on the same endpoint
    out20 = euler_sample(oracle, z1, cond=None, steps=20)
    assert np.abs(out20 - z0).max() < 1e-9


def test_euler_project_callback_sees_descending_times():
    z1 = np.zeros((1, 2, 2, 1))
    seen = []

    def project(z, t_next):
        seen.append(t_next)
        return z

    euler_sample(lambda z, t, c: np.zeros_like(z), z1, None, steps=4, project=project)
    assert seen == pytest.approx([0.75, 0.5, 0.25, 0.0])
    with pytest.raises(ValueError):
        euler_sample(lambda z, t, c: z, z1, None, steps=0)


def test_euler_aborts_on_non_finite_velocity():
    z1 = np.zeros((1, 2, 2, 1))
    with pytest.raises(FloatingPointError):
        euler_sample(lambda z, t, c: np.full_like(z, np.inf), z1, None, steps=2)


def test_masked_target_checkerboard():
    rng = np.random.Generator(np.random.PCG64(24))
    z0 = rng.standard_normal((2, 4, 4, 3))
    keep = rng.standard_normal((2, 4, 4, 3))
    mask = np.indices((2, 4, 4)).sum(axis=0) % 2
    out = masked_target(z0, keep, mask.astype(np.float64))
    sel = mask.astype(bool)
    assert np.array_equal(out[sel], z0[sel])
    assert np.array_equal(out[~sel], keep[~sel])


def test_masked_target_validates_binary_mask():
    z = np.zeros((1, 2, 2, 1))
    with pytest.raises(ValueError):
        masked_target(z, z, np.full((1, 2, 2), 0.5))


def test_loss_mask_restricts_but_mean_spans_everything():
    pred = np.zeros((1, 2, 2, 1))
    z_target = np.zeros((1, 2, 2, 1))
    z1 = np.ones((1, 2, 2, 1))
    # residual is -1 everywhere; masking half the pixels leaves
    # 2 of 4 contributing, still averaged over all 4 elements
    mask = np.array([[[1.0, 1.0], [0.0, 0.0]]])
    assert fm_loss(pred, z_target, z1) == 1.0
    assert fm_loss(pred, z_target, z1, loss_mask=mask) == 0.5


def test_loss_grad_matches_finite_difference():
    rng = np.random.Generator(np.random.PCG64(25))
    pred = rng.standard_normal((1, 3, 3, 2))
    z_target = rng.standard_normal((1, 3, 3, 2))
    z1 = rng.standard_normal((1, 3, 3, 2))
    mask = (rng.random((1, 3, 3)) < 0.5).astype(np.float64)
    loss, grad = fm_loss_grad(pred, z_target, z1, loss_mask=mask)
    assert loss == fm_loss(pred, z_target, z1, loss_mask=mask)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 2, 1), (0, 2, 2, 0)]:
        bump = pred.copy()
        bump[idx] += eps
        up = fm_loss(bump, z_target, z1, loss_mask=mask)
        bump[idx] -= 2 * eps
        down = fm_loss(bump, z_target, z1, loss_mask=mask)
        assert abs((up - down) / (2 * eps) - grad[idx]) < 1e-6


def test_timestep_sampler_range_and_determinism():
    s1 = TimestepSampler(seed=77)
    s2 = TimestepSampler(seed=77)
    a = sample_timestep(s1, n=500)
    b = sample_timestep(s2, n=500)
    assert np.array_equal(a, b)
    assert ((a > 0) & (a < 1)).all()
    # positive mu pushes mass above 1/2
    shifted = sample_timestep(TimestepSampler(mu=2.0, seed=1), n=500)
    assert np.median(shifted) > 0.7
    with pytest.raises(ValueError):
        TimestepSampler(sigma=-1.0)


def test_mode_draw_consumes_fixed_randomness():
    """Branch outcome must not change how much randomness is used."""
    r1 = np.random.Generator(np.random.PCG64(30))
    r2 = np.random.Generator(np.random.PCG64(30))
    pick_training_mode(r1, (1.0, 0.0, 0.0), history_prob=0.0)
    pick_training_mode(r2, (0.0, 0.0, 1.0), history_prob=1.0)
    assert r1.random() == r2.random()


def test_mode_schedule_frequencies():
    rng = np.random.Generator(np.random.PCG64(31))
    counts = {"scene_only": 0, "motion_only": 0, "full": 0}
    hist = 0
    n = 20000
    for _ in range(n):
        mode = pick_training_mode(rng)
        counts[mode.kind] += 1
        hist += mode.history_frames > 0
    assert abs(counts["scene_only"] / n - DEFAULT_SCHEDULE[0]) < 0.02
    assert abs(counts["motion_only"] / n - DEFAULT_SCHEDULE[1]) < 0.02
    assert abs(counts["full"] / n - DEFAULT_SCHEDULE[2]) < 0.02
    assert abs(hist / n - 0.5) < 0.02


def test_mode_history_bounds():
    rng = np.random.Generator(np.random.PCG64(32))
    lengths = set()
    for _ in range(2000):
        mode = pick_training_mode(rng, history_prob=1.0)
        assert 1 <= mode.history_frames <= MAX_HISTORY_FRAMES
        lengths.add(mode.history_frames)
    assert lengths == set(range(1, MAX_HISTORY_FRAMES + 1))
    with pytest.raises(ValueError):
        pick_training_mode(rng, (0.5, 0.5, 0.5))
