import numpy as np
import pytest

from avatarstream.sched import (
    NoiseSchedule,
    ScheduleError,
    ShapeError,
    build_schedule,
    ddim_step,
    eps_from_v,
    forward_diffuse,
    sample_grid,
    v_target,
    x0_from_v,
)

# Spot values recomputed with a 50-digit mpmath cumulative product of the
# scaled-linear betas (T=1000, 0.00085, 0.012), frozen here.
ALPHA_BAR_ORACLE = {
    0: 0.99915,
    1: 0.99829602783845140848,
    499: 0.27766965045646781407,
    998: 0.0047166988998757493967,
    999: 0.0046600985130772404039,
}


def high_precision_alpha_bars(T, beta_min, beta_max):
    """Independent recomputation with Python floats via math.fsum of logs."""
    import math

    rmin, rmax = math.sqrt(beta_min), math.sqrt(beta_max)
    logs = []
    out = np.empty(T)
    for t in range(T):
        r = rmin + (t / (T - 1)) * (rmax - rmin)
        logs.append(math.log1p(-r * r))
        out[t] = math.exp(math.fsum(logs))
    return out


def test_constant_beta_products():
    s = build_schedule(4, 0.1, 0.1, zero_snr=False)
    np.testing.assert_allclose(s.betas, [0.1, 0.1, 0.1, 0.1], rtol=0, atol=1e-15)
    np.testing.assert_allclose(
        s.alpha_bars, [0.9, 0.81, 0.729, 0.6561], rtol=0, atol=1e-15
    )


def test_scaled_linear_matches_high_precision_oracle():
    s = build_schedule(1000, 0.00085, 0.012, zero_snr=False)
    assert s.alpha_bars[0] == pytest.approx(1 - 0.00085, abs=1e-15)
    for t, want in ALPHA_BAR_ORACLE.items():
        assert s.alpha_bars[t] == pytest.approx(want, rel=1e-12)
    oracle = high_precision_alpha_bars(1000, 0.00085, 0.012)
    np.testing.assert_allclose(s.alpha_bars, oracle, rtol=1e-10)


def test_zero_snr_terminal_and_initial():
    s = build_schedule(1000, 0.00085, 0.012, zero_snr=True)
    assert abs(s.sqrt_alpha_bar(999)) <= 1e-12
    assert s.alpha_bars[999] == 0.0
    # initial sqrt(alpha_bar) preserved by the affine rescale
    assert s.sqrt_alpha_bar(0) == pytest.approx(np.sqrt(1 - 0.00085), abs=1e-12)


@pytest.mark.parametrize("zero_snr", [False, True])
def test_alpha_bars_strictly_decreasing(zero_snr):
    s = build_schedule(1000, 0.00085, 0.012, zero_snr=zero_snr)
    assert np.all(np.diff(s.alpha_bars) < 0)


def test_invalid_schedule_params():
    with pytest.raises(ScheduleError):
        build_schedule(1, 0.001, 0.01)
    with pytest.raises(ScheduleError):
        build_schedule(10, 0.0, 0.01)
    with pytest.raises(ScheduleError):
        build_schedule(10, 0.02, 0.01)
    with pytest.raises(ScheduleError):
        build_schedule(10, 0.5, 1.0)


@pytest.fixture(scope="module")
def sched1000():
    return build_schedule(1000, 0.00085, 0.012, zero_snr=True)


def test_forward_diffuse_endpoints(sched1000):
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    eps = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
    # terminal step of a zero-SNR schedule is pure noise
    np.testing.assert_array_equal(forward_diffuse(x0, eps, sched1000, 999), eps)
    # a synthetic schedule with alpha_bar = 1 returns x0 exactly
    s1 = NoiseSchedule(2, np.array([0.0, 0.1]), np.array([1.0, 0.9]), zero_snr=False)
    np.testing.assert_array_equal(forward_diffuse(x0, eps, s1, 0), x0)


def test_forward_diffuse_scalar_arithmetic():
    s = NoiseSchedule(2, np.array([0.0, 0.1]), np.array([0.64, 0.5]), zero_snr=False)
    x0 = np.full((1,), 1.0)
    eps = np.full((1,), 0.5)
    got = forward_diffuse(x0, eps, s, 0)
    assert got[0] == pytest.approx(0.8 * 1.0 + 0.6 * 0.5, abs=1e-12)  # 1.1


def test_forward_diffuse_shape_mismatch(sched1000):
    with pytest.raises(ShapeError):
        forward_diffuse(np.zeros((2, 3)), np.zeros((3, 2)), 10, sched1000)


def test_v_at_boundaries(sched1000):
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 4)).astype(np.float32)
    eps = rng.standard_normal((3, 4)).astype(np.float32)
    # alpha_bar = 0 at the zero-SNR terminal step: v = -x0
    np.testing.assert_allclose(v_target(x0, eps, sched1000, 999), -x0, atol=1e-7)
    # alpha_bar = 1: v = eps and x0_from_v returns x_t
    s1 = NoiseSchedule(2, np.array([0.0, 0.1]), np.array([1.0, 0.9]), zero_snr=False)
    np.testing.assert_array_equal(v_target(x0, eps, s1, 0), eps)
    np.testing.assert_array_equal(x0_from_v(x0, eps, s1, 0), x0)


def test_conversion_triangle_closes(sched1000):
    rng = np.random.default_rng(2)
    for _ in range(1000):
        t = int(rng.integers(0, 1000))
        x0 = rng.standard_normal(6).astype(np.float32)
        eps = rng.standard_normal(6).astype(np.float32)
        x_t = forward_diffuse(x0, eps, sched1000, t)
        v = v_target(x0, eps, sched1000, t)
        np.testing.assert_allclose(x0_from_v(x_t, v, sched1000, t), x0, atol=1e-9)
        np.testing.assert_allclose(eps_from_v(x_t, v, sched1000, t), eps, atol=1e-9)


def test_ddim_fixed_point_and_landing(sched1000):
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 4)).astype(np.float32)
    eps = rng.standard_normal((4, 4)).astype(np.float32)
    x_t = forward_diffuse(x0, eps, sched1000, 700)
    np.testing.assert_allclose(ddim_step(x_t, x0, sched1000, 700, 700), x_t, atol=1e-6)
    # landing on an alpha_bar = 1 step returns x0_hat
    s1 = NoiseSchedule(
        3, np.array([0.0, 0.2, 0.3]), np.array([1.0, 0.8, 0.5]), zero_snr=False
    )
    x_t1 = forward_diffuse(x0, eps, s1, 2)
    np.testing.assert_allclose(ddim_step(x_t1, x0, s1, 2, 0), x0, atol=1e-6)


def test_ddim_matches_forward_process_oracle(sched1000):
    # oracle: a DDIM step with exact x0 lands on the forward process with
    # the same eps
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((2, 4, 8, 8))
    eps = rng.standard_normal((2, 4, 8, 8))
    x800 = forward_diffuse(x0, eps, sched1000, 800)
    got = ddim_step(x800, x0, sched1000, 800, 600)
    want = forward_diffuse(x0, eps, sched1000, 600)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_ddim_order_and_degenerate_errors(sched1000):
    x = np.zeros((2, 2))
    with pytest.raises(ScheduleError):
        ddim_step(x, x, sched1000, 100, 200)
    s1 = NoiseSchedule(2, np.array([0.0, 0.1]), np.array([1.0, 0.9]), zero_snr=False)
    with pytest.raises(ScheduleError):
        ddim_step(np.ones((2, 2)), np.zeros((2, 2)), s1, 0, 0)


def test_full_trajectory_with_exact_oracle_reconstructs_x0(sched1000):
    # Walk the entire T-step ladder in float32 with the exact x0 oracle.
    # Every intermediate state must track the forward process with the same
    # eps, and recovering x0 from the endpoint must close to 1e-6 despite
    # 999 sequential eps-recovery round-trips.
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    eps = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    x = forward_diffuse(x0, eps, sched1000, 999).astype(np.float32)
    for t in range(999, 0, -1):
        x = ddim_step(x, x0, sched1000, t, t - 1).astype(np.float32)
    np.testing.assert_allclose(x, forward_diffuse(x0, eps, sched1000, 0), atol=1e-6)
    recovered = (x - sched1000.sqrt_one_minus_alpha_bar(0) * eps) / sched1000.sqrt_alpha_bar(0)
    np.testing.assert_allclose(recovered, x0, atol=1e-6)


def test_sample_grid():
    s = build_schedule(1000, 0.00085, 0.012, zero_snr=True)
    assert sample_grid(s, 2) == [999, 500, 0]
    assert sample_grid(s, 4) == [999, 749, 500, 250, 0]
    g25 = sample_grid(s, 25)
    assert g25[0] == 999 and g25[-1] == 0 and len(g25) == 26
    assert all(a > b for a, b in zip(g25, g25[1:]))
    with pytest.raises(ScheduleError):
        sample_grid(s, 0)
