"""Path simulation: exactness, laws, determinism, rescaling, observation."""

import numpy as np
import pytest

from homlab import kernels
from homlab.medium import (MollifierSpec, cell_average, make_chessboard_medium,
                           make_constant_medium, make_periodic_medium,
                           make_trig1dw_medium)
from homlab.sde import (SdeConfig, Trajectory, ensemble_positions, observe_environment,
                        pi_shifts, rescale, simulate, simulate_control,
                        simulate_delta, write_trajectory_csv)


def test_zero_coefficients_freeze_path():
    med = make_constant_medium(np.zeros((2, 2)))
    traj = simulate(med, SdeConfig(dt=0.1, horizon=1.0, seed=1), start=[0.3, -0.8])
    np.testing.assert_array_equal(traj.states, np.tile([0.3, -0.8], (11, 1)))


@pytest.mark.filterwarnings("ignore:dt")
def test_constant_drift_is_exact():
    med = make_constant_medium(np.zeros((2, 2)), b=[2.0, -1.0])
    traj = simulate(med, SdeConfig(dt=0.05, horizon=1.0, seed=1))
    np.testing.assert_allclose(traj.states[-1], [2.0, -1.0], rtol=1e-12)
    np.testing.assert_allclose(traj.states[10], [1.0, -0.5], rtol=1e-12)


def test_brownian_variance():
    med = make_constant_medium(np.eye(2))
    pos = ensemble_positions(med, 5, 10000, 0.05, [20], stationary_start=False)
    var = pos[:, 0, :].var(axis=0)
    assert np.all(np.abs(var - 1.0) < 0.05)


def test_trajectory_invariants():
    med = make_constant_medium(np.eye(1))
    cfg = SdeConfig(dt=0.01, horizon=0.5, seed=3, path_index=9)
    traj = simulate(med, cfg, start=[0.7])
    assert traj.times[0] == 0.0 and traj.states[0, 0] == 0.7
    np.testing.assert_allclose(np.diff(traj.times), 0.01, rtol=1e-12)
    assert traj.path_index == 9 and traj.seed == 3


def test_identical_seed_and_path_reproduce_bitwise():
    med = make_periodic_medium()
    cfg = SdeConfig(dt=0.002, horizon=0.2, seed=12, path_index=4)
    a = simulate(med, cfg, start=[1.0, 2.0])
    b = simulate(med, cfg, start=[1.0, 2.0])
    assert (a.states == b.states).all()


def test_worker_count_does_not_change_results():
    med = make_periodic_medium()
    one = ensemble_positions(med, 77, 64, 0.002, [50, 100], workers=1)
    two = ensemble_positions(med, 77, 64, 0.002, [50, 100], workers=2)
    assert (one == two).all()


def test_control_diffusion_identity_is_brownian():
    med = make_constant_medium(np.eye(2))
    cfg = SdeConfig(dt=0.01, horizon=1.0, seed=5)
    a = simulate(med, cfg)
    b = simulate_control(med, cfg)
    assert (a.states == b.states).all()    # same coefficients, same stream


def test_control_chessboard_all_zeros_freezes_second_coordinate():
    med = make_chessboard_medium(0.0, MollifierSpec(0.25), seed=2, extent=16)
    cfg = SdeConfig(dt=0.005, horizon=1.0, seed=8)
    traj = simulate_control(med, cfg, start=[0.3, 0.4])
    assert np.all(traj.states[:, 1] == 0.4)
    assert traj.states[:, 0].std() > 0.1


def test_periodic_started_at_origin_stays():
    med = make_periodic_medium()
    cfg = SdeConfig(dt=0.005, horizon=1.0, seed=5)
    traj = simulate_control(med, cfg, start=[0.0, 0.0])
    np.testing.assert_array_equal(traj.states, 0.0)
    traj2 = simulate(med, cfg, start=[0.0, 0.0])
    np.testing.assert_array_equal(traj2.states, 0.0)


# -- time-augmented diffusion -------------------------------------------------

def test_delta_zero_clock_is_exact_and_matches_plain():
    med = make_trig1dw_medium(1.0, 0.5, 1.0)
    cfg = SdeConfig(dt=0.01, horizon=1.0, seed=21, path_index=2)
    aug = simulate_delta(med, cfg, 0.0, start=[0.4])
    plain = simulate(med, cfg, start=[0.4])
    np.testing.assert_array_equal(aug.states[:, 0], np.arange(101) * 0.01)
    assert (aug.states[:, 1] == plain.states[:, 0]).all()


@pytest.mark.filterwarnings("ignore:dt")
def test_delta_one_clock_is_unit_drift_brownian():
    med = make_constant_medium(np.zeros((1, 1)))
    pos = []
    for p in range(4000):
        cfg = SdeConfig(dt=0.05, horizon=1.0, seed=31, path_index=p)
        aug = simulate_delta(med, cfg, 1.0)
        pos.append(aug.states[-1, 0])
    pos = np.asarray(pos)
    se = 1.0 / np.sqrt(len(pos))
    assert abs(pos.mean() - 1.0) < 3 * se
    assert abs(pos.var() - 1.0) < 5 * np.sqrt(2 / len(pos))


@pytest.mark.filterwarnings("ignore:dt")
def test_delta_clock_mean_is_time():
    med = make_trig1dw_medium(1.0, 0.5, 1.0)
    clocks = []
    for p in range(10000):
        cfg = SdeConfig(dt=0.1, horizon=0.5, seed=77, path_index=p)
        aug = simulate_delta(med, cfg, 0.5, start=[0.0])
        clocks.append(aug.states[-1, 0])
    clocks = np.asarray(clocks)
    se = clocks.std() / np.sqrt(len(clocks))
    assert abs(clocks.mean() - 0.5) <= 3 * se


@pytest.mark.filterwarnings("ignore:dt")
def test_delta_continuity_toward_plain_dynamics():
    """Mean-square gap between augmented and plain paths shrinks with delta."""
    med = make_trig1dw_medium(1.0, 0.5, 1.0)
    gaps = []
    for delta in (1.0, 0.1, 0.01):
        sq = 0.0
        for p in range(200):
            cfg = SdeConfig(dt=0.01, horizon=1.0, seed=13, path_index=p)
            aug = simulate_delta(med, cfg, delta, start=[0.2])
            plain = simulate(med, cfg, start=[0.2])
            sq += np.max((aug.states[:, 1] - plain.states[:, 0]) ** 2)
        gaps.append(sq / 200)
    assert gaps[0] > gaps[1] > gaps[2]


# -- rescaling -----------------------------------------------------------------

def test_rescale_identity():
    med = make_constant_medium(np.eye(1))
    traj = simulate(med, SdeConfig(dt=0.01, horizon=1.0, seed=2))
    res = rescale(traj, 1.0)
    assert (res.states == traj.states).all() and (res.times == traj.times).all()


def test_rescale_brownian_covariance():
    med = make_constant_medium(np.eye(2))
    eps = 0.25
    pos = ensemble_positions(med, 17, 8000, 0.1, [int(1 / eps**2 / 0.1)],
                             stationary_start=False)
    Z = pos[:, 0, :] * eps
    cov = Z.T @ Z / len(Z)
    assert np.abs(cov - np.eye(2)).max() < 0.06


@pytest.mark.filterwarnings("ignore:dt")
def test_rescale_constant_path_collapses():
    med = make_constant_medium(np.zeros((1, 1)))
    traj = simulate(med, SdeConfig(dt=0.1, horizon=10.0, seed=2), start=[0.0])
    res = rescale(traj, 0.1, macro_times=[0.05, 0.1])
    np.testing.assert_array_equal(res.states, 0.0)
    np.testing.assert_allclose(res.times, [0.05, 0.1])


def test_rescale_insufficient_horizon():
    med = make_constant_medium(np.eye(1))
    traj = simulate(med, SdeConfig(dt=0.1, horizon=1.0, seed=2))
    with pytest.raises(ValueError, match="horizon"):
        rescale(traj, 0.1, macro_times=[1.0])


# -- observation ---------------------------------------------------------------

def test_observe_constant_and_zero_potential():
    med = make_periodic_medium()
    traj = simulate(med, SdeConfig(dt=0.005, horizon=0.2, seed=4), start=[1.0, 1.0])
    ones = observe_environment(med, traj, "one")
    np.testing.assert_array_equal(ones, 1.0)
    np.testing.assert_array_equal(observe_environment(med, traj, "V"), 0.0)


def test_observe_a11_on_frozen_path():
    med = make_periodic_medium()
    frozen = Trajectory(times=np.arange(5) * 0.1,
                        states=np.tile([np.pi, np.pi], (5, 1)),
                        medium_id=med.medium_id, seed=0, path_index=0)
    vals = observe_environment(med, frozen, "a11")
    np.testing.assert_allclose(vals, 16.0, atol=1e-12)


def test_weak_order_identity_msd():
    med = make_constant_medium(np.eye(2))
    pos = ensemble_positions(med, 23, 10000, 0.05, [40], stationary_start=False)
    msd = (pos[:, 0, :] ** 2).sum(axis=1)
    se = msd.std() / np.sqrt(len(msd))
    assert abs(msd.mean() - 2.0 * 2.0) < 3 * se


def test_pi_invariance_of_environment():
    """Started from stationary shifts, observable means stay at the cell
    average for all times."""
    med = make_periodic_medium()
    pos = ensemble_positions(med, 99, 4000, 0.005, [100, 400, 800])
    shift_t, shift_x = pi_shifts(med, 99, np.arange(4000, dtype=np.uint64))
    target = cell_average(med, lambda f, t, x: f.a(t, x)[:, 0, 0])
    for k, step in enumerate([100, 400, 800]):
        pts = pos[:, k, :] + shift_x
        vals = med.field.a(step * 0.005 + shift_t, pts)[:, 0, 0]
        se = vals.std() / np.sqrt(len(vals))
        assert abs(vals.mean() - target) < 4 * se


def test_pi_shifts_follow_weight():
    from homlab.medium import make_trig1d_medium
    med = make_trig1d_medium(1.0, 0.0, 0.0, 0.5, 0.0)   # V = 0.5 cos x
    _, sx = pi_shifts(med, 3, np.arange(40000, dtype=np.uint64))
    # histogram against exp(-2V)/Z on the cell
    w = np.exp(-np.cos(sx[:, 0]))
    hist, edges = np.histogram(sx[:, 0], bins=16, range=(0, 2 * np.pi))
    centers = 0.5 * (edges[1:] + edges[:-1])
    expect = np.exp(-np.cos(centers))
    expect = expect / expect.sum() * len(sx)
    chi2 = np.sum((hist - expect) ** 2 / expect)
    assert chi2 < 50   # 15 dof, generous


def test_stability_guard_warns():
    med = make_periodic_medium()   # coefficient bound 4
    with pytest.warns(UserWarning, match="coarse"):
        simulate(med, SdeConfig(dt=0.05, horizon=0.1, seed=1), start=[1.0, 1.0])


def test_trajectory_csv(tmp_path):
    med = make_constant_medium(np.eye(2))
    traj = simulate(med, SdeConfig(dt=0.1, horizon=0.3, seed=6), start=[0.1, 0.2])
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "path,step,t,x1,x2"
    assert len(lines) == 5
    first = lines[1].split(",")
    assert first[:2] == ["0", "0"] and float(first[3]) == 0.1
