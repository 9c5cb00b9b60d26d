"""Media constructions: coefficient values, drift, shifts, control checks."""

import numpy as np
import pytest
from scipy.integrate import quad

from homlab import kernels
from homlab.medium import (ControlConstants, ExtentError, MollifierSpec,
                           build_medium, cell_average, drift, drift_control,
                           fit_control_constants, load_medium,
                           make_chessboard_medium, make_constant_medium,
                           make_periodic_medium, make_trig1d_medium,
                           make_trig1dt_medium, make_trig1dw_medium, save_medium,
                           validate_control)


@pytest.fixture(scope="module")
def periodic():
    return make_periodic_medium(1.0, {"kind": "identity"})


@pytest.fixture(scope="module")
def chessboard():
    return make_chessboard_medium(0.5, MollifierSpec(0.25), seed=7, extent=32)


# ---------------------------------------------------------------------------
# periodic medium
# ---------------------------------------------------------------------------

def test_periodic_sigma_tilde_at_center(periodic):
    st = periodic.field.sigma_tilde([[np.pi, np.pi]])[0]
    np.testing.assert_allclose(st, 4.0 * np.eye(2), atol=1e-14)


def test_periodic_degenerates_on_cell_edge(periodic):
    for y in (0.3, 1.0, 5.0):
        st = periodic.field.sigma_tilde([[0.0, y]])[0]
        np.testing.assert_allclose(st, 0.0, atol=1e-14)


def test_periodic_a_is_squared_factor(periodic):
    pts = np.array([[0.5, 1.2], [2.0, 4.0], [np.pi, np.pi]])
    s = (1 - np.cos(pts[:, 0])) * (1 - np.cos(pts[:, 1]))
    a = periodic.field.a(0.0, pts)
    for k in range(len(pts)):
        np.testing.assert_allclose(a[k], s[k] ** 2 * np.eye(2), atol=1e-12)


def test_periodic_rejects_bad_ellipticity():
    with pytest.raises(ValueError, match="ellipticity"):
        make_periodic_medium(1.0, {"kind": "diag", "entries": [2.0, 1.0]})
    # the same U is admissible once alpha is large enough
    make_periodic_medium(4.0, {"kind": "diag", "entries": [2.0, 1.0]})


def test_periodic_control_constants_follow_alpha():
    med = make_periodic_medium(4.0, {"kind": "diag", "entries": [2.0, 0.5]})
    rep = validate_control(med.field, med.control, resolution=9)
    assert rep.passed, str(rep)
    # tighter constants than the declared band must fail
    bad = ControlConstants(m=1.0, M=4.0)
    assert not validate_control(med.field, bad, resolution=9).passed


def test_shift_group_property(periodic):
    rng = np.random.default_rng(3)
    for _ in range(5):
        s, y = rng.uniform(-5, 5), rng.uniform(-5, 5, size=2)
        t, x = rng.uniform(0, 7), rng.uniform(0, 7, size=(4, 2))
        shifted = periodic.shifted(s, y)
        np.testing.assert_allclose(shifted.field.a(t, x),
                                   periodic.field.a(t + s, x + y), atol=1e-12)
        np.testing.assert_allclose(shifted.field.V(x), periodic.field.V(x + y),
                                   atol=1e-12)


def test_shift_composition_matches_single_shift(periodic):
    a = periodic.shifted(0.2, [0.1, -0.3]).shifted(0.5, [1.0, 2.0])
    b = periodic.shifted(0.7, [1.1, 1.7])
    pts = np.array([[0.3, 0.9]])
    np.testing.assert_allclose(a.field.a(1.0, pts), b.field.a(1.0, pts), atol=1e-14)


def test_reevaluation_is_bitwise_deterministic(chessboard):
    t = np.array([0.13, 7.7])
    x = np.array([[0.4, 1.9], [-3.3, 2.2]])
    first = chessboard.field.sigma(t, x)
    second = chessboard.field.sigma(t, x)
    assert (first == second).all()


# ---------------------------------------------------------------------------
# chessboard medium
# ---------------------------------------------------------------------------

def test_chessboard_all_ones_gives_identity():
    med = make_chessboard_medium(1.0, MollifierSpec(0.25), seed=3, extent=16)
    x = np.array([[0.37, -1.4], [2.9, 0.0]])
    st = med.field.sigma_tilde(x)
    for k in range(2):
        np.testing.assert_allclose(st[k], np.eye(2), atol=1e-14)


def test_chessboard_all_zeros_degenerates_second_direction():
    med = make_chessboard_medium(0.0, MollifierSpec(0.25), seed=3, extent=16)
    st = med.field.sigma_tilde([[0.37, 1.1]])[0]
    np.testing.assert_allclose(st, np.diag([1.0, 0.0]), atol=1e-14)


def test_chessboard_exact_inside_stripe(chessboard):
    # pick a black stripe and evaluate deeper than the mollifier support
    colors = chessboard.randomness["colors_x1"]
    k_lo = chessboard.randomness["k_lo"][1]
    shift = chessboard.randomness["shift"][1]
    idx = next(j for j in range(2, len(colors) - 2) if colors[j] == 1)
    x1 = (idx + k_lo) + 0.5 - shift   # stripe midpoint in evaluation coordinates
    val = chessboard.field.sigma_tilde([[x1, 0.0]])[0, 1, 1]
    assert val == 1.0


def test_chessboard_matches_convolution_quadrature(chessboard):
    # direct quadrature of the mollification integral at random points
    mol = MollifierSpec(0.25)
    colors = np.asarray(chessboard.randomness["colors_x1"], dtype=float)
    k_lo = chessboard.randomness["k_lo"][1]
    shift = chessboard.randomness["shift"][1]

    def eta_raw(y):
        j = int(np.floor(y)) - k_lo
        return colors[j]

    rng = np.random.default_rng(5)
    xs = rng.uniform(-8, 8, size=25)
    r = mol.support_radius
    for x1 in xs:
        # split the quadrature at the stripe edges inside the support window
        y = x1 + shift
        cuts = sorted({-r, r} | {y - k for k in range(int(np.floor(y - r)),
                                                      int(np.ceil(y + r)) + 1)
                      if -r < y - k < r})
        ref = sum(quad(lambda z: eta_raw(y - z) * mol.phi(z), a, b, limit=200)[0]
                  for a, b in zip(cuts[:-1], cuts[1:]))
        got = chessboard.field.sigma_tilde([[x1, 0.0]])[0, 1, 1]
        assert abs(got - ref) < 1e-8


def test_chessboard_extent_violation_fails_loudly(chessboard):
    with pytest.raises(ExtentError):
        chessboard.field.sigma_tilde([[1e6, 0.0]])


def test_chessboard_persistence_roundtrip(tmp_path, chessboard):
    path = tmp_path / "medium.json"
    save_medium(chessboard, path)
    back = load_medium(path)
    t = np.array([0.9, 4.4])
    x = np.array([[0.3, 0.4], [-2.7, 1.9]])
    assert (back.field.sigma(t, x) == chessboard.field.sigma(t, x)).all()
    assert (back.field.H(t, x) == chessboard.field.H(t, x)).all()
    assert back.medium_id == chessboard.medium_id


def test_chessboard_stationarity_over_seeds():
    # empirical mean of alpha1 at a fixed point approaches p
    p, n_seeds = 0.4, 400
    vals = [
        make_chessboard_medium(p, MollifierSpec(0.2), seed=s, extent=8)
        .field.sigma_tilde([[0.13, 0.0]])[0, 1, 1]
        for s in range(n_seeds)
    ]
    se = np.sqrt(p * (1 - p) / n_seeds)
    assert abs(np.mean(vals) - p) < 3.5 * se


def test_mollifier_unit_mass_and_support():
    mol = MollifierSpec(0.2)
    mass, _ = quad(mol.phi, -0.2, 0.2, limit=200)
    assert abs(mass - 1.0) < 1e-10
    assert mol.phi(0.21) == 0.0 and mol.phi(-0.5) == 0.0
    assert mol.antiderivative(-0.2) == pytest.approx(0.0, abs=1e-14)
    assert mol.antiderivative(0.2) == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ValueError):
        MollifierSpec(0.3)


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------

def test_drift_constant_medium_is_zero():
    med = make_constant_medium(np.array([[1.0, 0.2], [0.0, 0.7]]),
                               H=np.array([[0.0, 0.4], [-0.4, 0.0]]))
    b = drift(med.field, 0.0, np.zeros((3, 2)))
    np.testing.assert_allclose(b, 0.0, atol=1e-14)


def test_drift_1d_formula():
    med = make_trig1d_medium(1.0, 0.5, 0.2, 0.3, -0.1)
    x = np.linspace(0, 2 * np.pi, 17)[:, None]
    a = 1 + 0.5 * np.sin(x[:, 0]) + 0.2 * np.cos(x[:, 0])
    ap = 0.5 * np.cos(x[:, 0]) - 0.2 * np.sin(x[:, 0])
    vp = -0.3 * np.sin(x[:, 0]) - 0.1 * np.cos(x[:, 0])
    np.testing.assert_allclose(drift(med.field, 0.0, x)[:, 0],
                               0.5 * ap - a * vp, atol=1e-12)


def test_drift_chessboard_stream_term(chessboard):
    # b1 = 0 (H_12 depends only on (t, x1)); b2 = -alpha1 alpha1' beta
    rng = np.random.default_rng(11)
    t = rng.uniform(-3, 3, 8)
    x = rng.uniform(-6, 6, (8, 2))
    b = drift(chessboard.field, t, x)
    np.testing.assert_allclose(b[:, 0], 0.0, atol=1e-14)
    a1 = chessboard.field.sigma_tilde(x)[:, 1, 1]
    d1 = 0.5 * chessboard.field.space_grad_a_tilde(x)[:, 1, 1, 0] / np.maximum(a1, 1e-300)
    beta = chessboard.field.H(t, x)[:, 0, 1] / np.maximum(a1**2, 1e-300)
    np.testing.assert_allclose(b[:, 1], -a1 * d1 * beta * np.where(a1 > 0, 1, 0),
                               atol=1e-10)


@pytest.mark.parametrize("factory", [
    lambda: make_periodic_medium(1.0, {"kind": "identity"}),
    lambda: make_trig1dw_medium(1.0, 0.5, 1.0),
    lambda: make_trig1dt_medium(1.0, 0.5, 0.5),
])
def test_drift_matches_finite_differences(factory):
    """Centered finite differences of the defining fields reproduce the drift
    with second-order accuracy (slope check over two step sizes)."""
    med = factory()
    fld = med.field
    d = fld.dim
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 2 * np.pi, 6)
    x = rng.uniform(0.3, 5.9, (6, d))
    b = drift(fld, t, x)

    def fd_drift(h):
        out = np.zeros((len(t), d))
        a0 = fld.a(t, x)
        gv = np.zeros((len(t), d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            ap = fld.a(t, x + e)
            am = fld.a(t, x - e)
            hp = fld.H(t, x + e)
            hm = fld.H(t, x - e)
            vp = fld.V(x + e)
            vm = fld.V(x - e)
            gv[:, j] = (vp - vm) / (2 * h)
            out += 0.5 * (ap[:, :, j] - am[:, :, j]) / (2 * h)
            out += 0.5 * (hp[:, :, j] - hm[:, :, j]) / (2 * h)
        out -= np.einsum("nij,nj->ni", a0, gv)
        return out

    err = [np.abs(fd_drift(h) - b).max() for h in (1e-2, 1e-3)]
    assert err[1] < err[0] / 50 or err[1] < 1e-11   # O(h^2) decay


def test_control_drift_drops_stream_term(chessboard):
    x = np.array([[0.4, 1.0], [2.2, -1.1]])
    bt = drift_control(chessboard.field, x)
    np.testing.assert_allclose(bt, 0.0, atol=1e-14)


# ---------------------------------------------------------------------------
# control validation
# ---------------------------------------------------------------------------

def test_validate_control_trivial_equality():
    med = make_trig1d_medium(1.0, 0.5)
    rep = validate_control(med.field, ControlConstants(m=1.0, M=1.0), resolution=16)
    assert rep.passed


def test_validate_control_periodic(periodic):
    rep = validate_control(periodic.field, periodic.control, resolution=12)
    assert rep.passed
    assert rep.min_a_eigenvalue < 1e-6    # the degeneracy is visible on the grid


def test_fit_control_constants_chessboard(chessboard):
    fit = fit_control_constants(chessboard.field, resolution=12)
    assert np.isfinite(fit.c1_h) and fit.c1_h <= 1.0 + 1e-9
    assert np.isfinite(fit.c2_h) and fit.c2_h <= chessboard.control.c2_h + 1e-9
    rep = validate_control(chessboard.field, chessboard.control, resolution=12)
    assert rep.passed


def test_antisymmetry_and_psd_everywhere(chessboard, periodic):
    rng = np.random.default_rng(8)
    t = rng.uniform(-4, 4, 40)
    for med in (chessboard, periodic):
        x = rng.uniform(-5, 5, (40, 2)) if med.kind == "chessboard" \
            else rng.uniform(0, 2 * np.pi, (40, 2))
        H = med.field.H(t, x)
        np.testing.assert_allclose(H + np.swapaxes(H, -1, -2), 0.0, atol=1e-12)
        a = med.field.a(t, x)
        np.testing.assert_allclose(a, np.swapaxes(a, -1, -2), atol=1e-12)
        assert np.linalg.eigvalsh(a).min() > -1e-10


def test_cell_average_normalization(periodic):
    assert cell_average(periodic, lambda f, t, x: np.ones(len(t))) == pytest.approx(1.0)
    med = make_trig1d_medium(1.0, 0.0, 0.0, 0.5, 0.0)
    # weighted mean of exp(+2V) equals 1/mean(exp(-2V)) for the normalized weight
    val = cell_average(med, lambda f, t, x: np.exp(2.0 * f.V(x)), resolution=256)
    from scipy.special import iv
    assert val == pytest.approx(1.0 / iv(0, 1.0), rel=1e-6)


def test_build_medium_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown keys"):
        build_medium({"kind": "trig1d", "c0": 1.0, "bogus": 2})
    with pytest.raises(ValueError, match="unknown medium kind"):
        build_medium({"kind": "nope"})
