import numpy as np
import pytest
from scipy.integrate import solve_ivp

from modrec import dynamics as dyn
from modrec.errors import ContractError, DataFormatError, DivergedError, UnknownSystemError
from modrec.library import SparseModel, build_library, rhs


@pytest.fixture(scope="module")
def registry():
    return dyn.builtin_systems()


def zero_system(n=2, order=2):
    lib = build_library(n, 0, order)
    return dyn.DynamicalSystem("zero", lib, np.zeros((n, lib.size)))


def scalar_exponential():
    lib = build_library(1, 0, 1)
    theta = np.zeros((1, lib.size))
    theta[0, lib.index_of((1,))] = 1.0
    return dyn.DynamicalSystem("exp", lib, theta)


def test_zero_dynamics_constant_trajectory():
    traj = dyn.simulate(zero_system(), [1.0, 2.0], dt=0.1, steps=5)
    assert traj.N == 6
    assert np.all(traj.states == [1.0, 2.0])
    assert np.all(traj.states[0] == [1.0, 2.0])


def test_exponential_against_closed_form():
    traj = dyn.simulate(scalar_exponential(), [1.0], dt=0.1, steps=10)
    assert abs(traj.states[-1, 0] - 2.718282) < 1e-4


def test_lotka_volterra_conserved_quantity(registry):
    # classic predator-prey first integral: d*x - c*ln x + b*y - a*ln y
    traj = dyn.simulate(registry["lotka_volterra"], [1.0, 1.0], dt=0.01, steps=1000)
    x, y = traj.states[:, 0], traj.states[:, 1]
    V = 0.5 * x - np.log(x) + 0.5 * y - np.log(y)
    assert np.max(np.abs(V - V[0])) / abs(V[0]) < 1e-3


def test_simulate_matches_scipy_reference(registry):
    lv = registry["lotka_volterra"]
    model = lv.model()
    traj = dyn.simulate(lv, [1.0, 1.5], dt=0.01, steps=500)
    sol = solve_ivp(
        lambda t, y: rhs(model, y), (0.0, 5.0), [1.0, 1.5],
        t_eval=traj.times, rtol=1e-11, atol=1e-12,
    )
    assert np.max(np.abs(sol.y.T - traj.states)) < 1e-6


def test_simulate_deterministic(registry):
    lz = registry["lorenz"]
    a = dyn.simulate(lz, [1.0, 1.0, 1.0], dt=0.005, steps=400)
    b = dyn.simulate(lz, [1.0, 1.0, 1.0], dt=0.005, steps=400)
    assert np.array_equal(a.states, b.states)


def test_rk4_global_order(registry):
    # error(dt)/error(dt/2) should sit near the theoretical 16
    for name, y0, dt, steps in [
        ("lotka_volterra", [1.0, 1.0], 0.02, 100),
        ("lorenz", [1.0, 1.0, 1.0], 0.004, 250),
    ]:
        system = registry[name]
        ref = dyn.simulate(system, y0, dt=dt / 64, steps=steps * 64)
        e = []
        for f in (1, 2):
            t = dyn.simulate(system, y0, dt=dt / f, steps=steps * f)
            e.append(np.max(np.abs(t.states[-1] - ref.states[-1])))
        ratio = e[0] / e[1]
        assert 12 <= ratio <= 20, (name, ratio)


def test_simulate_divergence_reports_step():
    lib = build_library(1, 0, 2)
    theta = np.zeros((1, lib.size))
    theta[0, lib.index_of((2,))] = 1.0  # ydot = y^2 blows up in finite time
    system = dyn.DynamicalSystem("blowup", lib, theta)
    with pytest.raises(DivergedError) as exc:
        dyn.simulate(system, [1.0], dt=0.5, steps=100)
    assert exc.value.step is not None


def test_add_noise_sigma_zero_identity(registry):
    traj = dyn.simulate(registry["lotka_volterra"], [1.0, 1.0], dt=0.01, steps=50)
    for seed in (0, 1, 123):
        noisy = dyn.add_noise(traj, 0.0, seed)
        assert noisy is traj


def test_add_noise_deterministic(registry):
    traj = dyn.simulate(registry["lotka_volterra"], [1.0, 1.0], dt=0.01, steps=50)
    a = dyn.add_noise(traj, 0.1, seed=42)
    b = dyn.add_noise(traj, 0.1, seed=42)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.times, traj.times)
    assert a.dt == traj.dt


def test_add_noise_sample_std():
    traj = dyn.simulate(zero_system(n=1, order=1), [0.0], dt=0.01, steps=9999)
    noisy = dyn.add_noise(traj, 0.1, seed=3)
    sd = np.std(noisy.states - traj.states)
    assert abs(sd - 0.1) / 0.1 < 0.05


def test_add_noise_negative_sigma():
    traj = dyn.simulate(zero_system(), [1.0, 1.0], dt=0.1, steps=3)
    with pytest.raises(ContractError):
        dyn.add_noise(traj, -0.1, 0)


def test_registry_contents(registry):
    lz = registry["lorenz"]
    assert lz.n == 3 and lz.m == 0 and lz.library.order == 2
    assert lz.model().p == 7
    lv = registry["lotka_volterra"]
    assert lv.n == 2 and lv.model().p == 4
    np.testing.assert_allclose(rhs(lv.model(), [1.0, 1.0]), [0.5, -0.5])


def test_registry_missing_name():
    with pytest.raises(UnknownSystemError):
        dyn.get_system("missing_name")


def test_user_system_config_joins_registry(tmp_path):
    cfg = tmp_path / "f8_crusader.sys"
    cfg.write_text(
        "name = f8_crusader\nn = 1\nm = 1\nM = 2\n0  1 0  -0.5\n0  0 1  1.0\n",
        encoding="utf-8",
    )
    registry = dyn.builtin_systems([cfg])
    assert "f8_crusader" in registry
    assert registry["f8_crusader"].m == 1
    assert "f8_crusader" not in dyn.builtin_systems()


@pytest.mark.parametrize("text,fragment", [
    ("n = 2\nm = 0\nM = 2\n", "name"),
    ("name = x\nn = two\nm = 0\nM = 2\n", "integer"),
    ("name = x\nn = 1\nm = 0\nM = 2\n0  1  1.0  9\n", "fields"),
    ("name = x\nn = 1\nm = 0\nM = 2\n5  1  1.0\n", "row index"),
    ("name = x\nn = 1\nm = 0\nM = 1\n0  3  1.0\n", "order"),
    ("name = x\nn = 1\nm = 0\nM = 1\nbogus_key = 1\n", "unknown key"),
])
def test_system_config_parse_errors(text, fragment):
    with pytest.raises(DataFormatError) as exc:
        dyn.parse_system_config(text)
    assert fragment in str(exc.value)


def test_system_config_round_trip(registry):
    lz = registry["lorenz"]
    text = dyn.format_system_config(lz)
    back = dyn.parse_system_config(text)
    assert back.name == lz.name
    np.testing.assert_array_equal(back.theta_true, lz.theta_true)


def test_identifiability_zero_feature_flagged():
    # x2 stays 0, so the x1*x2 term never moves the trajectory
    lib = build_library(2, 0, 2)
    theta = np.zeros((2, lib.size))
    theta[0, lib.index_of((1, 0))] = 1.0
    theta[0, lib.index_of((1, 1))] = 0.7
    system = dyn.DynamicalSystem("degenerate", lib, theta)
    report = dyn.identifiability_check(system, [1.0, 0.0], horizon=1.0, tol=1e-8, dt=0.01)
    flagged_terms = {report.support[i] for i in report.flagged}
    assert (0, lib.index_of((1, 1))) in flagged_terms
    assert (0, lib.index_of((1, 0))) not in flagged_terms


def test_identifiability_scalar_exponential_not_flagged():
    report = dyn.identifiability_check(scalar_exponential(), [1.0], horizon=1.0, tol=1e-8, dt=0.01)
    assert len(report.flagged) == 0
    assert report.sensitivities[0] > 0


def test_identifiability_tol_zero_flags_nothing(registry):
    report = dyn.identifiability_check(
        registry["lotka_volterra"], [1.0, 1.0], horizon=1.0, tol=0.0, dt=0.01
    )
    assert report.flagged == frozenset()


def test_identifiability_matches_independent_fd_loop(registry):
    lv = registry["lotka_volterra"]
    tol = 1.0
    report = dyn.identifiability_check(lv, [1.0, 1.0], horizon=2.0, tol=tol, dt=0.01)
    # independent re-implementation of the central-difference sensitivity loop
    for i, (r, c) in enumerate(report.support):
        h = 1e-4 * max(1.0, abs(lv.theta_true[r, c]))
        thp, thm = lv.theta_true.copy(), lv.theta_true.copy()
        thp[r, c] += h
        thm[r, c] -= h
        sp = dyn.simulate(dyn.DynamicalSystem("p", lv.library, thp), [1.0, 1.0], dt=0.01, steps=200)
        sm = dyn.simulate(dyn.DynamicalSystem("m", lv.library, thm), [1.0, 1.0], dt=0.01, steps=200)
        sens = np.linalg.norm((sp.states - sm.states) / (2 * h))
        assert sens == pytest.approx(report.sensitivities[i], rel=1e-12)
        assert (i in report.flagged) == (sens < tol)


def test_identifiability_diverged_marks_indeterminate():
    lib = build_library(1, 0, 2)
    theta = np.zeros((1, lib.size))
    theta[0, lib.index_of((2,))] = 1.0
    system = dyn.DynamicalSystem("blowup", lib, theta)
    report = dyn.identifiability_check(system, [1.0], horizon=60.0, tol=1e-8, dt=0.05)
    assert 0 in report.indeterminate
    assert 0 not in report.flagged


def test_trajectory_csv_round_trip_bytes(tmp_path, registry):
    traj = dyn.simulate(registry["lorenz"], [1.0, 1.0, 1.0], dt=0.01, steps=100)
    path = tmp_path / "t.csv"
    dyn.write_trajectory_csv(traj, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.splitlines()[0] == b"t,y1,y2,y3"
    back = dyn.read_trajectory_csv(path)
    assert np.array_equal(back.states, traj.states)
    assert np.array_equal(back.times, traj.times)
    # writing again is byte-identical
    path2 = tmp_path / "t2.csv"
    dyn.write_trajectory_csv(back, path2)
    assert path2.read_bytes() == raw


def test_trajectory_csv_decimal_notation(tmp_path):
    lib = build_library(1, 0, 1)
    traj = dyn.Trajectory(
        times=np.array([0.0, 1e-6]), states=np.array([[1e-7], [2.5]]),
        inputs=np.zeros((2, 0)), dt=1e-6,
    )
    path = tmp_path / "small.csv"
    dyn.write_trajectory_csv(traj, path)
    text = path.read_text()
    assert "e" not in text.replace("e-314", "") and "E" not in text
    back = dyn.read_trajectory_csv(path)
    assert back.states[0, 0] == 1e-7


def test_trajectory_csv_truncated_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,y1\n0.0,1.0\n0.1\n", encoding="utf-8")
    with pytest.raises(DataFormatError) as exc:
        dyn.read_trajectory_csv(path)
    assert exc.value.line == 3


def test_trajectory_invariants():
    with pytest.raises(ContractError):
        dyn.Trajectory(times=np.array([0.0, 0.1, 0.3]), states=np.zeros((3, 1)),
                       inputs=np.zeros((3, 0)), dt=0.1)
    with pytest.raises(ContractError):
        dyn.Trajectory(times=np.array([0.0, 0.1]), states=np.zeros((3, 1)),
                       inputs=np.zeros((2, 0)), dt=0.1)
