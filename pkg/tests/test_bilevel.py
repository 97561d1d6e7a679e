import math

import numpy as np
import pytest

from gmoa import bilevel as bl
from gmoa.bilevel import (
    GmoaConfig,
    StepFailure,
    Trajectory,
    TrajectoryRecord,
    delta_mu,
    gmoa_multistart,
    gmoa_run,
    implicit_direction,
    implicit_grad,
    implicit_grad_generic,
    manifold_surface,
    parallel_map,
    mixed_partial,
    random_starts,
    surface_to_csv,
)
from gmoa.datagen import gen_gmm, preset
from gmoa.em import EmConfig, best_fit
from gmoa.mixture import Knowns, MixtureParams, mixture_nll, reduced_basis
from gmoa.reducer import Angle2D, Angle3D, Linear
from gmoa.separation import g_value

KNOWN_2D = Knowns(np.array([[2.0], [1.0]]), np.array([0.5, 0.5]))
SQRT34 = math.sqrt(34)
TARGET = math.atan2(5, 3)


@pytest.fixture(scope="module")
def data2d():
    return gen_gmm(preset("paper2d", 2000, 0)).X


def _cfg(**kw):
    base = dict(eta0=0.1, n_iter=100, knowns=KNOWN_2D, step_tol=1e-4,
                em=EmConfig(max_iters=200, tol=1e-9, refine=True))
    base.update(kw)
    return GmoaConfig(**base)


# mixed partial


def test_mixed_partial_weight_row_zero_for_identical_components():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 2))
    u = MixtureParams([[0.1], [0.1]], [[1.3], [1.3]], [0.5, 0.5])
    M = mixed_partial(u, Linear(np.array([[0.6], [-0.4]])), X, 1e-5, np.eye(u.size))
    np.testing.assert_allclose(M[[2, 5]], 0.0, atol=1e-8)


def test_mixed_partial_zero_when_energy_ignores_theta():
    # all-zero inputs: the projection, hence E, does not depend on theta
    X = np.zeros((10, 3))
    u = MixtureParams([[0.0], [1.0]], [[1.0], [2.0]], [0.3, 0.7])
    M = mixed_partial(u, Linear(np.ones((3, 1))), X, 1e-5, np.eye(u.size))
    np.testing.assert_allclose(M, 0.0, atol=1e-8)


def test_mixed_partial_matches_double_fd():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(25, 2))
    u = MixtureParams([[-0.5], [0.8]], [[1.2], [0.7]], [0.4, 0.6])
    th = Linear(rng.normal(size=(2, 1)))
    M = mixed_partial(u, th, X, 1e-5, np.eye(u.size))
    h = 1e-4
    oracle = np.zeros_like(M)
    for j in range(u.size):
        ej = np.zeros(u.size)
        ej[j] = h
        for l in range(2):
            el = np.zeros(2)
            el[l] = h
            E = lambda du, dt: mixture_nll(MixtureParams.unpack(u.pack() + du, 2, 1),
                                           th.with_flat(th.flat() + dt).project(X))
            oracle[j, l] = (E(ej, el) - E(ej, -el) - E(-ej, el) + E(-ej, -el)) / (4 * h * h)
    assert np.max(np.abs(M - oracle)) / np.max(np.abs(oracle)) < 1e-3


def test_mixed_partial_rejects_bad_delta():
    u = MixtureParams([[0.0], [1.0]], [[1.0], [1.0]], [0.5, 0.5])
    with pytest.raises(ValueError):
        mixed_partial(u, Angle2D(0.0), np.ones((3, 2)), 0.0)


# implicit gradient


def test_quadratic_toy_unit():
    step, _, lam = implicit_grad_generic(
        lambda u, t: 2 * (u - t), lambda u, t: -2 * (u - t), lambda u: np.ones(1), 0.3, 0.3)
    assert step[0] == pytest.approx(1.0, abs=1e-10)
    assert lam == 0.0


def test_quadratic_toy_scaled():
    step, _, _ = implicit_grad_generic(
        lambda u, t: 2 * (u - 2 * t), lambda u, t: -4 * (u - 2 * t), lambda u: np.ones(1), 1.4, 0.7)
    assert step[0] == pytest.approx(2.0, abs=1e-10)


def test_implicit_direction_closed_form_blocks():
    step, cond, lam = implicit_direction([1.0], [[2.0]], [[-2.0]])
    assert step[0] == 1.0 and cond == 1.0 and lam == 0.0


def test_implicit_direction_regularizes_and_fails():
    H = np.diag([1.0, 1e-14])
    step, cond, lam = implicit_direction([1.0, 0.0], H, np.eye(2))
    assert lam > 0 and cond <= 1e12 and np.all(np.isfinite(step))
    with pytest.raises(StepFailure):
        implicit_direction([1.0, 0.0], H, np.eye(2), shifts=(0.0,))


def test_implicit_grad_separated_mixture_closed_form():
    # clusters so far apart that u_theta is the per-cluster projected mean,
    # so d g(u_theta)/d theta has a closed form
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal([-500, 0], 1, (50, 2)), rng.normal([500, 3], 1, (70, 2))])
    kn = Knowns(np.array([[2.0], [1.0]]), np.array([0.4, 0.6]))
    th = Linear(np.array([[1.0], [0.2]]))
    Z = th.project(X)
    u = MixtureParams([[Z[:50].mean()], [Z[50:].mean()]], [[2.0], [1.0]], [0.4, 0.6])
    step, diag = implicit_grad(u, th, X, 1e-5, kn)
    gap = u.means[0, 0] - u.means[1, 0]
    closed = gap / (4 * 1.5) * (X[:50].mean(axis=0) - X[50:].mean(axis=0))
    assert np.max(np.abs(step - closed)) / np.max(np.abs(closed)) < 1e-10
    assert diag.shift == 0.0


@pytest.mark.parametrize("theta", [2.5, 0.3, -1.0])
def test_implicit_grad_matches_reminimization(data2d, theta):
    em = EmConfig(max_iters=1000, tol=1e-13, refine=True)
    u_at = lambda t: best_fit(Angle2D(t).project(data2d), 2, em, KNOWN_2D).params
    step, _ = implicit_grad(u_at(theta), Angle2D(theta), data2d, 1e-5, KNOWN_2D)
    eps = 1e-3
    slope = (g_value(u_at(theta + eps)).g - g_value(u_at(theta - eps)).g) / (2 * eps)
    assert np.sign(step[0]) == np.sign(slope)
    assert abs(step[0] - slope) / abs(slope) < 1e-2


def test_implicit_grad_free_mixture_runs(data2d):
    u = best_fit(Angle2D(0.5).project(data2d), 2, EmConfig(tol=1e-10, refine=True)).params
    step, diag = implicit_grad(u, Angle2D(0.5), data2d)
    assert step.shape == (1,) and np.isfinite(step[0])
    assert diag.hessian.shape == (reduced_basis(2, 1).shape[1],) * 2


# trajectory plumbing


def test_trajectory_iter_strictly_increasing():
    tr = Trajectory()
    tr.append(TrajectoryRecord(0, np.zeros(1), np.zeros(6), 0.0, 0.0, 0.1))
    with pytest.raises(ValueError):
        tr.append(TrajectoryRecord(0, np.zeros(1), np.zeros(6), 0.0, 0.0, 0.1))


def test_config_validation():
    with pytest.raises(ValueError):
        GmoaConfig(eta0=0.0)
    with pytest.raises(ValueError):
        GmoaConfig(delta=-1.0)
    f = GmoaConfig.faithful()
    assert not f.backtrack and not f.adaptive and not f.eliminate_last_weight


# gmoa_run


def test_zero_iterations_is_em_fit(data2d):
    cfg = _cfg(n_iter=0)
    state, traj = gmoa_run(data2d, Angle2D(2.5), None, cfg)
    ref = best_fit(Angle2D(2.5).project(data2d), 2, cfg.em, KNOWN_2D).params
    np.testing.assert_array_equal(state.u.pack(), ref.pack())
    assert state.g == g_value(ref).g and state.iter == 0 and len(traj) == 1


def test_u_init_is_used(data2d):
    u0 = MixtureParams([[1.0], [-4.0]], [[2.0], [1.0]], [0.5, 0.5])
    state, _ = gmoa_run(data2d, Angle2D(1.0), u0, _cfg(n_iter=0))
    assert state.u.means[0, 0] > state.u.means[1, 0]


@pytest.mark.parametrize("theta0", [2.5, -3.0])
def test_2d_converges(data2d, theta0):
    state, traj = gmoa_run(data2d, Angle2D(theta0), None, _cfg())
    assert abs(abs(delta_mu(state.u)) - SQRT34) / SQRT34 < 0.05
    gaps = [abs(state.theta.theta - (TARGET + s)) for s in (0, math.pi, -math.pi)]
    assert min(gaps) < 0.15


def test_2d_state_invariants(data2d):
    state, traj = gmoa_run(data2d, Angle2D(2.5), None, _cfg(n_iter=5))
    assert state.on_manifold
    assert state.E == pytest.approx(mixture_nll(state.u, state.theta.project(data2d)), abs=1e-9)
    assert state.g == pytest.approx(g_value(state.u).g, abs=1e-12)
    iters = [r.iter for r in traj]
    assert iters == sorted(set(iters))


def test_backtracking_keeps_g_nondecreasing(data2d):
    # a deliberately huge step forces backtracking
    _, traj = gmoa_run(data2d, Angle2D(2.5), None, _cfg(eta0=5.0, n_iter=15))
    g = traj.g
    for i in range(1, len(g)):
        if "backtrack_exhausted" not in traj[i].flags:
            assert g[i] >= g[i - 1] - 1e-12
    assert any(f.startswith("backtrack=") for r in traj for f in r.flags)


def test_faithful_mode_runs(data2d):
    cfg = GmoaConfig.faithful(eta0=0.05, n_iter=10, knowns=KNOWN_2D,
                              em=EmConfig(max_iters=200, tol=1e-9))
    state, traj = gmoa_run(data2d, Angle2D(2.5), None, cfg)
    assert len(traj) == 11
    assert all(r.eta == 0.05 for r in traj)


def test_3d_converges():
    X = gen_gmm(preset("paper3d", 2000, 0)).X
    cfg = _cfg(eta0=0.04, n_iter=60, step_tol=1e-3)
    state, _ = gmoa_run(X, Angle3D(3.0, 3.0), None, cfg)
    t1, t2 = state.theta.flat()
    assert abs(abs(delta_mu(state.u)) - math.sqrt(134)) / math.sqrt(134) < 0.05
    assert abs(t1 - 1.833) < 0.15 and abs(t2 - 2.034) < 0.15


def test_step_failure_returns_best_truncated(data2d, monkeypatch):
    calls = {"n": 0}
    real = bl.implicit_grad

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 2:
            raise StepFailure("singular")
        return real(*a, **k)

    monkeypatch.setattr(bl, "implicit_grad", flaky)
    state, traj = gmoa_run(data2d, Angle2D(2.5), None, _cfg(n_iter=10))
    assert state.truncated
    assert state.g == max(traj.g)
    assert len(traj) == 3


def test_run_deterministic(data2d, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    gmoa_run(data2d, Angle2D(2.5), None, _cfg(n_iter=5))[1].to_csv(a)
    gmoa_run(data2d, Angle2D(2.5), None, _cfg(n_iter=5))[1].to_csv(b)
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0]
    assert header == "iter,E,g,eta,flags,theta0,u0,u1,u2,u3,u4,u5"


def test_rejects_empty_input():
    with pytest.raises(ValueError):
        gmoa_run(np.empty((0, 2)), Angle2D(0.0))


# multi-start


def test_random_starts_seeded():
    a = [t.theta for t in random_starts(Angle2D(0.0), 4, 3)]
    b = [t.theta for t in random_starts(Angle2D(0.0), 4, 3)]
    assert a == b and all(-math.pi <= t < math.pi for t in a)
    assert len(random_starts(Angle3D(0.0, 0.0), 2, 0)[0].flat()) == 2


def test_multistart_picks_highest_g(data2d):
    starts = [Angle2D(2.5), Angle2D(1.55)]
    res = gmoa_multistart(data2d, starts, None, _cfg(n_iter=3))
    gs = [r[0].g for r in res.runs]
    assert res.best_index == int(np.argmax(gs))
    assert res.state.g == max(gs)


def test_multistart_workers_match_serial(data2d):
    starts = [Angle2D(2.5), Angle2D(1.55), Angle2D(-0.4)]
    serial = gmoa_multistart(data2d, starts, None, _cfg(n_iter=3))
    pooled = gmoa_multistart(data2d, starts, None, _cfg(n_iter=3), workers=2)
    assert pooled.best_index == serial.best_index
    for (s1, t1), (s2, t2) in zip(serial.runs, pooled.runs):
        assert s1.g == s2.g and np.array_equal(s1.theta.flat(), s2.theta.flat())
        np.testing.assert_array_equal(t1.g, t2.g)


def test_parallel_map_keeps_order():
    assert parallel_map(math.sqrt, [9, 1, 4, 16], workers=3) == [3.0, 1.0, 2.0, 4.0]
    assert parallel_map(math.sqrt, [], workers=3) == []


# surface


def test_surface_examples(data2d):
    grid = [TARGET, TARGET + math.pi / 2, TARGET + math.pi]
    rows = manifold_surface(grid, data2d, Angle2D(0.0), 2, KNOWN_2D)
    assert all(r.ok for r in rows)
    assert abs(abs(rows[0].delta_mu) - SQRT34) / SQRT34 < 0.05
    assert abs(rows[1].delta_mu) < 1.0
    assert rows[2].delta_mu == pytest.approx(-rows[0].delta_mu, rel=0.02)


def test_surface_workers_match_serial(data2d):
    grid = np.linspace(-1, 1, 5)
    a = manifold_surface(grid, data2d, Angle2D(0.0), 2, KNOWN_2D)
    b = manifold_surface(grid, data2d, Angle2D(0.0), 2, KNOWN_2D, workers=2)
    assert [(r.delta_mu, r.E) for r in a] == [(r.delta_mu, r.E) for r in b]


def test_surface_csv_single_row(data2d, tmp_path):
    rows = manifold_surface([0.5], data2d, Angle2D(0.0), 2, KNOWN_2D)
    path = tmp_path / "s.csv"
    surface_to_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "theta0,delta_mu,E,ok" and len(lines) == 2


def test_surface_flags_failures(data2d, monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("bad")

    monkeypatch.setattr(bl, "best_fit", boom)
    rows = manifold_surface([0.1, 0.2], data2d, Angle2D(0.0), 2, KNOWN_2D)
    assert [r.ok for r in rows] == [False, False]
    assert math.isnan(rows[0].delta_mu)
