"""Gradient-based manifold optimization of (mixture, reducer) pairs.

The inner problem fits a mixture to the projected data; the outer problem
moves the reducer parameters along the set of inner minimizers so that the
separation objective increases. Derivatives of the inner minimizer come from
the implicit function theorem: ``du/dtheta = -H^{-1} d2E/du dtheta``.

All derivative blocks live in *reduced* coordinates: the columns of a basis
matrix ``B`` (see :func:`gmoa.mixture.reduced_basis`) span the admissible
directions of the packed mixture vector, so ``u = u0 + B r``.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from threadpoolctl import threadpool_limits

from . import reducer as red
from .em import EmConfig, best_fit, fit, project_feasible
from .mixture import (
    FREE,
    Knowns,
    MixtureParams,
    grad_nll_u_analytic,
    grad_nll_z,
    hessian_nll_u,
    mixture_nll,
    perturbed,
)
from .separation import g_value, grad_g

log = logging.getLogger(__name__)

REG_SHIFTS = (0.0, 1e-8, 1e-6, 1e-4)
COND_LIMIT = 1e12


class StepFailure(RuntimeError):
    """The inner Hessian could not be solved even with regularization."""


@dataclass
class GmoaConfig:
    eta0: float = 0.005
    n_iter: int = 100
    delta: float = 1e-5
    em: EmConfig = field(default_factory=EmConfig)
    n_components: int = 2
    knowns: Knowns = FREE
    backtrack: bool = True
    max_backtracks: int = 10
    # carry the backtracked step into the next iteration instead of resetting
    adaptive: bool = True
    eta_growth: float = 1.0
    eta_max: float = math.inf
    eliminate_last_weight: bool = True
    renormalize_each_iter: bool = False
    step_tol: float = 1e-8
    # treat inner fits pinned near the weight/variance floors as failed steps
    reject_collapse: bool = True
    collapse_factor: float = 10.0
    manifold_slack: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")

    @classmethod
    def faithful(cls, **kw) -> "GmoaConfig":
        """Plain pseudocode behaviour: fixed step, no backtracking, all K weights."""
        kw.setdefault("backtrack", False)
        kw.setdefault("adaptive", False)
        kw.setdefault("eliminate_last_weight", False)
        return cls(**kw)


@dataclass
class ManifoldState:
    u: MixtureParams
    theta: object
    E: float
    g: float
    iter: int
    on_manifold: bool = True
    truncated: bool = False


@dataclass
class TrajectoryRecord:
    iter: int
    theta: np.ndarray
    u: np.ndarray
    E: float
    g: float
    eta: float
    flags: tuple = ()


class Trajectory:
    """Per-iteration history of an optimization run."""

    def __init__(self, summarize_theta: bool = False):
        self.records: list[TrajectoryRecord] = []
        self.summarize_theta = summarize_theta

    def append(self, rec: TrajectoryRecord) -> None:
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError("trajectory iterations must strictly increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def g(self) -> np.ndarray:
        return np.array([r.g for r in self.records])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.records])

    def header(self) -> list[str]:
        first = self.records[0]
        th = ["theta_norm"] if self.summarize_theta else [f"theta{i}" for i in range(len(first.theta))]
        return ["iter", "E", "g", "eta", "flags", *th, *[f"u{i}" for i in range(len(first.u))]]

    def rows(self):
        for r in self.records:
            th = [np.linalg.norm(r.theta)] if self.summarize_theta else list(r.theta)
            yield [r.iter, _fmt(r.E), _fmt(r.g), _fmt(r.eta), "|".join(r.flags),
                   *map(_fmt, th), *map(_fmt, r.u)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.records:
                w.writerow(self.header())
                w.writerows(self.rows())


def _fmt(x) -> str:
    return format(float(x), ".17g")


def delta_mu(u: MixtureParams) -> float:
    """``mu_1 - mu_2`` along the first feature (the 1-D experiments' gap)."""
    return float(u.means[0, 0] - u.means[1, 0])


def energy(u: MixtureParams, theta, X) -> float:
    return mixture_nll(u, theta.project(X))


def energy_grad_theta(u: MixtureParams, theta, X, Z=None) -> np.ndarray:
    """``dE/dtheta`` by pulling ``dE/dz_i`` back through the reducer."""
    Z = theta.project(X) if Z is None else Z
    return theta.backward(X, grad_nll_z(u, Z))


def mixed_partial(u: MixtureParams, theta, X, delta: float = 1e-5, basis=None) -> np.ndarray:
    """``d2E / du_j dtheta`` as an ``(r, l)`` matrix, one row per basis direction.

    Row ``j`` is the central difference of ``dE/dtheta`` at ``u +/- delta B e_j``.
    The projection ``A_theta(X)`` does not depend on ``u``, so the two pullbacks
    are merged into one by linearity of the backward pass.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if basis is None:
        basis = np.eye(u.size)
    Z = theta.project(X)
    rows = []
    for j in range(basis.shape[1]):
        col = basis[:, j]
        s_up = grad_nll_z(perturbed(u, col, delta), Z)
        s_down = grad_nll_z(perturbed(u, col, -delta), Z)
        rows.append(theta.backward(X, (s_up - s_down) / (2.0 * delta)))
    if not rows:
        return np.zeros((0, theta.flat().shape[0]))
    return np.stack(rows)


@dataclass
class ImplicitDiagnostics:
    condition: float
    shift: float
    hessian: np.ndarray
    mixed: np.ndarray
    grad_g: np.ndarray


def implicit_direction(grad_u_g, hess, mixed, shifts=REG_SHIFTS, cond_limit=COND_LIMIT):
    """``-grad_u_g @ H^{-1} @ mixed`` via a linear solve with escalating shift.

    The shift ``lam`` is relative: ``H + lam * scale * I`` with ``scale`` the
    mean absolute diagonal of ``H`` (at least 1). Returns ``(delta, cond, lam)``.
    """
    grad_u_g = np.atleast_1d(np.asarray(grad_u_g, dtype=float))
    hess = np.atleast_2d(np.asarray(hess, dtype=float))
    mixed = np.atleast_2d(np.asarray(mixed, dtype=float))
    r = hess.shape[0]
    if r == 0:
        return np.zeros(mixed.shape[1]), 1.0, 0.0
    scale = max(float(np.mean(np.abs(np.diag(hess)))), 1.0)
    for lam in shifts:
        A = hess + lam * scale * np.eye(r)
        if not np.all(np.isfinite(A)):
            continue
        cond = float(np.linalg.cond(A))
        if not np.isfinite(cond) or cond > cond_limit:
            continue
        try:
            v = np.linalg.solve(A.T, grad_u_g)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(v)):
            return -(v @ mixed), cond, lam
    raise StepFailure("inner Hessian is singular beyond the regularization budget")


def implicit_grad(u: MixtureParams, theta, X, delta: float = 1e-5, knowns: Knowns = FREE,
                  eliminate_last_weight: bool = True, basis=None):
    """Manifold ascent direction for the reducer parameters.

    Returns ``(delta_theta, diagnostics)``.
    """
    if basis is None:
        basis = knowns.basis(u.n_components, u.dim, eliminate_last_weight)
    Z = theta.project(X)
    H = hessian_nll_u(u, Z, delta, basis)
    M = mixed_partial(u, theta, X, delta, basis)
    gg = basis.T @ grad_g(u)
    step, cond, lam = implicit_direction(gg, H, M)
    if lam > 0:
        log.info("inner Hessian regularized with shift %.0e (cond %.3g)", lam, cond)
    return step, ImplicitDiagnostics(cond, lam, H, M, gg)


def implicit_grad_generic(grad_u_E, grad_theta_E, grad_u_g, u, theta, delta: float = 1e-5):
    """The same construction for an arbitrary smooth energy on flat vectors.

    ``grad_u_E(u, theta)`` and ``grad_theta_E(u, theta)`` are the partial
    gradients of the energy, ``grad_u_g(u)`` the outer objective's gradient.
    ``H`` is the central difference of ``grad_u_E`` in ``u`` (symmetrized), and
    row ``j`` of the mixed block the central difference of ``grad_theta_E``
    along ``u_j``. Returns ``(delta_theta, cond, shift)``.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    H = fd_jacobian(lambda v: grad_u_E(v, theta), u, delta)
    H = 0.5 * (H + H.T)
    M = fd_jacobian(lambda v: grad_theta_E(v, theta), u, delta).T
    return implicit_direction(grad_u_g(u), H, M)


def fd_jacobian(f, x, delta: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector function; column ``j`` is ``df/dx_j``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = delta
        cols.append((np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2.0 * delta))
    return np.stack(cols, axis=-1)


def reduced_energy_gradient(u: MixtureParams, Z, basis) -> np.ndarray:
    return basis.T @ grad_nll_u_analytic(u, Z)


def _inner_fit(u_start, Z, cfg: GmoaConfig):
    return fit(u_start, Z, cfg.em, cfg.knowns)


def gmoa_run(X, theta0, u_init: MixtureParams | None = None, cfg: GmoaConfig | None = None,
             callback=None):
    """Run the manifold ascent from ``theta0``.

    Returns ``(state, trajectory)``. ``state`` is the final point, or the best
    point seen if a step fails irrecoverably (then ``state.truncated`` is set).
    """
    cfg = cfg or GmoaConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a nonempty (N, p) array")
    if isinstance(theta0, red.Mlp) and cfg.renormalize_each_iter:
        theta0 = red.normalize_output_layer(theta0, X)
    theta = theta0
    Z = theta.project(X)
    if u_init is not None:
        u = _inner_fit(u_init, Z, cfg).params
    else:
        u = best_fit(Z, cfg.n_components, cfg.em, cfg.knowns, cfg.seed).params
    basis = cfg.knowns.basis(u.n_components, u.dim, cfg.eliminate_last_weight)
    E = mixture_nll(u, Z)
    g = g_value(u).g
    traj = Trajectory(summarize_theta=isinstance(theta, red.Mlp))
    state = ManifoldState(u, theta, E, g, 0)
    best = state
    traj.append(TrajectoryRecord(0, theta.flat(), u.pack(), E, g, cfg.eta0, _manifold_flags(u, Z, basis, cfg)))
    eta = cfg.eta0
    for t in range(cfg.n_iter):
        if not cfg.adaptive:
            eta = cfg.eta0
        try:
            step, diag = implicit_grad(u, theta, X, cfg.delta, cfg.knowns,
                                       cfg.eliminate_last_weight, basis)
        except StepFailure as exc:
            log.warning("iteration %d: %s; returning best state", t + 1, exc)
            best = ManifoldState(best.u, best.theta, best.E, best.g, best.iter, best.on_manifold, True)
            return best, traj
        if np.max(np.abs(step)) < cfg.step_tol:
            log.info("converged at iteration %d (|step| < %g)", t, cfg.step_tol)
            break
        u_dir = grad_g(u)
        if cfg.eliminate_last_weight:
            u_dir = basis @ (basis.T @ u_dir)
        flags = []
        if diag.shift > 0:
            flags.append(f"shift={diag.shift:.0e}")
        backtracks = 0
        exhausted = False
        while True:
            theta_new = theta.with_flat(theta.flat() + eta * step)
            if cfg.renormalize_each_iter and isinstance(theta_new, red.Mlp):
                theta_new = red.normalize_output_layer(theta_new, X)
            u_half = project_feasible(
                MixtureParams.unpack(u.pack() + eta * u_dir, u.n_components, u.dim),
                cfg.em.var_floor, cfg.em.weight_floor,
            )
            Z_new = theta_new.project(X)
            res = _inner_fit(u_half, Z_new, cfg)
            g_new = g_value(res.params).g
            collapsed = cfg.reject_collapse and _collapsed(res.params, cfg)
            if not cfg.backtrack or (g_new >= g - 1e-12 and not collapsed):
                break
            if backtracks >= cfg.max_backtracks:
                exhausted = True
                break
            backtracks += 1
            eta *= 0.5
        if backtracks:
            flags.append(f"backtrack={backtracks}")
        if exhausted:
            # no acceptable move: stay put, record the attempt and stop
            flags.append("backtrack_exhausted")
            traj.append(TrajectoryRecord(t + 1, theta.flat(), u.pack(), E, g, eta, tuple(flags)))
            state = ManifoldState(u, theta, E, g, t + 1, state.on_manifold)
            log.info("iteration %d: no ascent step found; stopping", t + 1)
            break
        eta_used = eta
        theta, u, Z, g = theta_new, res.params, Z_new, g_new
        E = res.nll
        flags.extend(_manifold_flags(u, Z, basis, cfg))
        on_manifold = "off_manifold" not in flags
        state = ManifoldState(u, theta, E, g, t + 1, on_manifold)
        if g > best.g:
            best = state
        traj.append(TrajectoryRecord(t + 1, theta.flat(), u.pack(), E, g, eta_used, tuple(flags)))
        if callback is not None:
            callback(state, diag)
        if cfg.adaptive and not backtracks:
            eta = min(eta * cfg.eta_growth, cfg.eta_max)
    return state, traj


def random_starts(template, n_starts: int, seed: int = 0) -> list:
    """Angle reducers with parameters drawn uniformly from ``[-pi, pi)``."""
    rng = np.random.default_rng(seed)
    l = template.flat().shape[0]
    return [template.with_flat(rng.uniform(-np.pi, np.pi, size=l)) for _ in range(n_starts)]


@dataclass
class MultiStartResult:
    state: ManifoldState
    trajectory: Trajectory
    best_index: int
    runs: list


def _single_thread_blas():
    threadpool_limits(limits=1)


def parallel_map(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally spread over worker processes.

    Results come back in input order and each worker runs BLAS on one thread,
    so the output does not depend on ``workers``.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(min(workers, len(items)), initializer=_single_thread_blas) as pool:
        return list(pool.map(fn, items))


def _run_from(theta0, X, u_init, cfg):
    return gmoa_run(X, theta0, u_init, cfg)


def gmoa_multistart(X, starts, u_init: MixtureParams | None = None,
                    cfg: GmoaConfig | None = None, workers: int = 1) -> MultiStartResult:
    """Independent runs from each start; the highest final ``g`` wins.

    Selection uses only the separation objective, never labels. Ties keep the
    earliest start. ``workers > 1`` runs the starts in separate processes.
    """
    runs = parallel_map(partial(_run_from, X=X, u_init=u_init, cfg=cfg), starts, workers)
    best = max(range(len(runs)), key=lambda i: (runs[i][0].g, -i))
    return MultiStartResult(runs[best][0], runs[best][1], best, runs)


def _collapsed(u: MixtureParams, cfg: GmoaConfig) -> bool:
    """A component shrank onto a handful of points (weight or variance near its floor)."""
    c = cfg.collapse_factor
    return bool(np.any(u.weights < c * cfg.em.weight_floor) or np.any(u.variances < c * cfg.em.var_floor))


def _manifold_flags(u, Z, basis, cfg: GmoaConfig) -> tuple:
    h = reduced_energy_gradient(u, Z, basis)
    if h.size and np.max(np.abs(h)) > cfg.manifold_slack:
        log.debug("inner gradient %.3g exceeds slack", np.max(np.abs(h)))
        return ("off_manifold",)
    return ()


@dataclass
class SurfaceRow:
    theta: np.ndarray
    delta_mu: float
    E: float
    ok: bool = True


def _surface_point(th, X, template, n_components, knowns, em, seed) -> SurfaceRow:
    th = np.atleast_1d(np.asarray(th, dtype=float))
    reducer = template.with_flat(th)
    try:
        res = best_fit(reducer.project(X), n_components, em, knowns, seed)
        return SurfaceRow(th, delta_mu(res.params), res.nll, True)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("surface point %s failed: %s", th, exc)
        return SurfaceRow(th, math.nan, math.nan, False)


def manifold_surface(grid, X, template, n_components: int = 2, knowns: Knowns = FREE,
                     em: EmConfig | None = None, seed: int = 0, workers: int = 1) -> list[SurfaceRow]:
    """Inner minimum over the free mixture blocks at each grid value of theta.

    ``template`` is an angle reducer whose flat parameters are replaced by each
    grid entry. A failing fit marks its row ``ok=False`` instead of raising.
    """
    em = em or EmConfig(max_iters=500, tol=1e-10, refine=True)
    X = np.asarray(X, dtype=float)
    point = partial(_surface_point, X=X, template=template, n_components=n_components,
                    knowns=knowns, em=em, seed=seed)
    return parallel_map(point, grid, workers)


def surface_to_csv(rows: list[SurfaceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        n = len(rows[0].theta) if rows else 1
        w.writerow([*(f"theta{i}" for i in range(n)), "delta_mu", "E", "ok"])
        for r in rows:
            w.writerow([*map(_fmt, r.theta), _fmt(r.delta_mu), _fmt(r.E), int(r.ok)])


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
