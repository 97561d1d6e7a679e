"""Inner minimization of the mixture energy: EM with optional L-BFGS polish."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mixture import (
    FREE,
    VAR_FLOOR,
    WEIGHT_FLOOR,
    Knowns,
    MixtureParams,
    grad_nll_u_analytic,
    e_step,
    mixture_nll,
)

log = logging.getLogger(__name__)


@dataclass
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-7
    refine: bool = False
    refine_max_iters: int = 100
    var_floor: float = VAR_FLOOR
    weight_floor: float = WEIGHT_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class FitResult:
    params: MixtureParams
    nll: float
    iters: int
    nll_evals: int
    reinitialized: int = 0
    refined: bool = False

    def __iter__(self):
        # allows ``params, nll, iters = fit(...)``
        return iter((self.params, self.nll, self.iters))


def floor_weights_mle(counts, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """Maximize ``sum_k n_k log pi_k`` over the simplex with ``pi_k >= floor``.

    The bound-constrained maximizer is ``max(floor, n_k / c)`` with ``c`` set
    so the weights sum to one. Found by growing the clamped set.
    """
    counts = np.asarray(counts, dtype=float)
    K = counts.shape[0]
    if K * floor > 1:
        raise ValueError("weight floor too large for the number of components")
    clamped = np.zeros(K, dtype=bool)
    for _ in range(K):
        free_mass = 1.0 - floor * clamped.sum()
        free_total = counts[~clamped].sum()
        if free_total <= 0:
            w = np.full(K, floor)
            w[~clamped] = free_mass / max((~clamped).sum(), 1)
            return w
        w = np.where(clamped, floor, counts * free_mass / free_total)
        newly = (~clamped) & (w < floor)
        if not newly.any():
            return w / w.sum()
        clamped |= newly
    return w / w.sum()


def project_simplex(v, floor: float = 0.0) -> np.ndarray:
    """Euclidean projection onto ``{w : sum(w) = 1, w >= floor}``."""
    v = np.asarray(v, dtype=float)
    K = v.shape[0]
    mass = 1.0 - K * floor
    if mass < 0:
        raise ValueError("weight floor too large for the number of components")
    x = v - floor
    s = np.sort(x)[::-1]
    css = np.cumsum(s) - mass
    ks = np.arange(1, K + 1)
    rho = np.nonzero(s - css / ks > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    w = np.maximum(x - tau, 0.0) + floor
    return w / w.sum()


def project_feasible(params: MixtureParams, var_floor: float = VAR_FLOOR,
                     weight_floor: float = WEIGHT_FLOOR) -> MixtureParams:
    """Clamp variances and project weights back onto the floored simplex."""
    out = params.copy()
    out.variances = np.maximum(out.variances, var_floor)
    out.weights = project_simplex(out.weights, weight_floor)
    return out


def em_step(params: MixtureParams, Z, knowns: Knowns = FREE, cfg: EmConfig | None = None,
            rng: np.random.Generator | None = None, events: list | None = None) -> MixtureParams:
    """One EM update. Blocks fixed in ``knowns`` are carried through unchanged."""
    Z = np.asarray(Z, dtype=float).reshape(-1, params.dim)
    return _m_step(e_step(params, Z)[0], params, Z, knowns, cfg or EmConfig(), rng, events)


def _m_step(R, params, Z, knowns, cfg, rng, events):
    N = Z.shape[0]
    Nk = R.sum(axis=0)
    dead = Nk < 1e-8
    safe = np.where(dead, 1.0, Nk)
    means = (R.T @ Z) / safe[:, None]
    diff = Z[:, None, :] - means[None, :, :]
    sq = np.einsum("nk,nkj->kj", R, diff**2) / safe[:, None]
    variances = np.maximum(sq, cfg.var_floor)
    if knowns.isotropic and knowns.variances is None:
        variances = np.repeat(variances.mean(axis=1, keepdims=True), params.dim, axis=1)
    if np.any(dead):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        pooled = np.maximum(Z.var(axis=0), cfg.var_floor)
        for k in np.nonzero(dead)[0]:
            idx = int(rng.integers(N))
            means[k] = Z[idx]
            variances[k] = pooled
            log.info("component %d collapsed (N_k=%.3g); reinitialized at point %d", k, Nk[k], idx)
            if events is not None:
                events.append(("reinit", int(k), idx))
    weights = floor_weights_mle(Nk, cfg.weight_floor)
    return knowns.apply(MixtureParams(means, variances, weights))


def fit(u0: MixtureParams, Z, cfg: EmConfig | None = None, knowns: Knowns = FREE) -> FitResult:
    """Run EM from ``u0`` until the NLL change drops below ``cfg.tol``.

    Steps that would raise the NLL by more than 1e-10 are rejected and end the
    loop. With ``cfg.refine`` the EM result is polished by L-BFGS and the
    lower-NLL candidate is returned.
    """
    cfg = cfg or EmConfig()
    Z = np.asarray(Z, dtype=float).reshape(-1, u0.dim)
    rng = np.random.default_rng(cfg.seed)
    current = knowns.apply(u0)
    R, nll = e_step(current, Z)
    evals = 1
    iters = 0
    events: list = []
    for _ in range(cfg.max_iters):
        n_events = len(events)
        candidate = _m_step(R, current, Z, knowns, cfg, rng, events)
        R_new, new_nll = e_step(candidate, Z)
        evals += 1
        iters += 1
        if len(events) > n_events:
            # reinitialization is a restart, not a monotone step
            current, R, nll = candidate, R_new, new_nll
            continue
        if new_nll > nll + 1e-10:
            log.warning("EM step raised NLL by %.3g; stopping", new_nll - nll)
            break
        change = nll - new_nll
        current, R, nll = candidate, R_new, new_nll
        if change < cfg.tol:
            break
    result = FitResult(current, nll, iters, evals, reinitialized=len(events))
    if cfg.refine:
        refined, ref_nll, ref_evals = quasi_newton_refine(
            current, Z, cfg.refine_max_iters, knowns, cfg, return_info=True
        )
        result.nll_evals += ref_evals
        if ref_nll < nll:
            result.params, result.nll, result.refined = refined, ref_nll, True
    return result


class Reparam:
    """Map between natural mixture parameters and an unconstrained vector.

    Free means are used as-is, free variances as ``log var`` (one per
    component when isotropic) and free weights as logits relative to the last
    component.
    """

    def __init__(self, template: MixtureParams, knowns: Knowns = FREE):
        self.template = knowns.apply(template)
        self.knowns = knowns
        self.K, self.d = template.n_components, template.dim

    @property
    def free_var(self) -> bool:
        return self.knowns.variances is None

    @property
    def free_w(self) -> bool:
        return self.knowns.weights is None

    def to_unconstrained(self, params: MixtureParams) -> np.ndarray:
        parts = [params.means.reshape(-1)]
        if self.free_var:
            lv = np.log(params.variances)
            parts.append(lv[:, 0] if self.knowns.isotropic else lv.reshape(-1))
        if self.free_w:
            lw = np.log(params.weights)
            parts.append(lw[:-1] - lw[-1])
        return np.concatenate(parts)

    def to_natural(self, x) -> MixtureParams:
        K, d = self.K, self.d
        pos = K * d
        means = x[:pos].reshape(K, d)
        variances = self.template.variances
        if self.free_var:
            if self.knowns.isotropic:
                variances = np.repeat(np.exp(x[pos : pos + K])[:, None], d, axis=1)
                pos += K
            else:
                variances = np.exp(x[pos : pos + K * d]).reshape(K, d)
                pos += K * d
        weights = self.template.weights
        if self.free_w:
            logits = np.concatenate([x[pos : pos + K - 1], [0.0]])
            logits = logits - logits.max()
            e = np.exp(logits)
            weights = e / e.sum()
        return MixtureParams(means.copy(), np.array(variances, dtype=float), weights)

    def gradient(self, params: MixtureParams, Z) -> np.ndarray:
        g = MixtureParams.unpack(grad_nll_u_analytic(params, Z), self.K, self.d)
        parts = [g.means.reshape(-1)]
        if self.free_var:
            gs = g.variances * params.variances
            parts.append(gs.sum(axis=1) if self.knowns.isotropic else gs.reshape(-1))
        if self.free_w:
            gw = g.weights
            pi = params.weights
            full = pi * (gw - pi @ gw)
            parts.append(full[:-1])
        return np.concatenate(parts)


def lbfgs_minimize(fun_grad, x0, max_iters: int = 100, memory: int = 10, c1: float = 1e-4,
                   gtol: float = 1e-9, max_backtracks: int = 30):
    """Limited-memory BFGS with Armijo backtracking (step halving).

    ``fun_grad(x)`` returns ``(f, grad)``. Returns ``(x_best, f_best, n_evals)``;
    the best iterate is never worse than ``x0``.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    evals = 1
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    for _ in range(max_iters):
        if not np.all(np.isfinite(g)) or np.max(np.abs(g)) < gtol:
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if s_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            gamma = 1.0 / max(np.linalg.norm(g), 1.0)
        r = gamma * q
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            rho = 1.0 / (y @ s)
            b = rho * (y @ r)
            r += s * (a - b)
        direction = -r
        slope = g @ direction
        if slope >= 0:
            s_hist.clear()
            y_hist.clear()
            direction = -g / max(np.linalg.norm(g), 1.0)
            slope = g @ direction
        step = 1.0
        accepted = False
        for _ in range(max_backtracks):
            x_new = x + step * direction
            f_new, g_new = fun_grad(x_new)
            evals += 1
            if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            log.debug("L-BFGS line search failed; returning best iterate")
            break
        s_vec, y_vec = x_new - x, g_new - g
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        decrease = f - f_new
        x, f, g = x_new, f_new, g_new
        if decrease < 1e-14 * max(1.0, abs(f)):
            break
    return x, f, evals


def quasi_newton_refine(u: MixtureParams, Z, max_iters: int = 100, knowns: Knowns = FREE,
                        cfg: EmConfig | None = None, return_info: bool = False):
    """Polish a mixture by L-BFGS on the unconstrained reparameterization.

    The result is mapped back, floored, and never has higher NLL than ``u``.
    """
    cfg = cfg or EmConfig()
    Z = np.asarray(Z, dtype=float).reshape(-1, u.dim)
    start = knowns.apply(u)
    start_nll = mixture_nll(start, Z)
    rp = Reparam(start, knowns)

    def fun_grad(x):
        p = rp.to_natural(x)
        if np.any(p.variances < cfg.var_floor) or np.any(p.weights < cfg.weight_floor):
            return np.inf, np.zeros_like(x)
        return mixture_nll(p, Z), rp.gradient(p, Z)

    x, _, evals = lbfgs_minimize(fun_grad, rp.to_unconstrained(start), max_iters)
    out = knowns.apply(project_feasible(rp.to_natural(x), cfg.var_floor, cfg.weight_floor))
    out_nll = mixture_nll(out, Z)
    evals += 2
    if not out_nll <= start_nll + 1e-12:
        out, out_nll = start, start_nll
    if return_info:
        return out, out_nll, evals
    return out


def moment_init(Z, n_components: int, seed: int = 0, knowns: Knowns = FREE,
                var_floor: float = VAR_FLOOR) -> MixtureParams:
    """Starting mixture from a seeded k-means partition and its moments."""
    from .labeling import kmeans

    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    res = kmeans(Z, n_components, seed=seed)
    K, d = n_components, Z.shape[1]
    means = np.empty((K, d))
    variances = np.empty((K, d))
    counts = np.empty(K)
    pooled = np.maximum(Z.var(axis=0), var_floor)
    for k in range(K):
        members = Z[res.labels == k]
        counts[k] = len(members)
        means[k] = members.mean(axis=0) if len(members) else Z[0]
        variances[k] = np.maximum(members.var(axis=0), var_floor) if len(members) > 1 else pooled
    weights = floor_weights_mle(counts)
    return knowns.apply(MixtureParams(means, variances, weights))


def best_fit(Z, n_components: int, cfg: EmConfig | None = None, knowns: Knowns = FREE,
             seed: int = 0) -> FitResult:
    """Global-ish inner minimum: EM from every ordering of a k-means start.

    Orderings only matter when some blocks are known (fixed per component),
    so with nothing fixed a single start is used. Ties keep the first ordering.
    """
    from itertools import permutations

    init = moment_init(Z, n_components, seed, FREE, (cfg or EmConfig()).var_floor)
    if knowns.variances is None and knowns.weights is None:
        orders = [tuple(range(n_components))]
    else:
        orders = list(permutations(range(n_components)))
    best = None
    for order in orders:
        res = fit(init.permuted(order), Z, cfg, knowns)
        if best is None or res.nll < best.nll - 1e-12:
            best = res
    return best
