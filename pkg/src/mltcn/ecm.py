"""Variational ECM fitting of the contaminated-normal latent trait mixture.

The intractable integral over the latent trait is replaced, per observation,
component and contamination branch, by the Jaakkola-Jordan quadratic lower
bound on the logistic function. Each bound has its own variational
parameters ``xi`` and induces a Gaussian approximate posterior over the latent trait.

Arrays indexed by (component, branch, observation) are stored
component-major so that every contraction is a batched matrix product. The
branch axis has length 2 and is indexed by the contamination indicator:
index 1 is the normal branch ``N(0, I)``, index 0 the inflated branch
``N(0, eta I)``. With ``n`` observations, ``G`` components, ``M`` variables
and ``D`` latent dimensions:

* ``xi``: ``(G, 2, n, M)``
* ``mu``: ``(G, 2, n, D)``
* ``sigma``: ``(G, 2, n, D, D)``
* ``resp``, ``normal_prob``: ``(n, G)``

One iteration of :func:`fit` is::

    xi update -> posterior moments -> E-step (resp, normal_prob)
      -> pi, tau, (alpha, loadings), eta -> posterior moments -> bound

Refreshing the moments after the ``xi`` update keeps the approximate
posterior exact for the current bound, so every conditional maximisation
step increases the bound and the trace is monotone.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from ._math import cholesky_logdet, jaakkola_b, log_sum_exp, logit, solve_spd
from .criteria import bic as bic_value
from .criteria import count_parameters, map_classify
from .exceptions import EmptyComponent, FitFailed, MltcnError, NumericalBreakdown
from .model import BinaryDataset, MltcnParams

logger = logging.getLogger(__name__)

NORMAL, EXTREME = 1, 0
TAU_MARGIN = 1e-6
ETA_MARGIN = 1e-6
MIN_WEIGHT = 1e-10
ALPHA_INIT_CLIP = 1e-3


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit`.

    ``seed`` and ``seed_key`` together select the random stream; restarts
    draw from children ``seed_key + (restart,)`` of ``SeedSequence(seed)``.
    """

    G: int = 2
    D: int = 2
    max_iter: int = 1000
    aitken_epsilon: float = 0.01
    restarts: int = 10
    seed: int = 0
    tau_floor: float = 0.5
    eta_ceiling: float = 1000.0
    inner_xi_sweeps: int = 1
    threads: int = 1
    seed_key: tuple = ()

    def __post_init__(self):
        if self.G < 1 or self.D < 1:
            raise ValueError("G and D must be positive")
        if self.max_iter < 1 or self.restarts < 1 or self.inner_xi_sweeps < 1:
            raise ValueError("max_iter, restarts and inner_xi_sweeps must be positive")
        if not 0.5 <= self.tau_floor < 1:
            raise ValueError("tau_floor must lie in [0.5, 1)")
        if not self.aitken_epsilon > 0:
            raise ValueError("aitken_epsilon must be positive")
        if not self.eta_ceiling > 1 + ETA_MARGIN:
            raise ValueError("eta_ceiling must exceed 1")
        if self.threads < 1:
            raise ValueError("threads must be positive")


@dataclass
class VariationalState:
    """Per-(observation, component, branch) variational quantities."""

    xi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    logdet_sigma: np.ndarray
    resp: np.ndarray
    normal_prob: np.ndarray
    branch_bounds: Optional[np.ndarray] = None
    component_bounds: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FitResult:
    params: MltcnParams
    state: VariationalState
    bound_trace: np.ndarray
    converged: bool
    iterations: int
    bic: float
    map_labels: np.ndarray
    extreme_flags: np.ndarray
    restart_bounds: np.ndarray
    config: FitConfig = field(default_factory=FitConfig)
    restart_errors: tuple = ()

    @property
    def bound(self):
        return float(self.bound_trace[-1])

    @property
    def n_extreme(self):
        return int(np.sum(self.extreme_flags))


def _responses(data):
    x = data.responses if isinstance(data, BinaryDataset) else data
    return np.asarray(x, dtype=float)


# -- posterior moments and xi -------------------------------------------------

def _prior_precision(eta):
    """``(G, 2)`` prior precisions: ``1/eta`` on the inflated branch, 1 on the normal one."""
    out = np.ones((eta.shape[0], 2))
    out[:, EXTREME] = 1.0 / eta
    return out


def _outer_loadings(loadings):
    """``w_gm w_gm'`` flattened to ``(G, 1, M, D*D)``."""
    G, M, D = loadings.shape
    return (loadings[..., :, None] * loadings[..., None, :]).reshape(G, 1, M, D * D)


class Moments(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    logdet_sigma: np.ndarray
    # h = Sigma^{-1} mu, kept for the quadratic term of the bound
    h: np.ndarray
    # B(xi) at which the moments were computed
    jj_coef: np.ndarray


def posterior_moments(data, params, xi):
    """Gaussian approximate posterior of the latent trait for every (g, branch, i).

    Precision ``prior_precision * I - 2 sum_m B(xi) w w'``, mean
    ``Sigma sum_m (x - 1/2 + 2 B(xi) alpha) w``. The precision is factored by
    Cholesky; a failure raises :class:`NumericalBreakdown` naming the first
    offending ``(g, branch, i)``.
    """
    x = _responses(data)
    B = jaakkola_b(xi)  # (G, 2, n, M)
    G, M, D = params.loadings.shape
    loadings = params.loadings[:, None]  # (G, 1, M, D)
    prec = (-2.0 * (B @ _outer_loadings(params.loadings))).reshape(B.shape[:3] + (D, D))
    prec += _prior_precision(params.eta)[:, :, None, None, None] * np.eye(D)
    coef = (x - 0.5)[None, None] + 2.0 * B * params.alpha[:, None, None, :]
    h = coef @ loadings  # (G, 2, n, D)
    try:
        chol, logdet_prec = cholesky_logdet(prec)
    except NumericalBreakdown:
        bad = np.argwhere(np.linalg.eigvalsh(prec)[..., 0] <= 0)
        g, k, i = (int(v) for v in bad[0]) if len(bad) else (-1, -1, -1)
        raise NumericalBreakdown("posterior precision not positive definite",
                                 g=g, branch=k, i=i) from None
    eye = np.broadcast_to(np.eye(D), prec.shape)
    chol_inv = np.linalg.solve(chol, eye)
    sigma = np.swapaxes(chol_inv, -1, -2) @ chol_inv
    mu = (sigma @ h[..., None])[..., 0]
    return Moments(mu, sigma, -logdet_prec, h, B)


def update_xi(params, mu, sigma):
    """Optimal ``xi = sqrt(E[(alpha + w'y)^2])`` under the branch posteriors."""
    G, M, D = params.loadings.shape
    flat = sigma.reshape(sigma.shape[:3] + (D * D,))
    quad = flat @ _outer_loadings(params.loadings).swapaxes(-1, -2)  # (G, 2, n, M)
    lin = mu @ params.loadings[:, None].swapaxes(-1, -2) + params.alpha[:, None, None, :]
    return np.sqrt(np.maximum(quad + lin * lin, 0.0))


# -- bound and E-step ---------------------------------------------------------

class Bound(NamedTuple):
    branch: np.ndarray  # (n, G, 2)
    component: np.ndarray  # (n, G)
    total: float


def lower_bound(params, xi, data, moments=None):
    """Variational lower bound on the log-likelihood.

    Per branch::

        L_k = sum_m [log s(xi) - xi/2 - B(xi) xi^2 + (x - 1/2) alpha + B(xi) alpha^2]
              + 1/2 log|Sigma_k| + 1/2 mu_k' Sigma_k^{-1} mu_k - (D/2) log(prior variance_k)

    The intercept terms and the ``-(D/2) log eta`` normaliser on the inflated
    branch make ``exp(L_k)`` a lower bound on ``p(x | g, branch)`` itself.
    Then ``L_g = log[tau exp(L_1) + (1 - tau) exp(L_0)]`` and the total is
    ``sum_i log sum_g pi_g exp(L_g)``.

    ``xi`` may also be a :class:`VariationalState`.
    """
    if isinstance(xi, VariationalState):
        xi = xi.xi
    if moments is None:
        moments = posterior_moments(data, params, xi)
    x = _responses(data)
    B = moments.jj_coef
    a = params.alpha[:, None, None, :]
    # log sigmoid(xi) - xi/2 for xi >= 0
    per_var = -0.5 * xi - np.log1p(np.exp(-xi)) - B * xi * xi + B * a * a
    branch = per_var.sum(axis=-1) + (x @ params.alpha.T - 0.5 * params.alpha.sum(axis=1)).T[:, None, :]
    branch += 0.5 * moments.logdet_sigma + 0.5 * np.sum(moments.h * moments.mu, axis=-1)
    branch[:, EXTREME] -= 0.5 * params.n_latent * np.log(params.eta)[:, None]
    branch = branch.transpose(2, 0, 1)  # (n, G, 2)
    component = np.logaddexp(np.log(params.tau)[None, :] + branch[:, :, NORMAL],
                             np.log1p(-params.tau)[None, :] + branch[:, :, EXTREME])
    total = float(np.sum(log_sum_exp(np.log(params.pi)[None, :] + component, axis=1)))
    return Bound(branch, component, total)


def e_step(params, bound):
    """Responsibilities ``resp`` and normal-branch weights ``normal_prob`` from the branch bounds."""
    if not np.all(np.isfinite(bound.branch)):
        i, g = (int(v) for v in np.argwhere(~np.isfinite(bound.branch))[0][:2])
        raise NumericalBreakdown("non-finite branch bound", i=i, g=g)
    log_z = np.log(params.pi)[None, :] + bound.component
    resp = np.exp(log_z - log_sum_exp(log_z, axis=1)[:, None])
    log_normal = np.log(params.tau)[None, :] + bound.branch[:, :, NORMAL]
    log_extreme = np.log1p(-params.tau)[None, :] + bound.branch[:, :, EXTREME]
    normal_prob = np.exp(log_normal - np.logaddexp(log_normal, log_extreme))
    return resp, normal_prob


# -- CM-steps -----------------------------------------------------------------

def update_mixing(resp):
    return np.asarray(resp, dtype=float).mean(axis=0)


def update_tau(resp, normal_prob, tau_floor=0.5):
    """Constrained maximiser of ``sum_i z [c log tau + (1 - c) log(1 - tau)]``.

    The objective is concave with unconstrained maximiser ``sum zc / sum z``,
    so the bounded search over ``(tau_floor, 1)`` reduces to clamping into
    ``[tau_floor + 1e-6, 1 - 1e-6]``.
    """
    resp = np.asarray(resp, dtype=float)
    mass = resp.sum(axis=0)
    for g in np.flatnonzero(mass <= 0):
        raise EmptyComponent(int(g))
    tau_hat = (resp * normal_prob).sum(axis=0) / mass
    return np.clip(tau_hat, tau_floor + TAU_MARGIN, 1.0 - TAU_MARGIN)


def _augmented_second_moments(mu, sigma):
    """``E[(y,1)(y,1)']`` for every posterior, shape ``(..., D+1, D+1)``."""
    D = mu.shape[-1]
    out = np.empty(mu.shape[:-1] + (D + 1, D + 1))
    out[..., :D, :D] = sigma + mu[..., :, None] * mu[..., None, :]
    out[..., :D, D] = mu
    out[..., D, :D] = mu
    out[..., D, D] = 1.0
    return out


def _branch_weights(resp, normal_prob):
    """``(G, 2, n)`` weights ``z c`` (normal) and ``z (1 - c)`` (inflated)."""
    resp = np.asarray(resp, dtype=float)
    normal_prob = np.asarray(normal_prob, dtype=float)
    q = np.empty((resp.shape[1], 2, resp.shape[0]))
    q[:, NORMAL] = (resp * normal_prob).T
    q[:, EXTREME] = (resp * (1.0 - normal_prob)).T
    return q


def update_loadings(data, resp, normal_prob, xi, mu, sigma, jj_coef=None):
    """Joint update of ``(w_mg, alpha_mg)`` by a ``(D+1)``-dimensional solve.

    ``H = -2 sum_i z [c B(xi_1) E1 + (1 - c) B(xi_0) E0]`` with ``E_k`` the
    augmented second moments ``E[(y,1)(y,1)']``, and
    ``rhs = sum_i z (x - 1/2) [c mu1~ + (1 - c) mu0~]``.
    The two branch terms of ``H`` are added, as maximising the expected
    complete-data bound requires.

    ``jj_coef`` may carry a precomputed ``B(xi)``.
    """
    x = _responses(data)
    G, _, n, D = mu.shape
    M = x.shape[1]
    q = _branch_weights(resp, normal_prob)
    B = jaakkola_b(xi) if jj_coef is None else jj_coef
    second = _augmented_second_moments(mu, sigma).reshape(G, 2, n, (D + 1) ** 2)
    mu_aug = np.concatenate([mu, np.ones(mu.shape[:-1] + (1,))], axis=-1)
    H = -2.0 * ((q[..., None] * B).swapaxes(-1, -2) @ second).sum(axis=1)
    H = H.reshape(G, M, D + 1, D + 1)
    rhs = ((x - 0.5).T @ (q[..., None] * mu_aug)).sum(axis=1)  # (G, M, D+1)
    try:
        sol, _ = solve_spd(H, rhs)
    except NumericalBreakdown:
        bad = np.argwhere(np.linalg.eigvalsh(H)[..., 0] <= 0)
        g, m = (int(v) for v in bad[0]) if len(bad) else (-1, -1)
        raise NumericalBreakdown("loading system is singular", m=m, g=g) from None
    return sol[..., D], sol[..., :D]


def update_eta(resp, normal_prob, mu, sigma, D, eta_ceiling=1000.0, eta_prev=None):
    """Closed-form maximiser of ``-(D/2) S log eta - T / (2 eta)``.

    ``S = sum z (1 - c)``, ``T = sum z (1 - c) tr(Sigma_0 + mu_0 mu_0')``;
    the stationary point ``T / (D S)`` is clamped into
    ``[1 + 1e-6, eta_ceiling]``. Components with ``S < 1e-10`` keep
    ``eta_prev``.
    """
    weight = (np.asarray(resp) * (1.0 - np.asarray(normal_prob))).T  # (G, n)
    m0 = mu[:, EXTREME]
    second = np.trace(sigma[:, EXTREME], axis1=-2, axis2=-1) + np.sum(m0 * m0, axis=-1)
    S = weight.sum(axis=1)
    T = (weight * second).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.clip(T / (D * S), 1.0 + ETA_MARGIN, eta_ceiling)
    small = S < 1e-10
    if np.any(small):
        if eta_prev is None:
            raise ValueError("eta_prev is required when a component has no extreme mass")
        eta = np.where(small, eta_prev, eta)
    return eta


# -- convergence --------------------------------------------------------------

class AitkenCheck(NamedTuple):
    converged: bool
    acceleration: float
    l_inf: float


def aitken_converged(l_prev2, l_prev, l_curr, epsilon=0.01, l_inf_prev=None):
    """Aitken-accelerated stopping rule.

    ``a = (l_curr - l_prev) / (l_prev - l_prev2)`` and the asymptotic estimate
    ``l_inf = l_prev + (l_curr - l_prev) / (1 - a)``. Convergence needs the
    previous estimate ``l_inf_prev``: the run stops once successive estimates
    differ by less than ``epsilon``. A flat step (denominator below
    ``1e-14``) counts as converged.
    """
    denom = l_prev - l_prev2
    if abs(denom) < 1e-14:
        return AitkenCheck(True, 0.0, l_curr)
    a = (l_curr - l_prev) / denom
    if a == 1.0:
        return AitkenCheck(False, a, math.inf)
    l_inf = l_prev + (l_curr - l_prev) / (1.0 - a)
    converged = l_inf_prev is not None and abs(l_inf - l_inf_prev) < epsilon
    return AitkenCheck(bool(converged), a, l_inf)


# -- driver -------------------------------------------------------------------

def _restart_rng(config, restart_index):
    ss = np.random.SeedSequence(config.seed, spawn_key=tuple(config.seed_key) + (int(restart_index),))
    return np.random.default_rng(ss)


def initialize(data, config, restart_index=0):
    """Random starting point for one restart.

    A random hard partition gives ``pi`` and the intercepts (logit of the
    within-group column means clipped to ``[1e-3, 1 - 1e-3]``); slopes are
    ``N(0, 0.01)``, ``tau = 0.9``, ``eta = 2`` and ``xi = 1``.
    """
    x = _responses(data)
    n, M = x.shape
    G, D = config.G, config.D
    rng = _restart_rng(config, restart_index)
    for _ in range(100):
        labels = rng.integers(G, size=n)
        if np.all(np.bincount(labels, minlength=G) > 0):
            break
    else:
        raise EmptyComponent(int(np.argmin(np.bincount(labels, minlength=G))),
                             "random initialisation left a component empty after 100 draws")
    resp = np.zeros((n, G))
    resp[np.arange(n), labels] = 1.0
    means = (resp.T @ x) / resp.sum(axis=0)[:, None]
    alpha = logit(np.clip(means, ALPHA_INIT_CLIP, 1 - ALPHA_INIT_CLIP))
    loadings = rng.normal(0.0, 0.1, size=(G, M, D))
    params = MltcnParams(pi=resp.mean(axis=0), alpha=alpha, loadings=loadings,
                         tau=np.full(G, 0.9), eta=np.full(G, 2.0))
    xi = np.ones((G, 2, n, M))
    mom = posterior_moments(x, params, xi)
    state = VariationalState(xi=xi, mu=mom.mu, sigma=mom.sigma, logdet_sigma=mom.logdet_sigma,
                             resp=resp, normal_prob=np.broadcast_to(params.tau, (n, G)).copy())
    return params, state


def _run_restart(x, config, restart_index, start=None):
    if start is None:
        params, state = initialize(x, config, restart_index)
        xi = state.xi
    else:
        params = start
        xi = np.ones((config.G, 2) + x.shape)
    mom = posterior_moments(x, params, xi)
    trace = []
    converged = False
    l_inf_prev = None
    iteration = 0
    for iteration in range(1, config.max_iter + 1):
        for _ in range(config.inner_xi_sweeps):
            xi = update_xi(params, mom.mu, mom.sigma)
            mom = posterior_moments(x, params, xi)
        bnd = lower_bound(params, xi, x, moments=mom)
        resp, normal_prob = e_step(params, bnd)
        pi = update_mixing(resp)
        for g in np.flatnonzero(pi < MIN_WEIGHT):
            raise EmptyComponent(int(g))
        tau = update_tau(resp, normal_prob, config.tau_floor)
        alpha, loadings = update_loadings(x, resp, normal_prob, xi, mom.mu, mom.sigma, jj_coef=mom.jj_coef)
        eta = update_eta(resp, normal_prob, mom.mu, mom.sigma, config.D, config.eta_ceiling, params.eta)
        params = MltcnParams(pi=pi / pi.sum(), alpha=alpha, loadings=loadings, tau=tau, eta=eta)
        mom = posterior_moments(x, params, xi)
        bnd = lower_bound(params, xi, x, moments=mom)
        if not math.isfinite(bnd.total):
            raise NumericalBreakdown("non-finite lower bound", iteration=iteration)
        trace.append(bnd.total)
        if len(trace) >= 3:
            check = aitken_converged(trace[-3], trace[-2], trace[-1],
                                     config.aitken_epsilon, l_inf_prev)
            l_inf_prev = check.l_inf
            if check.converged:
                converged = True
                break
    resp, normal_prob = e_step(params, bnd)
    state = VariationalState(xi=xi, mu=mom.mu, sigma=mom.sigma, logdet_sigma=mom.logdet_sigma,
                             resp=resp, normal_prob=normal_prob, branch_bounds=bnd.branch,
                             component_bounds=bnd.component)
    return params, state, np.asarray(trace), converged, iteration


def fit(data, config=None, start=None):
    """Fit the mixture by variational ECM with random restarts.

    Returns the restart with the highest final bound. Restarts that raise a
    package error are recorded; if all of them fail :class:`FitFailed` is
    raised. ``start`` (an :class:`MltcnParams`) replaces the random
    initialisation of restart 0, e.g. to continue from an earlier fit.
    """
    config = config or FitConfig()
    x = _responses(data)
    n, M = x.shape
    if start is not None and (start.n_components, start.n_latent, start.n_variables) != (config.G, config.D, M):
        raise ValueError("start parameters do not match the configured model")
    if n <= config.G:
        raise ValueError(f"need more observations ({n}) than components ({config.G})")

    def attempt(r):
        try:
            return _run_restart(x, config, r, start if r == 0 else None)
        except (MltcnError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.debug("restart %d failed: %r", r, exc)
            return exc

    if config.threads > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(attempt, range(config.restarts)))
    else:
        outcomes = [attempt(r) for r in range(config.restarts)]

    errors = tuple(o for o in outcomes if isinstance(o, Exception))
    if len(errors) == len(outcomes):
        raise FitFailed(errors)
    restart_bounds = np.array([o[2][-1] if not isinstance(o, Exception) else -np.inf
                               for o in outcomes])
    best = int(np.argmax(restart_bounds))
    params, state, trace, converged, iterations = outcomes[best]
    labels = map_classify(state.resp)
    extreme = state.normal_prob[np.arange(n), labels] < 0.5
    k = count_parameters(config.G, config.D, M)
    return FitResult(params=params, state=state, bound_trace=trace, converged=converged,
                     iterations=iterations, bic=bic_value(trace[-1], k, n), map_labels=labels,
                     extreme_flags=extreme, restart_bounds=restart_bounds, config=config,
                     restart_errors=errors)


def with_seed_key(config, *key):
    """Copy of ``config`` drawing from a different child stream."""
    return replace(config, seed_key=tuple(config.seed_key) + tuple(key))
