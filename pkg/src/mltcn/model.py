"""Data model for mixtures of latent trait models with contaminated-normal traits.

A binary response vector ``x`` (length ``M``) is generated by picking a
component ``g`` with probability ``pi[g]``, a latent trait from the
scale mixture ``tau[g] N(0, I) + (1 - tau[g]) N(0, eta[g] I)`` and then
independent Bernoulli responses with success probability
``sigmoid(alpha[g, m] + loadings[g, m] @ trait)``.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from ._math import log_sigmoid, log_sum_exp, sigmoid
from .exceptions import ParameterDomain, UnsupportedDimension


@dataclass(frozen=True)
class BinaryDataset:
    """An ``n x M`` matrix of 0/1 responses with optional labels and names."""

    responses: np.ndarray
    labels: Optional[np.ndarray] = None
    variable_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        x = np.asarray(self.responses)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"responses must be a non-empty 2-D array, got shape {x.shape}")
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("responses must contain only 0 and 1")
        x = x.astype(np.int8)
        x.setflags(write=False)
        object.__setattr__(self, "responses", x)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (x.shape[0],):
                raise ValueError(f"labels must have length {x.shape[0]}")
            object.__setattr__(self, "labels", labels)
        if self.variable_names is not None:
            names = tuple(str(v) for v in self.variable_names)
            if len(names) != x.shape[1]:
                raise ValueError(f"variable_names must have length {x.shape[1]}")
            object.__setattr__(self, "variable_names", names)

    @property
    def n(self):
        return self.responses.shape[0]

    @property
    def m(self):
        return self.responses.shape[1]


@dataclass(frozen=True)
class MltcnParams:
    """Component parameters of the mixture.

    Attributes
    ----------
    pi : (G,) mixing weights
    alpha : (G, M) intercepts
    loadings : (G, M, D) slopes
    tau : (G,) prior probability of the uncontaminated branch, in (0.5, 1)
    eta : (G,) variance inflation of the contaminated branch, > 1
    """

    pi: np.ndarray
    alpha: np.ndarray
    loadings: np.ndarray
    tau: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("pi", "alpha", "loadings", "tau", "eta"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def n_components(self):
        return self.pi.shape[0]

    @property
    def n_latent(self):
        return self.loadings.shape[2]

    @property
    def n_variables(self):
        return self.alpha.shape[1]

    def validate(self):
        G = self.pi.shape[0] if self.pi.ndim == 1 else -1
        if G < 1:
            raise ParameterDomain("pi must be a non-empty vector")
        if self.alpha.ndim != 2 or self.alpha.shape[0] != G:
            raise ParameterDomain(f"alpha must have shape (G, M) with G={G}")
        M = self.alpha.shape[1]
        if self.loadings.ndim != 3 or self.loadings.shape[:2] != (G, M) or self.loadings.shape[2] < 1:
            raise ParameterDomain(f"loadings must have shape ({G}, {M}, D) with D >= 1")
        if self.tau.shape != (G,) or self.eta.shape != (G,):
            raise ParameterDomain("tau and eta must have one entry per component")
        if np.any(self.pi <= 0) or abs(self.pi.sum() - 1.0) > 1e-10:
            raise ParameterDomain(f"pi must be positive and sum to 1, got {self.pi}")
        if np.any(self.tau <= 0.5) or np.any(self.tau >= 1.0):
            raise ParameterDomain(f"tau must lie in (0.5, 1), got {self.tau}")
        if np.any(self.eta <= 1.0) or not np.all(np.isfinite(self.eta)):
            raise ParameterDomain(f"eta must be finite and > 1, got {self.eta}")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.loadings))):
            raise ParameterDomain("alpha and loadings must be finite")

    def permuted(self, order):
        """Return a copy with components reordered by ``order``."""
        order = np.asarray(order)
        return MltcnParams(self.pi[order], self.alpha[order], self.loadings[order],
                           self.tau[order], self.eta[order])


@dataclass(frozen=True)
class LatentAssignment:
    """Soft (or true) group memberships and contamination weights.

    ``resp`` rows are probability vectors over components, ``normal_prob[i, g]`` is the
    probability that observation ``i`` is a normal (uncontaminated) member of
    component ``g``. ``trait``, ``resp_hard`` and ``normal_hard`` are only filled for
    simulated data.
    """

    resp: np.ndarray
    normal_prob: np.ndarray
    trait: Optional[np.ndarray] = None
    resp_hard: Optional[np.ndarray] = None
    normal_hard: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        resp = np.asarray(self.resp, dtype=float)
        normal_prob = np.asarray(self.normal_prob, dtype=float)
        if np.any(resp < 0) or not np.allclose(resp.sum(axis=1), 1.0, atol=1e-10):
            raise ValueError("rows of resp must be probability vectors")
        if np.any(normal_prob < 0) or np.any(normal_prob > 1):
            raise ValueError("normal_prob entries must lie in [0, 1]")


def response_probability(alpha_m, w_m, trait):
    """Probability of a positive response, ``sigmoid(alpha_m + w_m @ y)``."""
    return sigmoid(alpha_m + np.dot(w_m, trait))


def latent_density(trait, tau, eta):
    """Density of the contaminated normal ``tau N(0, I) + (1 - tau) N(0, eta I)``.

    ``trait`` may be a single ``D``-vector or an ``(N, D)`` stack of points.
    """
    trait = np.atleast_1d(np.asarray(trait, dtype=float))
    D = trait.shape[-1]
    r2 = np.sum(trait * trait, axis=-1)
    normal = np.exp(-0.5 * r2) / (2 * np.pi) ** (D / 2)
    inflated = np.exp(-0.5 * r2 / eta) / (2 * np.pi * eta) ** (D / 2)
    out = tau * normal + (1 - tau) * inflated
    return float(out) if np.ndim(out) == 0 else out


def sample_mltcn(params, n, seed):
    """Draw ``n`` observations from the mixture.

    Every observation gets its own child of ``SeedSequence(seed)``, so the
    i-th draw does not depend on how many draws come before it and blocks of
    observations can be generated independently.

    Returns
    -------
    dataset : BinaryDataset
        Responses with the true component (0-based) as labels.
    truth : LatentAssignment
        One-hot ``resp``, 0/1 ``normal_prob`` at the true component, and the latent draws.
    """
    if not isinstance(params, MltcnParams):
        raise ParameterDomain("params must be an MltcnParams instance")
    params.validate()
    n = int(n)
    if n < 1:
        raise ParameterDomain("n must be at least 1")
    G, M, D = params.n_components, params.n_variables, params.n_latent
    groups = np.empty(n, dtype=np.int64)
    normal = np.empty(n, dtype=bool)
    trait = np.empty((n, D))
    x = np.empty((n, M), dtype=np.int8)
    cum_pi = np.cumsum(params.pi)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        g = min(int(np.searchsorted(cum_pi, rng.random(), side="right")), G - 1)
        is_normal = rng.random() < params.tau[g]
        yi = rng.standard_normal(D)
        if not is_normal:
            yi *= np.sqrt(params.eta[g])
        p = sigmoid(params.alpha[g] + params.loadings[g] @ yi)
        groups[i], normal[i], trait[i] = g, is_normal, yi
        x[i] = rng.random(M) < p
    resp = np.zeros((n, G))
    resp[np.arange(n), groups] = 1.0
    normal_prob = np.zeros((n, G))
    normal_prob[np.arange(n), groups] = normal
    data = BinaryDataset(x, labels=groups)
    truth = LatentAssignment(resp=resp, normal_prob=normal_prob, trait=trait, resp_hard=resp.copy(),
                             normal_hard=normal.copy(), groups=groups)
    return data, truth


class OracleEstimate(NamedTuple):
    value: float
    stderr: float


def _branch_log_lik(x, alpha_g, w_g, nodes):
    """``log p(x_i | y_q)`` for every observation and latent node, shape (n, Q)."""
    eta_lin = alpha_g[None, :] + nodes @ w_g.T  # (Q, M)
    ls_pos = log_sigmoid(eta_lin)
    ls_neg = log_sigmoid(-eta_lin)
    return x @ ls_pos.T + (1 - x) @ ls_neg.T


def true_log_likelihood_oracle(data, params, method="quadrature", resolution=60, seed=0):
    """Log-likelihood of the data by direct numerical integration over the latent trait.

    Intended for testing the variational bound on small problems.

    ``method="quadrature"`` uses a tensor-product Gauss-Hermite rule with
    ``resolution`` nodes per latent axis (``D <= 2``).
    ``method="monte_carlo"`` averages over ``resolution`` (>= 1000) standard
    normal draws shared by all observations; the returned ``stderr`` is the
    delta-method standard error of the summed log-likelihood.
    """
    x = np.asarray(data.responses if isinstance(data, BinaryDataset) else data, dtype=float)
    G, D = params.n_components, params.n_latent
    if method == "quadrature":
        if D > 2:
            raise UnsupportedDimension(f"quadrature oracle supports D <= 2, got D={D}")
        t, wt = np.polynomial.hermite_e.hermegauss(int(resolution))
        log_wt = np.log(wt / wt.sum())
        if D == 1:
            base = t[:, None]
            log_node_w = log_wt
        else:
            g1, g2 = np.meshgrid(t, t, indexing="ij")
            base = np.column_stack([g1.ravel(), g2.ravel()])
            log_node_w = (log_wt[:, None] + log_wt[None, :]).ravel()
    elif method == "monte_carlo":
        if resolution < 1000:
            raise ValueError("monte_carlo oracle needs resolution >= 1000")
        base = np.random.default_rng(seed).standard_normal((int(resolution), D))
        log_node_w = np.full(int(resolution), -np.log(resolution))
    else:
        raise ValueError(f"unknown method {method!r}")

    # per-node log contribution, (n, Q) summed over components and branches
    terms = []
    for g in range(G):
        for scale, prior in ((1.0, params.tau[g]), (np.sqrt(params.eta[g]), 1 - params.tau[g])):
            ll = _branch_log_lik(x, params.alpha[g], params.loadings[g], base * scale)
            terms.append(np.log(params.pi[g]) + np.log(prior) + ll)
    per_node = log_sum_exp(np.stack(terms), axis=0)  # (n, Q)
    log_p = log_sum_exp(per_node + log_node_w[None, :], axis=1)
    total = float(np.sum(log_p))
    if method == "quadrature":
        return OracleEstimate(total, 0.0)
    ratio = np.exp(per_node - log_p[:, None]).sum(axis=0)  # sum_i f_i(r) / p_i
    stderr = float(np.std(ratio, ddof=1) / np.sqrt(ratio.size))
    return OracleEstimate(total, stderr)


def design_params(m=25, g=2, d=2, pi=None, tau=0.8, eta=2.5, loading_scale=1.0, seed=0):
    """Ground-truth parameters for simulation studies.

    Intercepts of the first component are uniform on ``[-1.5, 1.5]`` and the
    second component mirrors them (``alpha_2 = -alpha_1``), which keeps two
    groups well separated; further components draw their own intercepts.
    Slopes are ``N(0, loading_scale^2)``. ``tau`` and ``eta`` may be scalars
    (shared by all components) or length-``g`` sequences.
    """
    m, g, d = int(m), int(g), int(d)
    if min(m, g, d) < 1:
        raise ParameterDomain("m, g and d must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    alpha = rng.uniform(-1.5, 1.5, size=(g, m))
    if g >= 2:
        alpha[1] = -alpha[0]
    loadings = rng.normal(0.0, loading_scale, size=(g, m, d))
    pi = np.full(g, 1.0 / g) if pi is None else np.asarray(pi, dtype=float)
    params = MltcnParams(pi=pi, alpha=alpha, loadings=loadings,
                         tau=np.broadcast_to(np.asarray(tau, dtype=float), (g,)).copy(),
                         eta=np.broadcast_to(np.asarray(eta, dtype=float), (g,)).copy())
    params.validate()
    return params
