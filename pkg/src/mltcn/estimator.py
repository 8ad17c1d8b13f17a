"""scikit-learn compatible wrapper around the variational ECM fit."""

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .ecm import FitConfig, e_step, fit, lower_bound, posterior_moments, update_xi
from .model import BinaryDataset


def check_binary_array(X, n_features=None):
    """Validate ``X`` as a 2-d array of zeros and ones and return it as int8.

    Parameters
    ----------
    X : array-like of shape (n_samples, n_features)
    n_features : int, optional
        Expected number of columns, checked when given.
    """
    if isinstance(X, BinaryDataset):
        X = X.responses
    arr = np.asarray(X)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("X must have at least one row and one column")
    if arr.dtype == bool:
        arr = arr.astype(np.int8)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("X must contain only 0 and 1")
    if n_features is not None and arr.shape[1] != n_features:
        raise ValueError(f"X has {arr.shape[1]} features, expected {n_features}")
    return arr.astype(np.int8)


class MLTCN(ClusterMixin, BaseEstimator):
    """Mixture of latent trait models with contaminated-normal traits.

    Each cluster has its own intercepts and slopes on a ``n_latent``
    dimensional trait, and its own share ``tau`` of typical members; the
    remaining members have traits inflated by ``eta`` and are reported as
    extreme.

    Parameters
    ----------
    n_components : int, default=2
    n_latent : int, default=2
    max_iter : int, default=1000
    tol : float, default=0.01
        Stopping threshold on successive Aitken limit estimates.
    n_init : int, default=10
        Random restarts; the one with the highest bound is kept.
    tau_floor : float, default=0.5
    eta_ceiling : float, default=1000.0
    random_state : int, default=0
    n_jobs : int, default=1
        Threads used to run restarts.

    Attributes
    ----------
    weights_ : ndarray of shape (n_components,)
    intercepts_ : ndarray of shape (n_components, n_features)
    loadings_ : ndarray of shape (n_components, n_features, n_latent)
    tau_, eta_ : ndarray of shape (n_components,)
    labels_ : ndarray of shape (n_samples,)
    extreme_ : ndarray of bool, shape (n_samples,)
    lower_bound_ : float
    n_iter_ : int
    converged_ : bool
    result_ : FitResult
    """

    def __init__(self, n_components=2, n_latent=2, max_iter=1000, tol=0.01, n_init=10,
                 tau_floor=0.5, eta_ceiling=1000.0, random_state=0, n_jobs=1):
        self.n_components = n_components
        self.n_latent = n_latent
        self.max_iter = max_iter
        self.tol = tol
        self.n_init = n_init
        self.tau_floor = tau_floor
        self.eta_ceiling = eta_ceiling
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return FitConfig(G=self.n_components, D=self.n_latent, max_iter=self.max_iter,
                         aitken_epsilon=self.tol, restarts=self.n_init,
                         seed=int(self.random_state), tau_floor=self.tau_floor,
                         eta_ceiling=self.eta_ceiling, threads=self.n_jobs)

    def fit(self, X, y=None):
        X = check_binary_array(X)
        result = fit(X, self._config())
        p = result.params
        self.result_ = result
        self.params_ = p
        self.weights_ = p.pi
        self.intercepts_ = p.alpha
        self.loadings_ = p.loadings
        self.tau_ = p.tau
        self.eta_ = p.eta
        self.labels_ = result.map_labels
        self.extreme_ = result.extreme_flags
        self.lower_bound_ = result.bound
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.n_features_in_ = X.shape[1]
        return self

    def _bound(self, X, sweeps=20):
        """Variational bound for new rows, with the parameters held fixed."""
        check_is_fitted(self, "params_")
        X = check_binary_array(X, self.n_features_in_)
        p = self.params_
        xi = np.ones((p.n_components, 2, X.shape[0], p.n_variables))
        for _ in range(sweeps):
            mom = posterior_moments(X, p, xi)
            xi = update_xi(p, mom.mu, mom.sigma)
        mom = posterior_moments(X, p, xi)
        return lower_bound(p, xi, X, mom)

    def predict_proba(self, X):
        """Posterior component probabilities for each row of ``X``."""
        branch_bounds = self._bound(X)
        resp, _ = e_step(self.params_, branch_bounds)
        return resp

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def predict_extreme(self, X):
        """True where a row's contamination weight in its MAP component is below one half."""
        branch_bounds = self._bound(X)
        resp, normal_prob = e_step(self.params_, branch_bounds)
        g = np.argmax(resp, axis=1)
        return normal_prob[np.arange(resp.shape[0]), g] < 0.5

    def score(self, X, y=None):
        """Mean per-row variational lower bound on the log-likelihood."""
        return float(self._bound(X).total) / check_binary_array(X).shape[0]

    def bic(self, X=None):
        """BIC of the fit (on the training data; ``X`` is accepted for API symmetry)."""
        check_is_fitted(self, "result_")
        return self.result_.bic
