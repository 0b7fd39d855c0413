"""scikit-learn style front end for the federated mixture."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .mixture import AggregatorConfig, Dataset, federated_em, log_joint


class FederatedGaussianMixture(DensityMixin, BaseEstimator):
    """Gaussian mixture with shared components and per-agent mixing weights.

    Parameters
    ----------
    n_components : int, default=2
    gamma : float, default=1.0
        Dirichlet strength on every agent's mixing weights.
    lambda0 : float, default=1e-3
        Precision scale of the zero-mean prior on the component means.
    rho : float, default=0.1
        l1 strength on the precision matrices.
    aggregator : {"direct", "consensus", "shamir", "chunked"}, default="direct"
    graph : str or Graph, default="expander"
        Communication topology used by the consensus-family aggregators.
    n_chunks : int, default=3
    agg_tol : float, default=1e-8
        Consensus tolerance of each aggregation.
    tol : float, default=1e-6
    max_rounds : int, default=200
    covariance_form : {"derived", "plus_outer"}, default="derived"
        Matrix handed to the glasso: ``C/N - ((N + lambda0)/N) mu mu'`` for
        ``"derived"``, ``C/N + mu mu'`` for ``"plus_outer"``. Only the first
        makes every EM round ascend the objective.
    random_state : int or None, default=None

    Attributes
    ----------
    means_ : ndarray of shape (n_components, n_features)
    precisions_ : ndarray of shape (n_components, n_features, n_features)
    covariances_ : ndarray of shape (n_components, n_features, n_features)
    weights_ : ndarray of shape (n_agents, n_components)
    objective_trace_ : list of float
    n_iter_ : int
    converged_ : bool

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> agents = [rng.normal(size=(30, 2)) + c for c in (0, 0, 4)]
    >>> gm = FederatedGaussianMixture(n_components=2, random_state=0).fit(agents)
    >>> gm.weights_.shape
    (3, 2)
    """

    def __init__(
        self,
        n_components=2,
        gamma=1.0,
        lambda0=1e-3,
        rho=0.1,
        aggregator="direct",
        graph="expander",
        n_chunks=3,
        agg_tol=1e-8,
        tol=1e-6,
        max_rounds=200,
        covariance_form="derived",
        random_state=None,
    ):
        self.n_components = n_components
        self.gamma = gamma
        self.lambda0 = lambda0
        self.rho = rho
        self.aggregator = aggregator
        self.graph = graph
        self.n_chunks = n_chunks
        self.agg_tol = agg_tol
        self.tol = tol
        self.max_rounds = max_rounds
        self.covariance_form = covariance_form
        self.random_state = random_state

    def _split(self, X, agents):
        if agents is None:
            if isinstance(X, np.ndarray):
                raise ValueError("pass a list of per-agent arrays or give `agents` labels")
            return [check_array(x, ensure_min_samples=1) for x in X]
        X = check_array(X)
        agents = np.asarray(agents)
        if agents.shape != (X.shape[0],):
            raise ValueError(f"agents has shape {agents.shape}, expected ({X.shape[0]},)")
        labels = np.unique(agents)
        return [X[agents == lab] for lab in labels]

    def fit(self, X, y=None, agents=None):
        """Fit on per-agent data.

        Parameters
        ----------
        X : list of array-like or array-like of shape (n_samples, n_features)
            Either one matrix per agent, or stacked samples with ``agents``.
        agents : array-like of shape (n_samples,), optional
            Agent label of every row of a stacked ``X``; agents are ordered
            by sorted label.
        """
        data = Dataset(self._split(X, agents))
        cfg = AggregatorConfig(self.aggregator, graph=self.graph, tol=self.agg_tol,
                               n_chunks=self.n_chunks)
        res = federated_em(
            data, self.n_components, gamma=self.gamma, lambda0=self.lambda0, rho=self.rho,
            aggregator=cfg, seed=self.random_state, tol=self.tol, max_rounds=self.max_rounds,
            covariance_form=self.covariance_form,
        )
        p = res.params
        self.means_ = p.mu
        self.precisions_ = p.Lambda
        self.covariances_ = np.linalg.inv(p.Lambda)
        self.weights_ = p.pi
        self.objective_trace_ = list(res.objective_trace)
        self.n_iter_ = res.n_rounds
        self.converged_ = res.converged
        self.n_agents_ = data.S
        self.n_features_in_ = data.M
        self.params_ = p
        return self

    def _log_joint(self, X, agent):
        check_is_fitted(self, "params_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model has {self.n_features_in_}")
        if not 0 <= agent < self.n_agents_:
            raise ValueError(f"agent must lie in [0, {self.n_agents_}), got {agent}")
        return log_joint(X, self.params_, agent)

    def predict_proba(self, X, agent=0):
        lj = self._log_joint(X, agent)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def predict(self, X, agent=0):
        return self._log_joint(X, agent).argmax(axis=1)

    def score_samples(self, X, agent=0):
        """Log density of every row under agent ``agent``'s mixture."""
        return logsumexp(self._log_joint(X, agent), axis=1)

    def score(self, X, y=None, agent=0):
        return float(self.score_samples(X, agent).mean())
