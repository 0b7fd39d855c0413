import numpy as np
import pytest
from oracles import synthetic_agents
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from decolearn.learning import FederatedGaussianMixture, federated_em


@pytest.fixture(scope="module")
def agents():
    return synthetic_agents(3)


def test_params_roundtrip_and_clone():
    est = FederatedGaussianMixture(n_components=3, rho=0.5, aggregator="chunked", n_chunks=4)
    params = est.get_params()
    assert params["n_components"] == 3 and params["n_chunks"] == 4
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(rho=0.2)
    assert est.rho == 0.2


def test_fit_matches_function(agents):
    est = FederatedGaussianMixture(n_components=2, random_state=5).fit(agents)
    res = federated_em(agents, 2, seed=5)
    assert np.array_equal(est.means_, res.params.mu)
    assert np.array_equal(est.precisions_, res.params.Lambda)
    assert np.allclose(est.covariances_, np.linalg.inv(res.params.Lambda))
    assert est.weights_.shape == (3, 2)
    assert est.n_agents_ == 3 and est.n_features_in_ == 2
    assert est.converged_ and est.n_iter_ == res.n_rounds


def test_fit_with_agent_labels_equals_list(agents):
    X = np.concatenate(agents)
    labels = np.repeat([10, 20, 30], [len(a) for a in agents])
    a = FederatedGaussianMixture(n_components=2, random_state=1).fit(X, agents=labels)
    b = FederatedGaussianMixture(n_components=2, random_state=1).fit(agents)
    assert np.array_equal(a.means_, b.means_)


def test_stacked_input_needs_labels(agents):
    with pytest.raises(ValueError):
        FederatedGaussianMixture().fit(np.concatenate(agents))


def test_predict_and_scores(agents):
    est = FederatedGaussianMixture(n_components=2, random_state=0).fit(agents)
    X = agents[1][:20]
    proba = est.predict_proba(X, agent=1)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert np.array_equal(est.predict(X, agent=1), proba.argmax(axis=1))
    dens = np.column_stack([
        multivariate_normal(est.means_[k], est.covariances_[k]).logpdf(X) for k in range(2)
    ]) + np.log(est.weights_[1])
    assert np.allclose(est.score_samples(X, agent=1), logsumexp(dens, axis=1), rtol=1e-10)
    assert est.score(X, agent=1) == pytest.approx(est.score_samples(X, agent=1).mean())


def test_agent_weights_change_prediction(agents):
    est = FederatedGaussianMixture(n_components=2, random_state=0).fit(agents)
    mid = est.means_.mean(axis=0, keepdims=True)
    p0 = est.predict_proba(mid, agent=0)
    p2 = est.predict_proba(mid, agent=2)
    assert not np.allclose(p0, p2)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        FederatedGaussianMixture().predict(np.zeros((1, 2)))


def test_input_validation(agents):
    est = FederatedGaussianMixture(n_components=2, random_state=0).fit(agents)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 2)), agent=7)
    with pytest.raises(ValueError):
        est.predict(np.array([[np.nan, 0.0]]))
