"""Independent reference implementations used as test oracles."""
import numpy as np
from scipy.stats import multivariate_normal

from decolearn.learning import glasso


def synthetic_agents(seed, sizes=(150, 150, 150), weights=((0.8, 0.2), (0.5, 0.5), (0.2, 0.8))):
    """Three agents sharing two 2-D Gaussians with agent-specific weights."""
    rng = np.random.default_rng(seed)
    means = np.array([[-2.0, 0.0], [2.0, 1.0]])
    covs = np.array([[[1.0, 0.3], [0.3, 0.5]], [[0.6, -0.2], [-0.2, 1.2]]])
    agents = []
    for n, w in zip(sizes, weights):
        z = rng.choice(2, size=n, p=w)
        X = np.empty((n, 2))
        for k in range(2):
            idx = z == k
            X[idx] = rng.multivariate_normal(means[k], covs[k], size=idx.sum())
        agents.append(X)
    return agents


def pooled_em(agents, init_resp, rounds, gamma=1.0, lambda0=1e-3, rho=0.1):
    """Centralized MAP-EM on the concatenated samples.

    Mixing weights stay per agent; everything else uses the pooled data.
    Returns ``(mu, Lambda, pi)`` after every round.
    """
    X = np.concatenate(agents)
    owner = np.concatenate([np.full(len(A), a) for a, A in enumerate(agents)])
    R = np.concatenate(init_resp)
    K = R.shape[1]
    M = X.shape[1]
    out = []
    for _ in range(rounds):
        mu = np.empty((K, M))
        Lam = np.empty((K, M, M))
        for k in range(K):
            Nk = R[:, k].sum()
            mk = R[:, k] @ X
            Ck = (X * R[:, k:k + 1]).T @ X
            mu[k] = mk / (lambda0 + Nk)
            Sigma = Ck / Nk - (Nk + lambda0) / Nk * np.outer(mu[k], mu[k])
            Sigma = 0.5 * (Sigma + Sigma.T)
            Lam[k] = np.linalg.inv(Sigma) if rho == 0 else glasso(Sigma, rho / Nk)
        pi = np.empty((len(agents), K))
        for a in range(len(agents)):
            Na = R[owner == a].sum(axis=0)
            pi[a] = (Na + gamma) / (Na.sum() + K * gamma)
        logp = np.column_stack([
            multivariate_normal(mu[k], np.linalg.inv(Lam[k])).logpdf(X) for k in range(K)
        ]) + np.log(pi[owner])
        logp -= logp.max(axis=1, keepdims=True)
        R = np.exp(logp)
        R /= R.sum(axis=1, keepdims=True)
        out.append((mu, Lam, pi))
    return out


def rel_diff(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))
