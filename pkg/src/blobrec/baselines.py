"""Comparison recommenders: popularity, item correlation (ItemKNN),
a crossed-feature logistic-regression value model and an IPS-trained
softmax-linear contextual bandit.

Histories are item-count vectors of length ``P``; every model exposes
``scores(histories) -> (n, P)`` and recommends the highest-scoring item,
lowest id first on ties.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.linear_model import LogisticRegression

from .exceptions import DegenerateLabels, EmptyDataset, MissingPropensity
from .mathkernel import softmax
from .optim import RMSProp
from .organic.model import sessions_to_counts

__all__ = [
    "PopularityModel",
    "CorrelationModel",
    "LogRegValueModel",
    "ContextualBanditPolicy",
    "fit_popularity",
    "fit_item_knn",
    "fit_logreg_value",
    "fit_contextual_bandit",
]


def _histories(h, P):
    """Count matrix from a ``(n, P)`` float array or a list of item-id sequences."""
    if isinstance(h, np.ndarray) and h.ndim == 2 and h.dtype.kind == "f":
        return sessions_to_counts(h, P)
    return sessions_to_counts(list(h), P)


class _Recommender:
    def recommend(self, histories):
        """Highest-scoring item per history."""
        return np.argmax(self.scores(histories), axis=1)


class PopularityModel(_Recommender):
    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.float64)
        self.probs = (self.counts + 1.0) / (self.counts.sum() + self.counts.size)

    def scores(self, histories):
        n = len(histories)
        return np.tile(self.probs, (n, 1))


def fit_popularity(sessions, n_items=None):
    """View frequencies with add-one smoothing."""
    counts = sessions_to_counts(sessions, n_items)
    if counts.shape[0] == 0:
        raise EmptyDataset("no sessions")
    return PopularityModel(counts.sum(axis=0))


class CorrelationModel(_Recommender):
    """Item-item correlation scorer.

    ``mode="most_recent"`` scores by the row of the last viewed item;
    ``"session_average"`` averages rows over every view in the history.
    """

    def __init__(self, corr, mode="most_recent"):
        if mode not in ("most_recent", "session_average"):
            raise ValueError("mode must be most_recent or session_average")
        self.corr = corr
        self.mode = mode

    @property
    def P(self):
        return self.corr.shape[0]

    def scores(self, histories):
        """``histories`` are item-id sequences (order matters for ``most_recent``)
        or, for ``session_average`` only, a count matrix."""
        if self.mode == "session_average":
            H = _histories(histories, self.P)
            tot = H.sum(axis=1, keepdims=True)
            return (H @ self.corr) / np.where(tot > 0, tot, 1.0)
        out = np.zeros((len(histories), self.P))
        for i, items in enumerate(histories):
            items = np.asarray(getattr(items, "items", items))
            if items.size:
                out[i] = self.corr[int(items[-1])]
        return out


def fit_item_knn(sessions, mode="most_recent", n_items=None):
    """Pearson correlation of per-session item presence.

    The scatter matrix of the centred presence vectors gets ``+I`` on its
    diagonal before normalising, so never-seen items have a zero row off the
    diagonal instead of a division by zero.
    """
    counts = sessions_to_counts(sessions, n_items)
    if counts.shape[0] < 2:
        raise EmptyDataset("need at least two sessions")
    X = (counts > 0).astype(np.float64)
    Xc = X - X.mean(axis=0)
    scatter = Xc.T @ Xc + np.eye(X.shape[1])
    d = np.sqrt(np.diag(scatter))
    return CorrelationModel(scatter / np.outer(d, d), mode)


class LogRegValueModel(_Recommender):
    """Click model ``sigmoid(h @ weights[:, a] + intercepts[a])`` over ``P^2`` crossed features."""

    def __init__(self, weights, intercepts, l2):
        self.weights = weights
        self.intercepts = intercepts
        self.l2 = l2

    def scores(self, histories):
        H = _histories(histories, self.weights.shape[0])
        return H @ self.weights + self.intercepts

    def predict_proba(self, histories, actions=None):
        z = self.scores(histories)
        p = 1.0 / (1.0 + np.exp(-z))
        if actions is None:
            return p
        return p[np.arange(len(p)), np.asarray(actions)]


def crossed_design(histories, actions, P):
    """Sparse ``(N, P^2 + P)`` design: ``h kron onehot(a)`` then ``onehot(a)``."""
    H = sp.csr_matrix(np.asarray(histories, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64)
    H = H.tocoo()
    rows = H.row
    cols = H.col * P + actions[H.row]
    N = len(actions)
    data = np.concatenate([H.data, np.ones(N)])
    rows = np.concatenate([rows, np.arange(N)])
    cols = np.concatenate([cols, P * P + actions])
    return sp.csr_matrix((data, (rows, cols)), shape=(N, P * P + P))


def fit_logreg_value(histories, actions, clicks, l2=1.0, max_iter=1000):
    """L2-penalised logistic regression of clicks on history-action crosses.

    Uses L-BFGS; the penalty strength is ``l2`` (sklearn ``C = 1 / l2``) and
    the global intercept is unpenalised.
    """
    clicks = np.asarray(clicks, dtype=np.int64)
    if clicks.size == 0:
        raise EmptyDataset("empty bandit log")
    if clicks.min() == clicks.max():
        raise DegenerateLabels("clicks are all equal")
    histories = np.asarray(histories, dtype=np.float64)
    P = histories.shape[1]
    X = crossed_design(histories, actions, P)
    clf = LogisticRegression(C=1.0 / l2, solver="lbfgs", max_iter=max_iter, tol=1e-8)
    clf.fit(X, clicks)
    coef = clf.coef_.ravel()
    weights = coef[:P * P].reshape(P, P)  # [history item, action]
    intercepts = coef[P * P:] + clf.intercept_[0]
    return LogRegValueModel(weights, intercepts, l2)


class ContextualBanditPolicy(_Recommender):
    """Softmax-linear policy ``pi(a | h) = softmax(h @ weights + intercepts)``."""

    def __init__(self, weights, intercepts):
        self.weights = weights
        self.intercepts = intercepts
        self.trace = np.array([])

    def scores(self, histories):
        H = _histories(histories, self.weights.shape[0])
        return H @ self.weights + self.intercepts

    def action_probs(self, histories):
        return softmax(self.scores(histories), axis=1)


def ips_objective(weights, intercepts, histories, actions, clicks, propensities):
    """IPS value ``mean(c * pi(a | h) / p)`` and its gradients."""
    z = histories @ weights + intercepts
    pi = softmax(z, axis=1)
    N = len(actions)
    rows = np.arange(N)
    pa = pi[rows, actions]
    r = clicks / propensities
    value = float(np.mean(r * pa))
    # d pi_a / d z = pi_a (e_a - pi)
    coef = (r * pa / N)[:, None]
    dz = -coef * pi
    dz[rows, actions] += coef[:, 0]
    return value, histories.T @ dz, dz.sum(axis=0)


def fit_contextual_bandit(histories, actions, clicks, propensities, lr=0.01, epochs=200):
    """Maximise the unclipped IPS estimate by full-batch RMSProp ascent from a uniform policy."""
    p = np.asarray(propensities, dtype=np.float64)
    if p.size == 0:
        raise EmptyDataset("empty bandit log")
    if np.any(~np.isfinite(p)) or np.any(p <= 0):
        raise MissingPropensity("every record needs a positive propensity")
    H = np.asarray(histories, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    clicks = np.asarray(clicks, dtype=np.float64)
    P = H.shape[1]
    # only clicked records carry gradient
    keep = clicks > 0
    Hk, ak, ck, pk = H[keep], actions[keep], clicks[keep], p[keep]
    scale = keep.mean()
    theta = {"W": np.zeros((P, P)), "b": np.zeros(P)}
    opt = RMSProp(lr, maximize=True)
    trace = []
    for _ in range(epochs):
        if Hk.shape[0] == 0:
            trace.append(0.0)
            continue
        val, gW, gb = ips_objective(theta["W"], theta["b"], Hk, ak, ck, pk)
        trace.append(val * scale)
        opt.step(theta, {"W": gW * scale, "b": gb * scale})
    policy = ContextualBanditPolicy(theta["W"], theta["b"])
    policy.trace = np.array(trace)
    return policy
