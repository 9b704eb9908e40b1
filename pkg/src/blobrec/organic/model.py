"""BLO: the organic latent-Gaussian softmax session model as an estimator.

Sessions are bags of viewed items. The estimator learns item embeddings
``psi`` and popularity offsets ``rho`` by maximising an evidence bound with a
linear amortised encoder, then infers user states either with the encoder
or with variational EM.

>>> blo = BLO(n_components=5, epochs=50).fit(train_sessions)      # doctest: +SKIP
>>> omega_hat = blo.transform(test_sessions)                      # doctest: +SKIP
>>> probs = blo.predict_proba(test_sessions)                      # doctest: +SKIP
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import EmptyDataset, FormatVersionMismatch, ItemIdOutOfRange, TrainingDiverged
from ..mathkernel import as_generator, lambda_jj
from ..optim import RMSProp
from .bounds import elbo_bouchard_batch, elbo_logconcave_batch, elbo_reparam_batch
from .em import em_batch, next_item_probs
from .types import LinearEncoder, OrganicParams, OrganicSession

BOUNDS = ("reparam", "bouchard", "logconcave")


@dataclass
class OrganicTrainConfig:
    K: int = 10
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    bound: str = "reparam"
    neg_samples: int = 0
    l2: float = 0.0
    seed: int = 0

    def validate(self, n_items=None):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.bound not in BOUNDS:
            raise ValueError(f"bound must be one of {BOUNDS}")
        if self.neg_samples < 0 or (n_items is not None and self.neg_samples >= n_items):
            raise ValueError("neg_samples must satisfy 0 <= S < P")
        if self.neg_samples and self.bound == "reparam":
            raise ValueError("negative sampling needs the bouchard or logconcave bound")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


def sessions_to_counts(sessions, n_items=None):
    """Stack sessions into a ``(n_sessions, P)`` count matrix.

    Accepts a 2-d count array, or an iterable of :class:`OrganicSession` /
    item-id sequences.
    """
    if isinstance(sessions, np.ndarray) and sessions.ndim == 2:
        if n_items is not None and sessions.shape[1] != n_items:
            raise ItemIdOutOfRange(f"count matrix has {sessions.shape[1]} columns, expected {n_items}")
        return sessions.astype(np.float64)
    item_lists = [s.items if isinstance(s, OrganicSession) else np.asarray(s, dtype=np.int64)
                  for s in sessions]
    if not item_lists:
        raise EmptyDataset("no sessions")
    top = max((int(x.max()) for x in item_lists if x.size), default=-1)
    if min((int(x.min()) for x in item_lists if x.size), default=0) < 0:
        raise ItemIdOutOfRange("negative item id")
    if n_items is None:
        n_items = top + 1
    elif top >= n_items:
        raise ItemIdOutOfRange(f"item id {top} >= n_items {n_items}")
    out = np.zeros((len(item_lists), n_items))
    for i, items in enumerate(item_lists):
        out[i] = np.bincount(items, minlength=n_items)
    return out


def _solve_bouchard_aux(psi, rho, mu, var, weights, n_inner=5):
    """Closed-form coordinate ascent on ``(a, xi)`` for fixed posteriors."""
    xbar = mu @ psi.T + rho
    s = var @ (psi * psi).T
    a = np.zeros(mu.shape[0])
    xi = np.sqrt(s + xbar**2)
    for _ in range(n_inner):
        lam = lambda_jj(xi)
        a = (np.sum(weights * (0.5 + 2.0 * lam * xbar), axis=1) - 1.0) / (2.0 * np.sum(weights * lam, axis=1))
        xi = np.sqrt(s + (xbar - a[:, None]) ** 2)
    return a, xi


def _bound_and_grads(cfg, psi, rho, counts, mu, var, gen):
    P = psi.shape[0]
    if cfg.bound == "reparam":
        eps = gen.standard_normal(mu.shape)
        return elbo_reparam_batch(psi, rho, counts, mu, var, eps)
    if cfg.neg_samples:
        weights = np.zeros((counts.shape[0], P))
        for b in range(counts.shape[0]):
            weights[b, gen.choice(P, size=cfg.neg_samples, replace=False)] = P / cfg.neg_samples
    else:
        weights = np.ones((counts.shape[0], P))
    if cfg.bound == "bouchard":
        a, xi = _solve_bouchard_aux(psi, rho, mu, var, weights)
        return elbo_bouchard_batch(psi, rho, counts, mu, var, a, xi, weights=weights)
    # log-concave: phi at its optimum for the (possibly sampled) sum
    if cfg.neg_samples:
        z = mu @ psi.T + rho + 0.5 * var @ (psi * psi).T
        phi = 1.0 / np.sum(weights * np.exp(z), axis=1)
        return _logconcave_weighted(psi, rho, counts, mu, var, phi, weights)
    z = mu @ psi.T + rho + 0.5 * var @ (psi * psi).T
    phi = 1.0 / np.sum(np.exp(z), axis=1)
    return elbo_logconcave_batch(psi, rho, counts, mu, var, phi)


def _logconcave_weighted(psi, rho, counts, mu, var, phi, weights):
    T = counts.sum(axis=1)
    psi2 = psi * psi
    expo = weights * np.exp(mu @ psi.T + rho + 0.5 * (var @ psi2.T))
    kl = 0.5 * np.sum(var + mu**2 - 1.0 - np.log(var), axis=1)
    data = np.einsum("bp,bp->b", counts, mu @ psi.T + rho)
    values = data - T * phi * expo.sum(axis=1) + T * np.log(phi) + T - kl
    we = (T * phi)[:, None] * expo
    grads = {
        "mu": counts @ psi - we @ psi - mu,
        "var": -0.5 * (we @ psi2) - 0.5 * (1.0 - 1.0 / var),
        "psi": counts.T @ mu - we.T @ mu - psi * (we.T @ var),
        "rho": counts.sum(axis=0) - we.sum(axis=0),
    }
    return values, grads


def init_params(n_items, cfg, gen):
    K = cfg.K
    params = OrganicParams(0.01 * gen.standard_normal((n_items, K)), np.zeros(n_items))
    encoder = LinearEncoder(
        0.01 * gen.standard_normal((K, n_items)), np.zeros(K),
        0.01 * gen.standard_normal((K, n_items)), np.zeros(K),
    )
    return params, encoder


def fit_vae(sessions, cfg: OrganicTrainConfig, rng=None, n_items=None):
    """Train item embeddings and a linear encoder by stochastic ascent on a bound.

    Returns ``(params, encoder, history)``; ``history`` holds the mean
    per-session bound over each epoch (L2 penalty excluded).
    """
    counts = sessions_to_counts(sessions, n_items)
    if counts.shape[0] == 0 or counts.sum() == 0:
        raise EmptyDataset("no organic events to fit")
    P = counts.shape[1]
    cfg.validate(P)
    gen = as_generator(cfg.seed if rng is None else rng)
    params, encoder = init_params(P, cfg, gen)
    theta = {"psi": params.psi, "rho": params.rho, "W_mu": encoder.weight_mu, "b_mu": encoder.bias_mu,
             "W_lv": encoder.weight_logvar, "b_lv": encoder.bias_logvar}
    opt = RMSProp(cfg.learning_rate, maximize=True)
    history = []
    n = counts.shape[0]
    for _ in range(cfg.epochs):
        order = gen.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = counts[order[start:start + cfg.batch_size]]
            B = batch.shape[0]
            mu = batch @ theta["W_mu"].T + theta["b_mu"]
            logvar = np.clip(batch @ theta["W_lv"].T + theta["b_lv"], -20.0, 20.0)
            var = np.exp(logvar)
            values, g = _bound_and_grads(cfg, theta["psi"], theta["rho"], batch, mu, var, gen)
            if not np.all(np.isfinite(values)):
                raise TrainingDiverged("non-finite bound during organic training")
            total += values.sum()
            g_lv = g["var"] * var
            grads = {
                "psi": g["psi"] / B, "rho": g["rho"] / B,
                "W_mu": g["mu"].T @ batch / B, "b_mu": g["mu"].mean(axis=0),
                "W_lv": g_lv.T @ batch / B, "b_lv": g_lv.mean(axis=0),
            }
            if cfg.l2:
                for name in ("psi", "rho", "W_mu", "W_lv"):
                    grads[name] = grads[name] - 2.0 * cfg.l2 * theta[name]
            opt.step(theta, grads)
        history.append(total / n)
    params = OrganicParams(theta["psi"], theta["rho"])
    encoder = LinearEncoder(theta["W_mu"], theta["b_mu"], theta["W_lv"], theta["b_lv"])
    return params, encoder, np.array(history)


class BLO(TransformerMixin, BaseEstimator):
    """Organic session model: fit embeddings, infer user states, predict next items.

    Parameters
    ----------
    n_components : int
        Dimension ``K`` of the user state.
    bound : {"reparam", "bouchard", "logconcave"}
        Training objective.
    learning_rate, epochs, batch_size : training schedule (RMSProp).
    neg_samples : int
        Sampled negatives per session for the analytic bounds; 0 uses all items.
    l2 : float
        Penalty on all weights.
    inference : {"em", "encoder"}
        How :meth:`transform` obtains posteriors.
    em_iters : int
        EM cycles per session when ``inference="em"``.
    prediction : {"mean", "mc"}
        Next-item approximation used by :meth:`predict_proba`.
    mc_samples : int
        Posterior draws for ``prediction="mc"``.
    n_items : int or None
        Catalogue size; inferred from the data when None.
    random_state : int
    """

    def __init__(self, n_components=10, bound="reparam", learning_rate=1e-3, epochs=100, batch_size=64,
                 neg_samples=0, l2=0.0, inference="em", em_iters=100, prediction="mean", mc_samples=100,
                 n_items=None, random_state=0):
        self.n_components = n_components
        self.bound = bound
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.neg_samples = neg_samples
        self.l2 = l2
        self.inference = inference
        self.em_iters = em_iters
        self.prediction = prediction
        self.mc_samples = mc_samples
        self.n_items = n_items
        self.random_state = random_state

    def _train_config(self):
        return OrganicTrainConfig(K=self.n_components, learning_rate=self.learning_rate, epochs=self.epochs,
                                  batch_size=self.batch_size, bound=self.bound, neg_samples=self.neg_samples,
                                  l2=self.l2, seed=self.random_state)

    def fit(self, X, y=None):
        counts = sessions_to_counts(X, self.n_items)
        self.params_, self.encoder_, self.loss_history_ = fit_vae(counts, self._train_config())
        self.n_items_ = counts.shape[1]
        return self

    @classmethod
    def from_params(cls, params: OrganicParams, encoder: LinearEncoder | None = None, **kwargs):
        """Wrap already-trained parameters (e.g. loaded from disk)."""
        est = cls(n_components=params.n_components, n_items=params.n_items, **kwargs)
        est.params_ = params
        est.encoder_ = encoder
        est.loss_history_ = np.array([])
        est.n_items_ = params.n_items
        return est

    def _counts(self, X):
        check_is_fitted(self, "params_")
        return sessions_to_counts(X, self.n_items_)

    def posterior(self, X):
        """Posterior means and covariances ``(mu (B,K), cov)`` for each session."""
        counts = self._counts(X)
        if self.inference == "encoder":
            mu, logvar = self.encoder_(counts)
            return mu, np.exp(logvar)
        if self.inference != "em":
            raise ValueError(f"unknown inference {self.inference!r}")
        mu, cov, _, _ = em_batch(self.params_, counts, n_iter=self.em_iters)
        return mu, cov

    def transform(self, X):
        """Posterior-mean user states, shape ``(n_sessions, K)``."""
        return self.posterior(X)[0]

    def predict_proba(self, X):
        """Next-item distribution for each session, shape ``(n_sessions, P)``."""
        mu, cov = self.posterior(X)
        gen = as_generator(self.random_state)
        return next_item_probs(self.params_, (mu, cov), mode=self.prediction, n_samples=self.mc_samples, rng=gen)

    def predict(self, X):
        """Most probable next item (lowest id on ties)."""
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y=None):
        """Mean log-probability of each session's last item given the rest."""
        return float(np.mean(next_item_log_likelihood(self, X)))


def next_item_log_likelihood(model, sessions):
    """Log predictive probability of ``v_T`` given ``v_1..v_{T-1}`` per session.

    ``model`` needs ``predict_proba`` over item-id sequences.
    """
    prefixes, targets = [], []
    for s in sessions:
        items = s.items if isinstance(s, OrganicSession) else np.asarray(s)
        if len(items) < 2:
            continue
        prefixes.append(items[:-1])
        targets.append(int(items[-1]))
    probs = model.predict_proba(prefixes)
    return np.log(probs[np.arange(len(targets)), targets])


FORMAT_VERSION = 1


def model_to_dict(params: OrganicParams, encoder: LinearEncoder | None = None, extra=None):
    """Versioned JSON-ready document; floats keep full round-trip precision."""
    d = {"format_version": FORMAT_VERSION, "P": params.n_items, "K": params.n_components,
         "psi": params.psi.tolist(), "rho": params.rho.tolist(), "encoder": None}
    if encoder is not None:
        d["encoder"] = {"weight_mu": encoder.weight_mu.tolist(), "bias_mu": encoder.bias_mu.tolist(),
                        "weight_logvar": encoder.weight_logvar.tolist(),
                        "bias_logvar": encoder.bias_logvar.tolist()}
    if extra:
        d.update(extra)
    return d


def model_from_dict(d):
    """Inverse of :func:`model_to_dict`; returns ``(params, encoder or None)``."""
    if d.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"expected format_version {FORMAT_VERSION}, got {d.get('format_version')}")
    params = OrganicParams(d["psi"], d["rho"])
    if params.psi.shape != (d["P"], d["K"]):
        raise ValueError("psi shape does not match P, K")
    enc = d.get("encoder")
    encoder = None
    if enc is not None:
        encoder = LinearEncoder(*(np.asarray(enc[k], dtype=np.float64)
                                  for k in ("weight_mu", "bias_mu", "weight_logvar", "bias_logvar")))
    return params, encoder
