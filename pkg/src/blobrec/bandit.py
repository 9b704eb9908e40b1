"""BLOB: Bayesian bandit layer whose item embeddings are tied to the organic ones.

Click logits are ``beta_a @ omega_hat + kappa_a`` with

    beta  = s+(w_a) psi + s+(w_b) psi @ zeta @ L.T,   L L^T = psi^T psi / P
    kappa = kappa' + w_c

and Gaussian variational posteriors on ``w_a, w_b, w_c``, ``kappa'`` and the
``K x K`` matrix ``zeta``. Two families are offered for ``zeta``: independent
normals per element (NQ) and a matrix normal with diagonal row and column
covariances (MNQ). Training uses the local reparameterisation trick, so each
record needs four scalar normal draws whatever ``K`` is.

``vec`` stacks columns, so ``R_n vec(zeta) = psi_a @ zeta @ (L.T @ omega_hat)``
with ``R_n = (L.T omega_hat)^T kron psi_a``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyDataset, FormatVersionMismatch, ItemIdOutOfRange, TrainingDiverged
from .mathkernel import as_generator, cholesky_with_jitter, kl_normal, log_sigmoid, sigmoid, softplus
from .optim import RMSProp

FORMAT_VERSION = 1
VARIANTS = ("NQ", "MNQ")

__all__ = [
    "BanditHyperPriors",
    "VariationalStateNQ",
    "VariationalStateMNQ",
    "BanditDataset",
    "BanditFitConfig",
    "BetaEstimate",
    "BLOB",
    "precompute_geometry",
    "sample_beta",
    "beta_covariance",
    "lambda_hat_nq",
    "lambda_hat_mnq",
    "sample_lambda_full",
    "kl_divergence",
    "noisy_objective",
    "fit_bandit",
    "beta_point_estimate",
    "predict_and_recommend",
]


@dataclass
class BanditHyperPriors:
    mu0_wa: float = -1.0
    sigma0_wa: float = 1.0
    mu0_wb: float = -6.0
    sigma0_wb: float = 1.0
    mu0_wc: float = -4.5
    sigma0_wc: float = 10.0
    sigma_kappa0: float = 0.01

    def __post_init__(self):
        for name in ("sigma0_wa", "sigma0_wb", "sigma0_wc", "sigma_kappa0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ------------------------------------------------------------------ states

_SCALARS = ("mu_wa", "log_sigma_wa", "mu_wb", "log_sigma_wb", "mu_wc", "log_sigma_wc")


@dataclass
class VariationalStateNQ:
    """Variational parameters with independent normals on each ``zeta`` entry.

    Standard deviations are stored as logs; ``sigma_*`` properties expose them.
    """

    mu_wa: float
    log_sigma_wa: float
    mu_wb: float
    log_sigma_wb: float
    mu_wc: float
    log_sigma_wc: float
    mu_kappa: np.ndarray
    log_sigma_kappa: np.ndarray
    mu_zeta: np.ndarray
    log_sigma_zeta: np.ndarray
    variant = "NQ"

    def __post_init__(self):
        _coerce(self)
        P, K = self.P, self.K
        assert self.log_sigma_kappa.shape == (P,)
        assert self.mu_zeta.shape == (K, K) and self.log_sigma_zeta.shape == (K, K)
        assert self.n_params == 2 * (P + K * K + 3)

    @property
    def sigma_zeta(self):
        return np.exp(self.log_sigma_zeta)

    def zeta_var(self):
        """Elementwise posterior variance of ``zeta``."""
        return np.exp(2.0 * self.log_sigma_zeta)


@dataclass
class VariationalStateMNQ:
    """Variational parameters with a matrix-normal posterior on ``zeta``.

    ``zeta ~ MN(mu_zeta, diag(sigma_row^2), diag(sigma_col^2))``.
    """

    mu_wa: float
    log_sigma_wa: float
    mu_wb: float
    log_sigma_wb: float
    mu_wc: float
    log_sigma_wc: float
    mu_kappa: np.ndarray
    log_sigma_kappa: np.ndarray
    mu_zeta: np.ndarray
    log_sigma_zeta_row: np.ndarray
    log_sigma_zeta_col: np.ndarray
    variant = "MNQ"

    def __post_init__(self):
        _coerce(self)
        P, K = self.P, self.K
        assert self.log_sigma_kappa.shape == (P,)
        assert self.mu_zeta.shape == (K, K)
        assert self.log_sigma_zeta_row.shape == (K,) and self.log_sigma_zeta_col.shape == (K,)
        assert self.n_params == 2 * (P + 3) + K * K + 2 * K

    def zeta_var(self):
        return np.outer(np.exp(2.0 * self.log_sigma_zeta_row), np.exp(2.0 * self.log_sigma_zeta_col))


def _coerce(state):
    for name in _SCALARS:
        setattr(state, name, float(getattr(state, name)))
    for name in _array_names(state):
        setattr(state, name, np.array(getattr(state, name), dtype=np.float64))


def _array_names(state):
    return [n for n in state.__dataclass_fields__ if n not in _SCALARS]


def _common_props(cls):
    cls.P = property(lambda s: s.mu_kappa.shape[0])
    cls.K = property(lambda s: s.mu_zeta.shape[0])
    cls.n_params = property(lambda s: len(_SCALARS) + sum(np.size(getattr(s, n)) for n in _array_names(s)))
    cls.sigma_wa = property(lambda s: float(np.exp(s.log_sigma_wa)))
    cls.sigma_wb = property(lambda s: float(np.exp(s.log_sigma_wb)))
    cls.sigma_wc = property(lambda s: float(np.exp(s.log_sigma_wc)))
    cls.sigma_kappa = property(lambda s: np.exp(s.log_sigma_kappa))
    cls.as_dict = lambda s: {n: getattr(s, n) for n in s.__dataclass_fields__}
    cls.copy = lambda s: type(s)(**{n: np.copy(v) if isinstance(v, np.ndarray) else v
                                    for n, v in s.as_dict().items()})
    return cls


_common_props(VariationalStateNQ)
_common_props(VariationalStateMNQ)


def initial_state(variant, P, K, priors: BanditHyperPriors | None = None, init_sigma=0.1, init_mu_wb=None):
    """Means at the prior means, ``mu_zeta = 0``, ``mu_kappa = 0``, all sigmas ``init_sigma``.

    ``init_mu_wb`` overrides the starting ``mu_wb``.
    """
    priors = priors or BanditHyperPriors()
    ls = np.log(init_sigma)
    mu_wb = priors.mu0_wb if init_mu_wb is None else init_mu_wb
    common = dict(mu_wa=priors.mu0_wa, log_sigma_wa=ls, mu_wb=mu_wb, log_sigma_wb=ls,
                  mu_wc=priors.mu0_wc, log_sigma_wc=ls, mu_kappa=np.zeros(P), log_sigma_kappa=np.full(P, ls),
                  mu_zeta=np.zeros((K, K)))
    if variant == "NQ":
        return VariationalStateNQ(**common, log_sigma_zeta=np.full((K, K), ls))
    if variant == "MNQ":
        # split the spread evenly so each zeta entry starts with sd init_sigma
        return VariationalStateMNQ(**common, log_sigma_zeta_row=np.full(K, ls / 2),
                                   log_sigma_zeta_col=np.full(K, ls / 2))
    raise ValueError(f"variant must be one of {VARIANTS}")


def prior_state(variant, P, K, priors: BanditHyperPriors | None = None):
    """Variational state whose moments equal the prior (so the KL is zero)."""
    p = priors or BanditHyperPriors()
    common = dict(mu_wa=p.mu0_wa, log_sigma_wa=np.log(p.sigma0_wa), mu_wb=p.mu0_wb,
                  log_sigma_wb=np.log(p.sigma0_wb), mu_wc=p.mu0_wc, log_sigma_wc=np.log(p.sigma0_wc),
                  mu_kappa=np.zeros(P), log_sigma_kappa=np.full(P, np.log(p.sigma_kappa0)),
                  mu_zeta=np.zeros((K, K)))
    if variant == "NQ":
        return VariationalStateNQ(**common, log_sigma_zeta=np.zeros((K, K)))
    return VariationalStateMNQ(**common, log_sigma_zeta_row=np.zeros(K), log_sigma_zeta_col=np.zeros(K))


# ------------------------------------------------------------------ geometry and sampling


def precompute_geometry(psi):
    """Lower Cholesky factor ``L`` of ``psi^T psi / P`` (jitter retried once)."""
    psi = np.asarray(psi, dtype=np.float64)
    L, _ = cholesky_with_jitter(psi.T @ psi / psi.shape[0])
    return L


def sample_beta(psi, L, wa, wb, zeta):
    """``beta = s+(wa) psi + s+(wb) psi @ zeta @ L.T``."""
    return softplus(wa) * psi + softplus(wb) * (psi @ zeta @ L.T)


def beta_covariance(psi, L):
    """Covariance of ``vec(psi @ zeta @ L.T)`` (column-major) for ``zeta ~ MN(0, I, I)``.

    Equals ``(L L^T) kron (psi psi^T)``.
    """
    return np.kron(L @ L.T, psi @ psi.T)


@dataclass
class BanditDataset:
    omega_hat: np.ndarray
    actions: np.ndarray
    clicks: np.ndarray

    def __post_init__(self):
        self.omega_hat = np.atleast_2d(np.asarray(self.omega_hat, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.clicks = np.asarray(self.clicks, dtype=np.float64)
        if not (len(self.omega_hat) == len(self.actions) == len(self.clicks)):
            raise ValueError("omega_hat, actions and clicks must have the same length")
        if np.any((self.clicks != 0) & (self.clicks != 1)):
            raise ValueError("clicks must be 0 or 1")

    def __len__(self):
        return len(self.actions)


def _features(psi, L, omega_hat, actions):
    """Per-record ``x = psi_a @ omega``, ``psi_a`` rows and ``y = L.T @ omega``."""
    X = psi[actions]
    y = omega_hat @ L
    x = np.einsum("bk,bk->b", X, omega_hat)
    return x, X, y


def _lambda_terms(state, x, X, y, actions, eps):
    """Local-reparameterised logits and the intermediates needed for gradients.

    ``eps`` has columns ``(eps_wa, eps_wb, eps_lrt, eps_kappa)``.
    """
    e_a, e_b, e_l, e_k = eps.T
    sa_arg = state.mu_wa + e_a * state.sigma_wa
    sb_arg = state.mu_wb + e_b * state.sigma_wb
    sa, sb = softplus(sa_arg), softplus(sb_arg)
    m = np.einsum("bi,ij,bj->b", X, state.mu_zeta, y)
    if state.variant == "NQ":
        s2 = np.einsum("bi,ij,bj->b", X * X, state.zeta_var(), y * y)
        A = B = None
    else:
        A = (X * X) @ np.exp(2.0 * state.log_sigma_zeta_row)
        B = (y * y) @ np.exp(2.0 * state.log_sigma_zeta_col)
        s2 = A * B
    s = np.sqrt(s2)
    sk2 = state.sigma_kappa[actions] ** 2
    kap_sd = np.sqrt(sk2 + state.sigma_wc**2)
    lam = sa * x + sb * (m + s * e_l) + state.mu_kappa[actions] + state.mu_wc + e_k * kap_sd
    return lam, dict(sa_arg=sa_arg, sb_arg=sb_arg, sa=sa, sb=sb, m=m, s=s, A=A, B=B, sk2=sk2, kap_sd=kap_sd)


def lambda_hat_nq(state: VariationalStateNQ, psi_a, omega_hat, L, eps, action=0):
    """One noisy logit for a single record under the NQ posterior.

    ``action`` selects the ``kappa`` entry; ``eps`` is ``(eps_wa, eps_wb, eps_lrt, eps_kappa)``.
    """
    return _single(state, psi_a, omega_hat, L, eps, action, "NQ")


def lambda_hat_mnq(state: VariationalStateMNQ, psi_a, omega_hat, L, eps, action=0):
    """One noisy logit for a single record under the MNQ posterior.

    The perturbation scale is ``sqrt((sum r^2 psi_a^2) * (sum c^2 (L^T omega)^2))``.
    """
    return _single(state, psi_a, omega_hat, L, eps, action, "MNQ")


def _single(state, psi_a, omega_hat, L, eps, action, variant):
    if state.variant != variant:
        raise TypeError(f"expected a {variant} state")
    psi_a = np.asarray(psi_a, dtype=np.float64)[None, :]
    omega_hat = np.asarray(omega_hat, dtype=np.float64)[None, :]
    x = np.einsum("bk,bk->b", psi_a, omega_hat)
    lam, _ = _lambda_terms(state, x, psi_a, omega_hat @ L, np.array([action]),
                           np.asarray(eps, dtype=np.float64)[None, :])
    return float(lam[0])


def lambda_hat(state, psi, L, omega_hat, actions, eps):
    """Vectorised noisy logits for a batch of records."""
    x, X, y = _features(psi, L, omega_hat, actions)
    return _lambda_terms(state, x, X, y, actions, eps)[0]


def sample_lambda_full(state, psi, L, omega_hat, action, n, rng=None):
    """Draw ``beta_a @ omega_hat + kappa_a`` by sampling every parameter from ``Q``.

    Serves as the reference distribution for the local reparameterisation.
    """
    gen = as_generator(rng)
    K = state.K
    wa = state.mu_wa + state.sigma_wa * gen.standard_normal(n)
    wb = state.mu_wb + state.sigma_wb * gen.standard_normal(n)
    wc = state.mu_wc + state.sigma_wc * gen.standard_normal(n)
    kap = state.mu_kappa[action] + state.sigma_kappa[action] * gen.standard_normal(n)
    # MN(mu, diag(r^2), diag(c^2)) has independent entries with variance r_i^2 c_j^2
    sd = np.sqrt(state.zeta_var())
    psi_a = psi[action]
    y = L.T @ omega_hat
    out = np.empty(n)
    chunk = 100_000
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        m = sl.stop - sl.start
        zeta = state.mu_zeta + sd * gen.standard_normal((m, K, K))
        out[sl] = np.einsum("i,nij,j->n", psi_a, zeta, y)
    return softplus(wa) * (psi_a @ omega_hat) + softplus(wb) * out + kap + wc


# ------------------------------------------------------------------ objective


def kl_divergence(state, priors: BanditHyperPriors | None = None, return_grad=False):
    """``KL(Q || prior)`` over ``w_a, w_b, w_c, kappa'`` and ``zeta``; gradients wrt stored parameters."""
    p = priors or BanditHyperPriors()
    total = 0.0
    grads = {}
    for w, mu0, s0 in (("wa", p.mu0_wa, p.sigma0_wa), ("wb", p.mu0_wb, p.sigma0_wb), ("wc", p.mu0_wc, p.sigma0_wc)):
        mu, sig = getattr(state, f"mu_{w}"), np.exp(getattr(state, f"log_sigma_{w}"))
        total += float(kl_normal(mu, sig, mu0, s0))
        grads[f"mu_{w}"] = (mu - mu0) / s0**2
        grads[f"log_sigma_{w}"] = sig**2 / s0**2 - 1.0
    sk = state.sigma_kappa
    s0 = p.sigma_kappa0
    total += float(np.sum(kl_normal(state.mu_kappa, sk, 0.0, s0)))
    grads["mu_kappa"] = state.mu_kappa / s0**2
    grads["log_sigma_kappa"] = sk**2 / s0**2 - 1.0
    var = state.zeta_var()
    mu = state.mu_zeta
    total += float(0.5 * np.sum(var + mu**2 - 1.0 - np.log(var)))
    grads["mu_zeta"] = mu.copy()
    g_logvar = 0.5 * (var - 1.0)  # d/d log var_ij
    if state.variant == "NQ":
        grads["log_sigma_zeta"] = 2.0 * g_logvar
    else:
        grads["log_sigma_zeta_row"] = 2.0 * g_logvar.sum(axis=1)
        grads["log_sigma_zeta_col"] = 2.0 * g_logvar.sum(axis=0)
    return (total, grads) if return_grad else total


def noisy_objective(state, psi, L, omega_hat, actions, clicks, n_total, priors=None, eps=None, rng=None):
    """Mean per-record noisy bound ``mean(loglik(lambda_hat)) - KL / n_total`` and its gradients.

    ``eps`` (shape ``(B, 4)``) may be passed to freeze the noise; otherwise it
    is drawn from ``rng``.
    """
    omega_hat = np.atleast_2d(np.asarray(omega_hat, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64)
    clicks = np.asarray(clicks, dtype=np.float64)
    B = actions.size
    if B == 0:
        raise EmptyDataset("empty batch")
    if eps is None:
        eps = as_generator(rng).standard_normal((B, 4))
    x, X, y = _features(psi, L, omega_hat, actions)
    lam, t = _lambda_terms(state, x, X, y, actions, eps)
    ll = clicks * log_sigmoid(lam) + (1.0 - clicks) * log_sigmoid(-lam)
    kl, gkl = kl_divergence(state, priors, return_grad=True)
    value = float(ll.mean() - kl / n_total)

    g = (clicks - sigmoid(lam)) / B  # d mean(ll) / d lambda
    e_a, e_b, e_l, e_k = eps.T
    da = sigmoid(t["sa_arg"]) * x * g
    zeta_part = t["m"] + t["s"] * e_l
    db = sigmoid(t["sb_arg"]) * zeta_part * g
    grads = {
        "mu_wa": float(da.sum()),
        "log_sigma_wa": float(np.sum(da * e_a) * state.sigma_wa),
        "mu_wb": float(db.sum()),
        "log_sigma_wb": float(np.sum(db * e_b) * state.sigma_wb),
        "mu_wc": float(g.sum()),
    }
    kap_g = g * e_k / t["kap_sd"]
    grads["log_sigma_wc"] = float(np.sum(kap_g) * state.sigma_wc**2)
    P = state.P
    grads["mu_kappa"] = np.bincount(actions, weights=g, minlength=P)
    grads["log_sigma_kappa"] = np.bincount(actions, weights=kap_g * t["sk2"], minlength=P)
    gb = g * t["sb"]
    grads["mu_zeta"] = (X * gb[:, None]).T @ y
    safe_s = np.where(t["s"] > 0, t["s"], 1.0)
    coef = np.where(t["s"] > 0, gb * e_l / safe_s, 0.0)
    if state.variant == "NQ":
        grads["log_sigma_zeta"] = ((X * X) * coef[:, None]).T @ (y * y) * state.zeta_var()
    else:
        r2 = np.exp(2.0 * state.log_sigma_zeta_row)
        c2 = np.exp(2.0 * state.log_sigma_zeta_col)
        grads["log_sigma_zeta_row"] = ((X * X) * (coef * t["B"])[:, None]).sum(axis=0) * r2
        grads["log_sigma_zeta_col"] = ((y * y) * (coef * t["A"])[:, None]).sum(axis=0) * c2
    for name, gk in gkl.items():
        grads[name] = grads[name] - gk / n_total
    return value, grads


# ------------------------------------------------------------------ training


@dataclass
class BanditFitConfig:
    variant: str = "NQ"
    learning_rate: float = 1e-3
    epochs: int = 800
    batch_size: int = 1024
    seed: int = 0
    init_sigma: float = 0.1
    init_mu_wb: float | None = -1.0

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size must be positive and epochs >= 0")
        return self


def fit_bandit(dataset: BanditDataset, psi, priors: BanditHyperPriors | None = None,
               cfg: BanditFitConfig | None = None, L=None):
    """Maximise the noisy bound with RMSProp; returns ``(state, trace)``.

    ``trace`` holds the mean noisy objective per epoch.
    """
    cfg = (cfg or BanditFitConfig()).validate()
    psi = np.asarray(psi, dtype=np.float64)
    N = len(dataset)
    if N == 0:
        raise EmptyDataset("bandit dataset is empty")
    P, K = psi.shape
    if dataset.actions.max() >= P or dataset.actions.min() < 0:
        raise ItemIdOutOfRange("action id outside the catalogue")
    if dataset.omega_hat.shape[1] != K:
        raise ValueError("omega_hat dimension does not match psi")
    L = precompute_geometry(psi) if L is None else L
    gen = as_generator(cfg.seed)
    state = initial_state(cfg.variant, P, K, priors, cfg.init_sigma, cfg.init_mu_wb)
    params = {n: np.atleast_1d(np.asarray(v, dtype=np.float64)).copy() for n, v in state.as_dict().items()}
    opt = RMSProp(cfg.learning_rate, maximize=True)
    trace = []
    cls = type(state)
    for _ in range(cfg.epochs):
        order = gen.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cur = cls(**{n: (v[0] if n in _SCALARS else v) for n, v in params.items()})
            val, grads = noisy_objective(cur, psi, L, dataset.omega_hat[idx], dataset.actions[idx],
                                         dataset.clicks[idx], N, priors, rng=gen)
            if not np.isfinite(val):
                raise TrainingDiverged("non-finite bandit objective")
            total += val * idx.size
            opt.step(params, {n: np.atleast_1d(np.asarray(v, dtype=np.float64)) for n, v in grads.items()})
        trace.append(total / N)
    state = cls(**{n: (v[0] if n in _SCALARS else v) for n, v in params.items()})
    return state, np.array(trace)


# ------------------------------------------------------------------ point estimates


@dataclass
class BetaEstimate:
    beta_hat: np.ndarray
    kappa_hat: np.ndarray


def beta_point_estimate(state, psi, L) -> BetaEstimate:
    """``beta_hat = s+(mu_wa) psi + s+(mu_wb) psi mu_zeta L^T``; ``kappa_hat = mu_kappa + mu_wc``."""
    beta = softplus(state.mu_wa) * psi + softplus(state.mu_wb) * (psi @ state.mu_zeta @ L.T)
    return BetaEstimate(beta, state.mu_kappa + state.mu_wc)


def predict_and_recommend(est: BetaEstimate, omega_hat):
    """Click probabilities of every item and the best item (lowest id on ties).

    ``omega_hat`` may be a single state or a ``(n, K)`` stack.
    """
    ctr = sigmoid(np.asarray(omega_hat) @ est.beta_hat.T + est.kappa_hat)
    return ctr, np.argmax(ctr, axis=-1)


# ------------------------------------------------------------------ serialisation


def state_to_dict(state, priors: BanditHyperPriors | None = None):
    d = {"format_version": FORMAT_VERSION, "variant": state.variant,
         "priors": asdict(priors or BanditHyperPriors())}
    for n, v in state.as_dict().items():
        d[n] = v.tolist() if isinstance(v, np.ndarray) else v
    return d


def state_from_dict(d):
    if d.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"expected format_version {FORMAT_VERSION}, got {d.get('format_version')}")
    cls = VariationalStateNQ if d["variant"] == "NQ" else VariationalStateMNQ
    kwargs = {n: d[n] for n in cls.__dataclass_fields__}
    return cls(**kwargs), BanditHyperPriors(**d["priors"])


# ------------------------------------------------------------------ estimator


class BLOB(BaseEstimator):
    """Bandit click model over fixed organic embeddings.

    Parameters
    ----------
    psi : ndarray of shape (P, K)
        Organic item embeddings (e.g. ``BLO().fit(...).params_.psi``).
    variant : {"NQ", "MNQ"}
    learning_rate, epochs, batch_size : RMSProp schedule.
    priors : BanditHyperPriors or None
    init_sigma : float
        Initial posterior standard deviation of every Gaussian factor.
    init_mu_wb : float or None
        Starting ``mu_wb``; None starts at the prior mean.
    random_state : int

    Examples
    --------
    >>> blob = BLOB(psi, variant="MNQ").fit(omega_hat, clicks, actions=actions)   # doctest: +SKIP
    >>> blob.predict(omega_hat_new)                                               # doctest: +SKIP
    """

    def __init__(self, psi=None, variant="NQ", learning_rate=1e-3, epochs=800, batch_size=1024, priors=None,
                 init_sigma=0.1, init_mu_wb=-1.0, random_state=0):
        self.psi = psi
        self.variant = variant
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.priors = priors
        self.init_sigma = init_sigma
        self.init_mu_wb = init_mu_wb
        self.random_state = random_state

    def fit(self, X, y, actions=None):
        """Fit on user states ``X`` (N, K), clicks ``y`` and logged ``actions``."""
        if actions is None:
            raise ValueError("actions are required")
        if self.psi is None:
            raise ValueError("psi must be provided")
        psi = np.asarray(self.psi, dtype=np.float64)
        data = BanditDataset(X, actions, y)
        cfg = BanditFitConfig(self.variant, self.learning_rate, self.epochs, self.batch_size, self.random_state,
                              self.init_sigma, self.init_mu_wb)
        self.L_ = precompute_geometry(psi)
        self.state_, self.trace_ = fit_bandit(data, psi, self.priors, cfg, L=self.L_)
        self.estimate_ = beta_point_estimate(self.state_, psi, self.L_)
        return self

    @classmethod
    def from_state(cls, state, psi, priors=None):
        est = cls(psi=psi, variant=state.variant, priors=priors)
        est.L_ = precompute_geometry(np.asarray(psi, dtype=np.float64))
        est.state_ = state
        est.trace_ = np.array([])
        est.estimate_ = beta_point_estimate(state, np.asarray(psi, dtype=np.float64), est.L_)
        return est

    def predict_proba(self, X, actions=None):
        """Click probabilities: ``(n, P)`` for all items, or ``(n,)`` for given actions."""
        check_is_fitted(self, "estimate_")
        ctr, _ = predict_and_recommend(self.estimate_, np.atleast_2d(X))
        if actions is None:
            return ctr
        return ctr[np.arange(len(ctr)), np.asarray(actions, dtype=np.int64)]

    def predict(self, X):
        """Recommended item per user state."""
        check_is_fitted(self, "estimate_")
        return predict_and_recommend(self.estimate_, np.atleast_2d(X))[1]

    def to_json(self):
        check_is_fitted(self, "state_")
        return json.dumps(state_to_dict(self.state_, self.priors), sort_keys=True)
