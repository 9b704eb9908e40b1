"""Lower bounds on the per-session evidence of the organic model, with gradients.

All bounds share the structure

    data term  -  T * (bound on E_q log sum_p exp(psi_p w + rho_p))  -  KL(q || N(0, I))

and differ only in how the log-partition term is handled: a one-sample
reparameterised estimate, the Bouchard quadratic bound (optionally with
sampled negatives) or the log-concavity bound with a free scale ``phi``.

The ``*_batch`` functions work on ``B`` sessions at once (counts ``B x P``,
diagonal posteriors ``B x K``) and return per-session values plus gradients
of the *summed* objective. The single-session functions wrap them.
"""
from __future__ import annotations

import numpy as np

from ..exceptions import NonPositivePhi, NonPositiveVariance
from ..mathkernel import as_generator, lambda_jj, lambda_jj_prime, logsumexp, sigmoid, softmax, softplus
from .types import (
    BouchardState,
    DiagGaussianPosterior,
    FullGaussianPosterior,
    OrganicParams,
    as_counts,
)

__all__ = [
    "kl_standard_normal",
    "elbo_reparam",
    "elbo_reparam_batch",
    "elbo_bouchard",
    "elbo_bouchard_batch",
    "elbo_bouchard_negsampled",
    "optimal_xi",
    "optimal_a",
    "elbo_logconcave",
    "elbo_logconcave_batch",
    "optimal_phi",
    "log_likelihood",
]


def kl_standard_normal(mu, cov):
    """KL(N(mu, cov) || N(0, I)); ``cov`` is a variance vector or a full matrix."""
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    k = mu.shape[-1]
    if cov.ndim == mu.ndim:
        if np.any(cov <= 0):
            raise NonPositiveVariance("variances must be positive")
        return 0.5 * np.sum(cov + mu**2 - 1.0 - np.log(cov), axis=-1)
    sign, logdet = np.linalg.slogdet(cov)
    if np.any(sign <= 0):
        raise NonPositiveVariance("covariance is not positive definite")
    tr = np.trace(cov, axis1=-2, axis2=-1)
    return 0.5 * (tr + np.sum(mu**2, axis=-1) - k - logdet)


def _data_term(psi, rho, counts, mu):
    # sum_t psi_{v_t} mu + rho_{v_t}
    return np.einsum("bp,bp->b", counts, mu @ psi.T + rho)


def log_likelihood(params: OrganicParams, omega, counts):
    """Exact ``log p(v_1..v_T | omega)`` (without the prior on ``omega``)."""
    counts = as_counts(counts, params.n_items)
    z = params.psi @ np.asarray(omega, dtype=np.float64) + params.rho
    return float(counts @ z - counts.sum() * logsumexp(z))


# ---------------------------------------------------------------------------
# reparameterisation
# ---------------------------------------------------------------------------


def elbo_reparam_batch(psi, rho, counts, mu, var, eps, grad=True):
    """One-sample reparameterised ELBO for a batch of sessions.

    Returns ``(values, grads)`` where ``grads`` has keys ``mu``, ``var``
    (per session) and ``psi``, ``rho`` (summed over the batch).
    """
    T = counts.sum(axis=1)
    sd = np.sqrt(var)
    omega = mu + sd * eps
    z = omega @ psi.T + rho
    lse = logsumexp(z, axis=1)
    kl = 0.5 * np.sum(var + mu**2 - 1.0 - np.log(var), axis=1)
    values = _data_term(psi, rho, counts, mu) - T * lse - kl
    if not grad:
        return values, None
    q = softmax(z, axis=1)
    tq = T[:, None] * q
    tq_psi = tq @ psi
    cp = counts @ psi
    grads = {
        "mu": cp - tq_psi - mu,
        "var": -tq_psi * eps / (2.0 * sd) - 0.5 * (1.0 - 1.0 / var),
        "psi": counts.T @ mu - tq.T @ omega,
        "rho": counts.sum(axis=0) - tq.sum(axis=0),
    }
    return values, grads


def elbo_reparam(params: OrganicParams, post: DiagGaussianPosterior, counts, eps, return_grad=False):
    """Noisy ELBO at a single standard-normal draw ``eps``.

    ``counts`` may be an :class:`OrganicSession`, a list of item ids or a
    float count vector of length P.
    """
    c = as_counts(counts, params.n_items)[None, :]
    values, grads = elbo_reparam_batch(
        params.psi, params.rho, c, post.mu[None, :], post.var[None, :],
        np.asarray(eps, dtype=np.float64)[None, :], grad=return_grad,
    )
    if not return_grad:
        return float(values[0])
    return float(values[0]), {"mu": grads["mu"][0], "var": grads["var"][0],
                              "psi": grads["psi"], "rho": grads["rho"]}


# ---------------------------------------------------------------------------
# Bouchard bound
# ---------------------------------------------------------------------------


def _bouchard_terms(xbar, s, a, xi):
    d = xbar - a
    lam = lambda_jj(xi)
    terms = 0.5 * (d - xi) + softplus(xi) + lam * (d * d + s - xi * xi)
    return d, lam, terms


def elbo_bouchard_batch(psi, rho, counts, mu, var, a, xi, weights=None, grad=True):
    """Bouchard bound for a batch with diagonal posteriors.

    ``a`` has shape ``(B,)`` and ``xi`` shape ``(B, P)``. ``weights`` (``P``
    or ``B x P``) multiplies each item's term of the log-partition bound;
    ``None`` means all ones. Sampled negatives use ``P/S`` on the drawn
    items and zero elsewhere.
    """
    P = psi.shape[0]
    T = counts.sum(axis=1)
    w = np.ones(P) if weights is None else np.asarray(weights, dtype=np.float64)
    psi2 = psi * psi
    xbar = mu @ psi.T + rho
    s = var @ psi2.T
    d, lam, terms = _bouchard_terms(xbar, s, a[:, None], xi)
    bound = a + np.sum(w * terms, axis=1)
    kl = 0.5 * np.sum(var + mu**2 - 1.0 - np.log(var), axis=1)
    values = _data_term(psi, rho, counts, mu) - T * bound - kl
    if not grad:
        return values, None
    wt = w * T[:, None]
    gx = wt * (0.5 + 2.0 * lam * d)
    wl = wt * lam
    grads = {
        "mu": counts @ psi - gx @ psi - mu,
        "var": -(wl @ psi2) - 0.5 * (1.0 - 1.0 / var),
        "psi": counts.T @ mu - gx.T @ mu - 2.0 * psi * (wl.T @ var),
        "rho": counts.sum(axis=0) - gx.sum(axis=0),
        "a": -T * (1.0 - np.sum(w * (0.5 + 2.0 * lam * d), axis=1)),
        "xi": -wt * (sigmoid(xi) - 0.5 - 2.0 * lam * xi + lambda_jj_prime(xi) * (d * d + s - xi * xi)),
    }
    return values, grads


def _bouchard_full(params, post, bstate, counts, weights, return_grad):
    psi, rho = params.psi, params.rho
    mu, cov = post.mu, post.cov
    P = psi.shape[0]
    T = counts.sum()
    w = np.ones(P) if weights is None else weights
    xbar = psi @ mu + rho
    s = np.einsum("pk,kl,pl->p", psi, cov, psi)
    d, lam, terms = _bouchard_terms(xbar, s, bstate.a, bstate.xi)
    bound = bstate.a + np.sum(w * terms)
    value = float(counts @ xbar - T * bound - kl_standard_normal(mu, cov))
    if not return_grad:
        return value
    wt = w * T
    gx = wt * (0.5 + 2.0 * lam * d)
    wl = wt * lam
    inv = np.linalg.inv(cov)
    grads = {
        "mu": psi.T @ counts - psi.T @ gx - mu,
        "cov": -(psi.T * wl) @ psi - 0.5 * (np.eye(len(mu)) - inv.T),
        "psi": np.outer(counts, mu) - np.outer(gx, mu) - wl[:, None] * (psi @ (cov + cov.T)),
        "rho": counts - gx,
        "a": float(-T * (1.0 - np.sum(w * (0.5 + 2.0 * lam * d)))),
        "xi": -wt * (sigmoid(bstate.xi) - 0.5 - 2.0 * lam * bstate.xi
                     + lambda_jj_prime(bstate.xi) * (d * d + s - bstate.xi**2)),
    }
    return value, grads


def elbo_bouchard(params: OrganicParams, post, bstate: BouchardState, counts, return_grad=False, weights=None):
    """Analytic Bouchard lower bound for one session.

    ``post`` may be diagonal or full. With ``return_grad`` the gradient
    dict holds ``mu``, ``var`` (diagonal) or ``cov`` (full), ``psi``,
    ``rho``, ``a`` and ``xi``.
    """
    counts = as_counts(counts, params.n_items)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    if isinstance(post, FullGaussianPosterior):
        return _bouchard_full(params, post, bstate, counts, weights, return_grad)
    values, grads = elbo_bouchard_batch(
        params.psi, params.rho, counts[None, :], post.mu[None, :], post.var[None, :],
        np.array([bstate.a]), bstate.xi[None, :], weights=weights, grad=return_grad,
    )
    if not return_grad:
        return float(values[0])
    out = {k: (v[0] if k in ("mu", "var", "xi") else v) for k, v in grads.items()}
    out["a"] = float(grads["a"][0])
    return float(values[0]), out


def elbo_bouchard_negsampled(params: OrganicParams, post, bstate: BouchardState, counts,
                             neg_items=None, n_neg=None, rng=None):
    """Bouchard bound with the item sum replaced by ``P/S`` times a sampled sum.

    Pass ``neg_items`` explicitly, or ``n_neg`` with ``rng`` to draw ``S``
    items uniformly without replacement. Unbiased for :func:`elbo_bouchard`.
    """
    P = params.n_items
    if neg_items is None:
        if n_neg is None:
            raise ValueError("provide neg_items or n_neg")
        neg_items = as_generator(rng).choice(P, size=int(n_neg), replace=False)
    neg_items = np.asarray(neg_items, dtype=np.int64)
    S = neg_items.size
    weights = np.zeros(P)
    weights[neg_items] = P / S
    return elbo_bouchard(params, post, bstate, counts, weights=weights)


def optimal_xi(params: OrganicParams, post, a: float) -> np.ndarray:
    """Stationary point of the bound in ``xi``: ``sqrt(psi_p cov psi_p' + (x_p - a)^2)``."""
    xbar = params.psi @ post.mu + params.rho
    if isinstance(post, FullGaussianPosterior):
        s = np.einsum("pk,kl,pl->p", params.psi, post.cov, params.psi)
    else:
        s = (params.psi**2) @ post.var
    return np.sqrt(s + (xbar - a) ** 2)


def optimal_a(params: OrganicParams, post, xi) -> float:
    """Maximiser of the bound in ``a`` for fixed ``xi``."""
    lam = lambda_jj(xi)
    xbar = params.psi @ post.mu + params.rho
    P = params.n_items
    return float((P / 2.0 - 1.0 + 2.0 * np.sum(lam * xbar)) / (2.0 * np.sum(lam)))


# ---------------------------------------------------------------------------
# log-concavity bound
# ---------------------------------------------------------------------------


def elbo_logconcave_batch(psi, rho, counts, mu, var, phi, grad=True):
    """Log-concavity bound for a batch; ``phi`` has shape ``(B,)``."""
    if np.any(phi <= 0):
        raise NonPositivePhi("phi must be positive")
    T = counts.sum(axis=1)
    psi2 = psi * psi
    expo = np.exp(mu @ psi.T + rho + 0.5 * (var @ psi2.T))
    Z = expo.sum(axis=1)
    kl = 0.5 * np.sum(var + mu**2 - 1.0 - np.log(var), axis=1)
    values = _data_term(psi, rho, counts, mu) - T * phi * Z + T * np.log(phi) + T - kl
    if not grad:
        return values, None
    we = (T * phi)[:, None] * expo
    grads = {
        "mu": counts @ psi - we @ psi - mu,
        "var": -0.5 * (we @ psi2) - 0.5 * (1.0 - 1.0 / var),
        "psi": counts.T @ mu - we.T @ mu - psi * (we.T @ var),
        "rho": counts.sum(axis=0) - we.sum(axis=0),
        "phi": -T * Z + T / phi,
    }
    return values, grads


def elbo_logconcave(params: OrganicParams, post: DiagGaussianPosterior, phi: float, counts, return_grad=False):
    """Log-concavity bound for one session (diagonal posterior)."""
    if phi <= 0:
        raise NonPositivePhi("phi must be positive")
    c = as_counts(counts, params.n_items)[None, :]
    values, grads = elbo_logconcave_batch(
        params.psi, params.rho, c, post.mu[None, :], post.var[None, :],
        np.array([float(phi)]), grad=return_grad,
    )
    if not return_grad:
        return float(values[0])
    return float(values[0]), {"mu": grads["mu"][0], "var": grads["var"][0], "psi": grads["psi"],
                              "rho": grads["rho"], "phi": float(grads["phi"][0])}


def optimal_phi(params: OrganicParams, post: DiagGaussianPosterior) -> float:
    """Closed-form maximiser ``1 / sum_p exp(psi_p mu + rho_p + psi_p S psi_p' / 2)``."""
    z = params.psi @ post.mu + params.rho + 0.5 * (params.psi**2) @ post.var
    return float(np.exp(-logsumexp(z)))
