"""Variational EM for the user state under the Bouchard bound.

Batch EM cycles closed-form updates of the posterior covariance, the
posterior mean, ``a`` and ``xi``; each update maximises the bound in its
block, so the bound never decreases. The online variant treats the fixed
point as a sum over items and applies Robbins-Monro averaging to the
natural parameters ``(precision, precision @ mean, a)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import SingularPrecision
from ..mathkernel import as_generator, lambda_jj, softmax
from .types import (
    BouchardState,
    DiagGaussianPosterior,
    FullGaussianPosterior,
    LinearEncoder,
    OrganicParams,
    as_counts,
)

__all__ = [
    "em_cycle",
    "em_batch",
    "OnlineEMState",
    "online_em_step",
    "online_em",
    "infer_posterior",
    "next_item_probs",
]


def _invert_spd(prec):
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        k = prec.shape[-1]
        jitter = 1e-8 * np.trace(prec, axis1=-2, axis2=-1) / k
        try:
            L = np.linalg.cholesky(prec + jitter[..., None, None] * np.eye(k))
        except np.linalg.LinAlgError as exc:
            raise SingularPrecision(str(exc)) from None
    eye = np.broadcast_to(np.eye(prec.shape[-1]), prec.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def _em_step(psi, rho, psi_outer, counts, T, mu, cov, a, xi):
    """One cycle for a batch. Shapes: counts (B,P), mu (B,K), cov (B,K,K), a (B,), xi (B,P)."""
    B, K = mu.shape
    P = psi.shape[0]
    lam = lambda_jj(xi)
    prec = np.eye(K) + (2.0 * T)[:, None, None] * (lam @ psi_outer).reshape(B, K, K)
    if not np.all(np.isfinite(prec)):
        raise SingularPrecision("non-finite precision matrix")
    cov = _invert_spd(prec)
    coef = T[:, None] * (0.5 + 2.0 * (rho - a[:, None]) * lam)
    rhs = counts @ psi - coef @ psi
    mu = np.einsum("bkl,bl->bk", cov, rhs)
    xbar = mu @ psi.T + rho
    a = (P / 2.0 - 1.0 + 2.0 * np.sum(lam * xbar, axis=1)) / (2.0 * np.sum(lam, axis=1))
    s = cov.reshape(B, K * K) @ psi_outer.T
    xi = np.sqrt(np.maximum(s, 0.0) + (xbar - a[:, None]) ** 2)
    return mu, cov, a, xi


def em_cycle(params: OrganicParams, bstate: BouchardState, post: FullGaussianPosterior, session):
    """Apply one cycle of the four closed-form updates (covariance, mean, ``a``, ``xi``).

    Returns ``(post, bstate)`` as new objects; inputs are not modified.
    """
    counts = as_counts(session, params.n_items)[None, :]
    psi = params.psi
    K = psi.shape[1]
    psi_outer = np.einsum("pk,pl->pkl", psi, psi).reshape(psi.shape[0], K * K)
    cov0 = post.cov if isinstance(post, FullGaussianPosterior) else np.diag(post.var)
    mu, cov, a, xi = _em_step(
        psi, params.rho, psi_outer, counts, counts.sum(axis=1), post.mu[None, :], cov0[None],
        np.array([bstate.a]), bstate.xi[None, :],
    )
    return FullGaussianPosterior(mu[0], cov[0]), BouchardState(float(a[0]), xi[0])


def em_batch(params: OrganicParams, counts, n_iter: int = 100, chunk_size: int = 512):
    """Run ``n_iter`` EM cycles from the prior for every row of ``counts``.

    Returns ``(mu, cov, a, xi)`` stacked over sessions.
    """
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    psi, rho = params.psi, params.rho
    P, K = psi.shape
    psi_outer = np.einsum("pk,pl->pkl", psi, psi).reshape(P, K * K)
    out_mu = np.empty((counts.shape[0], K))
    out_cov = np.empty((counts.shape[0], K, K))
    out_a = np.empty(counts.shape[0])
    out_xi = np.empty((counts.shape[0], P))
    for start in range(0, counts.shape[0], chunk_size):
        c = counts[start:start + chunk_size]
        B = c.shape[0]
        T = c.sum(axis=1)
        mu = np.zeros((B, K))
        cov = np.broadcast_to(np.eye(K), (B, K, K)).copy()
        a = np.zeros(B)
        xi = np.ones((B, P))
        for _ in range(n_iter):
            mu, cov, a, xi = _em_step(psi, rho, psi_outer, c, T, mu, cov, a, xi)
        sl = slice(start, start + B)
        out_mu[sl], out_cov[sl], out_a[sl], out_xi[sl] = mu, cov, a, xi
    return out_mu, out_cov, out_a, out_xi


@dataclass
class OnlineEMState:
    """Natural parameters tracked by online EM."""

    precision: np.ndarray
    precision_mean: np.ndarray
    a: float

    @classmethod
    def prior(cls, k: int) -> "OnlineEMState":
        return cls(np.eye(k), np.zeros(k), 0.0)

    @property
    def cov(self) -> np.ndarray:
        return _invert_spd(self.precision)

    @property
    def mean(self) -> np.ndarray:
        return np.linalg.solve(self.precision, self.precision_mean)

    def posterior(self) -> FullGaussianPosterior:
        return FullGaussianPosterior(self.mean, self.cov)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.precision.ravel(), self.precision_mean, [self.a]])


def _online_target(params, counts, state, items, a_step):
    """Fixed-point map evaluated on a subset of items, rescaled to estimate the full sum."""
    psi, rho = params.psi, params.rho
    P, K = psi.shape
    T = counts.sum()
    cov = _invert_spd(state.precision)
    mu = cov @ state.precision_mean
    sub = psi[items]
    scale = P / len(items)
    xbar = sub @ mu + rho[items]
    d = xbar - state.a
    xi = np.sqrt(np.einsum("pk,kl,pl->p", sub, cov, sub) + d**2)
    lam = lambda_jj(xi)
    prec = np.eye(K) + 2.0 * T * scale * (sub.T * lam) @ sub
    pm = psi.T @ counts - T * scale * sub.T @ (0.5 + 2.0 * (rho[items] - state.a) * lam)
    # gradient step on a, in units of the bound divided by T
    grad_a = (P / 2.0 - 1.0) + scale * np.sum(2.0 * lam * d)
    a = state.a + a_step * grad_a
    return prec, pm, a


def online_em_step(state: OnlineEMState, items, params: OrganicParams, session, step: float,
                   a_step: float = 0.5) -> OnlineEMState:
    """Robbins-Monro update ``state <- (1 - step) * state + step * g(items, state)``.

    ``items`` is one item id or an array of ids; ``g`` is the per-item
    fixed-point contribution scaled by ``P / len(items)`` so it is unbiased
    for the full sum. With all items and ``step = 1`` this reproduces the
    batch natural-parameter update at ``xi = h(state)``. ``a`` follows a
    gradient step of size ``a_step`` instead of its coordinate update.
    """
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    counts = as_counts(session, params.n_items)
    prec, pm, a = _online_target(params, counts, state, items, a_step)
    keep = 1.0 - step
    return OnlineEMState(
        keep * state.precision + step * prec,
        keep * state.precision_mean + step * pm,
        keep * state.a + step * a,
    )


def online_em(params: OrganicParams, session, n_steps: int = 20000, batch_size: int = 1,
              decay: float = 0.7, rng=None, sampling: str = "shuffle", a_step: float = 0.5,
              state: OnlineEMState | None = None) -> OnlineEMState:
    """Run online EM with ``step_s = s ** -decay`` (so the first step is 1).

    ``sampling="shuffle"`` walks random permutations of the catalogue in
    blocks of ``batch_size``; ``"iid"`` draws items uniformly with replacement.
    """
    gen = as_generator(rng)
    counts = as_counts(session, params.n_items)
    P, K = params.psi.shape
    state = OnlineEMState.prior(K) if state is None else state
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for s in range(1, n_steps + 1):
        if sampling == "iid":
            items = gen.integers(0, P, size=batch_size)
        else:
            if pos + batch_size > order.size:
                order = gen.permutation(P)
                pos = 0
            items = order[pos:pos + batch_size]
            pos += batch_size
        state = online_em_step(state, items, params, counts, s ** (-decay), a_step=a_step)
    return state


def infer_posterior(params: OrganicParams, session, method: str = "em", iters: int = 100,
                    encoder: LinearEncoder | None = None):
    """Posterior over the user state for one session.

    ``method="em"`` runs ``iters`` EM cycles from the prior and returns a
    :class:`FullGaussianPosterior`; ``method="encoder"`` applies the
    amortised encoder and returns a :class:`DiagGaussianPosterior`.
    """
    counts = as_counts(session, params.n_items)
    if method == "encoder":
        if encoder is None:
            raise ValueError("encoder inference needs a fitted encoder")
        return encoder.posterior(counts)
    if method != "em":
        raise ValueError(f"unknown inference method {method!r}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mu, cov, _, _ = em_batch(params, counts[None, :], n_iter=iters)
    return FullGaussianPosterior(mu[0], cov[0])


def next_item_probs(params: OrganicParams, post, mode: str = "mean", n_samples: int = 100, rng=None):
    """Predictive distribution of the next item.

    ``mode="mean"`` plugs in the posterior mean; ``mode="mc"`` averages the
    softmax over ``n_samples`` posterior draws. ``post`` may also be a pair
    of stacked arrays ``(mu (B,K), cov)`` for batch prediction.
    """
    if isinstance(post, (DiagGaussianPosterior, FullGaussianPosterior)):
        mu = post.mu
        cov = post.cov if isinstance(post, FullGaussianPosterior) else post.var
    else:
        mu, cov = post
    mu = np.asarray(mu, dtype=np.float64)
    if mode == "mean":
        return softmax(mu @ params.psi.T + params.rho, axis=-1)
    if mode != "mc":
        raise ValueError(f"unknown prediction mode {mode!r}")
    gen = as_generator(rng)
    cov = np.asarray(cov, dtype=np.float64)
    single = mu.ndim == 1
    mu2 = np.atleast_2d(mu)
    K = mu2.shape[1]
    eps = gen.standard_normal((mu2.shape[0], n_samples, K))
    if cov.ndim == mu.ndim:  # diagonal variances
        draws = mu2[:, None, :] + eps * np.sqrt(np.atleast_2d(cov))[:, None, :]
    else:
        L = np.linalg.cholesky(cov.reshape(-1, K, K))
        draws = mu2[:, None, :] + np.einsum("bkl,bsl->bsk", L, eps)
    probs = softmax(draws @ params.psi.T + params.rho, axis=-1).mean(axis=1)
    return probs[0] if single else probs
