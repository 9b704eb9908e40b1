"""Small numerical kernel: link functions, Gaussian KL, Cholesky, RNG streams,
and a central-difference gradient checker.

Everything works on float64 numpy arrays and accepts scalars or arrays
unless stated otherwise.
"""
from __future__ import annotations

import numpy as np

from .exceptions import NonPositiveVariance, NotPositiveDefinite

__all__ = [
    "softplus",
    "sigmoid",
    "log_sigmoid",
    "lambda_jj",
    "lambda_jj_prime",
    "logsumexp",
    "softmax",
    "cholesky",
    "cholesky_with_jitter",
    "kl_diag_gaussians",
    "kl_normal",
    "grad_check",
    "RngStream",
]

_SERIES_CUTOFF = 1e-2


def softplus(x):
    """``log(1 + exp(x))`` without overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """``log sigmoid(x) = -softplus(-x)``."""
    return -softplus(-np.asarray(x, dtype=np.float64))


def lambda_jj(xi):
    """Jaakkola-Jordan function ``(sigmoid(xi) - 1/2) / (2 xi)``.

    Even in ``xi``; near zero the Taylor series ``1/8 - xi^2/96 + ...``
    is used (to sixth order), which gives the limit 1/8 at the origin.
    """
    xi = np.asarray(xi, dtype=np.float64)
    ax = np.abs(xi)
    small = ax < _SERIES_CUTOFF
    safe = np.where(small, 1.0, ax)
    exact = (sigmoid(safe) - 0.5) / (2.0 * safe)
    x2 = xi * xi
    series = 0.125 - x2 / 96.0 + x2 * x2 / 960.0 - 17.0 * x2**3 / 161280.0
    out = np.where(small, series, exact)
    return out if out.ndim else float(out)


def lambda_jj_prime(xi):
    """Derivative of :func:`lambda_jj`."""
    xi = np.asarray(xi, dtype=np.float64)
    small = np.abs(xi) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, xi)
    s = sigmoid(safe)
    exact = s * (1.0 - s) / (2.0 * safe) - (s - 0.5) / (2.0 * safe * safe)
    series = -xi / 48.0 + xi**3 / 240.0 - 17.0 * xi**5 / 26880.0
    out = np.where(small, series, exact)
    return out if out.ndim else float(out)


def logsumexp(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def cholesky(m):
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises
    ------
    NotPositiveDefinite
        If ``m`` is not symmetric positive definite.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    scale = max(np.max(np.abs(m)), 1.0)
    if np.max(np.abs(m - m.T)) > 1e-10 * scale:
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        return np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def cholesky_with_jitter(m):
    """Cholesky with a single documented retry.

    On failure ``1e-8 * trace(m) / dim`` is added to the diagonal once; a
    second failure propagates :class:`NotPositiveDefinite`.
    Returns ``(L, jitter)``.
    """
    m = np.asarray(m, dtype=np.float64)
    try:
        return cholesky(m), 0.0
    except NotPositiveDefinite:
        jitter = 1e-8 * abs(np.trace(m)) / m.shape[0]
        if jitter == 0.0:
            jitter = 1e-8
        return cholesky(m + jitter * np.eye(m.shape[0])), jitter


def kl_diag_gaussians(mu_q, var_q, mu_p, var_p):
    """KL(q || p) between diagonal Gaussians, summed over dimensions."""
    mu_q, var_q, mu_p, var_p = (np.asarray(a, dtype=np.float64) for a in (mu_q, var_q, mu_p, var_p))
    if np.any(var_q <= 0) or np.any(var_p <= 0):
        raise NonPositiveVariance("variances must be strictly positive")
    kl = 0.5 * (var_q / var_p + (mu_p - mu_q) ** 2 / var_p - 1.0 + np.log(var_p / var_q))
    return float(np.sum(kl))


def kl_normal(mu_q, sigma_q, mu_p, sigma_p):
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)), parameterised by std devs."""
    return np.log(sigma_p / sigma_q) + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2) - 0.5


def grad_check(f, g, point):
    """Maximum relative error between a claimed gradient and central differences.

    Parameters
    ----------
    f : callable
        Scalar function of a flat parameter vector.
    g : array_like or callable
        Claimed gradient at ``point``, or a function returning it.
    point : array_like
        Where to check.

    Returns
    -------
    float
        ``max_i |g_i - d_i| / (1e-8 + |g_i| + |d_i|)`` with ``d`` the
        central-difference estimate, step ``1e-5 * (1 + |theta_i|)``.
    """
    theta = np.array(point, dtype=np.float64).ravel()
    claimed = g(theta.copy()) if callable(g) else g
    claimed = np.asarray(claimed, dtype=np.float64).ravel()
    if claimed.shape != theta.shape:
        raise ValueError(f"gradient shape {claimed.shape} does not match point {theta.shape}")
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        h = 1e-5 * (1.0 + abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        numeric[i] = (f(up) - f(dn)) / (up[i] - dn[i])
    err = np.abs(claimed - numeric) / (1e-8 + np.abs(claimed) + np.abs(numeric))
    return float(np.max(err)) if err.size else 0.0


class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Thin wrapper over a PCG64 generator seeded through ``SeedSequence`` so
    that distinct stream ids give independent sequences. Attribute access is
    forwarded to the underlying :class:`numpy.random.Generator`.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._key = (self.stream_id,)
        self._reset()

    def _reset(self):
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def fork(self, child_id: int) -> "RngStream":
        """Child stream, independent of this one and of siblings."""
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child.stream_id = self.stream_id
        child._key = self._key + (int(child_id),)
        child._reset()
        return child

    def __getattr__(self, name):
        if name == "generator":
            raise AttributeError(name)
        return getattr(self.generator, name)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def as_generator(rng) -> np.random.Generator:
    """Accept an int seed, RngStream, Generator or None."""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        return np.random.default_rng()
    return RngStream(int(rng)).generator
