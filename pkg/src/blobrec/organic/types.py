"""Containers for the organic session model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import NonPositiveVariance


@dataclass
class OrganicSession:
    user_id: int
    items: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)

    def __len__(self):
        return int(self.items.size)

    def counts(self, n_items: int) -> np.ndarray:
        return np.bincount(self.items, minlength=n_items).astype(np.float64)


@dataclass
class OrganicParams:
    psi: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.psi.ndim != 2 or self.rho.shape != (self.psi.shape[0],):
            raise ValueError("psi must be P x K and rho length P")

    @property
    def n_items(self) -> int:
        return self.psi.shape[0]

    @property
    def n_components(self) -> int:
        return self.psi.shape[1]

    def copy(self) -> "OrganicParams":
        return OrganicParams(self.psi.copy(), self.rho.copy())


@dataclass
class DiagGaussianPosterior:
    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if np.any(self.var <= 0):
            raise NonPositiveVariance("posterior variances must be positive")

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.var)

    @classmethod
    def prior(cls, k: int) -> "DiagGaussianPosterior":
        return cls(np.zeros(k), np.ones(k))


@dataclass
class FullGaussianPosterior:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()

    @classmethod
    def prior(cls, k: int) -> "FullGaussianPosterior":
        return cls(np.zeros(k), np.eye(k))


@dataclass
class BouchardState:
    """Auxiliary variational parameters of the Bouchard bound."""

    a: float
    xi: np.ndarray = field(default=None)

    def __post_init__(self):
        self.a = float(self.a)
        self.xi = np.asarray(self.xi, dtype=np.float64)

    @classmethod
    def initial(cls, n_items: int) -> "BouchardState":
        return cls(0.0, np.ones(n_items))

    def copy(self) -> "BouchardState":
        return BouchardState(self.a, self.xi.copy())


@dataclass
class LinearEncoder:
    """Affine map from an item-count vector to ``(mu, log var)``."""

    weight_mu: np.ndarray
    bias_mu: np.ndarray
    weight_logvar: np.ndarray
    bias_logvar: np.ndarray

    @property
    def n_params(self) -> int:
        return sum(a.size for a in (self.weight_mu, self.bias_mu, self.weight_logvar, self.bias_logvar))

    def __call__(self, counts: np.ndarray):
        counts = np.asarray(counts, dtype=np.float64)
        mu = counts @ self.weight_mu.T + self.bias_mu
        logvar = counts @ self.weight_logvar.T + self.bias_logvar
        return mu, logvar

    def posterior(self, counts: np.ndarray) -> DiagGaussianPosterior:
        mu, logvar = self(counts)
        return DiagGaussianPosterior(mu, np.exp(logvar))

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(self.weight_mu.copy(), self.bias_mu.copy(),
                             self.weight_logvar.copy(), self.bias_logvar.copy())


def as_counts(session, n_items: int) -> np.ndarray:
    """Item-count vector from a session, a sequence of item ids, or counts already."""
    if isinstance(session, OrganicSession):
        return session.counts(n_items)
    arr = np.asarray(session)
    if arr.dtype.kind == "f" and arr.shape == (n_items,):
        return arr.astype(np.float64)
    arr = arr.astype(np.int64).ravel()
    return np.bincount(arr, minlength=n_items).astype(np.float64)
