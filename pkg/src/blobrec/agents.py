"""Adapters that turn fitted models into A/B-test agents.

An agent implements ``act(histories, gen) -> actions`` where ``histories`` is
a ``(U, P)`` item-count matrix; deterministic agents ignore ``gen``.
"""
from __future__ import annotations

import numpy as np

from .baselines import (
    fit_contextual_bandit,
    fit_item_knn,
    fit_logreg_value,
    fit_popularity,
)
from .bandit import BLOB
from .organic.em import em_batch
from .simulator import session_pop_probs


class RandomAgent:
    name = "Random"
    kind = "baseline"

    def __init__(self, P):
        self.P = P

    def act(self, histories, gen):
        return gen.integers(0, self.P, size=len(histories))

    def action_probs(self, histories):
        return np.full((len(histories), self.P), 1.0 / self.P)


class SessionPopAgent:
    """The epsilon-greedy session-popularity logging policy."""

    name = "SessionPop"
    kind = "logging"

    def __init__(self, P, epsilon):
        self.P, self.epsilon = P, epsilon

    def action_probs(self, histories):
        return session_pop_probs(histories, self.epsilon, self.P)

    def act(self, histories, gen):
        probs = self.action_probs(histories)
        u = gen.random(len(probs))[:, None]
        return np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), self.P - 1)


class ScoreAgent:
    """Greedy agent over ``model.scores(histories)``."""

    def __init__(self, model, name, kind):
        self.model, self.name, self.kind = model, name, kind

    def act(self, histories, gen):
        return np.argmax(self.model.scores(histories), axis=1)

    def action_probs(self, histories):
        s = self.model.scores(histories)
        out = np.zeros_like(s)
        out[np.arange(len(s)), np.argmax(s, axis=1)] = 1.0
        return out


class ContextualBanditAgent(ScoreAgent):
    def action_probs(self, histories):
        return self.model.action_probs(histories)


class BLOAgent:
    """Recommend the most likely next organic item under the posterior-mean state."""

    kind = "organic"

    def __init__(self, params, em_iters=100, name="BLO"):
        self.params, self.em_iters, self.name = params, em_iters, name

    def omega_hat(self, histories):
        return em_batch(self.params, histories, n_iter=self.em_iters)[0]

    def act(self, histories, gen):
        mu = self.omega_hat(histories)
        return np.argmax(mu @ self.params.psi.T + self.params.rho, axis=1)


class BLOBAgent(BLOAgent):
    """Recommend the item with the highest estimated click probability."""

    kind = "organic+bandit"

    def __init__(self, params, blob: BLOB, em_iters=100, name="BLOB"):
        super().__init__(params, em_iters, name)
        self.blob = blob

    def act(self, histories, gen):
        return self.blob.predict(self.omega_hat(histories))


class OracleAgent:
    """Uses the true user state; only meaningful inside the simulator."""

    name = "Oracle"
    kind = "oracle"
    uses_true_state = True

    def __init__(self, gt):
        self.gt = gt

    def act_with_state(self, omegas):
        return np.argmax(self.gt.click_probs(omegas), axis=1)


# A/B histories are count vectors, so ItemKNN agents use the session-average scorer.
AGENT_KINDS = ("random", "popularity", "itemknn", "logreg", "cb", "blo", "blob_nq", "blob_mnq", "session_pop",
               "oracle")


def build_agent(kind, *, P, organic_sessions=None, bandit=None, blo_params=None, omega_hat=None,
                hyper=None, epsilon=0.3, ground_truth=None):
    """Fit and wrap one agent.

    ``bandit`` is a dict with ``histories, actions, clicks, propensities``;
    ``omega_hat`` holds the BLO posterior means of the bandit records.
    """
    hyper = dict(hyper or {})
    if kind == "random":
        return RandomAgent(P)
    if kind == "oracle":
        return OracleAgent(ground_truth)
    if kind == "session_pop":
        return SessionPopAgent(P, epsilon)
    if kind == "popularity":
        return ScoreAgent(fit_popularity(organic_sessions, P), "Popularity", "organic")
    if kind == "itemknn":
        return ScoreAgent(fit_item_knn(organic_sessions, "session_average", P), "Session ItemKNN", "organic")
    if kind == "logreg":
        model = fit_logreg_value(bandit["histories"], bandit["actions"], bandit["clicks"], **hyper)
        return ScoreAgent(model, "Log Reg", "bandit")
    if kind == "cb":
        model = fit_contextual_bandit(bandit["histories"], bandit["actions"], bandit["clicks"],
                                      bandit["propensities"], **hyper)
        return ContextualBanditAgent(model, "CB", "bandit")
    if kind == "blo":
        return BLOAgent(blo_params, name="BLO")
    if kind in ("blob_nq", "blob_mnq"):
        variant = "NQ" if kind == "blob_nq" else "MNQ"
        blob = BLOB(psi=blo_params.psi, variant=variant, **hyper)
        blob.fit(omega_hat, bandit["clicks"], actions=bandit["actions"])
        return BLOBAgent(blo_params, blob, name=f"BLOB-{variant}")
    raise ValueError(f"unknown agent kind {kind!r}")


__all__ = ["RandomAgent", "SessionPopAgent", "ScoreAgent", "ContextualBanditAgent", "BLOAgent", "BLOBAgent",
           "OracleAgent", "AGENT_KINDS", "build_agent"]
