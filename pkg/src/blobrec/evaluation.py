"""Ranking metrics for next-item prediction and CTR estimators for bandit logs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from .exceptions import MissingPropensity
from .mathkernel import as_generator

__all__ = [
    "RankingMetrics",
    "CtrResult",
    "top_k",
    "recall_at_k",
    "dcg_at_k",
    "evaluate_next_item",
    "ips_estimate",
    "wilson_ci",
    "bootstrap_ci",
    "format_table",
]


@dataclass
class RankingMetrics:
    rc_at_k: float
    dcg_at_k: float
    k: int
    n_sessions: int = 0
    n_skipped: int = 0
    rc_ci95: tuple | None = None
    dcg_ci95: tuple | None = None

    def to_dict(self):
        return asdict(self)


@dataclass
class CtrResult:
    ctr: float
    ci95: tuple
    n_displays: int

    def to_dict(self):
        return {"ctr": self.ctr, "ci95": list(self.ci95), "n_displays": self.n_displays}


def _rank(scores, target):
    """1-based rank of ``target``; ties go to the lower item id."""
    scores = np.asarray(scores, dtype=np.float64)
    s = scores[target]
    ids = np.arange(scores.size)
    return int(np.sum(scores > s) + np.sum((scores == s) & (ids < target)) + 1)


def top_k(scores, k):
    """Indices of the ``k`` highest scores, ties broken by lowest id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))[:k]


def recall_at_k(scores, target, k=5):
    """1 if ``target`` is among the top ``k`` items, else 0."""
    return int(_rank(scores, target) <= k)


def dcg_at_k(scores, target, k=5):
    """Binary-relevance DCG: ``1 / log2(rank + 1)`` inside the top ``k``, else 0."""
    r = _rank(scores, target)
    return 1.0 / np.log2(r + 1.0) if r <= k else 0.0


def bootstrap_ci(values, level=0.95, n_boot=1000, rng=0):
    """Percentile bootstrap interval for the mean of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    gen = as_generator(rng)
    idx = gen.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return float(np.quantile(means, alpha)), float(np.quantile(means, 1.0 - alpha))


def evaluate_next_item(score_fn, test_sessions, k=5, bootstrap=0, rng=0, return_per_session=False):
    """Mean RC@k and DCG@k for predicting each session's last item from its prefix.

    ``score_fn`` maps a list of item-id prefixes to a ``(n, P)`` score array.
    Sessions shorter than two items are skipped and counted in ``n_skipped``.
    With ``bootstrap > 0`` percentile CIs over sessions are attached.
    """
    prefixes, targets = [], []
    skipped = 0
    for s in test_sessions:
        items = np.asarray(getattr(s, "items", s), dtype=np.int64)
        if items.size < 2:
            skipped += 1
            continue
        prefixes.append(items[:-1])
        targets.append(int(items[-1]))
    if not targets:
        out = RankingMetrics(0.0, 0.0, k, 0, skipped)
        return (out, np.zeros(0), np.zeros(0)) if return_per_session else out
    scores = np.asarray(score_fn(prefixes), dtype=np.float64)
    rc = np.array([recall_at_k(sc, t, k) for sc, t in zip(scores, targets)], dtype=np.float64)
    dcg = np.array([dcg_at_k(sc, t, k) for sc, t in zip(scores, targets)])
    out = RankingMetrics(float(rc.mean()), float(dcg.mean()), k, len(targets), skipped)
    if bootstrap:
        out.rc_ci95 = bootstrap_ci(rc, n_boot=bootstrap, rng=rng)
        out.dcg_ci95 = bootstrap_ci(dcg, n_boot=bootstrap, rng=rng)
    return (out, rc, dcg) if return_per_session else out


def ips_estimate(clicks, propensities, target_probs, level=0.95):
    """IPS value of a target policy on a logged dataset, with a normal-approximation CI.

    ``target_probs`` holds ``pi(a_n | x_n)`` for each logged action. No clipping.
    """
    clicks = np.asarray(clicks, dtype=np.float64)
    p = np.asarray(propensities, dtype=np.float64)
    if p.size != clicks.size or np.any(~np.isfinite(p)) or np.any(p <= 0):
        raise MissingPropensity("every record needs a positive propensity")
    terms = clicks * np.asarray(target_probs, dtype=np.float64) / p
    est = float(terms.mean())
    n = terms.size
    se = float(terms.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    z = norm.ppf(0.5 + level / 2.0)
    return CtrResult(est, (est - z * se, est + z * se), n)


def wilson_ci(clicks, displays, level=0.95):
    """Wilson score interval for a binomial proportion."""
    if displays < 1:
        raise ValueError("displays must be >= 1")
    z = norm.ppf(0.5 + level / 2.0)
    phat = clicks / displays
    denom = 1.0 + z * z / displays
    centre = (phat + z * z / (2.0 * displays)) / denom
    half = z * np.sqrt(phat * (1.0 - phat) / displays + z * z / (4.0 * displays**2)) / denom
    lo = 0.0 if clicks == 0 else max(0.0, centre - half)
    hi = 1.0 if clicks == displays else min(1.0, centre + half)
    return float(lo), float(hi)


def format_table(rows, columns, float_fmt="{:.4f}"):
    """Aligned plain-text table; ``rows`` are dicts, missing cells print as ``-``."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return float_fmt.format(v)
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)).rstrip())
    return "\n".join(lines)


def dumps_json(obj):
    """Deterministic JSON (sorted keys, full float precision)."""
    return json.dumps(obj, sort_keys=True, indent=2)
