"""Synthetic organic/bandit environment with a known generative model.

Users have a static state ``omega ~ N(0, I)``. Organic views are drawn from
``softmax(psi_star @ omega + rho_star)``; a recommended item ``a`` is clicked
with probability ``sigmoid(beta_star[a] @ omega + kappa_star[a])``. ``beta_star``
is a row-permuted copy of ``psi_star``: ``flips`` disjoint item pairs have
their reward behaviour swapped, so organic similarity stops predicting clicks
for those items.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .evaluation import wilson_ci
from .exceptions import CalibrationFailed, FormatVersionMismatch, InvalidConfig
from .mathkernel import RngStream, sigmoid, softmax
from .organic.types import OrganicSession

FORMAT_VERSION = 1

__all__ = [
    "SimConfig",
    "GroundTruth",
    "BanditRecord",
    "BanditLog",
    "ABTestReport",
    "generate_ground_truth",
    "generate_organic_session",
    "generate_organic_sessions",
    "session_pop_logging_policy",
    "session_pop_probs",
    "simulate_bandit_log",
    "run_ab_test",
    "ab_test_users",
    "config_hash",
]

# stream ids; every consumer forks its own child so adding draws in one place
# never shifts another
FLIP_PAIRINGS = ("random", "anticorrelated")

STREAM_TRUTH, STREAM_ORGANIC, STREAM_BANDIT, STREAM_ABTEST, STREAM_AGENT = 0, 1, 2, 3, 4


@dataclass
class SimConfig:
    P: int = 100
    K_true: int = 10
    num_organic_sessions: int = 2000
    num_bandit_users: int = 1000
    bandit_events_per_user: int = 50
    session_length_mean: float = 20.0
    flips: int = 0
    flip_pairing: str = "random"
    epsilon: float = 0.3
    target_random_ctr: float = 0.011
    beta_scale: float = 1.0
    calibration_samples: int = 100_000
    seed: int = 0

    def validate(self):
        errors = {}
        if not isinstance(self.P, (int, np.integer)) or self.P < 2:
            errors["P"] = "must be an integer >= 2"
        if self.K_true < 1:
            errors["K_true"] = "must be >= 1"
        if not isinstance(self.flips, (int, np.integer)) or self.flips < 0 or 2 * self.flips > self.P:
            errors["flips"] = "number of swapped pairs; must satisfy 0 <= flips <= P/2"
        if self.flip_pairing not in FLIP_PAIRINGS:
            errors["flip_pairing"] = f"must be one of {FLIP_PAIRINGS}"
        if not 0.0 <= self.epsilon <= 1.0:
            errors["epsilon"] = "must lie in [0, 1]"
        if not 0.001 < self.target_random_ctr < 0.5:
            errors["target_random_ctr"] = "must lie in (0.001, 0.5)"
        if self.beta_scale <= 0:
            errors["beta_scale"] = "must be positive"
        if self.session_length_mean <= 0:
            errors["session_length_mean"] = "must be positive"
        for name in ("num_organic_sessions", "num_bandit_users", "bandit_events_per_user"):
            if getattr(self, name) < 0:
                errors[name] = "must be non-negative"
        if self.calibration_samples < 10_000:
            errors["calibration_samples"] = "must be >= 10000"
        if errors:
            raise InvalidConfig(errors)
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig({f"sim.{k}": "unknown field" for k in sorted(unknown)})
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


def config_hash(obj) -> str:
    """Short stable hash of a JSON-serialisable config."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class GroundTruth:
    psi_star: np.ndarray
    rho_star: np.ndarray
    beta_star: np.ndarray
    kappa_star: np.ndarray
    flip_perm: np.ndarray

    @property
    def P(self):
        return self.psi_star.shape[0]

    @property
    def K(self):
        return self.psi_star.shape[1]

    def organic_probs(self, omega):
        return softmax(np.asarray(omega) @ self.psi_star.T + self.rho_star, axis=-1)

    def click_probs(self, omega):
        """Click probability of every item for each user state, shape ``(..., P)``."""
        return sigmoid(np.asarray(omega) @ self.beta_star.T + self.kappa_star)

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["psi_star"], float), np.asarray(d["rho_star"], float),
                   np.asarray(d["beta_star"], float), np.asarray(d["kappa_star"], float),
                   np.asarray(d["flip_perm"], dtype=np.int64))


def _flip_permutation(P, flips, gen, pairing="random", psi=None):
    """Involution swapping ``flips`` disjoint item pairs.

    ``"random"`` pairs uniformly chosen items. ``"anticorrelated"`` greedily
    pairs the unused items with the most negative embedding inner product.
    """
    perm = np.arange(P)
    if not flips:
        return perm
    if pairing == "random":
        chosen = gen.choice(P, size=2 * flips, replace=False)
        a, b = chosen[:flips], chosen[flips:]
        perm[a], perm[b] = b, a
        return perm
    gram = psi @ psi.T
    np.fill_diagonal(gram, np.inf)
    used = np.zeros(P, dtype=bool)
    done = 0
    for flat in np.argsort(gram, axis=None, kind="stable"):
        i, j = divmod(int(flat), P)
        if i == j or used[i] or used[j]:
            continue
        perm[i], perm[j] = j, i
        used[i] = used[j] = True
        done += 1
        if done == flips:
            break
    return perm


def _calibrate_kappa(margins, target, n_iter=60):
    """Scalar ``k0`` with ``mean(sigmoid(margins + k0)) = target`` by bisection."""
    lo, hi = -50.0, 50.0
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        if sigmoid(margins + mid).mean() < target:
            lo = mid
        else:
            hi = mid
    k0 = 0.5 * (lo + hi)
    ctr = sigmoid(margins + k0).mean()
    if abs(ctr - target) > 0.05 * target:
        raise CalibrationFailed(f"reached CTR {ctr:.5f}, target {target:.5f}")
    return k0


def generate_ground_truth(cfg: SimConfig, rng=None) -> GroundTruth:
    """Draw ``psi_star``, the flip permutation and ``beta_star``; calibrate ``kappa_star``.

    ``kappa_star`` is a shared scalar chosen so that uniformly random
    recommendations have expected CTR ``target_random_ctr``.
    """
    cfg.validate()
    stream = rng if isinstance(rng, RngStream) else RngStream(cfg.seed, STREAM_TRUTH)
    gen = stream.generator
    P, K = cfg.P, cfg.K_true
    psi = gen.normal(0.0, np.sqrt(1.0 / np.sqrt(K)), size=(P, K))
    rho = np.zeros(P)
    perm = _flip_permutation(P, cfg.flips, gen, cfg.flip_pairing, psi)
    beta = cfg.beta_scale * psi[perm]
    n = cfg.calibration_samples
    omega = gen.standard_normal((n, K))
    actions = gen.integers(0, P, size=n)
    margins = np.einsum("nk,nk->n", omega, beta[actions])
    k0 = _calibrate_kappa(margins, cfg.target_random_ctr)
    return GroundTruth(psi, rho, beta, np.full(P, k0), perm)


def _session_length(cfg, gen):
    return max(1, int(gen.poisson(cfg.session_length_mean)))


def generate_organic_session(gt: GroundTruth, cfg: SimConfig, rng, user_id=0, omega=None):
    """One organic session; draws ``omega`` from the prior unless given.

    Returns ``(session, omega)``.
    """
    gen = rng.generator if isinstance(rng, RngStream) else rng
    if omega is None:
        omega = gen.standard_normal(gt.K)
    T = _session_length(cfg, gen)
    items = gen.choice(gt.P, size=T, p=gt.organic_probs(omega))
    return OrganicSession(user_id, items), omega


def generate_organic_sessions(gt: GroundTruth, cfg: SimConfig, n=None, stream=None, user_offset=0):
    """``n`` independent organic sessions, user ids ``user_offset + i``."""
    n = cfg.num_organic_sessions if n is None else n
    stream = RngStream(cfg.seed, STREAM_ORGANIC) if stream is None else stream
    out = []
    for i in range(n):
        s, _ = generate_organic_session(gt, cfg, stream.fork(i), user_id=user_offset + i)
        out.append(s)
    return out


def session_pop_probs(history, epsilon, P):
    """Action distribution of the epsilon-greedy session-popularity policy.

    ``history`` is an item-count vector, or a ``(n, P)`` stack of them.
    """
    h = np.asarray(history, dtype=np.float64)
    tot = h.sum(axis=-1, keepdims=True)
    safe = np.where(tot > 0, tot, 1.0)
    greedy = np.where(tot > 0, h / safe, 1.0 / P)
    return (1.0 - epsilon) * greedy + epsilon / P


def session_pop_logging_policy(history, epsilon, P, rng):
    """Sample an action from the session-popularity policy; return ``(action, propensity)``."""
    gen = rng.generator if isinstance(rng, RngStream) else rng
    pi = session_pop_probs(history, epsilon, P)
    a = int(gen.choice(P, p=pi))
    return a, float(pi[a])


@dataclass
class BanditRecord:
    user_id: int
    n: int
    action: int
    click: int
    propensity: float


@dataclass
class BanditLog:
    """Bandit records plus the organic sessions of the same users."""

    records: list
    sessions: list
    omegas: np.ndarray = field(default=None, repr=False)

    def arrays(self):
        """Column arrays ``(user_id, action, click, propensity)``."""
        r = self.records
        return (np.array([x.user_id for x in r], dtype=np.int64), np.array([x.action for x in r], dtype=np.int64),
                np.array([x.click for x in r], dtype=np.int64), np.array([x.propensity for x in r]))

    def history_counts(self, P):
        """Item-count history of every record's user, shape ``(N, P)``."""
        by_user = {s.user_id: s.counts(P) for s in self.sessions}
        users = self.arrays()[0]
        return np.stack([by_user[u] for u in users]) if len(users) else np.zeros((0, P))


def simulate_bandit_log(gt: GroundTruth, cfg: SimConfig, policy=None, stream=None, user_offset=None):
    """Simulate bandit users: an organic session each, then logged recommendations.

    ``policy(history_counts, gen) -> (action, propensity)`` defaults to the
    epsilon-greedy session-popularity policy.
    """
    if policy is None:
        def policy(h, gen):
            return session_pop_logging_policy(h, cfg.epsilon, gt.P, gen)
    stream = RngStream(cfg.seed, STREAM_BANDIT) if stream is None else stream
    offset = cfg.num_organic_sessions if user_offset is None else user_offset
    records, sessions, omegas = [], [], []
    for u in range(cfg.num_bandit_users):
        gen = stream.fork(u).generator
        uid = offset + u
        session, omega = generate_organic_session(gt, cfg, gen, user_id=uid)
        hist = session.counts(gt.P)
        sessions.append(session)
        omegas.append(omega)
        probs = gt.click_probs(omega)
        for n in range(cfg.bandit_events_per_user):
            a, prop = policy(hist, gen)
            c = int(gen.random() < probs[a])
            records.append(BanditRecord(uid, n, int(a), c, float(prop)))
    return BanditLog(records, sessions, np.array(omegas).reshape(-1, gt.K))


@dataclass
class ABTestReport:
    policy: str
    displays: int
    clicks: int
    ctr: float
    ci95_low: float
    ci95_high: float

    def to_dict(self):
        return asdict(self)


def ab_test_users(gt: GroundTruth, cfg: SimConfig, num_users, seed=None, displays_per_user=1):
    """Shared A/B population: user states, histories and click uniforms.

    Agents evaluated on the same population see identical users and identical
    click noise (common random numbers).
    """
    seed = cfg.seed if seed is None else seed
    stream = RngStream(seed, STREAM_ABTEST)
    omegas, hists, unif = [], [], []
    for u in range(num_users):
        gen = stream.fork(u).generator
        session, omega = generate_organic_session(gt, cfg, gen, user_id=u)
        omegas.append(omega)
        hists.append(session.counts(gt.P))
        unif.append(gen.random(displays_per_user))
    return np.array(omegas), np.array(hists), np.array(unif)


def run_ab_test(gt: GroundTruth, cfg: SimConfig, agent, num_users=4000, seed=None, displays_per_user=1,
                name=None, population=None):
    """Online evaluation of ``agent`` on fresh users drawn from the ground truth.

    ``agent.act(histories (U, P), gen) -> actions`` is called once per display
    round. Returns an :class:`ABTestReport` with a Wilson 95% interval.
    """
    if population is None:
        population = ab_test_users(gt, cfg, num_users, seed, displays_per_user)
    omegas, hists, unif = population
    seed = cfg.seed if seed is None else seed
    agent_gen = RngStream(seed, STREAM_AGENT).generator
    probs = gt.click_probs(omegas)
    clicks = 0
    rows = np.arange(len(omegas))
    for d in range(unif.shape[1]):
        if getattr(agent, "uses_true_state", False):
            actions = agent.act_with_state(omegas)
        else:
            actions = agent.act(hists, agent_gen)
        actions = np.asarray(actions, dtype=np.int64)
        clicks += int(np.sum(unif[:, d] < probs[rows, actions]))
    displays = unif.size
    lo, hi = wilson_ci(clicks, displays)
    return ABTestReport(name or getattr(agent, "name", type(agent).__name__), displays, clicks,
                        clicks / displays, lo, hi)


# ---------------------------------------------------------------- JSON lines I/O


def _header(kind, chash):
    return json.dumps({"format_version": FORMAT_VERSION, "kind": kind, "config_hash": chash}, sort_keys=True)


def _check_header(line, kind):
    head = json.loads(line)
    if head.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"expected format_version {FORMAT_VERSION}, got {head.get('format_version')}")
    if head.get("kind") != kind:
        raise FormatVersionMismatch(f"expected a {kind} file, got {head.get('kind')}")
    return head


def write_organic_jsonl(path, sessions, chash=""):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header("organic_sessions", chash) + "\n")
        for s in sessions:
            for t, v in enumerate(s.items):
                fh.write(json.dumps({"user_id": int(s.user_id), "t": t, "item_id": int(v)}) + "\n")


def read_organic_jsonl(path):
    """Sessions in file order of first appearance, events ordered by ``t``."""
    events = {}
    with open(path, encoding="utf-8") as fh:
        _check_header(fh.readline(), "organic_sessions")
        for line in fh:
            if line.strip():
                r = json.loads(line)
                events.setdefault(r["user_id"], []).append((r["t"], r["item_id"]))
    return [OrganicSession(u, [v for _, v in sorted(ev)]) for u, ev in events.items()]


def write_bandit_jsonl(path, records, chash=""):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_header("bandit_log", chash) + "\n")
        for r in records:
            fh.write(json.dumps({"user_id": r.user_id, "n": r.n, "action": r.action, "click": r.click,
                                 "propensity": r.propensity}) + "\n")


def read_bandit_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        _check_header(fh.readline(), "bandit_log")
        return [BanditRecord(**json.loads(line)) for line in fh if line.strip()]
