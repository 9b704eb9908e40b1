"""Experiment configuration: a JSON document with one section per pipeline stage.

Example::

    {
      "seed": 0,
      "sim": {"P": 100, "flips": 0},
      "organic": {"K": 10, "epochs": 100},
      "bandit": {"epochs": 800},
      "agents": [{"name": "BLOB-NQ", "kind": "blob_nq"}],
      "abtest": {"num_users": 4000},
      "evaluation": {"k": 5, "num_test_sessions": 1000},
      "output_dir": "runs/flips0"
    }

Missing sections and fields take defaults; unknown fields are rejected.
The top-level ``seed`` seeds every stage unless a section sets its own.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .agents import AGENT_KINDS
from .bandit import BanditHyperPriors
from .exceptions import InvalidConfig, MissingInput
from .organic.model import BOUNDS
from .simulator import SimConfig, config_hash

DEFAULT_AGENTS = [
    {"name": "Random", "kind": "random"},
    {"name": "Popularity", "kind": "popularity"},
    {"name": "Session ItemKNN", "kind": "itemknn"},
    {"name": "Log Reg", "kind": "logreg"},
    {"name": "CB", "kind": "cb"},
    {"name": "BLO", "kind": "blo"},
    {"name": "BLOB-NQ", "kind": "blob_nq"},
    {"name": "BLOB-MNQ", "kind": "blob_mnq"},
]


@dataclass
class OrganicSection:
    K: int = 10
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    bound: str = "reparam"
    neg_samples: int = 0
    l2: float = 0.0
    em_iters: int = 100
    seed: int | None = None


@dataclass
class BanditSection:
    learning_rate: float = 1e-3
    epochs: int = 800
    batch_size: int = 1024
    init_sigma: float = 0.1
    init_mu_wb: float | None = -1.0
    variants: list = field(default_factory=lambda: ["NQ", "MNQ"])
    priors: dict = field(default_factory=dict)
    seed: int | None = None


@dataclass
class ABTestSection:
    num_users: int = 4000
    displays_per_user: int = 1
    seed: int | None = None


@dataclass
class EvaluationSection:
    k: int = 5
    num_test_sessions: int = 1000
    bootstrap: int = 1000


@dataclass
class ExperimentConfig:
    seed: int
    sim: SimConfig
    organic: OrganicSection
    bandit: BanditSection
    agents: list
    abtest: ABTestSection
    evaluation: EvaluationSection
    output_dir: str

    def to_dict(self):
        return {"seed": self.seed, "sim": self.sim.to_dict(), "organic": asdict(self.organic),
                "bandit": asdict(self.bandit), "agents": copy.deepcopy(self.agents),
                "abtest": asdict(self.abtest), "evaluation": asdict(self.evaluation), "output_dir": self.output_dir}

    @property
    def hash(self):
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)

    def stage_seed(self, section):
        s = getattr(self, section).seed
        return self.seed if s is None else s


def _section(cls, raw, name, errors):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    for k in sorted(set(raw) - known):
        errors[f"{name}.{k}"] = "unknown field"
    return cls(**{k: v for k, v in raw.items() if k in known})


def parse_config(raw: dict, seed_override=None, output_override=None) -> ExperimentConfig:
    """Validate a raw config dict; all problems are reported together in :class:`InvalidConfig`."""
    errors = {}
    raw = dict(raw or {})
    top = {"seed", "sim", "organic", "bandit", "agents", "abtest", "evaluation", "output_dir"}
    for k in sorted(set(raw) - top):
        errors[k] = "unknown field"
    seed = raw.get("seed", 0) if seed_override is None else seed_override
    if not isinstance(seed, int) or seed < 0:
        errors["seed"] = "must be a non-negative integer"
        seed = 0
    sim_raw = dict(raw.get("sim") or {})
    sim_raw.setdefault("seed", seed)
    if seed_override is not None:
        sim_raw["seed"] = seed_override
    sim = _section(SimConfig, sim_raw, "sim", errors)
    try:
        sim.validate()
    except InvalidConfig as exc:
        errors.update({f"sim.{k}": v for k, v in exc.errors.items()})
    organic = _section(OrganicSection, raw.get("organic"), "organic", errors)
    if organic.bound not in BOUNDS:
        errors["organic.bound"] = f"must be one of {BOUNDS}"
    if organic.K < 1:
        errors["organic.K"] = "must be >= 1"
    if organic.learning_rate <= 0:
        errors["organic.learning_rate"] = "must be positive"
    if not 0 <= organic.neg_samples < sim.P:
        errors["organic.neg_samples"] = "must satisfy 0 <= S < P"
    bandit = _section(BanditSection, raw.get("bandit"), "bandit", errors)
    for v in bandit.variants:
        if v not in ("NQ", "MNQ"):
            errors["bandit.variants"] = "entries must be NQ or MNQ"
    try:
        BanditHyperPriors(**bandit.priors)
    except (TypeError, ValueError) as exc:
        errors["bandit.priors"] = str(exc)
    if bandit.learning_rate <= 0:
        errors["bandit.learning_rate"] = "must be positive"
    agents = raw.get("agents", DEFAULT_AGENTS)
    if not isinstance(agents, list) or not agents:
        errors["agents"] = "must be a non-empty list"
        agents = []
    names = set()
    for i, a in enumerate(agents):
        if not isinstance(a, dict) or a.get("kind") not in AGENT_KINDS:
            errors[f"agents[{i}].kind"] = f"must be one of {AGENT_KINDS}"
            continue
        a.setdefault("name", a["kind"])
        a.setdefault("hyperparams", {})
        if a["name"] in names:
            errors[f"agents[{i}].name"] = "duplicate agent name"
        names.add(a["name"])
    abtest = _section(ABTestSection, raw.get("abtest"), "abtest", errors)
    if abtest.num_users < 1 or abtest.displays_per_user < 1:
        errors["abtest"] = "num_users and displays_per_user must be >= 1"
    evaluation = _section(EvaluationSection, raw.get("evaluation"), "evaluation", errors)
    if not 1 <= evaluation.k <= sim.P:
        errors["evaluation.k"] = "must satisfy 1 <= k <= P"
    output_dir = output_override or raw.get("output_dir") or "run"
    if errors:
        raise InvalidConfig(errors)
    return ExperimentConfig(seed, sim, organic, bandit, agents, abtest, evaluation, str(output_dir))


def load_config(path, seed_override=None, output_override=None) -> ExperimentConfig:
    if path is None:
        return parse_config({}, seed_override, output_override)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise MissingInput(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig({"config": f"not valid JSON: {exc}"}) from None
    return parse_config(raw, seed_override, output_override)
