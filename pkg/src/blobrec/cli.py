"""Command-line pipeline: simulate, train, evaluate, A/B test and report.

Every stage reads and writes files in ``--out`` (default: the config's
``output_dir``). Outputs carry ``format_version`` and the config hash.

Exit codes: 0 success, 2 configuration error, 3 missing input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .agents import BLOAgent, BLOBAgent, build_agent
from .bandit import BLOB, BanditHyperPriors, state_from_dict, state_to_dict
from .baselines import fit_item_knn, fit_popularity
from .config import ExperimentConfig, load_config
from .evaluation import evaluate_next_item, format_table
from .exceptions import (
    CalibrationFailed,
    FormatVersionMismatch,
    InvalidConfig,
    MissingInput,
    NotPositiveDefinite,
    SingularPrecision,
    TrainingDiverged,
)
from .mathkernel import RngStream
from .organic.em import em_batch
from .organic.model import BLO, model_from_dict, model_to_dict
from .simulator import (
    FORMAT_VERSION,
    GroundTruth,
    ab_test_users,
    generate_ground_truth,
    generate_organic_sessions,
    read_bandit_jsonl,
    read_organic_jsonl,
    run_ab_test,
    simulate_bandit_log,
    write_bandit_jsonl,
    write_organic_jsonl,
)

STREAM_TEST_SESSIONS = 5

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

ABTEST_SCHEMA = {
    "format_version": int,
    "config_hash": str,
    "kind": str,
    "rows": [{"agent": str, "type": str, "displays": int, "clicks": int, "ctr": float,
              "ci95_low": float, "ci95_high": float}],
}


# ------------------------------------------------------------------ file helpers


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_json(path, kind=None):
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"missing input file: {path}")
    d = json.loads(path.read_text(encoding="utf-8"))
    if d.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: expected format_version {FORMAT_VERSION}")
    if kind is not None and d.get("kind") != kind:
        raise FormatVersionMismatch(f"{path}: expected kind {kind}, got {d.get('kind')}")
    return d


def _require(path):
    if not Path(path).exists():
        raise MissingInput(f"missing input file: {path}")
    return path


def _write_trace(path, trace, name):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", name])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


# ------------------------------------------------------------------ stages


def cmd_simulate(cfg: ExperimentConfig, out: Path):
    """Ground truth, organic sessions (training and held-out) and the bandit log."""
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim
    gt = generate_ground_truth(sim)
    train = generate_organic_sessions(gt, sim)
    log = simulate_bandit_log(gt, sim)
    test = generate_organic_sessions(gt, sim, n=cfg.evaluation.num_test_sessions,
                                     stream=RngStream(sim.seed, STREAM_TEST_SESSIONS),
                                     user_offset=sim.num_organic_sessions + sim.num_bandit_users)
    h = cfg.hash
    write_organic_jsonl(out / "organic.jsonl", train + log.sessions, h)
    write_organic_jsonl(out / "test_organic.jsonl", test, h)
    write_bandit_jsonl(out / "bandit.jsonl", log.records, h)
    _write_json(out / "ground_truth.json", {"format_version": FORMAT_VERSION, "kind": "ground_truth",
                                            "config_hash": h, "observable": False, "ground_truth": gt.to_dict()})
    _write_json(out / "config.json", cfg.to_dict())
    n_events = sum(len(s) for s in train)
    return {"organic_sessions": len(train), "organic_events": n_events, "bandit_records": len(log.records)}


def _load_blo(out: Path):
    d = _read_json(_require(out / "blo.json"), "organic_model")
    params, encoder = model_from_dict(d)
    return params, encoder


def cmd_train_organic(cfg: ExperimentConfig, out: Path):
    sessions = read_organic_jsonl(_require(out / "organic.jsonl"))
    o = cfg.organic
    blo = BLO(n_components=o.K, bound=o.bound, learning_rate=o.learning_rate, epochs=o.epochs,
              batch_size=o.batch_size, neg_samples=o.neg_samples, l2=o.l2, em_iters=o.em_iters,
              n_items=cfg.sim.P, random_state=cfg.stage_seed("organic"))
    blo.fit(sessions)
    _write_json(out / "blo.json", model_to_dict(blo.params_, blo.encoder_,
                                                {"kind": "organic_model", "config_hash": cfg.hash}))
    _write_trace(out / "blo_trace.csv", blo.loss_history_, "elbo")
    return {"final_elbo": float(blo.loss_history_[-1]) if len(blo.loss_history_) else None}


def _bandit_inputs(cfg, out, params):
    sessions = {s.user_id: s for s in read_organic_jsonl(_require(out / "organic.jsonl"))}
    records = read_bandit_jsonl(_require(out / "bandit.jsonl"))
    P = cfg.sim.P
    users = sorted({r.user_id for r in records})
    missing = [u for u in users if u not in sessions]
    if missing:
        raise MissingInput(f"bandit users without organic history: {missing[:5]}")
    index = {u: i for i, u in enumerate(users)}
    H_users = np.stack([sessions[u].counts(P) for u in users])
    rows = np.array([index[r.user_id] for r in records], dtype=np.int64)
    data = {
        "histories": H_users[rows],
        "actions": np.array([r.action for r in records], dtype=np.int64),
        "clicks": np.array([r.click for r in records], dtype=np.int64),
        "propensities": np.array([r.propensity for r in records]),
    }
    omega = None
    if params is not None:
        omega = em_batch(params, H_users, n_iter=cfg.organic.em_iters)[0][rows]
    return data, omega


def cmd_train_bandit(cfg: ExperimentConfig, out: Path):
    params, _ = _load_blo(out)
    data, omega = _bandit_inputs(cfg, out, params)
    b = cfg.bandit
    priors = BanditHyperPriors(**b.priors)
    summary = {}
    for variant in b.variants:
        blob = BLOB(psi=params.psi, variant=variant, learning_rate=b.learning_rate, epochs=b.epochs,
                    batch_size=b.batch_size, priors=priors, init_sigma=b.init_sigma, init_mu_wb=b.init_mu_wb,
                    random_state=cfg.stage_seed("bandit"))
        blob.fit(omega, data["clicks"], actions=data["actions"])
        doc = state_to_dict(blob.state_, priors)
        doc.update({"kind": "bandit_model", "config_hash": cfg.hash})
        _write_json(out / f"blob_{variant.lower()}.json", doc)
        _write_trace(out / f"blob_{variant.lower()}_trace.csv", blob.trace_, "objective")
        summary[variant] = float(blob.trace_[-1]) if len(blob.trace_) else None
    return summary


def cmd_evaluate_organic(cfg: ExperimentConfig, out: Path):
    train = read_organic_jsonl(_require(out / "organic.jsonl"))
    test = read_organic_jsonl(_require(out / "test_organic.jsonl"))
    params, encoder = _load_blo(out)
    P, e = cfg.sim.P, cfg.evaluation
    blo = BLO.from_params(params, encoder, em_iters=cfg.organic.em_iters, inference="em", prediction="mean")
    scorers = {
        "BLO (EM, mean)": blo.predict_proba,
        "Popularity": fit_popularity(train, P).scores,
        "ItemKNN": fit_item_knn(train, "most_recent", P).scores,
        "Session ItemKNN": fit_item_knn(train, "session_average", P).scores,
    }
    rows = []
    for name, fn in scorers.items():
        m = evaluate_next_item(fn, test, k=e.k, bootstrap=e.bootstrap, rng=cfg.seed)
        rows.append({"agent": name, **m.to_dict()})
    doc = {"format_version": FORMAT_VERSION, "kind": "organic_metrics", "config_hash": cfg.hash, "rows": rows}
    _write_json(out / "organic_metrics.json", doc)
    table = format_table([{"Agent": r["agent"], f"RC@{e.k}": r["rc_at_k"], f"DCG@{e.k}": r["dcg_at_k"]}
                          for r in rows], ["Agent", f"RC@{e.k}", f"DCG@{e.k}"])
    (out / "organic_metrics.txt").write_text(table + "\n", encoding="utf-8")
    return table


def build_agents(cfg: ExperimentConfig, out: Path, names=None, gt=None):
    specs = cfg.agents if names is None else [a for a in cfg.agents if a["name"] in names or a["kind"] in names]
    if names is not None and not specs:
        raise InvalidConfig({"agents": f"none of {sorted(names)} are configured"})
    kinds = {a["kind"] for a in specs}
    params = None
    if kinds & {"blo", "blob_nq", "blob_mnq"}:
        params, _ = _load_blo(out)
    organic = None
    if kinds & {"popularity", "itemknn"}:
        organic = read_organic_jsonl(_require(out / "organic.jsonl"))
    data = None
    if kinds & {"logreg", "cb"}:
        data, _ = _bandit_inputs(cfg, out, None)
    P = cfg.sim.P
    agents = []
    for spec in specs:
        kind = spec["kind"]
        if kind in ("blob_nq", "blob_mnq"):
            variant = "NQ" if kind == "blob_nq" else "MNQ"
            d = _read_json(_require(out / f"blob_{variant.lower()}.json"), "bandit_model")
            state, priors = state_from_dict(d)
            agent = BLOBAgent(params, BLOB.from_state(state, params.psi, priors), cfg.organic.em_iters)
        elif kind == "blo":
            agent = BLOAgent(params, cfg.organic.em_iters)
        else:
            agent = build_agent(kind, P=P, organic_sessions=organic, bandit=data, hyper=spec.get("hyperparams"),
                                epsilon=cfg.sim.epsilon, ground_truth=gt)
        agent.name = spec["name"]
        agents.append(agent)
    return agents


def cmd_abtest(cfg: ExperimentConfig, out: Path, agent_names=None):
    gt = GroundTruth.from_dict(_read_json(_require(out / "ground_truth.json"), "ground_truth")["ground_truth"])
    agents = build_agents(cfg, out, agent_names, gt)
    a = cfg.abtest
    seed = cfg.stage_seed("abtest")
    population = ab_test_users(gt, cfg.sim, a.num_users, seed, a.displays_per_user)
    rows = []
    for agent in agents:
        r = run_ab_test(gt, cfg.sim, agent, a.num_users, seed, a.displays_per_user, name=agent.name,
                        population=population)
        rows.append({"agent": r.policy, "type": agent.kind, "displays": r.displays, "clicks": r.clicks,
                     "ctr": r.ctr, "ci95_low": r.ci95_low, "ci95_high": r.ci95_high})
    doc = {"format_version": FORMAT_VERSION, "kind": "abtest", "config_hash": cfg.hash, "rows": rows}
    validate_report(doc)
    _write_json(out / "abtest.json", doc)
    table = abtest_table(rows)
    (out / "abtest.txt").write_text(table + "\n", encoding="utf-8")
    return table


def abtest_table(rows):
    return format_table([{"Agent": r["agent"], "Type": r["type"], "CTR (%)": 100 * r["ctr"],
                          "95% CI": f"[{100 * r['ci95_low']:.2f}, {100 * r['ci95_high']:.2f}]"} for r in rows],
                        ["Agent", "Type", "CTR (%)", "95% CI"], float_fmt="{:.2f}")


def validate_report(doc, schema=ABTEST_SCHEMA):
    """Check a report document against :data:`ABTEST_SCHEMA`; raises ValueError."""
    for key, typ in schema.items():
        if key not in doc:
            raise ValueError(f"report missing {key!r}")
        if isinstance(typ, list):
            if not isinstance(doc[key], list):
                raise ValueError(f"{key} must be a list")
            for row in doc[key]:
                validate_report(row, typ[0])
        elif typ is float:
            if not isinstance(doc[key], (int, float)):
                raise ValueError(f"{key} must be a number")
        elif not isinstance(doc[key], typ):
            raise ValueError(f"{key} must be {typ.__name__}")
    return True


def _run_label(run_dir: Path):
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        d = json.loads(cfg_path.read_text(encoding="utf-8"))
        return f"flips={d['sim']['flips']} ({run_dir.name})"
    return run_dir.name


def cmd_report(run_dirs, out: Path):
    """Merge A/B and organic results of several runs into side-by-side tables."""
    out.mkdir(parents=True, exist_ok=True)
    labels, ab, org = [], {}, {}
    traces = []
    for rd in map(Path, run_dirs):
        label = _run_label(rd)
        labels.append(label)
        if (rd / "abtest.json").exists():
            for r in _read_json(rd / "abtest.json", "abtest")["rows"]:
                ab.setdefault((r["agent"], r["type"]), {})[label] = r
        if (rd / "organic_metrics.json").exists():
            for r in _read_json(rd / "organic_metrics.json", "organic_metrics")["rows"]:
                org.setdefault(r["agent"], {})[label] = r
        for f in sorted(rd.glob("*_trace.csv")):
            with open(f, encoding="utf-8") as fh:
                rows = list(csv.reader(fh))[1:]
            traces.extend([label, f.stem, e, v] for e, v in rows)
    if not ab and not org:
        raise MissingInput("no completed runs found")
    ab_rows = [{"Agent": agent, "Type": typ, **{lab: 100 * cells[lab]["ctr"] if lab in cells else None
                                                   for lab in labels}}
               for (agent, typ), cells in ab.items()]
    org_rows = [{"Agent": agent, **{lab: cells[lab]["rc_at_k"] if lab in cells else None for lab in labels}}
                for agent, cells in org.items()]
    parts = []
    if ab_rows:
        parts.append("CTR (%)\n" + format_table(ab_rows, ["Agent", "Type", *labels], float_fmt="{:.2f}"))
    if org_rows:
        parts.append("RC@K\n" + format_table(org_rows, ["Agent", *labels]))
    text = "\n\n".join(parts) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    _write_json(out / "report.json", {"format_version": FORMAT_VERSION, "kind": "report", "runs": labels,
                                      "abtest": ab_rows, "organic": org_rows})
    with open(out / "traces.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "trace", "epoch", "value"])
        w.writerows(traces)
    return text


# ------------------------------------------------------------------ entry point


def _parser():
    p = argparse.ArgumentParser(prog="blobrec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "train-organic", "train-bandit", "evaluate-organic", "abtest", "report"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="run directory (default: config output_dir)")
        if name == "abtest":
            sp.add_argument("--agents", help="comma-separated agent names or kinds")
        if name == "report":
            sp.add_argument("runs", nargs="+", help="completed run directories")
    return p


def _thread_limit():
    n = os.environ.get("BLOB_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def run(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "report":
        out = Path(args.out or "report")
        print(cmd_report(args.runs, out), end="")
        return EXIT_OK
    cfg = load_config(args.config, args.seed, args.out)
    out = Path(cfg.output_dir)
    if args.command == "simulate":
        print(json.dumps(cmd_simulate(cfg, out), sort_keys=True))
    elif args.command == "train-organic":
        print(json.dumps(cmd_train_organic(cfg, out), sort_keys=True))
    elif args.command == "train-bandit":
        print(json.dumps(cmd_train_bandit(cfg, out), sort_keys=True))
    elif args.command == "evaluate-organic":
        print(cmd_evaluate_organic(cfg, out))
    elif args.command == "abtest":
        names = set(args.agents.split(",")) if args.agents else None
        print(cmd_abtest(cfg, out, names))
    return EXIT_OK


def main(argv=None):
    limiter = None
    try:
        limiter = _thread_limit()
        return run(argv)
    except (InvalidConfig, FormatVersionMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, NotPositiveDefinite, SingularPrecision, CalibrationFailed, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.unregister() if hasattr(limiter, "unregister") else None


if __name__ == "__main__":
    sys.exit(main())
