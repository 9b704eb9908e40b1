"""End-to-end acceptance suite; each test prints one pass/fail line in the terminal summary.

The A/B criteria drive the ``blobrec`` command line exactly as a user would,
with default settings apart from the catalogue and flip count.
"""
import json
import shutil

import numpy as np
import pytest
from test_bandit import flatten, random_state, unflatten
from test_organic import mc_elbo, optimise_aux, quadrature_mean, random_instance

from blobrec.agents import RandomAgent
from blobrec.bandit import (
    beta_covariance,
    initial_state,
    lambda_hat,
    noisy_objective,
    precompute_geometry,
    sample_lambda_full,
)
from blobrec.cli import main
from blobrec.evaluation import ips_estimate
from blobrec.mathkernel import grad_check
from blobrec.organic import (
    BouchardState,
    DiagGaussianPosterior,
    FullGaussianPosterior,
    OrganicParams,
    elbo_bouchard,
    elbo_logconcave,
    elbo_reparam,
    em_batch,
    em_cycle,
    infer_posterior,
    online_em,
    optimal_phi,
)
from blobrec.simulator import (
    SimConfig,
    generate_ground_truth,
    run_ab_test,
    session_pop_probs,
    simulate_bandit_log,
)

STAGES = ["simulate", "train-organic", "train-bandit", "evaluate-organic", "abtest"]

pytestmark = pytest.mark.slow


def run_stages(cfg, out, stages=STAGES):
    for stage in stages:
        assert main([stage, "--config", str(cfg), "--out", str(out)]) == 0, stage


def ctr_rows(run):
    return {r["agent"]: r for r in json.loads((run / "abtest.json").read_text())["rows"]}


def fmt(r):
    return f"{100 * r['ctr']:.2f} [{100 * r['ci95_low']:.2f}, {100 * r['ci95_high']:.2f}]"


def above(a, b):
    """Non-overlapping 95% intervals with ``a`` on top."""
    return a["ci95_low"] > b["ci95_high"]


def overlap(a, b):
    return a["ci95_low"] <= b["ci95_high"] and b["ci95_low"] <= a["ci95_high"]


@pytest.fixture(scope="session")
def ab_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for flips in (0, 50):
        cfg = root / f"flips{flips}.json"
        cfg.write_text(json.dumps({"sim": {"P": 100, "flips": flips}}))
        runs[flips] = (cfg, root / f"flips{flips}" / "run")
        run_stages(cfg, runs[flips][1])
    return root, runs


# ------------------------------------------------------------------ 1


def test_organic_ranking_dominance(tmp_path, criterion):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "sim": {"P": 200, "K_true": 10, "num_organic_sessions": 1000, "num_bandit_users": 0},
        "organic": {"K": 10, "epochs": 100},
        "evaluation": {"k": 5, "num_test_sessions": 1000, "bootstrap": 1000},
        "agents": [{"name": "BLO", "kind": "blo"}],
    }))
    run_stages(cfg, tmp_path / "run", ["simulate", "train-organic", "evaluate-organic"])
    rows = {r["agent"]: r for r in json.loads((tmp_path / "run" / "organic_metrics.json").read_text())["rows"]}
    blo, pop, knn = rows["BLO (EM, mean)"], rows["Popularity"], rows["ItemKNN"]
    ok = (blo["rc_at_k"] >= 2 * pop["rc_at_k"] and blo["rc_ci95"][0] > pop["rc_ci95"][1]
          and blo["rc_at_k"] > knn["rc_at_k"] and blo["rc_ci95"][0] > knn["rc_ci95"][1])
    detail = ", ".join(f"{k} {r['rc_at_k']:.3f} [{r['rc_ci95'][0]:.3f}, {r['rc_ci95'][1]:.3f}]"
                       for k, r in (("BLO", blo), ("Pop", pop), ("ItemKNN", knn)))
    criterion(1, ok, "RC@5 " + detail)


# ------------------------------------------------------------------ 2, 3


def test_flips0_parity(ab_runs, criterion):
    r = ctr_rows(ab_runs[1][0][1])
    blo = r["BLO"]
    ok = all(overlap(r[b], blo) for b in ("BLOB-NQ", "BLOB-MNQ"))
    ok &= all(above(r[m], r[o]) for m in ("BLO", "BLOB-NQ", "BLOB-MNQ") for o in ("Log Reg", "Random"))
    detail = ", ".join(f"{k} {fmt(r[k])}" for k in ("BLOB-NQ", "BLOB-MNQ", "BLO", "Log Reg", "Random"))
    criterion(2, ok, "CTR% " + detail)


def test_flips50_separation(ab_runs, criterion):
    r = ctr_rows(ab_runs[1][50][1])
    parts = {}
    for b in ("BLOB-NQ", "BLOB-MNQ"):
        for o in ("BLO", "Log Reg", "CB"):
            parts[f"{b}>{o}"] = above(r[b], r[o])
    blo_low = r["BLO"]["ctr"] <= r["Random"]["ci95_high"]
    failed = [k for k, v in parts.items() if not v] + ([] if blo_low else ["BLO<=Random"])
    detail = ", ".join(f"{k} {fmt(r[k])}" for k in ("BLOB-NQ", "BLOB-MNQ", "BLO", "Log Reg", "CB", "Random"))
    criterion(3, not failed, "CTR% " + detail + (f"; unmet: {', '.join(failed)}" if failed else ""))


# ------------------------------------------------------------------ 4


def _organic_grad_errors(gen):
    K, P = 2, 5
    params, post, counts = random_instance(gen, K, P)
    psi_n, rho_n = P * K, P
    errs = {}

    # reparameterised bound, variances in log space
    eps = gen.standard_normal(K)

    def unpack_r(t):
        return (OrganicParams(t[:psi_n].reshape(P, K), t[psi_n:psi_n + rho_n]),
                DiagGaussianPosterior(t[psi_n + rho_n:psi_n + rho_n + K], np.exp(t[-K:])))

    theta = np.concatenate([params.psi.ravel(), params.rho, post.mu, np.log(post.var)])
    _, g = elbo_reparam(params, post, counts, eps, return_grad=True)
    claimed = np.concatenate([g["psi"].ravel(), g["rho"], g["mu"], g["var"] * post.var])
    errs["reparam"] = grad_check(lambda t: elbo_reparam(*unpack_r(t), counts, eps), claimed, theta)

    # Bouchard bound with a full covariance, wrt mu, Sigma, Psi, rho, a, xi
    A = gen.normal(size=(K, K))
    fpost = FullGaussianPosterior(gen.normal(size=K), A @ A.T + np.eye(K))
    b = BouchardState(gen.normal(), gen.uniform(0.1, 2, size=P))

    def unpack_b(t):
        o = 0
        psi = t[o:o + psi_n].reshape(P, K); o += psi_n
        rho = t[o:o + rho_n]; o += rho_n
        mu = t[o:o + K]; o += K
        cov = t[o:o + K * K].reshape(K, K); o += K * K
        return OrganicParams(psi, rho), FullGaussianPosterior(mu, cov), BouchardState(t[o], t[o + 1:])

    theta = np.concatenate([params.psi.ravel(), params.rho, fpost.mu, fpost.cov.ravel(), [b.a], b.xi])
    _, g = elbo_bouchard(params, fpost, b, counts, return_grad=True)
    claimed = np.concatenate([g["psi"].ravel(), g["rho"], g["mu"], g["cov"].ravel(), [g["a"]], g["xi"]])
    errs["bouchard"] = grad_check(lambda t: elbo_bouchard(*unpack_b(t), counts), claimed, theta)

    # log-concave bound, phi in log space
    phi = optimal_phi(params, post) * gen.uniform(0.5, 2)

    def unpack_l(t):
        return (OrganicParams(t[:psi_n].reshape(P, K), t[psi_n:psi_n + rho_n]),
                DiagGaussianPosterior(t[psi_n + rho_n:psi_n + rho_n + K], t[psi_n + rho_n + K:-1]), np.exp(t[-1]))

    theta = np.concatenate([params.psi.ravel(), params.rho, post.mu, post.var, [np.log(phi)]])
    _, g = elbo_logconcave(params, post, phi, counts, return_grad=True)
    claimed = np.concatenate([g["psi"].ravel(), g["rho"], g["mu"], g["var"], [g["phi"] * phi]])
    errs["logconcave"] = grad_check(lambda t: elbo_logconcave(*unpack_l(t), counts), claimed, theta)
    return errs


def _bandit_grad_error(variant, gen):
    P, K, B = 4, 2, 3
    psi = gen.normal(size=(P, K))
    L = precompute_geometry(psi)
    s = random_state(variant, P, K, gen)
    omega, actions = gen.normal(size=(B, K)), gen.integers(0, P, size=B)
    clicks, eps = gen.integers(0, 2, size=B), gen.standard_normal((B, 4))
    _, g = noisy_objective(s, psi, L, omega, actions, clicks, 50, eps=eps)
    claimed = np.concatenate([np.ravel(g[n]) for n in s.as_dict()])
    return grad_check(lambda t: noisy_objective(unflatten(s, t), psi, L, omega, actions, clicks, 50, eps=eps)[0],
                      claimed, flatten(s))


def test_gradient_correctness(criterion):
    worst = {}
    for seed in range(20):
        gen = np.random.default_rng(1000 + seed)
        for k, v in _organic_grad_errors(gen).items():
            worst[k] = max(worst.get(k, 0.0), v)
        for variant in ("NQ", "MNQ"):
            worst[f"bandit-{variant}"] = max(worst.get(f"bandit-{variant}", 0.0), _bandit_grad_error(variant, gen))
    ok = all(v < 1e-4 for v in worst.values())
    criterion(4, ok, "max rel err over 20 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ------------------------------------------------------------------ 5


def test_bound_validity(criterion):
    margins = []
    for seed in range(50):
        gen = np.random.default_rng(2000 + seed)
        params, post, counts = random_instance(gen, int(gen.integers(1, 4)), int(gen.integers(2, 8)))
        est, se = mc_elbo(params, post, counts, n=100_000, seed=seed)
        bouch = elbo_bouchard(params, post, optimise_aux(params, post), counts)
        lc = elbo_logconcave(params, post, optimal_phi(params, post), counts)
        margins.append(max(bouch, lc) - (est + 3 * se))
    worst = max(margins)
    criterion(5, worst <= 0, f"50 instances, max(bound - MC - 3se) = {worst:.3g}")


# ------------------------------------------------------------------ 6


def test_em_monotone_and_oracle(criterion):
    worst_drop = 0.0
    for seed in range(100):
        gen = np.random.default_rng(3000 + seed)
        K, P = int(gen.integers(1, 4)), int(gen.integers(2, 8))
        params, _, counts = random_instance(gen, K, P, T=int(gen.integers(1, 30)))
        post, b = FullGaussianPosterior.prior(K), BouchardState.initial(P)
        prev = elbo_bouchard(params, post, b, counts)
        for _ in range(30):
            post, b = em_cycle(params, b, post, counts)
            cur = elbo_bouchard(params, post, b, counts)
            worst_drop = min(worst_drop, cur - prev)
            prev = cur
    # K=1, P=2 oracle on weak evidence, where the bound is tight enough for 0.05
    psi = np.array([[0.5], [-0.5]])
    counts = np.array([1.0, 0.0])
    mu = infer_posterior(OrganicParams(psi, np.zeros(2)), counts, iters=200).mu[0]
    gap = abs(mu - quadrature_mean(psi, counts))
    criterion(6, worst_drop >= -1e-8 and gap < 0.05,
              f"100 instances, worst step {worst_drop:.1e}; |EM - quadrature| = {gap:.3f}")


# ------------------------------------------------------------------ 7


def test_online_em_matches_batch(criterion):
    dists = []
    for seed in range(3):
        gen = np.random.default_rng(4000 + seed)
        params, _, counts = random_instance(gen, 2, 20, T=10)
        mu, cov, a, _ = em_batch(params, counts[None], n_iter=300)
        state = online_em(params, counts, n_steps=20_000, batch_size=5, rng=seed)
        nat = np.concatenate([np.linalg.inv(cov[0]).ravel(), np.linalg.solve(cov[0], mu[0]), [a[0]]])
        dists.append(np.linalg.norm(state.as_vector() - nat))
    criterion(7, max(dists) < 1e-2, "K=2, P=20, distances " + ", ".join(f"{d:.1e}" for d in dists))


# ------------------------------------------------------------------ 8


def test_local_reparameterisation_moments(criterion):
    worst_mean, worst_var = 0.0, 0.0
    n = 10**6
    for i in range(20):
        variant = ("NQ", "MNQ")[i % 2]
        gen = np.random.default_rng(5000 + i)
        P, K = 5, 3
        psi = gen.normal(size=(P, K))
        L = precompute_geometry(psi)
        s = random_state(variant, P, K, gen)
        omega, a = gen.normal(size=K), int(gen.integers(P))
        lam = lambda_hat(s, psi, L, np.tile(omega, (n, 1)), np.full(n, a), gen.standard_normal((n, 4)))
        full = sample_lambda_full(s, psi, L, omega, a, n, rng=6000 + i)
        # the mean is compared on the scale of the spread so near-zero means are not penalised
        worst_mean = max(worst_mean, abs(lam.mean() - full.mean()) / max(abs(full.mean()), full.std()))
        worst_var = max(worst_var, abs(lam.var() / full.var() - 1))
    criterion(8, worst_mean < 0.01 and worst_var < 0.01,
              f"20 states at 1e6: mean rel {worst_mean:.2e}, var rel {worst_var:.2e}")


# ------------------------------------------------------------------ 9


def test_matrix_normal_sampler(criterion):
    gen = np.random.default_rng(7)
    P, K, n = 5, 3, 100_000
    psi = gen.normal(size=(P, K))
    L = precompute_geometry(psi)
    zeta = gen.standard_normal((n, K, K))
    draws = np.einsum("pi,nij,kj->nkp", psi, zeta, L).reshape(n, P * K)
    ana = beta_covariance(psi, L)
    rel = np.linalg.norm(draws.T @ draws / n - ana) / np.linalg.norm(ana)
    criterion(9, rel < 0.05, f"P=5, K=3, 1e5 samples: relative Frobenius {rel:.3f}")


# ------------------------------------------------------------------ 10


def test_parameter_counts(criterion):
    got = {(P, K): (initial_state("NQ", P, K).n_params, initial_state("MNQ", P, K).n_params)
           for P, K in ((10, 2), (100, 20))}
    ok = all(nq == 2 * (P + K * K + 3) and mnq == 2 * (P + 3) + K * K + 2 * K for (P, K), (nq, mnq) in got.items())
    criterion(10, ok, "; ".join(f"P={P},K={K}: NQ {nq}, MNQ {mnq}" for (P, K), (nq, mnq) in got.items()))


# ------------------------------------------------------------------ 11


def test_ips_identities(criterion):
    cfg = SimConfig(P=100, num_organic_sessions=0, num_bandit_users=1000, bandit_events_per_user=50, seed=11)
    gt = generate_ground_truth(cfg)
    log = simulate_bandit_log(gt, cfg)
    _, actions, clicks, props = log.arrays()
    H = log.history_counts(cfg.P)
    logging = session_pop_probs(H, cfg.epsilon, cfg.P)[np.arange(len(actions)), actions]
    self_ok = ips_estimate(clicks, props, logging).ctr == clicks.mean()
    uniform = ips_estimate(clicks, props, np.full(len(actions), 1.0 / cfg.P))
    direct = run_ab_test(gt, cfg, RandomAgent(cfg.P), num_users=50_000, seed=12, displays_per_user=4)
    inside = uniform.ci95[0] <= direct.ctr <= uniform.ci95[1]
    criterion(11, len(clicks) == 50_000 and self_ok and inside,
              f"self-policy exact: {self_ok}; uniform IPS {100 * uniform.ctr:.3f}% "
              f"[{100 * uniform.ci95[0]:.3f}, {100 * uniform.ci95[1]:.3f}] vs simulated {100 * direct.ctr:.3f}%")


# ------------------------------------------------------------------ 12


def test_determinism(ab_runs, tmp_path, criterion):
    root, runs = ab_runs
    cfg, first = runs[0]
    second = tmp_path / "flips0" / "run"  # same basename, so report labels agree
    run_stages(cfg, second)
    assert main(["report", str(first), "--out", str(tmp_path / "rep1")]) == 0
    assert main(["report", str(second), "--out", str(tmp_path / "rep2")]) == 0
    different = [f.name for f in sorted(first.iterdir())
                 if f.name != "config.json" and f.read_bytes() != (second / f.name).read_bytes()]
    different += [name for name in ("report.txt", "report.json", "traces.csv")
                  if (tmp_path / "rep1" / name).read_bytes() != (tmp_path / "rep2" / name).read_bytes()]
    criterion(12, not different, "two full runs, every artifact and report byte-identical"
              if not different else f"differing files: {different}")
    shutil.rmtree(second)
