import json

import numpy as np
import pytest

from blobrec.cli import ABTEST_SCHEMA, main, validate_report
from blobrec.config import DEFAULT_AGENTS, load_config, parse_config
from blobrec.exceptions import InvalidConfig

STAGES = ["simulate", "train-organic", "train-bandit", "evaluate-organic", "abtest"]

TINY = {
    "seed": 3,
    "sim": {"P": 12, "K_true": 2, "num_organic_sessions": 120, "num_bandit_users": 60,
            "bandit_events_per_user": 10, "calibration_samples": 10000, "target_random_ctr": 0.05},
    "organic": {"K": 2, "epochs": 3, "em_iters": 20},
    "bandit": {"epochs": 3, "batch_size": 256},
    "agents": DEFAULT_AGENTS + [{"name": "Oracle", "kind": "oracle"}],
    "abtest": {"num_users": 300},
    "evaluation": {"num_test_sessions": 50, "bootstrap": 50},
}


def write_cfg(tmp_path, cfg=TINY, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run_pipeline(cfg_path, out):
    for stage in STAGES:
        assert main([stage, "--config", cfg_path, "--out", str(out)]) == 0, stage


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    run_pipeline(cfg, tmp / "run")
    return tmp, cfg


class TestConfig:
    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.sim.P == 100 and cfg.sim.epsilon == 0.3
        assert [a["kind"] for a in cfg.agents] == [a["kind"] for a in DEFAULT_AGENTS]

    def test_field_level_errors(self):
        with pytest.raises(InvalidConfig) as exc:
            parse_config({"sim": {"flips": 7, "P": 10}, "organic": {"bound": "nope"},
                          "agents": [{"kind": "mystery"}], "extra": 1})
        assert {"sim.flips", "organic.bound", "agents[0].kind", "extra"} <= set(exc.value.errors)

    def test_seed_override(self):
        cfg = parse_config({"seed": 1}, seed_override=9)
        assert cfg.seed == 9 and cfg.sim.seed == 9

    def test_hash_ignores_output_dir(self):
        assert parse_config({}, output_override="a").hash == parse_config({}, output_override="b").hash
        assert parse_config({"seed": 1}).hash != parse_config({"seed": 2}).hash

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "none.json")


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"sim": {"P": 10, "flips": 6}})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "sim.flips" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["simulate", "--config", str(p)]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 3

    def test_bandit_without_organic_model(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        assert main(["train-bandit", "--config", cfg, "--out", str(out)]) == 3

    def test_version_mismatch(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        main(["simulate", "--config", cfg, "--out", str(out)])
        gt = json.loads((out / "ground_truth.json").read_text())
        gt["format_version"] = 99
        (out / "ground_truth.json").write_text(json.dumps(gt))
        assert main(["abtest", "--config", cfg, "--out", str(out), "--agents", "Random"]) == 2

    def test_numerical_failure(self, tmp_path, monkeypatch):
        import blobrec.cli
        from blobrec.exceptions import CalibrationFailed

        def fail(sim):
            raise CalibrationFailed("unreachable CTR")

        monkeypatch.setattr(blobrec.cli, "generate_ground_truth", fail)
        assert main(["simulate", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "o")]) == 4


class TestSimulate:
    def test_event_count(self, tmp_path):
        cfg = write_cfg(tmp_path, {"sim": {"num_organic_sessions": 1000, "num_bandit_users": 0}})
        out = tmp_path / "run"
        assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "organic.jsonl").read_text().splitlines()
        header, n_events = json.loads(lines[0]), len(lines) - 1
        assert header["format_version"] == 1 and header["kind"] == "organic_sessions"
        # truncation at length 1 is negligible at mean 20
        assert abs(n_events - 20_000) < 3 * np.sqrt(20_000)

    def test_ground_truth_marked(self, pipeline):
        tmp, _ = pipeline
        gt = json.loads((tmp / "run" / "ground_truth.json").read_text())
        assert gt["observable"] is False


class TestPipeline:
    def test_outputs_carry_version_and_hash(self, pipeline):
        tmp, cfg = pipeline
        h = load_config(cfg).hash
        out = tmp / "run"
        for name in ("blo.json", "blob_nq.json", "blob_mnq.json", "abtest.json", "organic_metrics.json",
                     "ground_truth.json"):
            d = json.loads((out / name).read_text())
            assert d["format_version"] == 1 and d["config_hash"] == h, name
        for name in ("organic.jsonl", "bandit.jsonl", "test_organic.jsonl"):
            head = json.loads((out / name).read_text().splitlines()[0])
            assert head["config_hash"] == h
        assert (out / "blo_trace.csv").read_text().startswith("epoch,elbo")

    def test_rerun_identical(self, pipeline, tmp_path):
        tmp, cfg = pipeline
        run_pipeline(cfg, tmp_path / "again")
        for f in sorted((tmp / "run").iterdir()):
            other = tmp_path / "again" / f.name
            if f.name == "config.json":
                # the resolved config records its own output directory
                a, b = json.loads(f.read_text()), json.loads(other.read_text())
                assert a.pop("output_dir") != b.pop("output_dir") and a == b
            else:
                assert f.read_bytes() == other.read_bytes(), f.name

    def test_abtest_report(self, pipeline, capsys):
        tmp, cfg = pipeline
        doc = json.loads((tmp / "run" / "abtest.json").read_text())
        assert validate_report(doc, ABTEST_SCHEMA)
        names = [r["agent"] for r in doc["rows"]]
        assert "Random" in names and "Oracle" in names
        bad = dict(doc, rows=[{k: v for k, v in doc["rows"][0].items() if k != "ctr"}])
        with pytest.raises(ValueError):
            validate_report(bad)

    def test_agent_filter(self, pipeline, tmp_path, capsys):
        tmp, cfg = pipeline
        import shutil

        out = tmp_path / "sub"
        shutil.copytree(tmp / "run", out)
        assert main(["abtest", "--config", cfg, "--out", str(out), "--agents", "Random,blo"]) == 0
        rows = json.loads((out / "abtest.json").read_text())["rows"]
        assert [r["agent"] for r in rows] == ["Random", "BLO"]
        full = {r["agent"]: r for r in json.loads((tmp / "run" / "abtest.json").read_text())["rows"]}
        assert rows[0] == full["Random"]  # common random numbers: same users, same clicks

    def test_report_single_and_missing(self, pipeline, tmp_path, capsys):
        tmp, cfg = pipeline
        import shutil

        other = tmp_path / "other"
        shutil.copytree(tmp / "run", other)
        doc = json.loads((other / "abtest.json").read_text())
        doc["rows"] = [r for r in doc["rows"] if r["agent"] != "CB"]
        (other / "abtest.json").write_text(json.dumps(doc))
        assert main(["report", str(tmp / "run"), "--out", str(tmp_path / "r1")]) == 0
        single = json.loads((tmp_path / "r1" / "report.json").read_text())
        ab = json.loads((tmp / "run" / "abtest.json").read_text())["rows"]
        col = single["runs"][0]
        assert [round(r[col], 10) for r in single["abtest"]] == [round(100 * r["ctr"], 10) for r in ab]
        assert main(["report", str(tmp / "run"), str(other), "--out", str(tmp_path / "r2")]) == 0
        text = (tmp_path / "r2" / "report.txt").read_text()
        cb = [line for line in text.splitlines() if line.startswith("CB ")][0]
        assert cb.split()[-1] == "-"
        assert (tmp_path / "r2" / "traces.csv").exists()

    def test_report_nothing(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 3

    def test_thread_cap(self, pipeline, tmp_path, monkeypatch):
        tmp, cfg = pipeline
        monkeypatch.setenv("BLOB_THREADS", "1")
        assert main(["report", str(tmp / "run"), "--out", str(tmp_path / "r")]) == 0
