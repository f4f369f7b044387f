import json
from pathlib import Path

import numpy as np
import pytest

from hieract.cli import main
from hieract.hierarchy import builtin_hierarchy, save_hierarchy
from hieract.uncertainty import score_scene

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def hfile(tmp_path, s3dis):
    path = tmp_path / "h.json"
    save_hierarchy(s3dis, path)
    return path


@pytest.fixture
def points(tmp_path, s3dis):
    rng = np.random.default_rng(3)
    n = 60
    levels = [rng.dirichlet(np.ones(s), size=n) for s in s3dis.level_sizes]
    pos = rng.uniform(0, 3, size=(n, 3))
    feat = rng.normal(size=(n, 4))
    path = tmp_path / "p.jsonl"
    with path.open("w") as f:
        for i in range(n):
            f.write(json.dumps({"id": 100 + i, "xyz": pos[i].tolist(), "feat": feat[i].tolist(),
                                "levels": [lv[i].tolist() for lv in levels]}) + "\n")
    return path, levels


class TestUsage:
    def test_no_command(self, capsys):
        code, _, err = run(capsys)
        assert code == 1 and "usage:" in err
        assert error_line(err)["exit"] == 1

    def test_missing_required_flag(self, capsys, hfile):
        code, _, err = run(capsys, "score", "--hierarchy", hfile)
        assert code == 1
        assert "usage:" in err and "--points" in error_line(err)["message"]

    def test_unknown_flag(self, capsys, hfile):
        code, _, err = run(capsys, "hierarchy", "validate", hfile, "--bogus")
        assert code == 1

    def test_simulate_needs_config(self, capsys, tmp_path):
        code, _, err = run(capsys, "simulate", "--out-dir", tmp_path)
        assert code == 1


class TestHierarchy:
    def test_validate(self, capsys, hfile):
        code, out, _ = run(capsys, "hierarchy", "validate", hfile)
        assert code == 0
        assert json.loads(out)["level_sizes"] == [3, 6, 13]

    def test_cycle_names_node(self, capsys, tmp_path):
        bad = tmp_path / "cycle.json"
        bad.write_text(json.dumps({"levels": [["r"], ["a", "b"]], "parents": {"a": "b", "b": "a"}}))
        code, _, err = run(capsys, "hierarchy", "validate", bad)
        info = error_line(err)
        assert code == 2 and info["error"] == "CycleDetected"
        assert "'a'" in info["message"] or "'b'" in info["message"]
        assert len(err.strip().splitlines()) == 1

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "hierarchy", "validate", tmp_path / "nope.json")
        assert code == 2

    def test_generate_offline(self, capsys, tmp_path):
        labels = tmp_path / "labels.txt"
        labels.write_text("\n".join(builtin_hierarchy().level_names(2)) + "\n")
        out = tmp_path / "gen.json"
        code, stdout, _ = run(capsys, "hierarchy", "generate", "--labels", labels, "--depth", 3,
                              "--out", out, "--offline", FIXTURES / "refine")
        assert code == 0 and json.loads(stdout)["iterations"] == 2
        assert json.loads(out.read_text())["levels"][0] == ["building structure", "furniture", "accessory"]

    def test_generate_exhausted(self, capsys, tmp_path):
        labels = tmp_path / "labels.txt"
        labels.write_text("\n".join(builtin_hierarchy().level_names(2)) + "\n")
        replies = tmp_path / "replies"
        replies.mkdir()
        (replies / "a.md").write_text((FIXTURES / "taxonomy" / "missing_sofa.md").read_text())
        code, _, err = run(capsys, "hierarchy", "generate", "--labels", labels, "--out", tmp_path / "o.json",
                           "--offline", replies, "--max-iterations", 1)
        assert code == 2 and error_line(err)["error"] == "ExhaustedIterations"

    def test_generate_without_endpoint(self, capsys, tmp_path, monkeypatch):
        monkeypatch.delenv("HIERACT_LLM_ENDPOINT", raising=False)
        labels = tmp_path / "labels.txt"
        labels.write_text("a\nb\n")
        code, _, err = run(capsys, "hierarchy", "generate", "--labels", labels, "--depth", 2,
                           "--out", tmp_path / "o.json")
        assert code == 3


class TestScoreSelect:
    def test_score_matches_library(self, capsys, tmp_path, hfile, points, s3dis):
        path, levels = points
        out = tmp_path / "s.jsonl"
        code, _, _ = run(capsys, "score", "--hierarchy", hfile, "--points", path, "--omega", 0.1, "--out", out)
        assert code == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 60 and rows[0]["id"] == 100
        ref = score_scene(s3dis, levels, 0.1)
        got = np.array([r["score"] for r in rows])
        assert np.max(np.abs(got - ref.scores)) < 1e-12
        assert np.max(np.abs(np.array([r["u"] for r in rows]) - ref.uncertainty)) < 1e-15

    def test_score_skips_labeled(self, capsys, tmp_path, hfile, points):
        path, _ = points
        lab = tmp_path / "lab.json"
        lab.write_text(json.dumps([100, 101, 102]))
        out = tmp_path / "s.jsonl"
        assert run(capsys, "score", "--hierarchy", hfile, "--points", path, "--labeled", lab, "--out", out)[0] == 0
        assert len(out.read_text().splitlines()) == 57

    def test_score_idempotent(self, capsys, tmp_path, hfile, points):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for o in (a, b):
            run(capsys, "score", "--hierarchy", hfile, "--points", points[0], "--out", o, "--seed", 4)
        assert a.read_bytes() == b.read_bytes()

    def test_score_bad_distribution(self, capsys, tmp_path, hfile):
        p = tmp_path / "p.jsonl"
        p.write_text(json.dumps({"id": 0, "levels": [[0.9, 0.9, 0.9], [1] + [0] * 5, [1] + [0] * 12]}) + "\n")
        code, _, err = run(capsys, "score", "--hierarchy", hfile, "--points", p, "--out", tmp_path / "s")
        assert code == 2 and error_line(err)["error"] == "DomainError"

    def test_score_bad_json(self, capsys, tmp_path, hfile):
        p = tmp_path / "p.jsonl"
        p.write_text("{nope\n")
        code, _, err = run(capsys, "score", "--hierarchy", hfile, "--points", p, "--out", tmp_path / "s")
        assert code == 2 and error_line(err)["error"] == "ParseFailure"

    def test_select(self, capsys, tmp_path, hfile, points):
        path, _ = points
        scores = tmp_path / "s.jsonl"
        run(capsys, "score", "--hierarchy", hfile, "--points", path, "--out", scores)
        out = tmp_path / "sel.json"
        code, _, _ = run(capsys, "select", "--hierarchy", hfile, "--points", path, "--scores", scores,
                         "--budget-frac", 0.1, "--voxel-sizes", "0.5,1.0", "--fds-threshold", 0.9,
                         "--fds-radius", 0.5, "--round", 2, "--out", out)
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["round"] == 2 and len(doc["selected"]) == 6
        assert all(100 <= i < 160 for i in doc["selected"] + doc["rejected_by_fds"])

    def test_select_bad_voxel_sizes(self, capsys, tmp_path, hfile, points):
        code, _, _ = run(capsys, "select", "--hierarchy", hfile, "--points", points[0], "--scores", points[0],
                         "--voxel-sizes", "a,b", "--out", tmp_path / "o")
        assert code == 1


class TestFuse:
    def test_train_eval(self, capsys, tmp_path, hfile):
        data = tmp_path / "d.jsonl"
        assert run(capsys, "fuse", "synth", "--hierarchy", hfile, "--num", 300, "--out", data, "--seed", 1)[0] == 0
        ckpt = tmp_path / "f.ckpt"
        code, out, _ = run(capsys, "fuse", "train", "--hierarchy", hfile, "--data", data, "--hidden", 8,
                           "--epochs", 3, "--lr", 0.1, "--seed", 2, "--ckpt", ckpt)
        assert code == 0 and len(json.loads(out)["losses"]) == 3
        code, out, _ = run(capsys, "fuse", "eval", "--hierarchy", hfile, "--data", data, "--ckpt", ckpt)
        acc = json.loads(out)["accuracy"]
        assert code == 0 and set(acc) == {"attention", "simple-add", "weighted-add", "fine-only"}

    def test_eval_wrong_hierarchy(self, capsys, tmp_path, hfile):
        data = tmp_path / "d.jsonl"
        run(capsys, "fuse", "synth", "--hierarchy", hfile, "--num", 20, "--out", data)
        ckpt = tmp_path / "f.ckpt"
        run(capsys, "fuse", "train", "--hierarchy", hfile, "--data", data, "--hidden", 4, "--epochs", 1, "--ckpt", ckpt)
        alt = tmp_path / "alt.json"
        save_hierarchy(builtin_hierarchy("s3dis_alt"), alt)
        code, _, err = run(capsys, "fuse", "eval", "--hierarchy", alt, "--data", data, "--ckpt", ckpt)
        assert code == 2


class TestSimulateReport:
    def test_simulate_and_report(self, capsys, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(
            "num_scenes: 1\npoints_per_scene: 400\nnum_blobs: 13\nsteps: 20\nrounds: 2\n"
            "budget_fraction: 0.01\nseeds: [1, 2]\n"
            "variants:\n  full: {}\n  random: {acquisition: random}\n"
        )
        outs = [tmp_path / "a", tmp_path / "b"]
        for o in outs:
            code, stdout, _ = run(capsys, "simulate", "--config", cfg, "--out-dir", o)
            assert code == 0 and json.loads(stdout)["runs"] == 4
        for name in ("report.json", "metrics.csv", "curves.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        code, table, _ = run(capsys, "report", outs[0] / "metrics.csv")
        assert code == 0 and "random" in table and "seeds" in table

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("roundz: 2\n")
        code, _, err = run(capsys, "simulate", "--config", cfg, "--out-dir", tmp_path / "o")
        assert code == 2 and "roundz" in error_line(err)["message"]

    def test_global_options_before_command(self, capsys, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"num_scenes": 1, "points_per_scene": 200, "num_blobs": 13,
                                   "steps": 5, "rounds": 1, "budget_fraction": 0.01}))
        code, stdout, _ = run(capsys, "--seed", 7, "--config", cfg, "--out-dir", tmp_path / "o",
                              "--log-level", "info", "simulate")
        assert code == 0 and list(json.loads(stdout)["final_miou"]) == ["full/7"]

    def test_report_bad_csv(self, capsys, tmp_path):
        bad = tmp_path / "m.csv"
        bad.write_text("a,b\n1,2\n")
        code, _, err = run(capsys, "report", bad)
        assert code == 2
