import json

import pytest

from apb.cli import main
from apb.errors import StructuralError
from apb.meta import ActorSpec, MetaTrainConfig, meta_train
from apb.records import read_json, read_metrics
from apb.report import build_report, load_runs, summarize

# budgets small enough for a unit test; the acceptance suite runs the real ones
TINY_ADAPT = ["n_trajectories=2", "n_updates=10", "batch_size=32", "total_episodes=4", "warmup_steps=200",
              "reset_every=2", "eval_episodes=2"]


@pytest.fixture(scope="module")
def backbone_file(tmp_path_factory):
    cfg = MetaTrainConfig(n_tasks=2, n_trajectories=1, updates_per_cycle=5, batch_size=32, warmup_steps=200,
                          max_cycles=3, eval_episodes=1, actor=ActorSpec())
    return meta_train(cfg, "vel-line").save(tmp_path_factory.mktemp("bb") / "backbone.npz")


def only_run(root):
    runs = [p for p in root.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


class TestVerifyTheory:
    def test_built_in_suite(self, tmp_path, capsys):
        code = main(["verify-theory", "--trials", "20", "--output-root", str(tmp_path)])
        assert code == 0
        assert "PASS" in capsys.readouterr().out
        run = only_run(tmp_path)
        records = [json.loads(l) for l in (run / "theory.jsonl").read_text().splitlines()]
        assert all({"check", "max_deviation", "tolerance", "passed"} <= set(r) for r in records)
        assert read_json(run / "run.json")["outcome"] == "completed"

    def test_seed_and_trials(self, tmp_path, capsys):
        report = tmp_path / "t.jsonl"
        assert main(["verify-theory", "--seed", "7", "--trials", "100", "--report", str(report),
                     "--output-root", str(tmp_path)]) == 0
        bounds = [json.loads(l) for l in report.read_text().splitlines() if '"theorem2-bound"' in l]
        assert len(bounds) == 100 and all(b["passed"] for b in bounds)

    def test_corrupted_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.txt"
        bad.write_text("2 1 0.9\n1.0 0.0\n0.9 0.0\n0 0\n")
        code = main(["verify-theory", str(bad), "--output-root", str(tmp_path / "runs")])
        assert code != 0
        assert "row 1 (state 1, action 0)" in capsys.readouterr().err


class TestConfigErrors:
    def test_unknown_override_key(self, tmp_path, capsys):
        code = main(["adapt", "--override", "learning_rate=3", "--output-root", str(tmp_path)])
        assert code == 2
        assert "adapt.learning_rate" in capsys.readouterr().err

    def test_unknown_file_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("meta_train:\n  tasks: 3\n")
        assert main(["meta-train", "--config", str(cfg), "--output-root", str(tmp_path)]) == 2
        assert "meta_train.tasks" in capsys.readouterr().err

    def test_apb_needs_backbone(self, tmp_path, capsys):
        assert main(["adapt", "--method", "apb", "--output-root", str(tmp_path)]) == 2


class TestAdaptCommand:
    def run(self, root, backbone, *extra):
        args = ["adapt", "--family", "vel-line", "--ood", "--backbone", str(backbone), "--seeds", "0",
                "--output-root", str(root), "--override", *TINY_ADAPT, *extra]
        assert main(args) == 0
        return only_run(root)

    def test_ood_run_layout(self, tmp_path, backbone_file):
        run = self.run(tmp_path, backbone_file)
        manifest = read_json(run / "run.json")
        assert manifest["task"]["parameter"] == -2.0 and manifest["task"]["is_ood"]
        assert manifest["outcome"] == "completed" and len(manifest["config_hash"]) == 64
        subdirs = sorted(p.name for p in run.iterdir() if p.is_dir())
        assert subdirs == ["apb-action-seed0", "apb-parameter-seed0", "baseline-action-seed0",
                           "baseline-parameter-seed0"]
        for d in subdirs:
            assert len(read_metrics(run / d / "metrics.csv")) == 4
        assert read_json(run / "apb-action-seed0" / "result.json")["backbone_constant"]
        assert (run / "config.yaml").exists() and (run / "summary.txt").exists()

    def test_rerun_is_bit_identical(self, tmp_path, backbone_file):
        a = self.run(tmp_path / "a", backbone_file)
        b = self.run(tmp_path / "b", backbone_file)
        for d in ("apb-parameter-seed0", "baseline-action-seed0"):
            assert (a / d / "metrics.csv").read_bytes() == (b / d / "metrics.csv").read_bytes()
        assert (a / "config.yaml").read_bytes() == (b / "config.yaml").read_bytes()

    def test_report_pairs_methods(self, tmp_path, backbone_file, capsys):
        run = self.run(tmp_path, backbone_file)
        capsys.readouterr()
        assert main(["report", str(run), "--csv", str(tmp_path / "s.csv")]) == 0
        out = capsys.readouterr().out
        verdicts = [l for l in out.splitlines() if "->" in l]
        assert len(verdicts) == 1 and verdicts[0].startswith("vel-line:")
        assert (tmp_path / "s.csv").read_text().startswith("family,method,protocol")


class TestReport:
    def fake_run(self, root, method, seed, final, family="vel-line"):
        d = root / f"{method}-action-seed{seed}"
        d.mkdir(parents=True)
        (d / "result.json").write_text(json.dumps({"family": family, "method": method, "protocol": "action",
                                                   "seed": seed, "final_return": final, "outcome": "completed"}))

    def test_single_run(self, tmp_path):
        self.fake_run(tmp_path, "apb", 0, -3.5)
        summary = summarize(load_runs([tmp_path]))
        assert len(summary) == 1 and summary[0]["mean"] == -3.5 and summary[0]["std"] == 0.0

    def test_verdict_direction(self, tmp_path):
        for s, (a, b) in enumerate([(-2.0, -5.0), (-4.0, -3.0)]):
            self.fake_run(tmp_path, "apb", s, a)
            self.fake_run(tmp_path, "baseline", s, b)
        _, lines, _ = build_report([tmp_path])
        assert lines == ["vel-line: apb[action] -3.000 >= baseline[action] -4.000 -> PASS"]

    def test_mismatched_families(self, tmp_path):
        self.fake_run(tmp_path, "apb", 0, -1.0, family="vel-line")
        self.fake_run(tmp_path, "baseline", 0, -1.0, family="goal-plane")
        with pytest.raises(StructuralError, match="only one method"):
            build_report([tmp_path])

    def test_empty_directory(self, tmp_path, capsys):
        with pytest.raises(StructuralError):
            load_runs([tmp_path])
        assert main(["report", str(tmp_path)]) == 2
