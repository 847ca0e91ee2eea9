import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgetlab import experiment as E
from forgetlab.experiment import (
    DEFAULT_SGD,
    LPFT_LR,
    BenchmarkSpec,
    ConfigError,
    UpstreamSpec,
    config_hash,
    load_config,
    load_results,
    parse_config,
    pretrain,
    run_sweep,
    task_order,
)
from forgetlab.learners import LearnerConfig, run_continual, train_erm
from forgetlab.metrics import accuracy, fill_accuracy_matrix, forgetting_per_task, upstream_accuracy
from forgetlab.nn import init_model
from forgetlab.tasks import gen_split_benchmark, gen_upstream_task

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
GOLDEN = Path(__file__).resolve().parent / "golden"


def tiny(tmp_path, **over):
    raw = {
        "name": "tiny",
        "seeds": [0],
        "benchmark": {"n_tasks": 3, "per_class": [30, 10, 20]},
        "sgd": {"epochs": 2},
        "learners": [{"name": "FT", "kind": "FT"}],
        "eval": {"k": [5]},
        "output_dir": str(tmp_path),
    }
    raw.update(over)
    return parse_config(raw)


class TestParse:
    def test_shipped_configs_load(self):
        for p in sorted(CONFIGS.glob("*.yaml")):
            assert load_config(p).learners

    def test_defaults(self, tmp_path):
        cfg = tiny(tmp_path, sgd={})
        assert cfg.learners[0].config.sgd == DEFAULT_SGD
        assert cfg.widths == (16, 64, 32) and cfg.head_mode == "multi"

    def test_lam_list_is_grid(self, tmp_path):
        cfg = tiny(tmp_path, learners=[{"name": "MT", "kind": "MT", "lam": [1.0, 0.1]}])
        assert cfg.learners[0].lam_grid == (1.0, 0.1)

    def test_lpft_rate(self, tmp_path):
        cfg = tiny(tmp_path, learners=[{"kind": "LPFT"}, {"name": "B", "kind": "LPFT", "sgd": {"lr": 0.05}}])
        assert [l.config.sgd.lr for l in cfg.learners] == [LPFT_LR, 0.05]

    def test_output_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(E.OUTPUT_ENV, str(tmp_path / "env"))
        raw = {"learners": [{"kind": "FT"}]}
        assert parse_config(raw).output_dir == str(tmp_path / "env")

    @pytest.mark.parametrize("over", [
        {"seeds": [0, 0]},
        {"eval": {"k": [0]}},
        {"learners": []},
        {"learners": [{"kind": "NOPE"}]},
        {"learners": [{"kind": "FT"}, {"kind": "FT"}]},
        {"init": "imagenet"},
        {"sgd": {"momentum": 0.9}},
        {"sgd": {"lr": -1}},
        {"surprise": 1},
        {"model": {"widths": [8, 4]}},
        {"benchmark": {"n_tasks": 3, "colour": "red"}},
    ])
    def test_invalid(self, tmp_path, over):
        with pytest.raises(ConfigError):
            tiny(tmp_path, **over)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")
        (tmp_path / "bad.yaml").write_text("- just\n- a list\n")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.yaml")


class TestConfigHash:
    def test_stable(self, tmp_path):
        assert config_hash(tiny(tmp_path), "FT", 0) == config_hash(tiny(tmp_path), "FT", 0)

    def test_ignores_placement(self, tmp_path):
        a = tiny(tmp_path)
        b = dataclasses.replace(a, output_dir="elsewhere", workers=4, seeds=(0, 1, 2))
        assert config_hash(a, "FT", 0) == config_hash(b, "FT", 0)

    def test_seed_matters(self, tmp_path):
        assert config_hash(tiny(tmp_path), "FT", 0) != config_hash(tiny(tmp_path), "FT", 1)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([
        ("benchmark", {"n_tasks": 4, "per_class": [30, 10, 20]}),
        ("benchmark", {"n_tasks": 3, "per_class": [30, 10, 20], "sigma": 2.0}),
        ("sgd", {"epochs": 3}),
        ("sgd", {"epochs": 2, "lr": 0.05}),
        ("eval", {"k": [5, 10]}),
        ("eval", {"k": [5], "fdiv": False}),
        ("learners", [{"name": "FT", "kind": "FT", "m": 20}]),
        ("init", "pretrained"),
    ]))
    def test_changes_with_any_field(self, change):
        base = tiny(Path("/tmp"))
        other = tiny(Path("/tmp"), **{change[0]: change[1]})
        assert config_hash(base, "FT", 0) != config_hash(other, "FT", 0)


class TestTaskOrder:
    def test_seeded_permutation(self):
        assert sorted(task_order(5, 3, True)) == [0, 1, 2, 3, 4]
        assert task_order(5, 3, True) == task_order(5, 3, True)
        assert len({tuple(task_order(5, s, True)) for s in range(10)}) > 1

    def test_fixed_when_disabled(self):
        assert task_order(5, 3, False) == [0, 1, 2, 3, 4]


class TestSweep:
    def test_one_run_one_file(self, tmp_path):
        cfg = tiny(tmp_path)
        res = run_sweep(cfg)
        assert len(res) == 1 and res[0].error is None
        assert len(list((tmp_path / "tiny").glob("*/*/report.json"))) == 1
        assert (tmp_path / "tiny" / "FT" / "0" / "phi_after_task_2").exists()

    def test_resume_skips_matching_runs(self, tmp_path, monkeypatch):
        cfg = tiny(tmp_path)
        first = run_sweep(cfg)

        def boom(*a, **k):
            raise AssertionError("should have been skipped")

        monkeypatch.setattr(E, "run_one", boom)
        again = run_sweep(cfg)
        assert again[0].report == first[0].report

    def test_changed_config_reruns(self, tmp_path):
        run_sweep(tiny(tmp_path))
        changed = tiny(tmp_path, sgd={"epochs": 3})
        res = run_sweep(changed)
        assert res[0].config_hash == config_hash(changed, "FT", 0)

    def test_failure_recorded_and_sweep_continues(self, tmp_path):
        cfg = tiny(tmp_path, learners=[
            {"name": "BAD", "kind": "FT", "sgd": {"lr": float("inf"), "epochs": 2}},
            {"name": "FT", "kind": "FT"},
        ])
        with np.errstate(all="ignore"):
            res = {r.learner: r for r in run_sweep(cfg)}
        assert "TrainingError" in res["BAD"].error and res["BAD"].report is None
        assert res["FT"].error is None

    def test_failed_runs_are_retried(self, tmp_path, monkeypatch):
        cfg = tiny(tmp_path)
        monkeypatch.setattr(E, "run_one", lambda *a: (_ for _ in ()).throw(RuntimeError("flaky")))
        assert run_sweep(cfg)[0].error
        monkeypatch.undo()
        assert run_sweep(cfg)[0].error is None

    def test_results_reload(self, tmp_path):
        res = run_sweep(tiny(tmp_path, seeds=[0, 1]))
        back = load_results(tmp_path / "tiny")
        assert [r.to_dict() for r in back] == [r.to_dict() for r in res]

    def test_worker_pool_matches_serial(self, tmp_path):
        serial = run_sweep(tiny(tmp_path / "a", seeds=[0, 1]))
        pooled = run_sweep(tiny(tmp_path / "b", seeds=[0, 1], workers=2))
        assert [r.report.to_dict() for r in pooled] == [r.report.to_dict() for r in serial]

    def test_task_order_recorded(self, tmp_path):
        res = run_sweep(tiny(tmp_path, seeds=[0, 1]))
        assert [r.task_order for r in res] == [task_order(3, 0, True), task_order(3, 1, True)]

    def test_lambda_selected_and_recorded(self, tmp_path):
        cfg = tiny(tmp_path, learners=[{"name": "MT", "kind": "MT", "lam": [1.0, 0.1]}])
        r = run_sweep(cfg)[0]
        assert r.lam in (1.0, 0.1)

    def test_diverging_candidate_never_selected(self, tmp_path, monkeypatch):
        cfg = tiny(tmp_path, learners=[{"name": "MT", "kind": "MT", "lam": [1.0, 0.1]}])

        def score(c, learner, seed):
            if learner.lam == 1.0:
                return float("-inf")
            return 0.0

        monkeypatch.setattr(E, "validation_score", score)
        assert E.resolve_learner(cfg, cfg.learners[0]).lam == 0.1


class TestReferenceRuns:
    def test_pretrained_upstream_probe(self):
        up = gen_upstream_task(per_class=(200, 50, 100), sigma=0.3)
        model, _ = pretrain([16, 64, 32], 0, up, UpstreamSpec(sigma=0.3))
        assert upstream_accuracy(model.extractor, up, probe=True) > 0.9

    def test_zero_drift_no_forgetting(self):
        seq = BenchmarkSpec(kind="drifting", n_tasks=4, drift_step=0.0, randomize_order=False).build()
        f0 = init_model([16, 64, 32], 0, head_mode="single", total_classes=4)
        trace = run_continual(seq, LearnerConfig("FT", DEFAULT_SGD), 0, f0)
        fgt = forgetting_per_task(fill_accuracy_matrix(trace, seq))
        assert max(abs(f) for f in fgt) <= 0.05

    def test_single_task_erm_golden(self):
        golden = json.loads((GOLDEN / "erm_baseline.json").read_text())["test_accuracy"]
        for s, want in golden.items():
            s = int(s)
            task = gen_split_benchmark(1, 2, input_dim=16, sigma=1.0, seed=s)[0]
            m = init_model([16, 64, 32], s)
            train_erm(m, task, DEFAULT_SGD, np.random.default_rng([s, 0]))
            assert accuracy(m, task) == want
