"""End-to-end tests for the experiment runner on tiny configurations"""

import csv
import json
import os

import numpy as np
import pytest

from src.config import load_config
from src.exceptions import ConfigError, ContractError
from src.experiment import ExperimentRunner, GRADCHECK_TOLERANCE, load_model, run_gradcheck
from src.tasks import load_dataset


@pytest.fixture
def slow():
    """Long runs only when asked for"""
    if os.getenv("FORCING_LAB_SLOW") != "1":
        pytest.skip("FORCING_LAB_SLOW not set")


TINY = {
    "task.vocab_size": 5,
    "task.min_len": 2,
    "task.max_len": 4,
    "task.frame_dim": 2,
    "task.train_size": 6,
    "task.valid_size": 2,
    "model.embed_dim": 4,
    "model.hidden_dim": 6,
    "model.encoder_dim": 6,
    "model.attention_dim": 4,
    "model.location_filters": 2,
    "model.location_kernel": 3,
    "model.max_source_len": 8,
    "optimizer.batch_size": 3,
    "optimizer.learning_rate": 0.01,
    "training.epochs": 2,
    "evaluation.max_length": 8,
    "evaluation.beam_width": 2,
    "cascade.hidden_dim": 4,
    "cascade.epochs": 2,
}


def tiny_runner(out_dir, **overrides):
    """Runner over a tiny copy task writing under out_dir"""
    return ExperimentRunner(load_config(overrides={**TINY, "output.dir": str(out_dir), **overrides}))


def read_jsonl(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class TestMakeData:
    """Dataset generation"""

    def test_writes_splits(self, tmp_path):
        """Train and valid files have the configured sizes"""
        paths = tiny_runner(tmp_path).cmd_make_data()
        assert len(load_dataset(paths["train"])) == 6
        assert len(load_dataset(paths["valid"])) == 2

    def test_frame_task_has_waveforms(self, tmp_path):
        """Expansion records carry their reference waveform"""
        paths = tiny_runner(tmp_path, **{"task.kind": "expansion"}).cmd_make_data()
        for pair in load_dataset(paths["train"]):
            assert len(pair.wave) == 4 * pair.y.shape[0]

    def test_configured_files_are_used(self, tmp_path):
        """Dataset files replace generation"""
        paths = tiny_runner(tmp_path / "gen").cmd_make_data()
        runner = tiny_runner(tmp_path / "run", **{"task.train_file": paths["train"],
                                                  "task.valid_file": paths["valid"]})
        train, valid = runner.load_splits()
        assert [p.x for p in train] == [p.x for p in load_dataset(paths["train"])]
        assert len(valid) == 2


class TestTrainEvaluateGenerate:
    """The main workflow on a copy task"""

    @pytest.fixture
    def trained(self, tmp_path):
        runner = tiny_runner(tmp_path)
        paths = runner.cmd_make_data()
        summary = runner.cmd_train()
        return runner, paths, summary

    def test_train_outputs(self, trained):
        """A checkpoint and per-step metric records are written"""
        runner, _, summary = trained
        assert os.path.exists(summary.checkpoint_path)
        records = read_jsonl(summary.metrics_path)
        assert {"loss", "grad_norm"} <= {r["name"] for r in records}
        assert summary.step == 4
        assert load_model(summary.checkpoint_path).dims == runner.config.task_dims()

    def test_evaluate(self, trained):
        """Evaluation reports BLEU and alignment diagnostics"""
        runner, paths, summary = trained
        metrics = runner.cmd_evaluate(summary.checkpoint_path, paths["valid"])
        assert 0.0 <= metrics["bleu"] <= 1.0
        assert 0.0 <= metrics["truncated_rate"] <= 1.0
        stored = read_jsonl(os.path.join(runner.out_dir, "eval.jsonl"))
        assert all(r["split"] == "valid" for r in stored)

    @pytest.mark.parametrize("mode", ["free", "teacher_forced", "attention_forced", "beam"])
    def test_generate(self, trained, mode):
        """Every mode writes one record per input"""
        runner, paths, summary = trained
        output = runner.cmd_generate(summary.checkpoint_path, paths["valid"], mode=mode)
        records = read_jsonl(output)
        assert len(records) == 2
        if mode in ("teacher_forced", "attention_forced"):
            references = load_dataset(paths["valid"])
            assert [len(r["out"]) for r in records] == [len(p.y) for p in references]
        if mode == "beam":
            assert all(1 <= len(r["beam"]) <= 2 for r in records)

    def test_guided_generation_needs_targets(self, trained, tmp_path):
        """Source-only input cannot drive teacher forcing"""
        _, _, summary = trained
        path = tmp_path / "src.jsonl"
        path.write_text(json.dumps({"src": [1, 2]}) + "\n", encoding="utf-8")
        with pytest.raises(ContractError):
            tiny_runner(tmp_path).cmd_generate(summary.checkpoint_path, str(path), mode="teacher_forced")

    def test_unknown_mode(self, trained):
        """Generation modes are validated"""
        runner, paths, summary = trained
        with pytest.raises(ContractError):
            runner.cmd_generate(summary.checkpoint_path, paths["valid"], mode="nucleus")


class TestAttentionForcingRuns:
    """Teacher handling for attention forcing"""

    def test_needs_teacher(self, tmp_path):
        """Untied attention forcing without a teacher is refused"""
        with pytest.raises(ContractError):
            tiny_runner(tmp_path, **{"regime.name": "af"}).cmd_train()

    def test_train_teacher_first(self, tmp_path):
        """--train-teacher runs a teacher-forcing phase before the student"""
        runner = tiny_runner(tmp_path, **{"regime.name": "af", "regime.teacher_epochs": 1})
        summary = runner.cmd_train(train_teacher=True)
        assert summary.teacher_path == os.path.join(runner.out_dir, "teacher.ckpt")
        assert os.path.exists(summary.teacher_path)
        assert any(r["name"] == "loss_alpha" for r in read_jsonl(summary.metrics_path))

    def test_existing_teacher(self, tmp_path):
        """A teacher checkpoint from an earlier run is reused"""
        teacher = tiny_runner(tmp_path / "teacher").cmd_train()
        summary = tiny_runner(tmp_path / "af", **{"regime.name": "maf"}).cmd_train(
            teacher_checkpoint=teacher.checkpoint_path)
        assert summary.teacher_path == teacher.checkpoint_path

    def test_tied_needs_no_teacher(self, tmp_path):
        """Tied attention forcing uses the model's own reference"""
        summary = tiny_runner(tmp_path, **{"regime.name": "af", "regime.tied": True}).cmd_train()
        assert summary.teacher_path is None


class TestResume:
    """Checkpoint resume"""

    def test_resume_matches_uninterrupted(self, tmp_path):
        """Interrupt after one step, resume, and land on the same parameters"""
        full = tiny_runner(tmp_path / "full").cmd_train()
        tiny_runner(tmp_path / "part", **{"training.max_steps": 1}).cmd_train()
        resumed = tiny_runner(tmp_path / "part").cmd_train(resume=True)
        assert resumed.step == full.step
        a, b = load_model(full.checkpoint_path), load_model(resumed.checkpoint_path)
        for name in a.names():
            assert np.allclose(a[name].data, b[name].data, atol=1e-12)

    def test_resume_professor_forcing(self, tmp_path):
        """Discriminator state survives a resume"""
        overrides = {"regime.name": "pf", "professor.disc_hidden": 3}
        tiny_runner(tmp_path, **overrides, **{"training.max_steps": 1}).cmd_train()
        summary = tiny_runner(tmp_path, **overrides).cmd_train(resume=True)
        assert summary.step == 4

    def test_metrics_files_are_identical(self, tmp_path):
        """Two runs of one configuration write byte-identical metrics"""
        tiny_runner(tmp_path / "a").cmd_train()
        tiny_runner(tmp_path / "b").cmd_train()
        with open(tmp_path / "a" / "metrics.jsonl", "rb") as a, open(tmp_path / "b" / "metrics.jsonl", "rb") as b:
            assert a.read() == b.read()

    def test_digest_mismatch(self, tmp_path):
        """Resuming under another configuration is refused"""
        tiny_runner(tmp_path, **{"training.max_steps": 1}).cmd_train()
        with pytest.raises(ConfigError):
            tiny_runner(tmp_path, **{"optimizer.learning_rate": 0.02}).cmd_train(resume=True)


class TestCompareRegimes:
    """Regime comparison table"""

    def test_single_cell(self, tmp_path):
        """One regime and one seed give one row and no summary rows"""
        path = tiny_runner(tmp_path).cmd_compare_regimes(["tf"], [0])
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1
        assert rows[0]["regime"] == "tf" and rows[0]["seed"] == "0"
        assert "bleu" in rows[0] and "final_train_loss" in rows[0]

    def test_grid_with_teacher(self, slow, tmp_path):
        """Per-seed teachers are trained once and summary rows follow the cells"""
        path = tiny_runner(tmp_path).cmd_compare_regimes(["tf", "af"], [0, 1], workers=2)
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 4 + 4
        assert {r["seed"] for r in rows} == {"0", "1", "median", "mean"}
        assert os.path.exists(tmp_path / "teacher-seed1" / "teacher.ckpt")

    def test_needs_cells(self, tmp_path):
        """An empty grid is refused"""
        with pytest.raises(ContractError):
            tiny_runner(tmp_path).cmd_compare_regimes([], [0])


CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "config")


def summary_rows(path):
    """Median and mean rows of a comparison table, keyed by (regime, statistic)"""
    with open(path, newline="", encoding="utf-8") as f:
        return {(r["regime"], r["seed"]): r for r in csv.DictReader(f) if r["seed"] in ("median", "mean")}


class TestShippedComparisons:
    """Configurations for the regime comparisons"""

    def test_configs_load(self):
        """Both comparison configs resolve with their task settings"""
        reorder = load_config(os.path.join(CONFIG_DIR, "reorder_ambiguous.yaml"))
        assert reorder.data["task"]["kind"] == "reorder"
        assert reorder.data["task"]["ambiguous"] is True
        expansion = load_config(os.path.join(CONFIG_DIR, "expansion_af_vs_tf.yaml"))
        task = expansion.data["task"]
        assert task["kind"] == "expansion" and task["vocab_size"] == 50
        assert (task["min_duration"], task["max_duration"]) == (2, 4)
        assert task["train_size"] == 2000 and task["frame_dim"] == 8

    def test_attention_forcing_beats_teacher_forcing_on_frames(self, slow, tmp_path):
        """Attention forcing gives lower L1 and sharp monotone alignments"""
        config = load_config(os.path.join(CONFIG_DIR, "expansion_af_vs_tf.yaml"), {"output.dir": str(tmp_path)})
        path = ExperimentRunner(config).cmd_compare_regimes(["tf", "af"], [0, 1, 2, 3, 4], workers=4)
        rows = summary_rows(path)
        tf, af = rows[("tf", "median")], rows[("af", "median")]
        assert float(af["l1"]) <= float(tf["l1"])
        assert float(af["monotonicity"]) >= 0.95
        assert float(af["kl_to_gold"]) < 0.2

    def test_modified_attention_forcing_on_ambiguous_reorder(self, slow, tmp_path):
        """Modified attention forcing is no worse than teacher forcing in mean BLEU"""
        config = load_config(os.path.join(CONFIG_DIR, "reorder_ambiguous.yaml"), {"output.dir": str(tmp_path)})
        path = ExperimentRunner(config).cmd_compare_regimes(["tf", "maf", "af"], list(range(10)), workers=4)
        rows = summary_rows(path)
        assert float(rows[("maf", "mean")]["bleu"]) >= float(rows[("tf", "mean")]["bleu"]) - 0.005


class TestCascade:
    """Two-stage pipeline command"""

    def test_cascade(self, tmp_path):
        """Frame model, guided corpus, upsampler, pipeline score"""
        runner = tiny_runner(tmp_path, **{"task.kind": "expansion", "model.reduction_factor": 2})
        summary = runner.cmd_train()
        metrics = runner.cmd_cascade(summary.checkpoint_path, mode="teacher_forced")
        assert np.isfinite(metrics["pipeline_l1"])
        assert os.path.exists(tmp_path / "downstream.ckpt")
        assert len(load_dataset(str(tmp_path / "corpus-teacher_forced.jsonl"))) == 6

    def test_token_task_refused(self, tmp_path):
        """Cascades need frame targets"""
        with pytest.raises(ContractError):
            tiny_runner(tmp_path).cmd_cascade(str(tmp_path / "missing.ckpt"))


class TestGradcheckCommand:
    """Finite-difference suite"""

    def test_suite_passes(self, slow, tmp_path):
        """Every primitive and regime loss is within tolerance"""
        report = tiny_runner(tmp_path).cmd_gradcheck(seeds=1)
        assert report.passed
        assert all(error < GRADCHECK_TOLERANCE for error in report.worst.values())

    def test_seed_reaches_regime_cases(self, monkeypatch):
        """Each gradient-check seed builds its own regime cases"""
        seen = []

        def record(seed):
            seen.append(seed)
            return {}

        monkeypatch.setattr("src.experiment.regime_cases", record)
        run_gradcheck(seeds=2)
        assert seen == [0, 1]
