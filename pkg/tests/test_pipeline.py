"""End-to-end pipeline runs: synthesis, trials, caching, aggregation."""
import json
from pathlib import Path

import numpy as np
import pytest
from conftest import small_config

from ncdseg import dataio, pipeline
from ncdseg.core import ClassSpace
from ncdseg.pipeline import PipelineError
from ncdseg.segmenter import LinearSegmenter


def tiny_config(**overrides):
    values = dict(fold__n_base_images=16, fold__n_novel_images=16,
                  fold__n_val_images=6, base_train__epochs=2,
                  novel_train__epochs=3, finetune__reassign_epoch=2,
                  finetune__ramp_length=3)
    values.update(overrides)
    return small_config(**values)


def _tree_bytes(root):
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="module")
def bench_dir(tiny_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    pipeline.cmd_synth(tiny_cfg, out)
    return out


class TestHeadSize:
    def test_over_clustering_doubles(self):
        cfg = tiny_config()
        assert pipeline.head_size(cfg) == 10
        assert pipeline.head_size(cfg.replace(stage2__over_factor=3)) == 15

    def test_exact_head(self):
        cfg = tiny_config(switches__over_clustering=False)
        assert pipeline.head_size(cfg) == 5

    def test_run_class_space(self):
        space = pipeline.run_class_space(tiny_config(), ClassSpace(3, 5))
        assert (space.n_base, space.n_novel, space.novel_head_size) == (3, 5, 10)


class TestSynth:
    def test_writes_snapshot_and_splits(self, tiny_cfg, bench_dir):
        assert (bench_dir / "config.snapshot").read_text() == tiny_cfg.dump()
        base, novel, val = pipeline.load_benchmark(bench_dir)
        assert len(base.items) == 16 and len(novel.items) == 16 and len(val.items) == 6
        assert novel.items[0].saliency is not None

    def test_byte_deterministic(self, tiny_cfg, tmp_path):
        pipeline.cmd_synth(tiny_cfg, tmp_path / "a")
        pipeline.cmd_synth(tiny_cfg, tmp_path / "b")
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_load_missing_dir(self, tmp_path):
        with pytest.raises(PipelineError, match="not found"):
            pipeline.load_benchmark(tmp_path / "nowhere")


@pytest.fixture(scope="module")
def trial(tiny_cfg, bench_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("trial")
    base, novel, val = pipeline.load_benchmark(bench_dir)
    result = pipeline.run_trial(tiny_cfg, base, novel, val, seed=0, out_dir=out)
    return tiny_cfg, out, result


class TestRunTrial:
    def test_report_fields(self, trial):
        _, _, result = trial
        for key in ("seed", "base_miou", "novel_miou", "all_miou", "mapping",
                    "n_labeled", "n_skipped", "stage1_key", "stage2_key",
                    "n_clean", "n_unclean", "reassigned"):
            assert key in result
        assert result["seed"] == 0
        assert result["mapping_mode"] == "many-to-one"
        assert result["n_labeled"] + result["n_skipped"] == 16
        assert result["n_clean"] + result["n_unclean"] == 16

    def test_metrics_csv(self, tiny_cfg, trial):
        _, out, _ = trial
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == ("epoch,loss_base,loss_clean,loss_distill,"
                            "omega,n_clean,n_unclean,val_novel_miou")
        # basic phase + curated phase epochs
        assert len(lines) == 1 + 2 * tiny_cfg.get("novel_train.epochs")

    def test_cluster_report(self, trial):
        _, out, result = trial
        lines = (out / "clusters.tsv").read_text().splitlines()
        assert lines[0] == "image_id\tcluster_id\tclass_id\tdistance"
        assert len(lines) == 1 + 16
        skipped = [l for l in lines[1:] if l.endswith("\t-")]
        assert len(skipped) == result["n_skipped"]

    def test_split_report(self, trial):
        _, out, result = trial
        lines = (out / "split.tsv").read_text().splitlines()
        assert lines[0] == "image_id\tscore\tsplit\tmoved_by_reassign"
        splits = [l.split("\t")[2] for l in lines[1:]]
        assert splits.count("clean") == result["n_clean"]
        assert splits.count("unclean") == result["n_unclean"]

    def test_checkpoints_loadable(self, trial, bench_dir):
        _, out, _ = trial
        _, _, val = pipeline.load_benchmark(bench_dir)
        space = ClassSpace(3, 5, novel_head_size=10)
        for name in ("model.ncdm", "teacher.ncdm"):
            model = LinearSegmenter.load(out / name, space)
            assert model.weights.shape == (13, 8)

    def test_report_json_matches(self, trial):
        _, out, result = trial
        assert json.loads((out / "report.json").read_text()) == result

    def test_basic_mode_artifacts(self, bench_dir, tmp_path):
        cfg = tiny_config(switches__entropy_ranking=False,
                          switches__dynamic_reassignment=False,
                          switches__self_training=False)
        base, novel, val = pipeline.load_benchmark(bench_dir)
        result = pipeline.run_trial(cfg, base, novel, val, seed=0, out_dir=tmp_path)
        assert "n_clean" not in result and "reassigned" not in result
        assert not (tmp_path / "split.tsv").exists()
        assert not (tmp_path / "teacher.ncdm").exists()

    def test_cache_reuse_is_bit_identical(self, tiny_cfg, bench_dir, tmp_path):
        base, novel, val = pipeline.load_benchmark(bench_dir)
        cache = tmp_path / "cache"
        r_cold = pipeline.run_trial(tiny_cfg, base, novel, val, seed=0,
                                    out_dir=tmp_path / "cold", cache_dir=cache)
        r_warm = pipeline.run_trial(tiny_cfg, base, novel, val, seed=0,
                                    out_dir=tmp_path / "warm", cache_dir=cache)
        r_none = pipeline.run_trial(tiny_cfg, base, novel, val, seed=0,
                                    out_dir=tmp_path / "none", cache_dir=None)
        assert r_cold == r_warm == r_none
        cold, warm, none = (_tree_bytes(tmp_path / tag)
                            for tag in ("cold", "warm", "none"))
        assert cold == warm == none
        assert (cache / f"base_{r_cold['stage1_key']}.ncdm").is_file()
        assert (cache / f"pseudo_{r_cold['stage2_key']}" / "pseudo_labels.json").is_file()


@pytest.fixture(scope="module")
def run_out(tiny_cfg, bench_dir, tmp_path_factory):
    cfg = tiny_cfg.replace(run__seeds=(0, 1))
    out = tmp_path_factory.mktemp("run")
    agg = pipeline.cmd_run(cfg, bench_dir, out)
    return out, agg


class TestCmdRun:
    def test_aggregate_contents(self, run_out):
        out, agg = run_out
        assert agg["seeds"] == [0, 1]
        assert agg["mean_novel_miou"] == pytest.approx(np.mean(agg["novel_miou"]))
        assert json.loads((out / "aggregate.json").read_text()) == agg
        for seed in (0, 1):
            assert (out / f"seed_{seed}" / "report.json").is_file()

    def test_aggregate_csv(self, run_out):
        out, agg = run_out
        lines = (out / "aggregate.csv").read_text().splitlines()
        assert lines[0] == "seed,base_miou,novel_miou,all_miou"
        assert len(lines) == 1 + 2 + 1
        assert lines[-1].startswith("mean,")
        assert float(lines[1].split(",")[2]) == agg["novel_miou"][0]

    def test_rerun_reproduces_csv_bytes(self, tiny_cfg, bench_dir, run_out, tmp_path):
        out, _ = run_out
        cfg = tiny_cfg.replace(run__seeds=(0, 1))
        pipeline.cmd_run(cfg, bench_dir, tmp_path / "again")
        for rel in ("aggregate.csv", "seed_0/metrics.csv", "seed_1/metrics.csv"):
            assert (tmp_path / "again" / rel).read_bytes() == (out / rel).read_bytes()

    def test_data_mismatch_rejected(self, tiny_cfg, bench_dir, tmp_path):
        cfg = tiny_cfg.replace(scene__sigma=0.75)
        with pytest.raises(PipelineError, match="snapshot"):
            pipeline.cmd_run(cfg, bench_dir, tmp_path)

    def test_trainer_settings_may_differ(self, tiny_cfg, bench_dir, tmp_path):
        cfg = tiny_cfg.replace(finetune__clean_ratio=0.5)
        agg = pipeline.cmd_run(cfg, bench_dir, tmp_path)
        assert 0.0 <= agg["mean_novel_miou"] <= 1.0


class TestCmdEval:
    def test_auto_infers_over(self, run_out_model, bench_dir):
        report = pipeline.cmd_eval(run_out_model, bench_dir)
        assert report["mapping_mode"] == "many-to-one"
        assert 0.0 <= report["novel_miou"] <= 1.0

    def test_auto_infers_exact(self, bench_dir, tmp_path):
        space = ClassSpace(3, 5)
        model = LinearSegmenter(np.zeros((8, 8)), np.zeros(8), space)
        model.save(tmp_path / "exact.ncdm")
        report = pipeline.cmd_eval(tmp_path / "exact.ncdm", bench_dir)
        assert report["mapping_mode"] == "one-to-one"

    def test_channel_shortage(self, bench_dir, tmp_path):
        space = ClassSpace(3, 2)
        model = LinearSegmenter(np.zeros((5, 8)), np.zeros(5), space)
        model.save(tmp_path / "short.ncdm")
        with pytest.raises(PipelineError, match="novel channels"):
            pipeline.cmd_eval(tmp_path / "short.ncdm", bench_dir)


@pytest.fixture(scope="module")
def run_out_model(tiny_cfg, bench_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval_run")
    pipeline.cmd_run(tiny_cfg, bench_dir, out)
    return out / "seed_0" / "model.ncdm"


@pytest.fixture(scope="module")
def two_runs(tiny_cfg, bench_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    pipeline.cmd_run(tiny_cfg, bench_dir, root / "full")
    basic = tiny_cfg.replace(switches__entropy_ranking=False,
                             switches__dynamic_reassignment=False,
                             switches__self_training=False)
    pipeline.cmd_run(basic, bench_dir, root / "basic")
    return root


class TestCmdReport:
    def test_table_rows(self, two_runs):
        text = pipeline.cmd_report([two_runs / "full", two_runs / "basic"])
        lines = text.splitlines()
        assert lines[0].startswith("run")
        full_row = next(l for l in lines if l.startswith("full"))
        basic_row = next(l for l in lines if l.startswith("basic"))
        assert full_row.split()[1:5] == ["x", "x", "x", "x"]
        assert basic_row.split()[1] == "x"       # OC only
        assert "DATA-MISMATCH" not in text

    def test_mismatch_flagged(self, two_runs, bench_dir, tiny_cfg, tmp_path):
        other_cfg = tiny_cfg.replace(fold__seed=9)
        other_bench = tmp_path / "bench9"
        pipeline.cmd_synth(other_cfg, other_bench)
        pipeline.cmd_run(other_cfg, other_bench, tmp_path / "other")
        text = pipeline.cmd_report([two_runs / "full", tmp_path / "other"])
        assert "DATA-MISMATCH" in text

    def test_sweep_csv(self, tiny_cfg, bench_dir, two_runs, tmp_path):
        half = tiny_cfg.replace(finetune__clean_ratio=0.5)
        pipeline.cmd_run(half, bench_dir, tmp_path / "half")
        text = pipeline.cmd_report([two_runs / "full", tmp_path / "half"],
                                   sweep_out=tmp_path / "sweep")
        csv_path = tmp_path / "sweep" / "clean_ratio_sweep.csv"
        assert csv_path.is_file() and str(csv_path) in text
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "clean_ratio,mean_novel_miou"
        assert [l.split(",")[0] for l in lines[1:]] == ["0.5", "0.67"]

    def test_incomplete_run_dir(self, tmp_path):
        with pytest.raises(PipelineError, match="incomplete"):
            pipeline.cmd_report([tmp_path])
