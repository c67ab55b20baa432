"""End-to-end runs: benchmark synthesis, the three training stages per
ablation switches, evaluation, and report files.

Stage outputs are cached under <cache_dir> keyed by a content hash of the
config sections that feed the stage (plus the trial seed), so ablation
variants and sweep points sharing upstream settings reuse stage-1
checkpoints and stage-2 pseudo-labels.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataio, evaluate, pseudolabel, segmenter, selftrain, synth
from .core import ClassSpace, Dataset
from .segmenter import LinearSegmenter

STAGE1_SECTIONS = ("scene", "fold", "saliency", "base_train")
STAGE2_SECTIONS = STAGE1_SECTIONS + ("stage2",)


class PipelineError(Exception):
    """Runtime failure of a pipeline stage; message names the stage."""


def cmd_synth(cfg: cfgmod.RunConfig, out_dir) -> Path:
    """Generate the benchmark splits and write them with a config snapshot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.dump())
    base, novel, val = synth.make_fold_benchmark(
        cfgmod.scene_spec(cfg), cfgmod.fold_spec(cfg), cfgmod.saliency_spec(cfg))
    for ds in (base, novel, val):
        dataio.write_dataset(ds, out / ds.split_tag)
    return out


def load_benchmark(bench_dir) -> tuple[Dataset, Dataset, Dataset]:
    bench = Path(bench_dir)
    if not bench.is_dir():
        raise PipelineError(f"benchmark directory not found: {bench}")
    try:
        return tuple(dataio.read_dataset(bench / tag) for tag in ("base", "novel", "val"))
    except dataio.DataFormatError as exc:
        raise PipelineError(f"benchmark load failed: {exc}") from exc


def head_size(cfg: cfgmod.RunConfig) -> int:
    k = cfg.get("fold.n_novel")
    if cfg.get("switches.over_clustering"):
        k *= cfg.get("stage2.over_factor")
    return k


def run_class_space(cfg: cfgmod.RunConfig, data_space: ClassSpace) -> ClassSpace:
    return ClassSpace(data_space.n_base, data_space.n_novel,
                      novel_head_size=head_size(cfg))


def _stage1(cfg, base, seed, cache_dir):
    train_cfg = cfgmod.base_train_config(cfg, seed)
    key = cfg.section_hash(STAGE1_SECTIONS, extra=f"seed={seed}")
    if cache_dir is not None:
        path = Path(cache_dir) / f"base_{key}.ncdm"
        if path.is_file():
            return LinearSegmenter.load(path, base.class_space), key
    try:
        model = segmenter.train_base(base, train_cfg)
    except Exception as exc:
        raise PipelineError(f"stage base-training failed: {exc}") from exc
    # stage outputs are observed through checkpoint precision: a fresh model
    # and its cached reload must drive bit-identical downstream runs
    model = LinearSegmenter(model.weights.astype(np.float32),
                            model.bias.astype(np.float32), base.class_space)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        model.save(Path(cache_dir) / f"base_{key}.ncdm")
    return model, key


def _stage2(cfg, base_model, novel, run_space, seed, cache_dir):
    over = cfg.get("switches.over_clustering")
    mode = "over" if over else "exact"
    key = cfg.section_hash(STAGE2_SECTIONS, extra=f"seed={seed} over={over}")
    if cache_dir is not None:
        path = Path(cache_dir) / f"pseudo_{key}"
        if (path / "pseudo_labels.json").is_file():
            return pseudolabel.read_pseudo_labels(path), key
    try:
        records, _ = pseudolabel.build_pseudo_labels(
            base_model, novel, run_space,
            tau=cfg.get("stage2.confidence"),
            k=run_space.novel_head_size,
            seed=seed, mode=mode,
            min_novel_pixels=cfg.get("stage2.min_novel_pixels"))
    except Exception as exc:
        raise PipelineError(f"stage pseudo-labeling failed: {exc}") from exc
    if cache_dir is not None:
        pseudolabel.write_pseudo_labels(records, Path(cache_dir) / f"pseudo_{key}")
    return records, key


def _write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_base", "loss_clean", "loss_distill",
                         "omega", "n_clean", "n_unclean", "val_novel_miou"])
        for row in rows:
            writer.writerow(row)


def _write_split_report(path, state) -> None:
    with open(path, "w") as fh:
        fh.write("image_id\tscore\tsplit\tmoved_by_reassign\n")
        for image_id in state.clean:
            fh.write(f"{image_id}\t{state.scores[image_id]!r}\tclean\t0\n")
        for image_id in state.unclean:
            moved = int(image_id in state.discarded)
            fh.write(f"{image_id}\t{state.scores[image_id]!r}\tunclean\t{moved}\n")


def _write_cluster_report(path, records, n_base: int) -> None:
    with open(path, "w") as fh:
        fh.write("image_id\tcluster_id\tclass_id\tdistance\n")
        for rec in records:
            if rec.skipped:
                fh.write(f"{rec.image_id}\t-\t-\t-\n")
            else:
                fh.write(f"{rec.image_id}\t{rec.cluster_id}\t{n_base + rec.cluster_id}"
                         f"\t{rec.distance!r}\n")


def run_trial(cfg: cfgmod.RunConfig, base: Dataset, novel: Dataset, val: Dataset,
              seed: int | None = None, out_dir=None, cache_dir=None,
              eval_every: int = 1) -> dict:
    """One seed through stages 1-3 plus evaluation. Returns the report dict."""
    cfg.validate()
    if seed is None:
        seed = cfg.get("fold.seed")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.snapshot").write_text(cfg.dump())

    run_space = run_class_space(cfg, base.class_space)
    mapping_mode = "over" if cfg.get("switches.over_clustering") else "exact"
    eval_mode = "many-to-one" if mapping_mode == "over" else "one-to-one"

    base_model, stage1_key = _stage1(cfg, base, seed, cache_dir)
    records, stage2_key = _stage2(cfg, base_model, novel, run_space, seed, cache_dir)

    rows = []

    def hook(model, log):
        score = ""
        if eval_every and (log.epoch % eval_every == 0):
            score = repr(evaluate.evaluate(model, val, eval_mode)["novel_miou"])
        rows.append([log.epoch, repr(log.loss_base), repr(log.loss_clean),
                     repr(log.loss_distill), repr(log.omega), log.n_clean,
                     log.n_unclean, score])

    ft_cfg = cfgmod.finetune_config(cfg, seed)
    state = None
    try:
        if cfg.get("switches.entropy_ranking"):
            model, teacher, state, _ = selftrain.train_curated(
                base_model, base, novel, records, run_space, ft_cfg, epoch_hook=hook)
        else:
            model, _ = selftrain.train_basic(
                base_model, base, novel, records, run_space, ft_cfg, epoch_hook=hook)
            teacher = None
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"stage fine-tuning failed: {exc}") from exc

    try:
        report = evaluate.evaluate(model, val, eval_mode)
    except Exception as exc:
        raise PipelineError(f"stage evaluation failed: {exc}") from exc

    result = {
        "seed": seed,
        "base_miou": report["base_miou"],
        "novel_miou": report["novel_miou"],
        "all_miou": report["all_miou"],
        "mapping_mode": eval_mode,
        "mapping": {str(k): v for k, v in report["mapping"].channel_to_class.items()},
        "n_labeled": sum(1 for r in records if not r.skipped),
        "n_skipped": sum(1 for r in records if r.skipped),
        "stage1_key": stage1_key,
        "stage2_key": stage2_key,
    }
    if state is not None:
        result["n_clean"] = len(state.clean)
        result["n_unclean"] = len(state.unclean)
        result["reassigned"] = state.reassigned

    if out is not None:
        _write_metrics(out / "metrics.csv", rows)
        _write_cluster_report(out / "clusters.tsv", records, run_space.n_base)
        if state is not None:
            _write_split_report(out / "split.tsv", state)
        model.save(out / "model.ncdm")
        if teacher is not None:
            teacher.model.save(out / "teacher.ncdm")
        with open(out / "report.json", "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return result


def cmd_run(cfg: cfgmod.RunConfig, bench_dir, out_dir, use_cache: bool = True) -> dict:
    """All seeds of a run against an existing benchmark; writes aggregates."""
    cfg.validate()
    bench = Path(bench_dir)
    base, novel, val = load_benchmark(bench)
    snapshot_path = bench / "config.snapshot"
    if snapshot_path.is_file():
        bench_cfg = cfgmod.parse_config(snapshot_path.read_text())
        data_sections = ("scene", "fold", "saliency")
        if bench_cfg.section_hash(data_sections) != cfg.section_hash(data_sections):
            raise PipelineError("config data sections do not match the benchmark snapshot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.snapshot").write_text(cfg.dump())
    cache_dir = bench / "cache" if use_cache else None
    per_seed = []
    for seed in cfg.get("run.seeds"):
        result = run_trial(cfg, base, novel, val, seed=seed,
                           out_dir=out / f"seed_{seed}", cache_dir=cache_dir)
        per_seed.append(result)
    aggregate = {
        "seeds": list(cfg.get("run.seeds")),
        "novel_miou": [r["novel_miou"] for r in per_seed],
        "base_miou": [r["base_miou"] for r in per_seed],
        "all_miou": [r["all_miou"] for r in per_seed],
        "mean_novel_miou": float(np.mean([r["novel_miou"] for r in per_seed])),
        "mean_base_miou": float(np.mean([r["base_miou"] for r in per_seed])),
        "mean_all_miou": float(np.mean([r["all_miou"] for r in per_seed])),
    }
    with open(out / "aggregate.json", "w") as fh:
        json.dump(aggregate, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "base_miou", "novel_miou", "all_miou"])
        for r in per_seed:
            writer.writerow([r["seed"], repr(r["base_miou"]), repr(r["novel_miou"]),
                             repr(r["all_miou"])])
        writer.writerow(["mean", repr(aggregate["mean_base_miou"]),
                         repr(aggregate["mean_novel_miou"]), repr(aggregate["mean_all_miou"])])
    return aggregate


def cmd_eval(model_path, bench_dir, over_clustering: bool | None = None) -> dict:
    """Score a saved model checkpoint against the benchmark val split."""
    _, _, val = load_benchmark(bench_dir)
    weights, _ = dataio.load_model(model_path)
    cs = val.class_space
    n_novel_channels = weights.shape[0] - cs.n_base
    if n_novel_channels < cs.n_novel:
        raise PipelineError(f"model has {n_novel_channels} novel channels, "
                            f"val expects at least {cs.n_novel}")
    if over_clustering is None:
        over_clustering = n_novel_channels != cs.n_novel
    space = ClassSpace(cs.n_base, cs.n_novel, novel_head_size=n_novel_channels)
    model = LinearSegmenter.load(model_path, space)
    mode = "many-to-one" if over_clustering else "one-to-one"
    report = evaluate.evaluate(model, val, mode)
    return {
        "base_miou": report["base_miou"],
        "novel_miou": report["novel_miou"],
        "all_miou": report["all_miou"],
        "mapping_mode": mode,
        "mapping": {str(k): v for k, v in report["mapping"].channel_to_class.items()},
    }


def _switch_marks(cfg: cfgmod.RunConfig) -> tuple[str, ...]:
    names = ("over_clustering", "entropy_ranking", "dynamic_reassignment", "self_training")
    return tuple("x" if cfg.get(f"switches.{name}") else " " for name in names)


def cmd_report(run_dirs, sweep_out=None) -> str:
    """Ablation table over completed runs, plus ratio/threshold sweep CSVs.

    Runs whose data sections differ from the first run are flagged in the
    output rather than silently pooled.
    """
    runs = []
    for run_dir in run_dirs:
        run = Path(run_dir)
        agg_path = run / "aggregate.json"
        snap_path = run / "config.snapshot"
        if not agg_path.is_file() or not snap_path.is_file():
            raise PipelineError(f"run directory incomplete: {run}")
        runs.append((run, cfgmod.parse_config(snap_path.read_text()),
                     json.loads(agg_path.read_text())))
    if not runs:
        raise PipelineError("no run directories given")
    data_sections = ("scene", "fold", "saliency")
    ref_hash = runs[0][1].section_hash(data_sections)
    lines = []
    header = f"{'run':24s}  OC ER DR ST  {'novel':>8s} {'base':>8s} {'all':>8s}  flags"
    lines.append(header)
    lines.append("-" * len(header))
    for run, cfg, agg in runs:
        marks = _switch_marks(cfg)
        flag = "" if cfg.section_hash(data_sections) == ref_hash else "DATA-MISMATCH"
        lines.append(f"{run.name[:24]:24s}  {marks[0]:2s} {marks[1]:2s} {marks[2]:2s} "
                     f"{marks[3]:2s}  {agg['mean_novel_miou']:8.4f} "
                     f"{agg['mean_base_miou']:8.4f} {agg['mean_all_miou']:8.4f}  {flag}")
    if sweep_out is not None:
        sweep_dir = Path(sweep_out)
        sweep_dir.mkdir(parents=True, exist_ok=True)
        for key, name in (("finetune.clean_ratio", "clean_ratio_sweep.csv"),
                          ("finetune.online_threshold", "online_threshold_sweep.csv")):
            points = sorted({cfg.get(key) for _, cfg, _ in runs})
            if len(points) > 1:
                with open(sweep_dir / name, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow([key.split(".", 1)[1], "mean_novel_miou"])
                    for value in points:
                        vals = [agg["mean_novel_miou"] for _, cfg, agg in runs
                                if cfg.get(key) == value]
                        writer.writerow([repr(value), repr(float(np.mean(vals)))])
                lines.append(f"wrote {sweep_dir / name}")
    return "\n".join(lines) + "\n"
