"""Pipeline stages as batch commands shared by the CLI and the HTTP service.

Each ``cmd_*`` reads its inputs from files, writes its artifacts under the
run's output directory and records them in the RunManifest, which is saved as
``run.json`` whether the command succeeds or fails.
"""
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field

from spikerep import __version__
from spikerep.utils import recording_io as rio
from spikerep.utils.cluster import gmm_assign, gmm_fit, gmm_select
from spikerep.utils.config import GmmSelect, PipelineConfig, SortFeatures, threads
from spikerep.utils.dsp import detect, extract_snippets, ground_truth_events, preprocess
from spikerep.utils.errors import PipelineError
from spikerep.utils.evaluation import score_sorting
from spikerep.utils.experiments import (
    compare_unit_scores,
    pca_features,
    run_ablation,
    run_protocol,
    run_sweep,
    split_labeled,
)
from spikerep.utils.reports import (
    ablation_table,
    comparison_table,
    protocol_table,
    sorting_table,
    write_json,
    write_text,
)
from spikerep.utils.synthgen import generate_recording
from spikerep.utils.training import ModelState, embed, init_state, load_checkpoint, read_manifest, save_checkpoint, train
from spikerep.utils.type_converter import convert_numpy_types

logger = logging.getLogger(__name__)


class RunManifest(BaseModel):
    command: str = Field(..., description="Subcommand that produced this run")
    status: str = Field("running", description="running, success or failed")
    version: str = __version__
    torch_version: str = torch.__version__
    numpy_version: str = np.__version__
    seed: int
    use_dae: bool = False
    config: Dict[str, Any]
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    stage_seconds: Dict[str, float] = {}
    results: Dict[str, Any] = {}
    error: Optional[Dict[str, Any]] = None


class RunContext:
    def __init__(self, cfg: PipelineConfig, inputs: Dict[str, str], out_dir: Path, use_dae: bool,
                 manifest: RunManifest):
        self.cfg = cfg
        self.inputs = inputs
        self.out_dir = out_dir
        self.use_dae = use_dae
        self.manifest = manifest

    def input(self, key: str) -> Path:
        value = self.inputs.get(key)
        if not value:
            raise PipelineError(
                f"Command {self.manifest.command!r} needs input {key!r}",
                "missing_input",
                {"input": key},
            )
        return Path(value)

    def output(self, key: str, name: str) -> Path:
        path = self.out_dir / name
        self.manifest.outputs[key] = str(path)
        return path

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.stage_seconds[name] = round(time.perf_counter() - start, 6)


def _load_model(ctx: RunContext) -> ModelState:
    path = ctx.input("model")
    manifest = read_manifest(path)
    if ctx.use_dae and manifest["model_config"].get("alpha", 0.0) == 0.0:
        raise PipelineError(
            "--use-dae requested but the checkpoint's DAE was trained with alpha = 0",
            "config_conflict",
            {"model": str(path)},
        )
    return load_checkpoint(path)


def _labeled_snippets(path: Path) -> rio.SnippetSet:
    snippets = rio.read_snippets(path)
    if snippets.labels is None:
        raise PipelineError(f"{path} carries no unit labels", "missing_labels", {"path": str(path)})
    return snippets


def cmd_synth(ctx: RunContext) -> None:
    with ctx.stage("synth"):
        rec, gt = generate_recording(ctx.cfg.to_synth_spec())
        rio.write_recording(rec.with_samples(rec.samples.astype(np.float32)), ctx.output("recording", "recording.bin"))
        rio.write_ground_truth(gt, ctx.output("ground_truth", "ground_truth.csv"))
    ctx.manifest.results = {"n_units": len(gt.units), "n_spikes": gt.n_spikes, "n_channels": rec.n_channels}


def cmd_preprocess(ctx: RunContext) -> None:
    rec = rio.read_recording(ctx.input("recording"))
    with ctx.stage("preprocess"):
        cleaned, removed = preprocess(rec, ctx.cfg.to_filter_spec(), ctx.cfg.bad_channel_std_factor)
        rio.write_recording(cleaned, ctx.output("recording", "preprocessed.bin"))
    ctx.manifest.results = {"removed_channels": removed}


def cmd_detect(ctx: RunContext) -> None:
    rec = rio.read_recording(ctx.input("recording"))
    with ctx.stage("detect"):
        events = detect(rec, ctx.cfg.to_detection_spec(rec.sample_rate_hz))
        rio.write_events(events, ctx.output("events", "events.csv"))
    ctx.manifest.results = {"n_events": len(events)}


def cmd_extract(ctx: RunContext) -> None:
    """Snippets at detected events, or a labeled train/eval split at ground-truth frames."""
    cfg = ctx.cfg
    rec = rio.read_recording(ctx.input("recording"))
    with ctx.stage("extract"):
        if ctx.inputs.get("ground_truth"):
            gt = rio.read_ground_truth(ctx.input("ground_truth"))
            gt.check_bounds(rec.n_frames)
            events, labels = ground_truth_events(rec, gt.units, cfg.snippet_samples)
            snippets = extract_snippets(rec, events, cfg.snippet_samples, cfg.snippet_channels, labels)
            train_set, eval_set = split_labeled(snippets, cfg.train_spikes_per_unit, cfg.eval_spikes_per_unit, cfg.seed)
            rio.write_snippets(snippets, ctx.output("snippets", "snippets.bin"))
            rio.write_snippets(train_set, ctx.output("train_snippets", "train_snippets.bin"))
            rio.write_snippets(eval_set, ctx.output("eval_snippets", "eval_snippets.bin"))
            ctx.manifest.results = {"n_train": len(train_set), "n_eval": len(eval_set)}
        else:
            events = rio.read_events(ctx.input("events"))
            snippets = extract_snippets(rec, events, cfg.snippet_samples, cfg.snippet_channels)
            rio.write_snippets(snippets, ctx.output("snippets", "snippets.bin"))
    ctx.manifest.results.update({"n_snippets": len(snippets), "n_dropped": len(snippets.dropped_frames)})


def cmd_train(ctx: RunContext) -> None:
    cfg = ctx.cfg
    snippets = rio.read_snippets(ctx.input("snippets"))
    state = init_state(cfg.to_model_config(), cfg.to_train_config())
    with ctx.stage("train"):
        log = train(state, snippets, cfg.to_augment_spec(), log_path=ctx.output("train_log", "train_log.csv"))
        ckpt = save_checkpoint(state, ctx.output("model", "model.ckpt"))
    ctx.manifest.outputs["model_manifest"] = str(ckpt.with_suffix(".manifest.json"))
    ctx.manifest.results = {
        "steps": state.step,
        "final_loss_contrastive": float(log["loss_contrastive"].iloc[-1]),
        "final_loss_denoise": float(log["loss_denoise"].iloc[-1]),
    }


def cmd_embed(ctx: RunContext) -> None:
    snippets = rio.read_snippets(ctx.input("snippets"))
    state = _load_model(ctx)
    with ctx.stage("embed"):
        reps = embed(snippets.values, state, use_dae=ctx.use_dae)
        rio.write_embeddings(reps, ctx.output("embeddings", "embeddings.bin"), snippets.labels)
    ctx.manifest.results = {"n_rows": int(reps.shape[0]), "dim": int(reps.shape[1])}


def cmd_sort(ctx: RunContext) -> None:
    """preprocess → detect → extract → represent → GMM → sorting.csv."""
    cfg = ctx.cfg
    if ctx.use_dae and cfg.sort_features == SortFeatures.PCA:
        raise PipelineError("--use-dae has no effect with PCA features", "config_conflict", {})
    rec = rio.read_recording(ctx.input("recording"))
    if cfg.preprocess_enabled:
        with ctx.stage("preprocess"):
            rec, removed = preprocess(rec, cfg.to_filter_spec(), cfg.bad_channel_std_factor)
        ctx.manifest.results["removed_channels"] = removed
    with ctx.stage("detect"):
        events = detect(rec, cfg.to_detection_spec(rec.sample_rate_hz))
        rio.write_events(events, ctx.output("events", "events.csv"))
    with ctx.stage("extract"):
        snippets = extract_snippets(rec, events, cfg.snippet_samples, cfg.snippet_channels)
    with ctx.stage("represent"):
        if cfg.sort_features == SortFeatures.PCA:
            reps = pca_features(snippets.values, cfg.ablation_pca_dims) if len(snippets) else None
        else:
            state = _load_model(ctx)
            reps = embed(snippets.values, state, use_dae=ctx.use_dae) if len(snippets) else None
    with ctx.stage("cluster"):
        if reps is None:
            logger.warning("No snippets to cluster; writing an empty sorting")
            labels = np.zeros(0, dtype=np.int64)
        elif cfg.gmm_select == GmmSelect.BIC:
            model, scores = gmm_select(reps, cfg.gmm_k_max, cfg.to_gmm_options(), cfg.seed)
            labels = gmm_assign(model, reps)
            ctx.manifest.results["bic"] = scores
        else:
            k = min(cfg.gmm_components, len(snippets) - 1)
            labels = gmm_assign(gmm_fit(reps, k, cfg.to_gmm_options(), cfg.seed), reps) if k >= 1 else np.zeros(len(snippets), np.int64)
        sorting = rio.SortingResult.from_assignments(snippets.event_frames, labels)
        rio.write_sorting(sorting, ctx.output("sorting", "sorting.csv"))
    ctx.manifest.results.update({"n_events": len(events), "n_sorted": len(sorting.frames), "n_units": sorting.n_units})


def cmd_eval(ctx: RunContext) -> None:
    cfg = ctx.cfg
    rec = rio.read_recording(ctx.input("recording"))
    gt = rio.read_ground_truth(ctx.input("ground_truth"))
    sorting = rio.read_sorting(ctx.input("sorting"))
    with ctx.stage("eval"):
        score = score_sorting(gt, sorting, cfg.match_delta_samples(rec.sample_rate_hz), cfg.snr_floor, rec, cfg.snippet_samples)
        write_json(score, ctx.output("report", "evaluation.json"))
        write_text(sorting_table(score), ctx.output("table", "evaluation.txt"))
    ctx.manifest.results = {
        "delta_samples": score.delta_samples,
        "aggregate": {m: {"mean": v[0], "sem": v[1]} for m, v in score.aggregate.items()},
    }


def cmd_protocol(ctx: RunContext) -> None:
    """Protocol ARI on labeled evaluation snippets; the raw-snippet PCA baseline is always included."""
    cfg = ctx.cfg
    eval_set = _labeled_snippets(ctx.input("snippets"))
    common = dict(
        n_units=cfg.protocol_units,
        n_seeds=cfg.protocol_seeds,
        gmm_runs=cfg.protocol_gmm_runs,
        spikes_per_unit=cfg.eval_spikes_per_unit,
        opts=cfg.to_gmm_options(),
        pca_dims=cfg.ablation_pca_dims,
    )
    rows = {}
    with ctx.stage("protocol"):
        if cfg.sort_features == SortFeatures.LEARNED:
            state = _load_model(ctx)
            name = "learned + DAE" if ctx.use_dae else "learned"
            rows[name] = run_protocol(eval_set, "learned", state, use_dae=ctx.use_dae, **common)
        rows["pca"] = run_protocol(eval_set, "pca", None, **common)
        write_json(rows, ctx.output("report", "protocol.json"))
        write_text(protocol_table(rows), ctx.output("table", "protocol.txt"))
    ctx.manifest.results = {name: {"mean": r.mean, "sem": r.sem, "max": r.max, "min": r.min} for name, r in rows.items()}


def cmd_ablate(ctx: RunContext) -> None:
    cfg = ctx.cfg
    train_set = rio.read_snippets(ctx.input("train"))
    test_set = rio.read_snippets(ctx.input("test"))
    state = _load_model(ctx)
    with ctx.stage("ablate"):
        rows = run_ablation(
            state, train_set, test_set, cfg.ablation_samples_per_unit, cfg.ablation_repeats,
            cfg.ablation_pca_dims, cfg.to_gmm_options(), cfg.seed,
        )
        write_json(rows, ctx.output("report", "ablation.json"))
        write_text(ablation_table(rows), ctx.output("table", "ablation.txt"))
    ctx.manifest.results = {
        name: {"mean_centroid_distance": float(np.mean(r["centroid_distance"]))} for name, r in rows.items()
    }


def _parse_values(raw: str) -> List[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise PipelineError(f"Cannot parse sweep values {raw!r}", "config_invalid", {"values": raw}) from e


def cmd_sweep(ctx: RunContext) -> None:
    cfg = ctx.cfg
    param = ctx.inputs.get("param") or "alpha"
    values = _parse_values(ctx.inputs.get("values") or "")
    if not values:
        raise PipelineError("Sweep needs at least one value", "missing_input", {"input": "values"})
    train_set = rio.read_snippets(ctx.input("train"))
    eval_set = _labeled_snippets(ctx.input("eval"))
    checkpoints = ctx.out_dir / "models"

    def keep_model(name: str, state: ModelState) -> None:
        path = save_checkpoint(state, checkpoints / name.replace("=", "_"))
        ctx.manifest.outputs[f"model:{name}"] = str(path)

    with ctx.stage("sweep"):
        rows = run_sweep(
            param, values, cfg.to_model_config(), cfg.to_train_config(), cfg.to_augment_spec(), train_set, eval_set,
            cfg.protocol_units, cfg.protocol_seeds, cfg.protocol_gmm_runs, cfg.eval_spikes_per_unit,
            cfg.to_gmm_options(), on_model=keep_model,
        )
        write_json(rows, ctx.output("report", "sweep.json"))
        write_text(protocol_table(rows), ctx.output("table", "sweep.txt"))
    ctx.manifest.results = {name: {"mean": r.mean, "sem": r.sem} for name, r in rows.items()}


def cmd_compare(ctx: RunContext) -> None:
    """Paired Wilcoxon tests between two evaluation reports over shared units."""
    reports = []
    for key in ("a", "b"):
        path = ctx.input(key)
        if not path.exists():
            raise PipelineError(f"Missing report {path}", "missing_input", {"path": str(path)})
        try:
            reports.append(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise PipelineError(f"Malformed report {path}: {e}", "parse_error", {"path": str(path)}) from e
    with ctx.stage("compare"):
        results, means = compare_unit_scores(*reports)
        write_json({"tests": results, "means": means}, ctx.output("report", "comparison.json"))
        write_text(comparison_table(results, means), ctx.output("table", "comparison.txt"))
    ctx.manifest.results = {m: {"statistic": r.statistic, "p_value": r.p_value} for m, r in results.items()}


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "detect": cmd_detect,
    "extract": cmd_extract,
    "train": cmd_train,
    "embed": cmd_embed,
    "sort": cmd_sort,
    "eval": cmd_eval,
    "protocol": cmd_protocol,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def run_command(command: str, cfg: PipelineConfig, inputs: Optional[Dict[str, str]] = None,
                out_dir: Optional[Path] = None, use_dae: bool = False) -> RunManifest:
    """Run one stage and persist its manifest; PipelineErrors propagate after ``run.json`` is written."""
    if command not in COMMANDS:
        raise PipelineError(f"Unknown command {command!r}", "unknown_command", {"known": sorted(COMMANDS)})
    out_dir = Path(out_dir or ".")
    inputs = {k: str(v) for k, v in (inputs or {}).items() if v is not None}
    manifest = RunManifest(
        command=command, seed=cfg.seed, use_dae=use_dae, config=cfg.model_dump(mode="json"), inputs=inputs
    )
    ctx = RunContext(cfg, inputs, out_dir, use_dae, manifest)
    try:
        n_threads = threads()
        if n_threads is not None:
            torch.set_num_threads(n_threads)
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Running {command} (seed {cfg.seed}) into {out_dir}")
        COMMANDS[command](ctx)
        manifest.status = "success"
    except PipelineError as e:
        manifest.status = "failed"
        manifest.error = e.to_dict()
        logger.error(f"Error in {command}: {e.message}")
        raise
    except Exception as e:
        manifest.status = "failed"
        manifest.error = {"success": False, "error_type": "internal", "message": str(e), "details": {}}
        raise
    finally:
        manifest.results = convert_numpy_types(manifest.results)
        try:
            write_json(manifest.model_dump(), out_dir / "run.json")
        except PipelineError:
            logger.error(f"Could not write run manifest to {out_dir}")
    return manifest
