"""Experiment drivers built on the evaluation primitives: labeled splits, protocol runs, ablations, sweeps."""
import logging
from dataclasses import replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from spikerep.utils.augment import AugmentSpec
from spikerep.utils.cluster import GmmOptions, pca_fit, pca_transform
from spikerep.utils.errors import PipelineError
from spikerep.utils.evaluation import (
    ProtocolResult,
    RepSource,
    WilcoxonResult,
    ablation_report,
    protocol_ari,
    wilcoxon_signed_rank,
)
from spikerep.utils.recording_io import SnippetSet
from spikerep.utils.repmodel import ModelConfig, TrainConfig
from spikerep.utils.seeding import substream
from spikerep.utils.training import ModelState, embed, init_state, train

logger = logging.getLogger(__name__)


def split_labeled(snippets: SnippetSet, train_per_unit: int, eval_per_unit: int,
                  seed: int) -> Tuple[SnippetSet, SnippetSet]:
    """Disjoint per-unit training and evaluation subsets, each kept in frame order."""
    rng = substream(seed, "split")
    train_idx, eval_idx = [], []
    for unit, idx in snippets.indices_by_unit().items():
        shuffled = rng.permutation(idx)
        n_eval = min(eval_per_unit, len(shuffled) // 2) if len(shuffled) > 1 else 0
        eval_idx.append(shuffled[:n_eval])
        train_idx.append(shuffled[n_eval:n_eval + train_per_unit])
        if n_eval < eval_per_unit:
            logger.warning(f"Unit {unit} has {len(idx)} spikes; evaluation set gets {n_eval}")
    as_sorted = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
    return snippets.take(as_sorted(train_idx)), snippets.take(as_sorted(eval_idx))


def flatten(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(len(values), -1)


def pca_features(values: np.ndarray, dims: int = 2) -> np.ndarray:
    """Baseline features: PCA of flattened raw snippets fitted on ``values`` itself."""
    X = flatten(values)
    return pca_transform(pca_fit(X, min(dims, X.shape[1])), X)


def _identity(x: np.ndarray) -> np.ndarray:
    return x


def unit_pool(snippets: SnippetSet, features: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
    source = snippets.values if features is None else features
    return {unit: np.asarray(source)[idx] for unit, idx in snippets.indices_by_unit().items()}


def run_protocol(eval_set: SnippetSet, features: str, state: Optional[ModelState], n_units: int, n_seeds: int,
                 gmm_runs: int, spikes_per_unit: int, opts: GmmOptions, use_dae: bool = False,
                 pca_dims: int = 2) -> ProtocolResult:
    """Protocol ARI with learned representations (``"learned"``) or the raw-snippet PCA baseline (``"pca"``)."""
    if features == "pca":
        pool = unit_pool(eval_set)
        source: RepSource = lambda x: pca_features(x, pca_dims)
    else:
        if state is None:
            raise PipelineError("Learned features need a trained model", "config_conflict", {})
        pool = unit_pool(eval_set, embed(eval_set.values, state, use_dae=use_dae))
        source = _identity
    return protocol_ari(source, pool, n_units, range(n_seeds), gmm_runs, spikes_per_unit, opts)


def _sample_per_unit(snippets: SnippetSet, per_unit: int, rng: np.random.Generator) -> np.ndarray:
    if snippets.labels is None:
        return np.sort(rng.choice(len(snippets), size=min(per_unit, len(snippets)), replace=False))
    picks = [
        rng.choice(idx, size=min(per_unit, len(idx)), replace=False)
        for idx in snippets.indices_by_unit().values()
    ]
    return np.sort(np.concatenate(picks))


def run_ablation(state: ModelState, train_set: SnippetSet, test_set: SnippetSet, samples_per_unit: int,
                 repeats: int, pca_dims: int, opts: GmmOptions, seed: int) -> Dict[str, Dict[str, List]]:
    """Repeat the centroid/silhouette/ARI report with and without the DAE on fresh subsamples."""
    results: Dict[str, Dict[str, List]] = {}
    for use_dae in (False, True):
        train_reps = embed(train_set.values, state, use_dae=use_dae)
        test_reps = embed(test_set.values, state, use_dae=use_dae)
        name = "with DAE" if use_dae else "without DAE"
        rows: Dict[str, List] = {"centroid_distance": [], "silhouette": [], "ari": []}
        for repeat in range(repeats):
            rng = substream(seed, "ablation", repeat)
            tr = _sample_per_unit(train_set, samples_per_unit, rng)
            te = _sample_per_unit(test_set, samples_per_unit, rng)
            labels = None if test_set.labels is None else test_set.labels[te]
            report = ablation_report(train_reps[tr], test_reps[te], labels, pca_dims, seed=repeat, opts=opts)
            rows["centroid_distance"].append(report.centroid_distance)
            rows["silhouette"].append(report.silhouette)
            rows["ari"].append(report.ari)
        results[name] = rows
        logger.info(f"Ablation {name}: mean centroid distance {np.mean(rows['centroid_distance']):.4f}")
    return results


SWEEP_PARAMS = ("alpha", "rep_dim")


def run_sweep(param: str, values: Sequence[float], model_config: ModelConfig, train_config: TrainConfig,
              aug: AugmentSpec, train_set: SnippetSet, eval_set: SnippetSet, n_units: int, n_seeds: int,
              gmm_runs: int, spikes_per_unit: int, opts: GmmOptions,
              on_model: Optional[Callable[[str, ModelState], None]] = None) -> Dict[str, ProtocolResult]:
    """Train one model per value of ``param`` and score each with the protocol."""
    if param not in SWEEP_PARAMS:
        raise PipelineError(f"Cannot sweep {param!r}", "config_invalid", {"allowed": list(SWEEP_PARAMS)})
    results = {}
    for value in values:
        value = int(value) if param == "rep_dim" else float(value)
        state = init_state(replace(model_config, **{param: value}), train_config)
        train(state, train_set, aug)
        name = f"{param}={value:g}"
        if on_model is not None:
            on_model(name, state)
        results[name] = run_protocol(eval_set, "learned", state, n_units, n_seeds, gmm_runs, spikes_per_unit, opts)
        logger.info(f"Sweep {name}: ARI {results[name].mean:.4f} ± {results[name].sem:.4f}")
    return results


COMPARED_METRICS = ("accuracy", "recall", "precision")


def compare_unit_scores(report_a: Mapping, report_b: Mapping) -> Tuple[Dict[str, WilcoxonResult], Dict[str, tuple]]:
    """Paired signed-rank tests over the ground-truth units both evaluation reports scored."""
    a = {u["gt_unit_id"]: u for u in report_a["units"]}
    b = {u["gt_unit_id"]: u for u in report_b["units"]}
    common = sorted(set(a) & set(b))
    results, means = {}, {}
    for metric in COMPARED_METRICS:
        xa = np.array([a[u][metric] for u in common], dtype=np.float64)
        xb = np.array([b[u][metric] for u in common], dtype=np.float64)
        results[metric] = wilcoxon_signed_rank(xa, xb)
        means[metric] = (float(xa.mean()), float(xb.mean()))
    return results, means
