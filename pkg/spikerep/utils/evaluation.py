"""Clustering metrics, ground-truth event matching, evaluation protocol and significance tests."""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn import metrics

from spikerep.utils.cluster import GmmOptions, gmm_assign, gmm_fit, pca_fit, pca_transform
from spikerep.utils.errors import PipelineError
from spikerep.utils.recording_io import GroundTruth, Recording, SortingResult
from spikerep.utils.seeding import substream
from spikerep.utils.synthgen import snr_of_unit

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25


def adjusted_rand_index(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    a, b = np.asarray(labels_a).ravel(), np.asarray(labels_b).ravel()
    if a.shape != b.shape or a.size < 2:
        raise PipelineError(
            "ARI needs two labelings of equal length ≥ 2", "length_mismatch", {"a": int(a.size), "b": int(b.size)}
        )
    return float(metrics.adjusted_rand_score(a, b))


def silhouette_score(X: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette; singleton clusters score 0 and 0/0 counts as 0."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    n_clusters = len(np.unique(labels))
    if n_clusters < 2:
        raise PipelineError("Silhouette needs at least 2 clusters", "single_cluster", {"n_clusters": n_clusters})
    if n_clusters == len(labels):
        return 0.0
    return float(metrics.silhouette_score(X, labels, metric="euclidean"))


@dataclass(frozen=True)
class MatchCounts:
    n1: int
    n2: int
    n3: int

    def __post_init__(self):
        if min(self.n1, self.n2, self.n3) < 0:
            raise PipelineError("Match counts must be nonnegative", "invalid_counts", {})


def _check_sorted(frames: np.ndarray, name: str) -> None:
    if np.any(np.diff(frames) < 0):
        raise PipelineError(f"{name} frames are not sorted", "unsorted_input", {"input": name})


def match_events(gt_frames: Sequence[int], sorted_frames: Sequence[int], delta: int) -> MatchCounts:
    """One-to-one matching within ±delta samples.

    Ground-truth events are visited in order and each takes the earliest
    still-unmatched sorter event inside its window. On sorted frames this
    yields the largest possible number of pairs, the same count as any
    nearest-partner pairing that loses no match.
    """
    gt = np.asarray(gt_frames, dtype=np.int64).ravel()
    found = np.asarray(sorted_frames, dtype=np.int64).ravel()
    if delta < 0:
        raise PipelineError("Match window must be ≥ 0", "invalid_spec", {"delta": delta})
    _check_sorted(gt, "ground-truth")
    _check_sorted(found, "sorter")
    j, matched = 0, 0
    for frame in gt:
        while j < len(found) and found[j] < frame - delta:
            j += 1
        if j < len(found) and found[j] <= frame + delta:
            matched += 1
            j += 1
    return MatchCounts(n1=len(gt) - matched, n2=matched, n3=len(found) - matched)


def scores_from_counts(c: MatchCounts) -> Tuple[float, float, float]:
    """(accuracy, recall, precision)."""
    if c.n1 + c.n2 == 0 or c.n2 + c.n3 == 0:
        raise PipelineError("Metric undefined for these counts", "undefined_metric", {"n1": c.n1, "n2": c.n2, "n3": c.n3})
    return c.n2 / (c.n1 + c.n2 + c.n3), c.n2 / (c.n1 + c.n2), c.n2 / (c.n2 + c.n3)


@dataclass
class UnitScore:
    gt_unit_id: int
    matched_sorter_label: Optional[int]
    accuracy: float
    recall: float
    precision: float
    counts: MatchCounts
    snr: float
    flags: List[str] = field(default_factory=list)


@dataclass
class SortingScore:
    units: List[UnitScore]
    aggregate: Dict[str, Tuple[float, float]]
    skipped_units: Dict[int, str]
    delta_samples: int
    snr_floor: float


def mean_sem(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    sem = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), sem


def _score_unit(unit_id: int, frames: np.ndarray, sr: SortingResult, delta: int, snr: float) -> UnitScore:
    if sr.n_units == 0:
        counts = match_events(frames, [], delta)
        return UnitScore(unit_id, None, 0.0, 0.0, 0.0, counts, snr, ["precision_undefined"])
    best = None
    for label in range(sr.n_units):
        counts = match_events(frames, sr.frames_for(label), delta)
        accuracy = counts.n2 / (counts.n1 + counts.n2 + counts.n3)
        if best is None or accuracy > best[0]:
            best = (accuracy, label, counts)
    _, label, counts = best
    accuracy, recall, precision = scores_from_counts(counts) if counts.n2 + counts.n3 > 0 else (0.0, 0.0, 0.0)
    return UnitScore(unit_id, label, accuracy, recall, precision, counts, snr)


def score_sorting(gt: GroundTruth, sr: SortingResult, delta: int, snr_floor: float, rec: Recording,
                  snippet_samples: int = 121) -> SortingScore:
    """Best-matching sorter label per ground-truth unit above the SNR floor."""
    units, skipped = [], {}
    for unit_id, frames in gt.units.items():
        try:
            snr = snr_of_unit(rec, gt, unit_id, snippet_samples)
        except PipelineError as e:
            if e.error_type != "too_few_spikes":
                raise
            logger.warning(f"Skipping unit {unit_id}: {e.message}")
            skipped[unit_id] = "too_few_spikes"
            continue
        if not snr > snr_floor:
            skipped[unit_id] = f"snr {snr:.2f} ≤ {snr_floor}"
            continue
        units.append(_score_unit(unit_id, frames, sr, delta, snr))
    if not units:
        raise PipelineError(
            f"No ground-truth unit has SNR above {snr_floor}", "no_units", {"skipped": {str(k): v for k, v in skipped.items()}}
        )
    aggregate = {m: mean_sem([getattr(u, m) for u in units]) for m in ("accuracy", "recall", "precision")}
    logger.info(
        f"Scored {len(units)} units (skipped {len(skipped)}): accuracy {aggregate['accuracy'][0]:.3f}"
    )
    return SortingScore(units, aggregate, skipped, delta, snr_floor)


@dataclass
class ProtocolResult:
    mean: float
    sem: float
    max: float
    min: float
    per_seed: List[float]
    seconds_per_point: float
    n_units: int
    gmm_runs: int


RepSource = Callable[[np.ndarray], np.ndarray]


def protocol_ari(rep_source: RepSource, unit_pool: Dict[int, np.ndarray], n_units: int, seeds: Sequence[int],
                 gmm_runs: int, spikes_per_unit: int = 200, opts: GmmOptions = GmmOptions()) -> ProtocolResult:
    """Per seed: sample ``n_units`` units, represent their spikes, average ARI over ``gmm_runs`` GMM fits.

    ``unit_pool`` maps a unit id to that unit's per-spike inputs; ``rep_source``
    turns the stacked inputs of one data point into an N×D matrix.
    """
    if len(unit_pool) < n_units or n_units < 1:
        raise PipelineError(
            f"Pool of {len(unit_pool)} units cannot supply {n_units}",
            "insufficient_pool",
            {"pool": len(unit_pool), "n_units": n_units},
        )
    unit_ids = sorted(unit_pool)
    points, elapsed = [], []
    for seed in sorted(seeds):
        start = time.perf_counter()
        rng = substream(seed, "protocol")
        chosen = sorted(int(u) for u in rng.choice(unit_ids, size=n_units, replace=False))
        inputs, labels = [], []
        for unit in chosen:
            pool = np.asarray(unit_pool[unit])
            take = np.sort(rng.choice(len(pool), size=min(len(pool), spikes_per_unit), replace=False))
            inputs.append(pool[take])
            labels.append(np.full(len(take), unit))
        X = np.asarray(rep_source(np.concatenate(inputs)), dtype=np.float64)
        truth = np.concatenate(labels)
        aris = [adjusted_rand_index(truth, gmm_assign(gmm_fit(X, n_units, opts, seed=run), X)) for run in range(gmm_runs)]
        points.append(float(np.mean(aris)))
        elapsed.append(time.perf_counter() - start)
        logger.debug(f"Protocol seed {seed}: units {chosen}, ARI {points[-1]:.4f}")
    mean, sem = mean_sem(points)
    return ProtocolResult(mean, sem, float(np.max(points)), float(np.min(points)), points,
                          float(np.mean(elapsed)), n_units, gmm_runs)


@dataclass
class AblationReport:
    centroid_distance: float
    silhouette: float
    ari: Optional[float] = None


def ablation_report(train_reps: np.ndarray, test_reps: np.ndarray, test_labels: Optional[Sequence[int]] = None,
                    use_pca_dims: int = 2, seed: int = 0, opts: GmmOptions = GmmOptions()) -> AblationReport:
    """Centroid distance between test and training sets in a shared PCA plane, plus test clustering quality."""
    train_reps = np.asarray(train_reps, dtype=np.float64)
    test_reps = np.asarray(test_reps, dtype=np.float64)
    if len(train_reps) == 0 or len(test_reps) == 0:
        raise PipelineError("Ablation needs nonempty training and test representations", "degenerate_input", {})
    pca = pca_fit(np.concatenate([train_reps, test_reps]), use_pca_dims)
    distance = float(np.linalg.norm(
        pca_transform(pca, test_reps).mean(axis=0) - pca_transform(pca, train_reps).mean(axis=0)
    ))

    n_labels = 0 if test_labels is None else len(np.unique(test_labels))
    k = n_labels if n_labels >= 2 else 2
    ari = None
    silhouette = 0.0
    if len(test_reps) > k:
        predicted = gmm_assign(gmm_fit(test_reps, k, opts, seed), test_reps)
        if len(np.unique(predicted)) >= 2:
            silhouette = silhouette_score(test_reps, predicted)
        if n_labels >= 2:
            ari = adjusted_rand_index(test_labels, predicted)
    return AblationReport(distance, silhouette, ari)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


def _exact_lower_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(T ≤ w2) where T is the sum of a random subset of ``doubled_ranks``."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return float(counts[: w2 + 1].sum() / 2.0 ** len(doubled_ranks))


def wilcoxon_signed_rank(paired_a: Sequence[float], paired_b: Sequence[float]) -> WilcoxonResult:
    """Two-sided signed-rank test; zero differences dropped, ties mid-ranked.

    Exact null distribution up to 25 informative pairs, normal approximation
    with tie and continuity correction above.
    """
    a, b = np.asarray(paired_a, dtype=np.float64), np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape:
        raise PipelineError("Paired samples differ in length", "length_mismatch", {"a": a.size, "b": b.size})
    d = a - b
    d = d[d != 0]
    n = int(d.size)
    if n < 5:
        raise PipelineError(f"Only {n} informative pairs; at least 5 are needed", "too_few_pairs", {"n": n})
    ranks = stats.rankdata(np.abs(d))
    w_plus, w_minus = ranks[d > 0].sum(), ranks[d < 0].sum()
    w = float(min(w_plus, w_minus))
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = min(1.0, 2.0 * _exact_lower_tail(doubled, int(round(2 * w))))
        return WilcoxonResult(w, p, n, "exact")
    result = stats.wilcoxon(d, zero_method="wilcox", correction=True, alternative="two-sided", method="approx")
    return WilcoxonResult(w, float(result.pvalue), n, "normal")
