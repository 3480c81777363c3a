import numpy as np
import pytest
from scipy import sparse, stats
from scipy.sparse.csgraph import maximum_bipartite_matching

from spikerep.utils.errors import PipelineError
from spikerep.utils.evaluation import (
    MatchCounts,
    ablation_report,
    adjusted_rand_index,
    match_events,
    mean_sem,
    protocol_ari,
    score_sorting,
    scores_from_counts,
    silhouette_score,
    wilcoxon_signed_rank,
)
from spikerep.utils.recording_io import SortingResult
from spikerep.utils.synthgen import generate_recording


def test_ari_known_value():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 2]) == pytest.approx(4 / 7)


def test_ari_ignores_label_names():
    assert adjusted_rand_index([0, 0, 1, 1, 2], [5, 5, 9, 9, 1]) == pytest.approx(1.0)


def test_ari_of_shuffled_labels_averages_zero():
    rng = np.random.default_rng(11)
    labels = np.repeat(np.arange(5), 40)
    scores = [adjusted_rand_index(labels, rng.permutation(labels)) for _ in range(1000)]
    assert abs(np.mean(scores)) <= 0.02
    assert max(scores) <= 1.0


def test_ari_needs_equal_lengths():
    with pytest.raises(PipelineError) as exc:
        adjusted_rand_index([0, 1, 1], [0, 1])
    assert exc.value.error_type == "length_mismatch"


def test_silhouette_of_two_tight_pairs():
    X = np.array([[0.0], [1.0], [10.0], [11.0]])
    expected = (9.5 / 10.5 + 8.5 / 9.5) / 2
    assert silhouette_score(X, [0, 0, 1, 1]) == pytest.approx(expected)


def test_silhouette_edge_cases():
    X = np.arange(6, dtype=float)[:, None]
    assert silhouette_score(X, np.arange(6)) == 0.0
    with pytest.raises(PipelineError) as exc:
        silhouette_score(X, np.zeros(6))
    assert exc.value.error_type == "single_cluster"


def test_match_events_counts():
    counts = match_events([100, 200, 300], [103, 198, 290, 500], delta=5)
    assert counts == MatchCounts(n1=1, n2=2, n3=2)


def test_each_event_matches_at_most_once():
    assert match_events([100, 101], [100], delta=5) == MatchCounts(n1=1, n2=1, n3=0)
    assert match_events([100], [99, 101], delta=5) == MatchCounts(n1=0, n2=1, n3=1)


def test_matching_is_symmetric():
    rng = np.random.default_rng(0)
    a = np.sort(rng.choice(5000, size=200, replace=False))
    b = np.sort(rng.choice(5000, size=150, replace=False))
    assert match_events(a, b, 8).n2 == match_events(b, a, 8).n2


def test_nearest_first_pairing_would_lose_a_match():
    # 10 is nearer to 12 than to 7, yet pairing 10-7 and 11-12 keeps both.
    assert match_events([10, 11], [7, 12], delta=3) == MatchCounts(n1=0, n2=2, n3=0)
    assert match_events([7, 12], [10, 11], delta=3) == MatchCounts(n1=0, n2=2, n3=0)


@pytest.mark.parametrize("seed", range(5))
def test_matching_finds_the_largest_pairing(seed):
    rng = np.random.default_rng(seed)
    a = np.sort(rng.integers(0, 400, size=40))
    b = np.sort(rng.integers(0, 400, size=30))
    within = np.abs(a[:, None] - b[None, :]) <= 6
    best = int((maximum_bipartite_matching(sparse.csr_matrix(within.astype(np.int8)), perm_type="column") >= 0).sum())
    assert match_events(a, b, 6).n2 == best
    assert match_events(b, a, 6).n2 == best


def test_matching_rejects_unsorted_frames():
    with pytest.raises(PipelineError) as exc:
        match_events([300, 100], [100], delta=5)
    assert exc.value.error_type == "unsorted_input"


def test_scores_from_counts():
    accuracy, recall, precision = scores_from_counts(MatchCounts(5, 90, 5))
    assert accuracy == pytest.approx(0.9)
    assert recall == pytest.approx(90 / 95)
    assert precision == pytest.approx(90 / 95)
    assert accuracy <= min(recall, precision)


def test_accuracy_never_exceeds_precision_or_recall():
    rng = np.random.default_rng(5)
    for n1, n2, n3 in rng.integers(0, 50, size=(500, 3)):
        if n1 + n2 == 0 or n2 + n3 == 0:
            continue
        accuracy, recall, precision = scores_from_counts(MatchCounts(int(n1), int(n2), int(n3)))
        assert accuracy <= min(precision, recall) + 1e-12


def test_scores_undefined_without_events():
    with pytest.raises(PipelineError) as exc:
        scores_from_counts(MatchCounts(0, 0, 3))
    assert exc.value.error_type == "undefined_metric"


def test_mean_sem():
    mean, sem = mean_sem([1.0, 2.0, 3.0])
    assert mean == 2.0
    assert sem == pytest.approx(1.0 / np.sqrt(3.0))


@pytest.fixture
def scored_recording(spec_factory):
    rec, gt = generate_recording(spec_factory(n_units=2, noise_std=5.0))
    frames, labels = gt.as_labels()
    return rec, gt, frames, labels


def test_perfect_sorting_scores_one_under_any_labels(scored_recording):
    rec, gt, frames, labels = scored_recording
    for renamed in (labels, 1 - labels):
        score = score_sorting(gt, SortingResult.from_assignments(frames, renamed), 5, 3.0, rec)
        assert [u.accuracy for u in score.units] == [1.0, 1.0]
        assert score.aggregate["accuracy"] == (1.0, 0.0)


def test_empty_sorting_scores_zero(scored_recording):
    rec, gt, _, _ = scored_recording
    score = score_sorting(gt, SortingResult([], []), 5, 3.0, rec)
    for unit in score.units:
        assert (unit.accuracy, unit.recall, unit.precision) == (0.0, 0.0, 0.0)
        assert "precision_undefined" in unit.flags


def test_split_unit_scores_about_half(scored_recording):
    rec, gt, frames, labels = scored_recording
    split = labels.copy()
    unit0 = np.flatnonzero(labels == 0)
    split[unit0[1::2]] = 2
    score = score_sorting(gt, SortingResult.from_assignments(frames, split), 5, 3.0, rec)
    by_unit = {u.gt_unit_id: u for u in score.units}
    assert by_unit[0].accuracy == pytest.approx(0.5, abs=0.05)
    assert by_unit[0].precision == 1.0
    assert by_unit[1].accuracy == 1.0


def test_no_unit_above_the_floor(scored_recording):
    rec, gt, frames, labels = scored_recording
    with pytest.raises(PipelineError) as exc:
        score_sorting(gt, SortingResult.from_assignments(frames, labels), 5, 1e12, rec)
    assert exc.value.error_type == "no_units"


def _one_hot_pool(n_units=4, n_spikes=40, seed=0):
    rng = np.random.default_rng(seed)
    return {u: np.eye(n_units)[u] + 0.01 * rng.normal(size=(n_spikes, n_units)) for u in range(n_units)}


def test_protocol_on_perfect_features():
    result = protocol_ari(lambda x: x, _one_hot_pool(), n_units=3, seeds=[0, 1, 2], gmm_runs=2, spikes_per_unit=30)
    assert result.mean == pytest.approx(1.0)
    assert len(result.per_seed) == 3
    assert result.min <= result.mean <= result.max
    assert result.n_units == 3 and result.gmm_runs == 2


def test_protocol_on_constant_features():
    result = protocol_ari(lambda x: np.zeros((len(x), 2)), _one_hot_pool(), 3, [0, 1], gmm_runs=1, spikes_per_unit=30)
    assert result.mean == pytest.approx(0.0, abs=1e-9)


def test_protocol_is_deterministic():
    a = protocol_ari(lambda x: x, _one_hot_pool(), 2, [4, 5], gmm_runs=1)
    b = protocol_ari(lambda x: x, _one_hot_pool(), 2, [5, 4], gmm_runs=1)
    assert a.per_seed == b.per_seed


def test_protocol_needs_enough_units():
    with pytest.raises(PipelineError) as exc:
        protocol_ari(lambda x: x, _one_hot_pool(), n_units=5, seeds=[0], gmm_runs=1)
    assert exc.value.error_type == "insufficient_pool"


def test_ablation_measures_the_shift_between_sets():
    rng = np.random.default_rng(2)
    train = rng.normal(size=(200, 4))
    test = rng.normal(size=(200, 4)) + [5.0, 0.0, 0.0, 0.0]
    assert ablation_report(train, test).centroid_distance == pytest.approx(5.0, rel=0.1)
    assert ablation_report(train, train.copy()).centroid_distance == pytest.approx(0.0, abs=1e-9)


def test_ablation_scores_labelled_test_clusters():
    rng = np.random.default_rng(3)
    train = rng.normal(size=(100, 3))
    test = np.concatenate([rng.normal(size=(50, 3)), rng.normal(size=(50, 3)) + 12.0])
    report = ablation_report(train, test, np.repeat([0, 1], 50), seed=1)
    assert report.ari == pytest.approx(1.0)
    assert report.silhouette > 0.7


def test_ablation_without_labels_has_no_ari():
    rng = np.random.default_rng(4)
    report = ablation_report(rng.normal(size=(30, 3)), rng.normal(size=(30, 3)))
    assert report.ari is None


def test_wilcoxon_exact_all_positive():
    result = wilcoxon_signed_rank([2, 3, 4, 5, 6, 7], [1, 1, 1, 1, 1, 1])
    assert result.method == "exact"
    assert result.statistic == 0.0
    assert result.p_value == pytest.approx(0.03125)


def test_wilcoxon_is_symmetric_in_its_arguments():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=12), rng.normal(size=12)
    assert wilcoxon_signed_rank(a, b).p_value == pytest.approx(wilcoxon_signed_rank(b, a).p_value)


def test_wilcoxon_exact_agrees_with_scipy():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=15), rng.normal(0.5, 1.0, size=15)
    expected = stats.wilcoxon(a, b, method="exact").pvalue
    assert wilcoxon_signed_rank(a, b).p_value == pytest.approx(expected, rel=1e-9)


def test_wilcoxon_large_samples_use_the_normal_approximation():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=40), rng.normal(0.3, 1.0, size=40)
    result = wilcoxon_signed_rank(a, b)
    assert result.method == "normal"
    assert result.p_value == pytest.approx(stats.wilcoxon(a - b, method="approx", correction=True).pvalue)


def test_wilcoxon_needs_informative_pairs():
    with pytest.raises(PipelineError) as exc:
        wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0, 5.0])
    assert exc.value.error_type == "too_few_pairs"
