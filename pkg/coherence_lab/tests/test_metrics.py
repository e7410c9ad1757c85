import numpy as np
import pytest
from numpy import testing
from scipy import stats
from sklearn import metrics as sk_metrics

from coherence_lab import metrics
from coherence_lab.errors import LabelError, MetricError

NC, OTHER = 'non_coherent', 'other'


def pairs(*scores):
    return [metrics.RankedPair(a, b) for a, b in scores]


def test_pairwise_ranking_accuracy_examples():
    assert metrics.pairwise_ranking_accuracy(pairs((2, 1), (3, 0))) == 1.0
    assert metrics.pairwise_ranking_accuracy(pairs((2, 1), (3, 0), (1, 1.5), (5, 4))) == 0.75
    assert metrics.pairwise_ranking_accuracy(pairs((1, 1))) == 0.0
    with pytest.raises(MetricError):
        metrics.pairwise_ranking_accuracy([])
    with pytest.raises(MetricError):
        metrics.RankedPair(np.nan, 1.0)


def test_pairwise_ranking_accuracy_is_shift_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = rng.normal(size=(30, 2))
        shift = rng.normal() * 10
        assert metrics.pairwise_ranking_accuracy(pairs(*scores)) == \
            metrics.pairwise_ranking_accuracy(pairs(*(scores + shift)))


def test_accuracy_examples():
    assert metrics.accuracy(['low', 'high'], ['low', 'high']) == 1.0
    assert metrics.accuracy(['low', 'high'], ['low', 'medium']) == 0.5
    assert metrics.accuracy(['low', 'low'], ['high', 'medium']) == 0.0
    with pytest.raises(MetricError):
        metrics.accuracy(['low'], ['low', 'high'])
    with pytest.raises(MetricError):
        metrics.accuracy([], [])


def test_f_beta_low_examples():
    half = metrics.f_beta_low([NC, NC, OTHER, OTHER], [NC, OTHER, NC, OTHER])
    assert (half.precision, half.recall) == (0.5, 0.5)
    testing.assert_allclose(half.value, 0.5)
    assert not half.degenerate

    precise = metrics.f_beta_low([NC, OTHER], [NC, NC])
    assert (precise.precision, precise.recall) == (1.0, 0.5)
    testing.assert_allclose(precise.value, 0.8333, atol=1e-4)

    with pytest.warns(UserWarning):
        none_predicted = metrics.f_beta_low([OTHER, OTHER], [NC, OTHER])
    assert none_predicted.value == 0.0 and none_predicted.degenerate

    with pytest.raises(LabelError):
        metrics.f_beta_low(['low'], [NC])


def test_spearman_examples():
    gold = [1.0, 2.0, 3.0, 4.0, 5.0]
    assert metrics.spearman(gold, gold) == pytest.approx(1.0, abs=1e-12)
    assert metrics.spearman(gold[::-1], gold) == pytest.approx(-1.0, abs=1e-12)

    def average_ranks(values):
        values = np.asarray(values, dtype=float)
        return np.array([np.sum(values < v) + (np.sum(values == v) + 1) / 2 for v in values])

    g, p = average_ranks([1, 2, 2, 3]), average_ranks([1, 3, 2, 4])
    expected = np.corrcoef(g, p)[0, 1]
    assert metrics.spearman([1, 3, 2, 4], [1, 2, 2, 3]) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(4.5 / np.sqrt(22.5), abs=1e-12)


def test_spearman_errors():
    with pytest.raises(MetricError):
        metrics.spearman([1, 2, 3], [2, 2, 2])
    with pytest.raises(MetricError):
        metrics.spearman([1], [1])
    with pytest.warns(UserWarning):
        assert metrics.spearman([1, 1, 1], [1, 2, 3]) == 0.0


def test_spearman_is_invariant_under_monotone_maps():
    rng = np.random.default_rng(1)
    for _ in range(20):
        gold = rng.integers(1, 10, size=25).astype(float)
        pred = rng.normal(size=25)
        base = metrics.spearman(pred, gold)
        assert metrics.spearman(np.exp(pred), gold) == pytest.approx(base, abs=1e-9)
        assert metrics.spearman(pred, gold ** 3 + 7) == pytest.approx(base, abs=1e-9)
        assert metrics.spearman(3 * pred - 1, np.log(gold)) == pytest.approx(base, abs=1e-9)


def test_metrics_against_library_oracles():
    rng = np.random.default_rng(2)
    labels = np.array([OTHER, NC])
    for _ in range(100):
        n = int(rng.integers(2, 40))
        pred, gold = labels[rng.integers(2, size=n)], labels[rng.integers(2, size=n)]
        pred[0], gold[0] = NC, NC
        testing.assert_allclose(metrics.f_beta_low(pred, gold).value,
                                sk_metrics.fbeta_score(gold, pred, beta=0.5, pos_label=NC), atol=1e-12)
        testing.assert_allclose(metrics.f_beta_low(pred, gold, beta=1).value,
                                sk_metrics.f1_score(gold, pred, pos_label=NC), atol=1e-12)
        assert metrics.accuracy(pred, gold) == pytest.approx(sk_metrics.accuracy_score(gold, pred), abs=1e-12)
        testing.assert_array_equal(metrics.confusion_matrix(pred, gold, [OTHER, NC]),
                                   sk_metrics.confusion_matrix(gold, pred, labels=[OTHER, NC]))

        scores = rng.integers(1, 4, size=(n, 3))
        gold_scores = scores.mean(axis=1)
        gold_scores[0], gold_scores[1] = 1.0, 3.0
        predictions = rng.normal(size=n)
        assert metrics.spearman(predictions, gold_scores) == \
            pytest.approx(stats.spearmanr(predictions, gold_scores).correlation, abs=1e-9)


def test_f1_is_the_harmonic_mean():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = 30
        pred = np.where(rng.random(n) < 0.5, NC, OTHER)
        gold = np.where(rng.random(n) < 0.5, NC, OTHER)
        pred[0], gold[0] = NC, NC
        score = metrics.f_beta_low(pred, gold, beta=1)
        harmonic = 2 * score.precision * score.recall / (score.precision + score.recall)
        assert score.value == pytest.approx(harmonic, abs=1e-12)
        assert 0 <= metrics.accuracy(pred, gold) <= 1


def test_confusion_matrix():
    conf_mat = metrics.confusion_matrix(['low', 'high', 'high'], ['low', 'medium', 'high'], ['low', 'medium', 'high'])
    testing.assert_array_equal(conf_mat, [[1, 0, 0], [0, 0, 1], [0, 0, 1]])
    with pytest.raises(LabelError):
        metrics.confusion_matrix(['great'], ['low'], ['low', 'high'])


def test_plot_confusion_matrix(tmp_path):
    f_name = str(tmp_path / 'conf_mat.png')
    metrics.plot_confusion_matrix([[3, 1], [0, 0]], [OTHER, NC], f_name=f_name, title='2way')
    assert (tmp_path / 'conf_mat.png').stat().st_size > 0


def test_metric_record():
    record = metrics.MetricRecord('order', 'pra', 0.75, 4)
    assert record.to_dict() == {'task': 'order', 'metric': 'pra', 'value': 0.75, 'n': 4}
    assert set(metrics.TASK_METRICS) == {'order', '3way', '2way', 'score'}
