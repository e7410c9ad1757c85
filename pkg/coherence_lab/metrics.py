#!/usr/bin/env python3

"""
Evaluation metrics: pairwise ranking accuracy (sentence ordering), accuracy (3-way classification),
F-beta of the low coherence class (binary classification) and Spearman's rank correlation (score
prediction), plus confusion matrices.
"""
import warnings
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from coherence_lab.errors import LabelError, MetricError
from coherence_lab.text import BINARY_LABELS

TASK_METRICS = {'order': 'pra', '3way': 'accuracy', '2way': 'f0.5', 'score': 'spearman'}


@dataclass
class RankedPair:
    score_original: float
    score_permuted: float

    def __post_init__(self):
        if not (np.isfinite(self.score_original) and np.isfinite(self.score_permuted)):
            raise MetricError(f'ranked pair scores must be finite, got {self.score_original}, {self.score_permuted}')


@dataclass
class FScore:
    value: float
    precision: float
    recall: float
    beta: float
    degenerate: bool = False


@dataclass
class MetricRecord:
    task: str
    metric: str
    value: float
    n: int

    def to_dict(self):
        return asdict(self)


def pairwise_ranking_accuracy(pairs: Sequence[RankedPair]) -> float:
    """Fraction of pairs whose original scores strictly higher than its permutation; ties are errors."""
    if len(pairs) == 0:
        raise MetricError('pairwise ranking accuracy of no pairs')
    return float(np.mean([p.score_original > p.score_permuted for p in pairs]))


def _check_lengths(pred, gold, min_len=1):
    if len(pred) != len(gold):
        raise MetricError(f'{len(pred)} predictions for {len(gold)} gold labels')
    if len(gold) < min_len:
        raise MetricError(f'need at least {min_len} items, got {len(gold)}')


def accuracy(pred: Sequence, gold: Sequence) -> float:
    _check_lengths(pred, gold)
    return float(np.mean([p == g for p, g in zip(pred, gold)]))


def f_beta_low(pred: Sequence[str], gold: Sequence[str], beta=0.5) -> FScore:
    """
    F-beta of the non_coherent class: (1 + b^2) P R / (b^2 P + R).

    Without predicted or gold positives (or with no true positive) the score is 0 and the result is
    flagged ``degenerate``.
    """
    _check_lengths(pred, gold)
    for label in list(pred) + list(gold):
        if label not in BINARY_LABELS:
            raise LabelError(f'binary labels must be one of {BINARY_LABELS}, got {label}')
    pred = np.asarray(pred) == 'non_coherent'
    gold = np.asarray(gold) == 'non_coherent'
    tp = int(np.sum(pred & gold))
    n_pred, n_gold = int(pred.sum()), int(gold.sum())
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    b2 = beta ** 2
    denominator = b2 * precision + recall
    if n_pred == 0 or n_gold == 0 or denominator == 0:
        warnings.warn(f'F-{beta} of the low coherence class is degenerate '
                      f'({n_pred} predicted, {n_gold} gold, {tp} true positives); reporting 0')
        return FScore(0.0, precision, recall, beta, degenerate=True)
    return FScore((1 + b2) * precision * recall / denominator, precision, recall, beta)


def spearman(pred: Sequence[float], gold: Sequence[float]) -> float:
    """
    Pearson correlation of average ranks.

    :raises MetricError: when gold is constant (the coefficient is undefined)
    """
    _check_lengths(pred, gold, min_len=2)
    gold_ranks = rankdata(np.asarray(gold, dtype=np.float64))
    pred_ranks = rankdata(np.asarray(pred, dtype=np.float64))
    if np.all(gold_ranks == gold_ranks[0]):
        raise MetricError('spearman correlation is undefined for constant gold scores')
    if np.all(pred_ranks == pred_ranks[0]):
        warnings.warn('constant predictions; spearman correlation reported as 0')
        return 0.0
    gc = gold_ranks - gold_ranks.mean()
    pc = pred_ranks - pred_ranks.mean()
    return float(np.sum(gc * pc) / np.sqrt(np.sum(gc ** 2) * np.sum(pc ** 2)))


def confusion_matrix(pred: Sequence, gold: Sequence, labels: Sequence) -> np.ndarray:
    """Counts with gold labels on the rows and predictions on the columns."""
    _check_lengths(pred, gold)
    index = {label: i for i, label in enumerate(labels)}
    conf_mat = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, g in zip(pred, gold):
        if p not in index or g not in index:
            raise LabelError(f'label outside {list(labels)}: predicted {p}, gold {g}')
        conf_mat[index[g], index[p]] += 1
    return conf_mat


def plot_confusion_matrix(conf_mat, labels, f_name=None, title=None):
    """
    Heatmap of the row-normalised confusion matrix; written to ``f_name`` when given, shown otherwise.
    """
    import matplotlib
    if f_name is not None:
        matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import seaborn as sns

    conf_mat = np.asarray(conf_mat, dtype=np.float64)
    totals = conf_mat.sum(axis=1, keepdims=True)
    normalised = np.divide(conf_mat, totals, out=np.zeros_like(conf_mat), where=totals > 0)

    plt.figure(figsize=(6, 5))
    ax = sns.heatmap(normalised, annot=True, fmt='2.2f', vmin=0, vmax=1, annot_kws={'size': 12})
    ax.set_xticklabels(labels=labels, rotation=45, fontdict={'size': 12})
    ax.set_yticklabels(labels=labels, rotation=45, fontdict={'size': 12})
    ax.set_xlabel('Predicted', fontdict={'size': 14})
    ax.set_ylabel('Gold', fontdict={'size': 14})
    if title is not None:
        plt.title(title)
    plt.tight_layout()
    if f_name is not None:
        plt.savefig(f_name, bbox_inches='tight')
        plt.close()
    else:
        plt.show()
