#!/usr/bin/env python3

"""
This module trains coherence models: the training configuration, Adam / AdamW updates, task datasets
split by original document, the training loop, evaluation and multi-seed aggregation.
"""
import argparse
import dataclasses
import json
import os
import sys
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import tqdm
from joblib import Parallel, delayed, cpu_count

from coherence_lab import metrics as M
from coherence_lab.architectures import ArchitectureSpec, CoherenceModel
from coherence_lab.errors import ConfigError, ContractError, NumericError
from coherence_lab.text import (BINARY_LABELS, LABEL3, Document, EncodedDocument, EncodedPair, EntailmentExample, Fact,
                                PermutationPair, Vocabulary, apply_permutation, derive_binary_label,
                                derive_gold_score, encode_document, encode_entailment, permute_facts)

TASKS = ('2way', '3way', 'order', 'score')
TASK_HEADS = {'2way': 'classify2', '3way': 'classify3', 'order': 'rank_score', 'score': 'regress'}
OPTIMIZERS = ('adam', 'adamw')
THREADS_ENV = 'COHERENCE_LAB_THREADS'


@dataclass
class TrainConfig:
    """
    Training hyperparameters. ``dropout_p`` replaces the dropout of every encoder of the trained model.
    """
    epochs: int = 10
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dropout_p: float = 0.1
    margin: float = 1.0
    batch_size: int = 8
    seed: int = 0
    n_seeds: int = 10
    optimizer: str = 'adam'
    clip_norm: Optional[float] = 1.0
    freeze_embeddings: bool = False
    test_fraction: float = 0.2
    eval_train_loss: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0:
            raise ConfigError(f'lr must be non-negative, got {self.lr}')
        if not 0 <= self.weight_decay < 1:
            raise ConfigError(f'weight_decay must be in [0, 1), got {self.weight_decay}')
        if self.margin < 0:
            raise ConfigError(f'margin must be non-negative, got {self.margin}')
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f'betas must be two values in [0, 1), got {self.betas}')
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f'optimizer must be one of {OPTIMIZERS}, got {self.optimizer}')
        if self.epochs < 0 or self.batch_size < 1 or self.n_seeds < 1:
            raise ConfigError('epochs must be non-negative, batch_size and n_seeds positive')
        if not 0 <= self.dropout_p < 1 or not 0 <= self.test_fraction < 1:
            raise ConfigError('dropout_p and test_fraction must be in [0, 1)')
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f'clip_norm must be positive or None, got {self.clip_norm}')

    def to_dict(self):
        d = dataclasses.asdict(self)
        d['betas'] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, values: Mapping):
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f'unknown training settings: {sorted(unknown)}')
        return cls(**values)

    @classmethod
    def add_to_parser(cls, parser: argparse.ArgumentParser):
        """
        Adds one ``--<field>`` option per training parameter. Options left out stay None so that they do
        not override values from a config file.

        :param parser: parser that will be updated with a group of training arguments
        """
        group = parser.add_argument_group('Training parameters',
                                          'Override the values of the config file (defaults in brackets).')
        for var in fields(cls):
            flag = '--' + var.name.replace('_', '-')
            default = var.default
            if isinstance(default, bool):
                group.add_argument(flag, dest=var.name, action='store_const', const=True, default=None,
                                   help=f'[{default}]')
            elif var.name == 'betas':
                group.add_argument(flag, dest=var.name, type=float, nargs=2, default=None, help=f'[{default}]')
            elif var.name == 'optimizer':
                group.add_argument(flag, dest=var.name, choices=OPTIMIZERS, default=None, help=f'[{default}]')
            elif var.name == 'clip_norm':
                group.add_argument(flag, dest=var.name, type=float, default=None, help=f'[{default}]')
            else:
                group.add_argument(flag, dest=var.name, type=type(default), default=None, help=f'[{default}]')

    @classmethod
    def from_parser_args(cls, args, base: Optional['TrainConfig'] = None):
        """
        Creates the training config from the arguments added by :meth:`add_to_parser`.

        :param args: Namespace from the command line
        :param base: values used for the options that were not given
        """
        values = (base or cls()).to_dict()
        for var in fields(cls):
            if getattr(args, var.name, None) is not None:
                values[var.name] = getattr(args, var.name)
        return cls(**values)


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping, grads: Mapping[str, np.ndarray], state: OptimizerState, cfg: TrainConfig):
    """
    One Adam update with bias correction. With ``cfg.optimizer == 'adamw'`` the decoupled decay
    theta <- theta - lr * wd * theta is applied before the moment update; plain Adam ignores weight_decay.
    Parameters without a gradient are left untouched.

    :param params: name -> Tensor, updated in place
    :param grads: name -> gradient array
    :raises NumericError: on a non-finite gradient
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f'non-finite gradient for {name} at step {state.step + 1} '
                               f'(max |g| = {np.nanmax(np.abs(g))})')
    state.step += 1
    b1, b2 = cfg.betas
    lr, t = cfg.lr, state.step
    decay = cfg.optimizer == 'adamw' and cfg.weight_decay > 0
    for name, g in grads.items():
        p = params[name]
        if decay:
            p.data -= lr * cfg.weight_decay * p.data
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        state.m[name] = m = b1 * m + (1 - b1) * g
        state.v[name] = v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return state


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Rescales ``grads`` in place to a global L2 norm of at most ``max_norm``; returns the original norm."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        for name in grads:
            grads[name] = grads[name] * (max_norm / norm)
    return norm


@dataclass
class Example:
    original_id: str
    document: EncodedDocument
    target: Optional[float] = None
    negative: Optional[EncodedDocument] = None


@dataclass
class TaskDataset:
    task: str
    vocab: Vocabulary
    train: List[Example]
    test: List[Example] = field(default_factory=list)
    entailment: List[EncodedPair] = field(default_factory=list)


def _target(task, doc: Document):
    if task == '3way':
        if doc.label3 is None:
            raise ContractError(f'document {doc.id} has no label3 for the 3way task')
        return LABEL3.index(doc.label3)
    if task == '2way':
        if not doc.expert_scores:
            raise ContractError(f'document {doc.id} has no expert scores for the 2way task')
        return BINARY_LABELS.index(derive_binary_label(doc.expert_scores))
    if doc.gold_score is not None:
        return float(doc.gold_score)
    if not doc.expert_scores:
        raise ContractError(f'document {doc.id} has neither gold_score nor expert scores for the score task')
    return derive_gold_score(doc.expert_scores)


def split_ids(ids: Sequence[str], test_fraction: float, rng: np.random.Generator):
    """Random train / test split of document ids."""
    ids = list(ids)
    order = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    if len(ids) > 1:
        n_test = min(n_test, len(ids) - 1)
    test = {ids[i] for i in order[:n_test]}
    return [i for i in ids if i not in test], [i for i in ids if i in test]


def build_task_dataset(task: str, documents: Sequence[Document], vocab: Vocabulary,
                       permutations: Optional[Sequence[PermutationPair]] = None,
                       facts: Optional[Sequence[Fact]] = None,
                       entailment: Optional[Sequence[EntailmentExample]] = None,
                       test_fraction=0.2, rng: Optional[np.random.Generator] = None) -> TaskDataset:
    """
    Encodes documents into training examples of one task, split into train and test by original document
    (all permutations of a document land in the same split).

    :param task: one of TASKS
    :param documents: corpus
    :param vocab: vocabulary used to encode every text
    :param permutations: orderings for the ``order`` task
    :param facts: facts of the documents (fact-aware models)
    :param entailment: auxiliary entailment examples (multi-task models)
    :param test_fraction: share of original documents held out
    :param rng: generator for the split
    :raises ContractError: for an empty dataset, documents lacking the task's labels or, for the score
        task, a split whose gold scores are all equal
    """
    if task not in TASKS:
        raise ConfigError(f'task must be one of {TASKS}, got {task}')
    if len(documents) == 0:
        raise ContractError('cannot train on an empty corpus')
    rng = np.random.default_rng(0) if rng is None else rng
    by_id = {d.id: d for d in documents}
    doc_facts = defaultdict(list)
    for f in facts or ():
        if f.doc_id in by_id:
            doc_facts[f.doc_id].append(f)

    examples = []
    if task == 'order':
        if not permutations:
            raise ContractError('the order task needs sentence permutations')
        encoded = {}
        for pair in permutations:
            doc = by_id.get(pair.original_id)
            if doc is None:
                continue
            if doc.id not in encoded:
                encoded[doc.id] = encode_document(vocab, doc, doc_facts[doc.id])
            permuted = apply_permutation(doc, pair)
            negative = encode_document(vocab, permuted, [dataclasses.replace(f, doc_id=permuted.id) for f in
                                                         permute_facts(doc_facts[doc.id], pair.order)])
            examples.append(Example(doc.id, encoded[doc.id], negative=negative))
    else:
        examples = [Example(d.id, encode_document(vocab, d, doc_facts[d.id]), target=_target(task, d))
                    for d in documents]
    if not examples:
        raise ContractError(f'no {task} examples could be built from {len(documents)} documents')

    train_ids, test_ids = split_ids(list(dict.fromkeys(e.original_id for e in examples)), test_fraction, rng)
    test_ids = set(test_ids)
    train = [e for e in examples if e.original_id not in test_ids]
    test = [e for e in examples if e.original_id in test_ids]
    if task == 'score':
        for name, split in (('train', train), ('test', test)):
            n_distinct = len({e.target for e in split})
            if split and n_distinct < 2:
                raise ContractError(f'spearman needs at least two different gold scores, but the {name} split '
                                    f'of {len(split)} document(s) has {n_distinct}')
    return TaskDataset(task=task, vocab=vocab, train=train, test=test,
                       entailment=[encode_entailment(vocab, e) for e in entailment or ()])


@dataclass
class RunResult:
    seed: int
    epoch_losses: List[float]
    metrics: Dict[str, float]
    train_metrics: Dict[str, float] = field(default_factory=dict)
    eval_losses: List[float] = field(default_factory=list)
    model: Optional[CoherenceModel] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.epoch_losses + self.eval_losses)):
            raise NumericError(f'run with seed {self.seed} produced non-finite losses')

    def to_dict(self):
        return {'seed': self.seed, 'epoch_losses': list(self.epoch_losses), 'metrics': dict(self.metrics),
                'train_metrics': dict(self.train_metrics), 'eval_losses': list(self.eval_losses)}

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=1)


@dataclass
class AggregateReport:
    task: str
    seeds: List[int]
    mean: Dict[str, float]
    std: Dict[str, float]
    runs: List[RunResult] = field(default_factory=list, repr=False)

    def to_dict(self):
        return {'task': self.task, 'seeds': list(self.seeds), 'mean': dict(self.mean), 'std': dict(self.std),
                'runs': [r.to_dict() for r in self.runs]}

    def save(self, directory):
        """Writes ``run_seed<seed>.json`` for every run and ``aggregate.json``."""
        os.makedirs(directory, exist_ok=True)
        for run in self.runs:
            run.save(os.path.join(directory, f'run_seed{run.seed}.json'))
        with open(os.path.join(directory, 'aggregate.json'), 'w') as f:
            json.dump(self.to_dict(), f, indent=1)


def with_dropout(spec: ArchitectureSpec, dropout_p: float) -> ArchitectureSpec:
    doc_cfg = spec.doc_encoder_cfg
    return dataclasses.replace(
        spec, encoder_cfg=dataclasses.replace(spec.encoder_cfg, dropout_p=dropout_p),
        doc_encoder_cfg=None if doc_cfg is None else dataclasses.replace(doc_cfg, dropout_p=dropout_p))


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _example_loss(model, examples, entail, cfg, training, rng):
    docs = [e.document for e in examples]
    if model.spec.head.kind == 'rank_score':
        return model.loss(docs, negatives=[e.negative for e in examples], entail_pairs=entail, margin=cfg.margin,
                          training=training, rng=rng)
    return model.loss(docs, targets=np.array([e.target for e in examples]), entail_pairs=entail,
                      training=training, rng=rng)


def dataset_loss(model: CoherenceModel, dataset: TaskDataset, cfg: TrainConfig, examples=None) -> float:
    """Eval-mode loss over ``examples`` (default: the training split), weighted by batch size."""
    examples = dataset.train if examples is None else examples
    entail = dataset.entailment[:cfg.batch_size] or None
    total = 0.0
    for idx in _batches(len(examples), cfg.batch_size, np.arange(len(examples))):
        total += _example_loss(model, [examples[i] for i in idx], entail, cfg, False, None).item() * len(idx)
    return total / len(examples)


def _scores(model, documents, batch_size):
    return np.concatenate([model.score(documents[i:i + batch_size]) for i in range(0, len(documents), batch_size)])


def evaluate(model: CoherenceModel, examples: Sequence[Example], task: str, batch_size=32) -> Dict[str, float]:
    """
    Task metrics of ``model`` on ``examples``: PRA for order, accuracy for 3way, F0.5 of the low class
    (plus precision, recall and accuracy) for 2way and Spearman's rho for score.
    """
    if len(examples) == 0:
        raise ContractError(f'cannot evaluate {task} on no examples')
    docs = [e.document for e in examples]
    if task == 'order':
        pos = _scores(model, docs, batch_size)
        neg = _scores(model, [e.negative for e in examples], batch_size)
        return {'pra': M.pairwise_ranking_accuracy([M.RankedPair(float(a), float(b)) for a, b in zip(pos, neg)]),
                'n': len(examples)}
    if task == 'score':
        pred = _scores(model, docs, batch_size)
        return {'spearman': M.spearman(pred, [e.target for e in examples]), 'n': len(examples)}

    pred = _scores(model, docs, batch_size).argmax(axis=1)
    gold = [int(e.target) for e in examples]
    if task == '3way':
        return {'accuracy': M.accuracy(list(pred), gold), 'n': len(examples)}
    score = M.f_beta_low([BINARY_LABELS[p] for p in pred], [BINARY_LABELS[g] for g in gold])
    return {'f0.5': score.value, 'precision': score.precision, 'recall': score.recall,
            'accuracy': M.accuracy(list(pred), gold), 'degenerate': float(score.degenerate), 'n': len(examples)}


def train_task(arch_spec: ArchitectureSpec, cfg: TrainConfig, dataset: TaskDataset, task: Optional[str] = None,
               verbose=False) -> RunResult:
    """
    Trains one model from scratch.

    Each run derives independent init, shuffle and dropout generators from ``cfg.seed``; a step draws one
    shuffled mini-batch of the task (and, for multi-task models, one entailment batch).

    :param arch_spec: architecture; its head must match the task
    :param cfg: training configuration
    :param dataset: examples of the task
    :param task: defaults to the dataset's task
    :param verbose: prints per-epoch losses with a progress bar
    :return: RunResult with per-epoch mean training losses and metrics on both splits
    :raises ContractError: task / dataset / head mismatch, missing entailment data or an empty dataset
    """
    task = dataset.task if task is None else task
    if task != dataset.task:
        raise ContractError(f'dataset was built for {dataset.task}, not {task}')
    if arch_spec.head.kind != TASK_HEADS[task]:
        raise ContractError(f'task {task} needs a {TASK_HEADS[task]} head, got {arch_spec.head.kind}')
    if arch_spec.kind == 'mtl' and not dataset.entailment:
        raise ContractError('multi-task training needs entailment examples')
    if not dataset.train:
        raise ContractError('training split is empty')

    init_seq, shuffle_seq, dropout_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng, dropout_rng = np.random.default_rng(shuffle_seq), np.random.default_rng(dropout_seq)
    model = CoherenceModel.initialise(with_dropout(arch_spec, cfg.dropout_p), np.random.default_rng(init_seq),
                                      dataset.vocab, task)
    trainable = {n: p for n, p in model.params.items()
                 if not (cfg.freeze_embeddings and n.endswith('token_embedding'))}
    state = OptimizerState()

    n, n_entail = len(dataset.train), len(dataset.entailment)
    epoch_losses, eval_losses = [], []
    epochs = range(cfg.epochs)
    if verbose:
        epochs = tqdm.tqdm(epochs, file=sys.stdout, desc=f'seed {cfg.seed}')
    for epoch in epochs:
        order = shuffle_rng.permutation(n)
        entail_order = shuffle_rng.permutation(n_entail) if n_entail else None
        total = 0.0
        for step, idx in enumerate(_batches(n, cfg.batch_size, order)):
            entail = None
            if arch_spec.kind == 'mtl':
                picks = np.take(entail_order, np.arange(step * cfg.batch_size, (step + 1) * cfg.batch_size),
                                mode='wrap')
                entail = [dataset.entailment[i] for i in picks]
            loss = _example_loss(model, [dataset.train[i] for i in idx], entail, cfg, True, dropout_rng)
            for p in model.params.values():
                p.zero_grad()
            loss.backward()
            grads = {name: p.grad for name, p in trainable.items() if p.grad is not None}
            clip_gradients(grads, cfg.clip_norm)
            adamw_step(trainable, grads, state, cfg)
            total += loss.item() * len(idx)
        epoch_losses.append(total / n)
        if cfg.eval_train_loss:
            eval_losses.append(dataset_loss(model, dataset, cfg))
        if verbose:
            print(f'epoch {epoch + 1}/{cfg.epochs}: train loss {epoch_losses[-1]:.6f}')

    train_metrics = evaluate(model, dataset.train, task)
    test_metrics = evaluate(model, dataset.test, task) if dataset.test else {}
    return RunResult(seed=cfg.seed, epoch_losses=epoch_losses, metrics=test_metrics, train_metrics=train_metrics,
                     eval_losses=eval_losses, model=model)


def aggregate(task: str, runs: Sequence[RunResult]) -> AggregateReport:
    """Mean and population standard deviation of every metric reported by all runs."""
    runs = sorted(runs, key=lambda r: r.seed)
    names = [k for k in runs[0].metrics if k != 'n' and all(k in r.metrics for r in runs)]
    values = {k: np.array([r.metrics[k] for r in runs], dtype=np.float64) for k in names}
    return AggregateReport(task=task, seeds=[r.seed for r in runs],
                           mean={k: float(v.mean()) for k, v in values.items()},
                           std={k: float(v.std()) for k, v in values.items()}, runs=list(runs))


def n_threads(n_iters):
    """Worker threads: COHERENCE_LAB_THREADS if set, otherwise the CPU count, at most ``n_iters``."""
    value = os.environ.get(THREADS_ENV)
    try:
        n_jobs = int(value) if value else cpu_count()
    except ValueError:
        raise ConfigError(f'{THREADS_ENV} must be an integer, got {value}')
    return int(max(1, min(n_jobs, n_iters)))


def run_parallel(func, n_iters, debug=False, print_progress=True, prefer='threads'):
    """
    Runs ``func(i)`` for i in range(n_iters), in parallel unless ``debug``.

    :param func: callable o = f(i)
    :param n_iters: number of iterations
    :param debug: run sequentially in this thread (good for debugging)
    :param print_progress: prints a progress bar
    :param prefer: joblib backend preference, 'threads' or 'processes'
    :return: list of results in iteration order
    """
    iters = range(n_iters)
    if print_progress:
        iters = tqdm.tqdm(iters, file=sys.stdout)
    if debug:
        return [func(i) for i in iters]
    n_jobs = n_threads(n_iters)
    return Parallel(n_jobs=n_jobs, prefer=prefer)(delayed(func)(i) for i in iters)


def multi_seed(arch_spec: ArchitectureSpec, cfg: TrainConfig, dataset: TaskDataset, task: Optional[str] = None,
               n_seeds: Optional[int] = None, debug=False, print_progress=True) -> AggregateReport:
    """
    Trains ``n_seeds`` (default ``cfg.n_seeds``) independent models with seeds cfg.seed .. cfg.seed + n - 1.

    :return: AggregateReport with per-seed runs, mean and std
    """
    n_seeds = cfg.n_seeds if n_seeds is None else n_seeds
    if n_seeds < 1:
        raise ConfigError(f'n_seeds must be at least 1, got {n_seeds}')
    seeds = [cfg.seed + i for i in range(n_seeds)]

    def func(i):
        return train_task(arch_spec, dataclasses.replace(cfg, seed=seeds[i]), dataset, task)

    runs = run_parallel(func, n_seeds, debug=debug or n_seeds == 1, print_progress=print_progress)
    if sorted(r.seed for r in runs) != seeds:
        raise ContractError('runs did not use distinct consecutive seeds')
    return aggregate(dataset.task if task is None else task, runs)
