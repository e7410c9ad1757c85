#!/usr/bin/env python3
"""
This module is to parse inputs from commandline and call the proper functions from other modules.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from coherence_lab import architectures, metrics, text, training
from coherence_lab.errors import CoherenceLabError, ConfigError, ContractError, NumericError, UsageError

ARCH_NAMES = {'vanilla': 'vanilla', 'hier': 'hierarchical', 'hierarchical': 'hierarchical', 'mtl': 'mtl',
              'fact': 'fact_aware', 'fact_aware': 'fact_aware'}
ARCHITECTURE_OPTIONS = ('d_model', 'n_layers', 'n_heads', 'd_ff', 'max_seq_len', 'doc_max_seq_len', 'pooling',
                        'hidden_dim', 'per_sentence')


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f'{self.prog}: {message}')


@dataclass
class CliConfig:
    """
    Contents of a ``train --config`` JSON file. ``architecture`` holds encoder / head sizes (see
    ARCHITECTURE_OPTIONS) and ``train`` the TrainConfig fields; omitted values keep their defaults.
    """
    corpus: Optional[str] = None
    permutations: Optional[str] = None
    facts: Optional[str] = None
    entailment: Optional[str] = None
    task: Optional[str] = None
    arch: str = 'vanilla'
    out: str = 'runs'
    domains: List[str] = field(default_factory=lambda: ['all'])
    min_freq: int = 1
    architecture: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.architecture) - set(ARCHITECTURE_OPTIONS)
        if unknown:
            raise ConfigError(f'unknown architecture options: {sorted(unknown)}')
        if self.arch not in ARCH_NAMES:
            raise ConfigError(f'arch must be one of {sorted(ARCH_NAMES)}, got {self.arch}')
        if self.task is not None and self.task not in training.TASKS:
            raise ConfigError(f'task must be one of {training.TASKS}, got {self.task}')
        self.train_config = training.TrainConfig.from_dict(self.train)

    @classmethod
    def load(cls, path):
        with open(path, 'r') as f:
            try:
                values = json.load(f)
            except json.JSONDecodeError as ex:
                raise ConfigError(f'{path}: invalid JSON ({ex.msg})')
        if not isinstance(values, dict):
            raise ConfigError(f'{path}: config must be a JSON object')
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f'{path}: unknown config keys {sorted(unknown)}')
        return cls(**values)


def main(argv=None):
    """
    Wrapper function to parse the input from commandline and run the requested command.

    :param argv: list of command line arguments (defaults to sys.argv[1:])
    :return: exit code, 0 on success, 1 usage/config, 2 data, 3 numeric failure
    """
    try:
        args = parse_args(argv)
        args.func(args)
    except CoherenceLabError as ex:
        print(f'error: {ex}', file=sys.stderr)
        return ex.exit_code
    except OSError as ex:
        print(f'error: {ex}', file=sys.stderr)
        return 2
    return 0


def parse_args(argv):
    """
    Parses the commandline input.

    :param argv: input arguments from commandline
    :return: arg namespace from argparse
    :raises UsageError: on invalid arguments
    """
    parser = CliParser('coherence-lab')
    parser.set_defaults(func=print_avail_commands)
    subparsers = parser.add_subparsers(dest='commandname', parser_class=CliParser)

    synth_parser = subparsers.add_parser('gen-synth', help='write a synthetic entity-chain corpus')
    synth_parser.add_argument('--out', required=True, help='corpus JSONL to write')
    synth_parser.add_argument('--docs', type=int, default=100, help='number of documents (default=100)')
    synth_parser.add_argument('--sents', type=int, default=4, help='sentences per document (default=4)')
    synth_parser.add_argument('--seed', type=int, default=0)
    synth_parser.add_argument('--coherent-only', action='store_true', default=False,
                              help='only emit chain (high coherence) documents')
    synth_parser.add_argument('--entail-out', default=None, help='also write synthetic entailment pairs here')
    synth_parser.add_argument('--n-entail', type=int, default=None,
                              help='number of entailment pairs (default: --docs)')
    synth_parser.add_argument('--facts-out', default=None, help='also write naively extracted facts here')
    synth_parser.set_defaults(func=gen_synth_from_cli)

    permute_parser = subparsers.add_parser('permute', help='sample sentence permutations of every document')
    permute_parser.add_argument('--corpus', required=True)
    permute_parser.add_argument('--out', required=True)
    permute_parser.add_argument('--k', type=int, default=20, help='permutations per document (default=20)')
    permute_parser.add_argument('--seed', type=int, default=0)
    permute_parser.add_argument('--only-high', action='store_true', default=False,
                                help='use only documents rated high coherence as originals')
    permute_parser.add_argument('--domains', nargs='+', default=None, help='keep only these domains')
    permute_parser.set_defaults(func=permute_from_cli)

    train_parser = subparsers.add_parser('train', help='train models with several seeds')
    train_parser.add_argument('--config', default=None, help='JSON config (flags override its values)')
    train_parser.add_argument('--task', choices=training.TASKS, default=None)
    train_parser.add_argument('--arch', choices=sorted(ARCH_NAMES), default=None)
    train_parser.add_argument('--seeds', type=int, default=None, help='number of seeds (default: n_seeds)')
    train_parser.add_argument('--corpus', default=None)
    train_parser.add_argument('--perms', default=None, help='permutations JSONL (order task)')
    train_parser.add_argument('--facts', default=None, help='facts JSONL (fact-aware models)')
    train_parser.add_argument('--entail', default=None, help='entailment JSONL (multi-task models)')
    train_parser.add_argument('--out', default=None, help='output directory for reports and checkpoints')
    train_parser.add_argument('--domains', nargs='+', default=None)
    train_parser.add_argument('--debug', action='store_true', default=False, help='run seeds sequentially')
    training.TrainConfig.add_to_parser(train_parser)
    train_parser.set_defaults(func=train_from_cli)

    eval_parser = subparsers.add_parser('eval', help='evaluate a trained model on a corpus')
    eval_parser.add_argument('--checkpoint', required=True, help='model directory written by train')
    eval_parser.add_argument('--corpus', required=True)
    eval_parser.add_argument('--task', choices=training.TASKS, default=None, help='(default: the trained task)')
    eval_parser.add_argument('--perms', default=None)
    eval_parser.add_argument('--facts', default=None)
    eval_parser.add_argument('--out', default=None, help='metrics JSON (default: <checkpoint>/metrics.json)')
    eval_parser.add_argument('--plot', action='store_true', default=False,
                             help='write confusion_matrix.png next to the metrics (classification tasks)')
    eval_parser.set_defaults(func=eval_from_cli)

    gradcheck_parser = subparsers.add_parser('gradcheck', help='finite-difference check of an architecture')
    gradcheck_parser.add_argument('--arch', choices=sorted(ARCH_NAMES), default='vanilla')
    gradcheck_parser.add_argument('--tol', type=float, default=1e-4, help='pass threshold; 0 always fails')
    gradcheck_parser.add_argument('--eps', type=float, default=1e-5)
    gradcheck_parser.add_argument('--seed', type=int, default=0)
    gradcheck_parser.add_argument('--max-elements', type=int, default=None,
                                  help='check at most this many elements per parameter')
    gradcheck_parser.add_argument('--head', choices=('classify2', 'classify3', 'regress', 'rank_score'),
                                  default='classify3')
    gradcheck_parser.add_argument('--out', default=None, help='write the report as JSON')
    gradcheck_parser.set_defaults(func=gradcheck_from_cli)

    return parser.parse_args(argv)


def print_avail_commands(args=None):
    print('coherence-lab: transformer models of text coherence')
    print('usage: coherence-lab <command> [options]')
    print('')
    print('available commands: gen-synth, permute, train, eval, gradcheck')


def gen_synth_from_cli(args):
    if args.sents < 2:
        raise UsageError(f'--sents must be at least 2 (sentence ordering needs two sentences), got {args.sents}')
    if args.docs < 0:
        raise UsageError(f'--docs must be non-negative, got {args.docs}')
    corpus_seq, entail_seq = np.random.SeedSequence(args.seed).spawn(2)
    kinds = ('high',) if args.coherent_only else text.LABEL3[::-1]
    documents, _ = text.synth_corpus(args.docs, args.sents, rng=np.random.default_rng(corpus_seq), kinds=kinds)
    text.write_corpus(args.out, documents)
    print(f'{len(documents)} documents written to {args.out}')

    if args.entail_out is not None:
        n = args.docs if args.n_entail is None else args.n_entail
        examples = text.synth_entailment(n, rng=np.random.default_rng(entail_seq))
        text.write_entailment(args.entail_out, examples)
        print(f'{len(examples)} entailment pairs written to {args.entail_out}')
    if args.facts_out is not None:
        facts = [f for doc in documents for f in text.extract_facts_naive(doc, text.SYNTH_VERBS)]
        text.write_facts(args.facts_out, facts)
        print(f'{len(facts)} facts written to {args.facts_out}')


def permute_from_cli(args):
    if args.k < 1:
        raise UsageError(f'--k must be positive, got {args.k}')
    documents = text.filter_domains(text.read_corpus(args.corpus), args.domains)
    if args.only_high:
        documents = text.select_high_coherence(documents)
    documents, skipped = text.skip_short_documents(documents)
    rng = np.random.default_rng(args.seed)
    pairs = [p for doc in documents for p in text.generate_permutations(doc, args.k, rng)]
    text.write_permutations(args.out, pairs)
    print(f'{len(pairs)} permutations of {len(documents)} documents written to {args.out} '
          f'({skipped} one-sentence documents skipped)')


def _train_settings(args) -> CliConfig:
    config = CliConfig.load(args.config) if args.config is not None else CliConfig()
    overrides = {'corpus': args.corpus, 'permutations': args.perms, 'facts': args.facts,
                 'entailment': args.entail, 'task': args.task, 'arch': args.arch, 'out': args.out,
                 'domains': args.domains}
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    config.train_config = training.TrainConfig.from_parser_args(args, config.train_config)
    if config.corpus is None:
        raise ConfigError('train needs a corpus (--corpus or "corpus" in the config)')
    if config.task is None:
        raise ConfigError('train needs a task (--task or "task" in the config)')
    if config.task == 'order' and config.permutations is None:
        raise ConfigError('the order task needs a permutations file (--perms)')
    if ARCH_NAMES[config.arch] == 'mtl' and config.entailment is None:
        raise ConfigError('the mtl architecture needs entailment data (--entail)')
    return config


def _load_facts(path, documents):
    if path is None:
        return None
    return text.load_facts_sidecar(path, {d.id: d for d in documents})


def train_from_cli(args):
    config = _train_settings(args)
    cfg = config.train_config
    kind = ARCH_NAMES[config.arch]
    documents = text.filter_domains(text.read_corpus(config.corpus), config.domains)
    if config.task == 'order':
        documents, _ = text.skip_short_documents(documents)
    permutations = text.read_permutations(config.permutations) if config.permutations else None
    entailment = text.read_entailment(config.entailment) if config.entailment else None
    facts = _load_facts(config.facts, documents)
    vocab = text.build_vocab(documents, config.min_freq, text.side_texts(facts or (), entailment or ()))
    dataset = training.build_task_dataset(config.task, documents, vocab, permutations, facts, entailment,
                                          cfg.test_fraction, np.random.default_rng(cfg.seed))
    spec = architectures.build_spec(kind, training.TASK_HEADS[config.task], len(vocab), dropout_p=cfg.dropout_p,
                                    **config.architecture)
    print(f'training {kind} on {config.task}: {len(dataset.train)} train / {len(dataset.test)} test examples, '
          f'vocabulary of {len(vocab)} tokens')

    report = training.multi_seed(spec, cfg, dataset, config.task, args.seeds, debug=args.debug)
    report.save(config.out)
    for run in report.runs:
        run.model.save(os.path.join(config.out, f'model_seed{run.seed}'))
    headline = metrics.TASK_METRICS[config.task]
    for name in sorted(report.mean, key=lambda m: m != headline):
        print(f'{name}: {report.mean[name]:.4f} +- {report.std[name]:.4f} over {len(report.seeds)} seed(s)')
    print(f'reports written to {config.out}')


def eval_from_cli(args):
    model = architectures.CoherenceModel.load(args.checkpoint)
    if model.vocab is None:
        raise ConfigError(f'checkpoint {args.checkpoint} has no vocab.json')
    task = args.task or model.task
    if task is None:
        raise ConfigError('--task is required for checkpoints that do not record their task')
    if training.TASK_HEADS[task] != model.spec.head.kind:
        raise ContractError(f'the checkpoint has a {model.spec.head.kind} head, which cannot be evaluated on {task}')
    if task == 'order' and args.perms is None:
        raise ConfigError('evaluating the order task needs a permutations file (--perms)')

    documents = text.read_corpus(args.corpus)
    if task == 'order':
        documents, _ = text.skip_short_documents(documents)
    permutations = text.read_permutations(args.perms) if args.perms else None
    dataset = training.build_task_dataset(task, documents, model.vocab, permutations,
                                          _load_facts(args.facts, documents), test_fraction=0.0)
    results = training.evaluate(model, dataset.train, task)
    n = int(results.pop('n'))
    records = [metrics.MetricRecord(task, name, float(value), n) for name, value in results.items()]

    out = args.out or os.path.join(args.checkpoint, 'metrics.json')
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, 'w') as f:
        json.dump([r.to_dict() for r in records], f, indent=1)
    for r in records:
        print(f'{r.task} {r.metric}: {r.value:.4f} (n={r.n})')

    if args.plot and task in ('2way', '3way'):
        labels = text.LABEL3 if task == '3way' else text.BINARY_LABELS
        docs = [e.document for e in dataset.train]
        pred = np.concatenate([model.predict(docs[i:i + 32]) for i in range(0, len(docs), 32)])
        conf_mat = metrics.confusion_matrix([labels[p] for p in pred], [labels[int(e.target)] for e in dataset.train],
                                            labels)
        f_name = os.path.join(os.path.dirname(out), 'confusion_matrix.png')
        metrics.plot_confusion_matrix(conf_mat, labels, f_name=f_name, title=f'{task} confusion matrix')
        print(f'confusion matrix written to {f_name}')


def gradcheck_from_cli(args):
    kind = ARCH_NAMES[args.arch]
    report = architectures.check_gradients(kind, tol=args.tol, eps=args.eps, seed=args.seed,
                                           max_elements=args.max_elements, head_kind=args.head)
    print(f'gradcheck {kind}: max relative error {report.max_rel_error:.3e} over {report.n_checked} elements '
          f'(tol {report.tol:g}) -> {"PASS" if report.passed else "FAIL"}')
    if args.out is not None:
        with open(args.out, 'w') as f:
            json.dump(dict(report.to_dict(), architecture=kind), f, indent=1)
    if not report.passed:
        raise NumericError(f'gradient check failed; worst element {report.worst}')


if __name__ == '__main__':
    sys.exit(main())
