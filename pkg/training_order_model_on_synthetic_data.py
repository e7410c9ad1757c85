#!/usr/bin/env python

"""
This script trains sentence ordering models on a synthetic entity-chain corpus.
It generates chain documents, samples sentence permutations of each of them, trains a Siamese ranking model
with several seeds and writes per-seed reports, the aggregate report and the checkpoints.

Usage:
    python training_order_model_on_synthetic_data.py -nd <num_docs> -ns <num_sents> -od <output_dir>

Arguments:
    -nd, --num_docs      Number of synthetic documents (required).
    -ns, --num_sents     Sentences per document (default 4).
    -k, --num_perms      Permutations per document (default 20).
    -a, --arch           Architecture: vanilla, hierarchical, mtl or fact_aware (default vanilla).
    -s, --seeds          Number of training seeds (default 3).
    -od, --output_dir    Directory to save reports and models to (required).

Outputs:
    corpus.jsonl, perms.jsonl, facts.jsonl and entail.jsonl, run_seed<seed>.json, aggregate.json and
    model_seed<seed>/ in the output directory
"""

import os
import sys

PACKAGE_PARENT = '..'
SCRIPT_DIR = os.path.dirname(os.path.realpath(os.path.join(os.getcwd(), os.path.expanduser(__file__))))
sys.path.append(os.path.normpath(os.path.join(SCRIPT_DIR, PACKAGE_PARENT)))

import argparse
import numpy as np
from coherence_lab import architectures
from coherence_lab import text
from coherence_lab import training


def main():
    p = argparse.ArgumentParser(description="Training sentence ordering models on synthetic entity chains")

    p.add_argument('-nd', '--num_docs', required=True, type=int,
                   help='Number of synthetic documents')
    p.add_argument('-ns', '--num_sents', default=4, type=int,
                   help='Sentences per document')
    p.add_argument('-k', '--num_perms', default=20, type=int,
                   help='Permutations per document')
    p.add_argument('-a', '--arch', default='vanilla', choices=architectures.ARCHITECTURES,
                   help='Architecture to train')
    p.add_argument('-s', '--seeds', default=3, type=int,
                   help='Number of seeds to train')
    p.add_argument('-od', '--output_dir', required=True, type=str, metavar='<str>',
                   help='directory to save reports and models to')
    training.TrainConfig.add_to_parser(p)

    # Parse arguments
    args = p.parse_args()
    output_dir = args.output_dir
    cfg = training.TrainConfig.from_parser_args(args)

    # Ensure output directory exists
    os.makedirs(output_dir, exist_ok=True)

    # Generate the corpus, its permutations and the side data of the fact-aware and multi-task models
    rng = np.random.default_rng(cfg.seed)
    documents, _ = text.synth_corpus(args.num_docs, args.num_sents, rng=rng, kinds=('high',))
    permutations = [pair for doc in documents for pair in text.generate_permutations(doc, args.num_perms, rng)]
    facts = [f for doc in documents for f in text.extract_facts_naive(doc, text.SYNTH_VERBS)]
    entailment = text.synth_entailment(args.num_docs, rng=rng)
    text.write_corpus(os.path.join(output_dir, 'corpus.jsonl'), documents)
    text.write_permutations(os.path.join(output_dir, 'perms.jsonl'), permutations)
    text.write_facts(os.path.join(output_dir, 'facts.jsonl'), facts)
    text.write_entailment(os.path.join(output_dir, 'entail.jsonl'), entailment)
    print(f'{len(documents)} documents, {len(permutations)} permutations, {len(facts)} facts')

    # Build the ordering dataset, split by original document
    vocab = text.build_vocab(documents, extra_texts=text.side_texts(facts, entailment))
    dataset = training.build_task_dataset('order', documents, vocab, permutations, facts, entailment,
                                          cfg.test_fraction, rng)

    # Train the ranking models
    spec = architectures.build_spec(args.arch, 'rank_score', len(vocab), d_model=32, n_layers=2, n_heads=4,
                                    dropout_p=cfg.dropout_p, max_seq_len=64)
    report = training.multi_seed(spec, cfg, dataset, 'order', n_seeds=args.seeds)

    # Save the reports and the trained models
    report.save(output_dir)
    for run in report.runs:
        run.model.save(os.path.join(output_dir, f'model_seed{run.seed}'))
    print(f'pra: {report.mean["pra"]:.4f} +- {report.std["pra"]:.4f} over {len(report.seeds)} seeds')


if __name__ == '__main__':
    main()
