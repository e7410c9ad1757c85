#!/usr/bin/env python3

"""
This module contains the four document scoring architectures (vanilla, hierarchical, multi-task and
fact-aware), the Siamese ranking wrapper, task heads and the model checkpoint format.

Parameter name prefixes of a model::

    encoder.        token level encoder (shared by documents, facts and entailment pairs)
    doc_encoder.    second level encoder of hierarchical and fact-aware models, plus its learned
                    ``doc_encoder.cls`` input vector
    pool.query      query vector of attention pooling (hierarchical, pooling == 'attention')
    head.           dense + ReLU + output layer of the coherence task
    aux_head.       entailment head of multi-task models
"""
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Mapping, Optional, Sequence

import numpy as np

from coherence_lab import tensor as T
from coherence_lab.encoder import (POOLING_STRATEGIES, EncoderConfig, encode, encode_embeddings, init_encoder_params,
                                   linear, load_parameters, pool, save_parameters, normal_param, zeros_param)
from coherence_lab.errors import (ConfigError, ContractError, FactAlignmentError, LengthError, ParseError)
from coherence_lab.text import CLS_ID, PAD_ID, SEP_ID, EncodedDocument, EncodedFact, EncodedPair, Vocabulary

ARCHITECTURES = ('vanilla', 'hierarchical', 'mtl', 'fact_aware')
HEAD_OUTPUTS = {'classify2': 2, 'classify3': 3, 'regress': 1, 'rank_score': 1, 'entail': 2}
CLASSIFY_HEADS = ('classify2', 'classify3', 'entail')


@dataclass
class TaskHead:
    """Dense layer with ReLU followed by a task specific output layer."""
    kind: str
    hidden_dim: int = 16

    def __post_init__(self):
        if self.kind not in HEAD_OUTPUTS:
            raise ConfigError(f'head kind must be one of {tuple(HEAD_OUTPUTS)}, got {self.kind}')
        if self.hidden_dim < 1:
            raise ConfigError(f'head hidden_dim must be positive, got {self.hidden_dim}')

    @property
    def n_outputs(self):
        return HEAD_OUTPUTS[self.kind]

    @property
    def is_classifier(self):
        return self.kind in CLASSIFY_HEADS

    def init_params(self, d_model, rng, prefix, init_std=0.02):
        return {prefix + 'dense.weight': normal_param(rng, init_std, (d_model, self.hidden_dim)),
                prefix + 'dense.bias': zeros_param(self.hidden_dim),
                prefix + 'output.weight': normal_param(rng, init_std, (self.hidden_dim, self.n_outputs)),
                prefix + 'output.bias': zeros_param(self.n_outputs)}

    def to_dict(self):
        return {'kind': self.kind, 'hidden_dim': self.hidden_dim}


@dataclass
class ArchitectureSpec:
    kind: str = 'vanilla'
    encoder_cfg: EncoderConfig = field(default_factory=EncoderConfig)
    head: TaskHead = field(default_factory=lambda: TaskHead('classify3'))
    doc_encoder_cfg: Optional[EncoderConfig] = None
    pooling: str = 'mean'
    aux_head: Optional[TaskHead] = None
    per_sentence: bool = False

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ConfigError(f'architecture must be one of {ARCHITECTURES}, got {self.kind}')
        if self.encoder_cfg.vocab_size < 1:
            raise ConfigError('the token encoder needs vocab_size > 0')
        if self.kind == 'mtl' and (self.aux_head is None or self.aux_head.kind != 'entail'):
            raise ConfigError('mtl architecture needs an entail aux_head')
        if self.kind in ('hierarchical', 'fact_aware'):
            if self.doc_encoder_cfg is None:
                raise ConfigError(f'{self.kind} architecture needs doc_encoder_cfg')
            if self.doc_encoder_cfg.d_model != self.encoder_cfg.d_model:
                raise ConfigError(f'doc encoder d_model {self.doc_encoder_cfg.d_model} differs from '
                                  f'encoder d_model {self.encoder_cfg.d_model}')
            if self.doc_encoder_cfg.vocab_size != 0:
                raise ConfigError('the document encoder takes vectors; set its vocab_size to 0')
            if self.doc_encoder_cfg.max_seq_len < 3:
                raise ConfigError('the document encoder needs room for CLS and two inputs')
        if self.pooling not in POOLING_STRATEGIES:
            raise ConfigError(f'pooling must be one of {POOLING_STRATEGIES}, got {self.pooling}')
        if self.head.kind == 'entail':
            raise ConfigError('entail is an auxiliary head only')

    @property
    def d_model(self):
        return self.encoder_cfg.d_model

    def to_dict(self):
        return {'kind': self.kind, 'encoder_cfg': self.encoder_cfg.to_dict(), 'head': self.head.to_dict(),
                'doc_encoder_cfg': None if self.doc_encoder_cfg is None else self.doc_encoder_cfg.to_dict(),
                'pooling': self.pooling, 'aux_head': None if self.aux_head is None else self.aux_head.to_dict(),
                'per_sentence': self.per_sentence}

    @classmethod
    def from_dict(cls, values: Mapping):
        values = dict(values)
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f'unknown architecture settings: {sorted(unknown)}')
        if 'encoder_cfg' in values:
            values['encoder_cfg'] = EncoderConfig.from_dict(values['encoder_cfg'])
        if values.get('doc_encoder_cfg') is not None:
            values['doc_encoder_cfg'] = EncoderConfig.from_dict(values['doc_encoder_cfg'])
        if 'head' in values:
            values['head'] = TaskHead(**values['head'])
        if values.get('aux_head') is not None:
            values['aux_head'] = TaskHead(**values['aux_head'])
        return cls(**values)


def build_spec(kind, head_kind, vocab_size, d_model=16, n_layers=2, n_heads=2, d_ff=None, dropout_p=0.1,
               max_seq_len=128, doc_max_seq_len=None, pooling='mean', hidden_dim=None, per_sentence=False):
    """
    Architecture with one encoder size used for every level.

    :param kind: one of ARCHITECTURES
    :param head_kind: coherence head (classify2, classify3, regress or rank_score)
    :param vocab_size: size of the token vocabulary
    :return: ArchitectureSpec
    """
    d_ff = 2 * d_model if d_ff is None else d_ff
    hidden_dim = d_model if hidden_dim is None else hidden_dim
    encoder_cfg = EncoderConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=d_ff,
                                dropout_p=dropout_p, max_seq_len=max_seq_len, vocab_size=vocab_size)
    doc_encoder_cfg = None
    if kind in ('hierarchical', 'fact_aware'):
        doc_encoder_cfg = EncoderConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_ff=d_ff,
                                        dropout_p=dropout_p, max_seq_len=doc_max_seq_len or max_seq_len,
                                        vocab_size=0)
    aux_head = TaskHead('entail', hidden_dim) if kind == 'mtl' else None
    return ArchitectureSpec(kind=kind, encoder_cfg=encoder_cfg, head=TaskHead(head_kind, hidden_dim),
                            doc_encoder_cfg=doc_encoder_cfg, pooling=pooling, aux_head=aux_head,
                            per_sentence=per_sentence)


def init_params(spec: ArchitectureSpec, rng: np.random.Generator, init_std=0.02) -> dict:
    """
    Fresh parameters for every part of ``spec``; second level encoders are initialised independently.
    """
    d = spec.d_model
    params = init_encoder_params(spec.encoder_cfg, rng, 'encoder.', init_std)
    if spec.doc_encoder_cfg is not None:
        params.update(init_encoder_params(spec.doc_encoder_cfg, rng, 'doc_encoder.', init_std))
        params['doc_encoder.cls'] = normal_param(rng, init_std, (d,))
    if spec.kind == 'hierarchical' and spec.pooling == 'attention':
        params['pool.query'] = normal_param(rng, init_std, (d,))
    params.update(spec.head.init_params(d, rng, 'head.', init_std))
    if spec.aux_head is not None:
        params.update(spec.aux_head.init_params(d, rng, 'aux_head.', init_std))
    return params


def pad_batch(sequences: Sequence[Sequence[int]], pad_to: Optional[int] = None):
    """
    Right-pads id sequences with PAD.

    :return: token ids int64 (B, L) and mask bool (B, L)
    """
    if len(sequences) == 0:
        raise ContractError('cannot build an empty batch')
    length = max(len(s) for s in sequences)
    if pad_to is not None:
        if pad_to < length:
            raise ContractError(f'pad_to={pad_to} is shorter than the longest sequence ({length})')
        length = pad_to
    token_ids = np.full((len(sequences), length), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), length), dtype=bool)
    for i, s in enumerate(sequences):
        token_ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return token_ids, mask


def _truncate(sequence, max_len, what):
    if len(sequence) > max_len:
        warnings.warn(f'{what} of {len(sequence)} tokens truncated to max_seq_len={max_len}')
        return sequence[:max_len]
    return sequence


def document_sequence(doc: EncodedDocument, max_len: int) -> List[int]:
    return _truncate([CLS_ID] + doc.tokens, max_len, f'document {doc.doc_id}')


def fact_sequence(fact: EncodedFact, max_len: int) -> List[int]:
    """[CLS] subject [SEP] verb [SEP] object"""
    return _truncate([CLS_ID] + fact.subject + [SEP_ID] + fact.verb + [SEP_ID] + fact.object, max_len, 'fact')


def entailment_sequence(pair: EncodedPair, max_len: int) -> List[int]:
    """[CLS] premise [SEP] hypothesis"""
    return _truncate([CLS_ID] + pair.premise + [SEP_ID] + pair.hypothesis, max_len, 'entailment pair')


def apply_head(head: TaskHead, params: Mapping, x: T.Tensor, prefix='head.') -> T.Tensor:
    """
    Dense + ReLU + output layer. Classifier heads return logits (B, n_classes), scalar heads return (B,).
    """
    out = linear(T.relu(linear(x, params, prefix + 'dense')), params, prefix + 'output')
    if head.n_outputs == 1:
        out = T.reshape(out, (x.shape[0],))
    return out


def task_loss(head: TaskHead, output: T.Tensor, targets) -> T.Tensor:
    """Cross-entropy for classifier heads, mean squared error for regression."""
    if head.is_classifier:
        return T.cross_entropy(output, np.asarray(targets, dtype=np.int64))
    if head.kind == 'regress':
        return T.mse(output, T.Tensor(np.asarray(targets, dtype=np.float64)))
    raise ContractError('rank_score heads are trained through siamese_rank')


def _check_kind(spec, *kinds):
    if spec.kind not in kinds:
        raise ContractError(f'expected a {" or ".join(kinds)} architecture, got {spec.kind}')


def vanilla_forward(spec: ArchitectureSpec, params: Mapping, token_ids, mask, training=False,
                    rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Encodes ``[CLS] document`` and applies the head to the CLS state."""
    _check_kind(spec, 'vanilla')
    cls = encode(spec.encoder_cfg, params, token_ids, mask, training, rng, 'encoder.').cls
    return apply_head(spec.head, params, cls)


def pack_sentences(sentences: Sequence[Sequence[int]], max_len: int, per_sentence=False):
    """
    Packs sentences into sentence encoder inputs ``[CLS] s1 [SEP] s2 [SEP] ...``, opening a new pack when
    the next sentence does not fit (or for every sentence when ``per_sentence``).

    :return: packs (id lists) and one (pack index, start, stop) segment per sentence
    :raises LengthError: if one sentence alone does not fit
    """
    packs, segments = [], []
    current = None
    for i, sentence in enumerate(sentences):
        if len(sentence) + 2 > max_len:
            raise LengthError(f'sentence {i} has {len(sentence)} tokens and does not fit max_seq_len={max_len} '
                              f'with CLS and SEP')
        if current is None or per_sentence or len(current) + len(sentence) + 1 > max_len:
            current = [CLS_ID]
            packs.append(current)
        start = len(current)
        current.extend(sentence)
        segments.append((len(packs) - 1, start, len(current)))
        current.append(SEP_ID)
    return packs, segments


def sentence_vectors(spec: ArchitectureSpec, params: Mapping, sentences: Sequence[Sequence[int]], training=False,
                     rng=None, pad_to: Optional[int] = None) -> T.Tensor:
    """Pooled sentence encoder states, one row per sentence: (n_sentences, d_model)."""
    if len(sentences) == 0:
        raise ContractError('hierarchical encoding needs at least one sentence')
    packs, segments = pack_sentences(sentences, spec.encoder_cfg.max_seq_len, spec.per_sentence)
    token_ids, mask = pad_batch(packs, pad_to)
    hidden = encode(spec.encoder_cfg, params, token_ids, mask, training, rng, 'encoder.').hidden
    vectors = [pool(T.take(hidden, [p], axis=0), (start, stop), spec.pooling, params.get('pool.query'))
               for p, start, stop in segments]
    return T.concat(vectors, axis=0)


def compose_sentence_inputs(spec: ArchitectureSpec, params: Mapping, vectors: T.Tensor) -> T.Tensor:
    """Document encoder input: learned CLS vector followed by the sentence vectors, (1, n + 1, d)."""
    d = spec.d_model
    limit = spec.doc_encoder_cfg.max_seq_len - 1
    if vectors.shape[0] > limit:
        warnings.warn(f'{vectors.shape[0]} sentences truncated to {limit} for the document encoder')
        vectors = T.take(vectors, np.arange(limit), axis=0)
    return T.concat([T.reshape(params['doc_encoder.cls'], (1, 1, d)),
                     T.reshape(vectors, (1, vectors.shape[0], d))], axis=1)


def hierarchical_represent(spec: ArchitectureSpec, params: Mapping, documents: Sequence[Sequence[Sequence[int]]],
                           training=False, rng=None, pad_to: Optional[int] = None) -> T.Tensor:
    _check_kind(spec, 'hierarchical')
    reps = []
    for sentences in documents:
        inputs = compose_sentence_inputs(spec, params, sentence_vectors(spec, params, sentences, training, rng,
                                                                        pad_to))
        reps.append(encode_embeddings(spec.doc_encoder_cfg, params, inputs, None, training, rng, 'doc_encoder.').cls)
    return T.concat(reps, axis=0)


def hierarchical_forward(spec: ArchitectureSpec, params: Mapping, documents: Sequence[Sequence[Sequence[int]]],
                         training=False, rng=None, pad_to: Optional[int] = None) -> T.Tensor:
    """
    Sentence encoder with per-sentence pooling, then a document encoder over the sentence vectors.

    :param documents: per document, the token ids of every sentence (no special tokens)
    :param pad_to: pad every sentence-encoder pack to this length
    :return: head output for the batch of documents
    """
    return apply_head(spec.head, params, hierarchical_represent(spec, params, documents, training, rng, pad_to))


def order_facts(facts: Sequence[EncodedFact]) -> List[EncodedFact]:
    """Stable sort by sentence index, extraction order breaks ties."""
    return sorted(facts, key=lambda f: f.sentence_index)


def compose_fact_inputs(spec: ArchitectureSpec, params: Mapping, doc_vector: T.Tensor,
                        fact_vectors: Optional[T.Tensor]) -> T.Tensor:
    """Fact-aware encoder input: learned CLS, document vector T, fact vectors; (1, 2 + M, d)."""
    d = spec.d_model
    parts = [T.reshape(params['doc_encoder.cls'], (1, 1, d)), T.reshape(doc_vector, (1, 1, d))]
    if fact_vectors is not None:
        parts.append(T.reshape(fact_vectors, (1, fact_vectors.shape[0], d)))
    return T.concat(parts, axis=1)


def fact_aware_represent(spec: ArchitectureSpec, params: Mapping, token_ids, mask,
                         facts: Sequence[Sequence[EncodedFact]], training=False, rng=None,
                         n_sentences: Optional[Sequence[int]] = None) -> T.Tensor:
    _check_kind(spec, 'fact_aware')
    token_ids = np.asarray(token_ids)
    if len(facts) != token_ids.shape[0]:
        raise ContractError(f'{len(facts)} fact lists for a batch of {token_ids.shape[0]} documents')
    cfg = spec.encoder_cfg
    doc_vectors = encode(cfg, params, token_ids, mask, training, rng, 'encoder.').cls

    max_facts = spec.doc_encoder_cfg.max_seq_len - 2
    ordered = []
    for b, doc_facts in enumerate(facts):
        for f in doc_facts:
            if f.sentence_index < 0 or (n_sentences is not None and f.sentence_index >= n_sentences[b]):
                raise FactAlignmentError(f'fact sentence_index {f.sentence_index} is outside document {b}')
        doc_facts = order_facts(doc_facts)
        if len(doc_facts) > max_facts:
            warnings.warn(f'{len(doc_facts)} facts truncated to {max_facts} for the fact-aware encoder')
            doc_facts = doc_facts[:max_facts]
        ordered.append(doc_facts)

    all_facts = [f for doc_facts in ordered for f in doc_facts]
    fact_cls = None
    if all_facts:
        fact_ids, fact_mask = pad_batch([fact_sequence(f, cfg.max_seq_len) for f in all_facts])
        fact_cls = encode(cfg, params, fact_ids, fact_mask, training, rng, 'encoder.').cls

    reps, offset = [], 0
    for b, doc_facts in enumerate(ordered):
        fact_vectors = None
        if doc_facts:
            fact_vectors = T.take(fact_cls, np.arange(offset, offset + len(doc_facts)), axis=0)
            offset += len(doc_facts)
        inputs = compose_fact_inputs(spec, params, T.take(doc_vectors, [b], axis=0), fact_vectors)
        reps.append(encode_embeddings(spec.doc_encoder_cfg, params, inputs, None, training, rng, 'doc_encoder.').cls)
    return T.concat(reps, axis=0)


def fact_aware_forward(spec: ArchitectureSpec, params: Mapping, token_ids, mask,
                       facts: Sequence[Sequence[EncodedFact]], training=False, rng=None,
                       n_sentences: Optional[Sequence[int]] = None) -> T.Tensor:
    """
    Document and fact encoders share the ``encoder.`` weights; the fact-aware encoder reads the document
    vector followed by the fact vectors in sentence order.

    :param facts: per document, its encoded facts (may be empty)
    :param n_sentences: per document sentence counts used to validate fact alignment
    :raises FactAlignmentError: for a fact outside its document
    """
    return apply_head(spec.head, params,
                      fact_aware_represent(spec, params, token_ids, mask, facts, training, rng, n_sentences))


def siamese_rank(arch_forward: Callable, params: Mapping, doc_a, doc_b, margin=1.0):
    """
    Scores both inputs with the same parameters and applies the margin ranking loss.

    :param arch_forward: callable (params, docs) -> scores (B,)
    :param doc_a: inputs that should rank higher (original documents)
    :param doc_b: inputs that should rank lower (permutations)
    :return: score_a, score_b, loss
    """
    score_a = arch_forward(params, doc_a)
    score_b = arch_forward(params, doc_b)
    return score_a, score_b, T.margin_ranking_loss(score_a, score_b, margin)


@dataclass
class Batch:
    """
    Padded token input of the multi-task model. ``targets`` are class ids or gold scores; ranking batches
    carry the permuted documents in ``neg_token_ids`` / ``neg_mask`` instead.
    """
    token_ids: np.ndarray
    mask: np.ndarray
    targets: Optional[np.ndarray] = None
    neg_token_ids: Optional[np.ndarray] = None
    neg_mask: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.token_ids)


def _token_head_forward(spec, params, token_ids, mask, head, prefix, training, rng):
    cls = encode(spec.encoder_cfg, params, token_ids, mask, training, rng, 'encoder.').cls
    return apply_head(head, params, cls, prefix)


def mtl_forward(spec: ArchitectureSpec, params: Mapping, coh_batch: Batch, entail_batch: Optional[Batch],
                training=False, rng=None, margin=1.0):
    """
    Runs the shared encoder on the coherence and the entailment batch.

    :return: coherence head output, entailment logits (B, 2) and the joint loss coh_loss + entail_loss
    :raises ContractError: if the entailment batch is missing
    """
    _check_kind(spec, 'mtl')
    if entail_batch is None or len(entail_batch) == 0 or coh_batch is None or len(coh_batch) == 0:
        raise ContractError('multi-task training needs a non-empty coherence and entailment batch')

    coh_out = _token_head_forward(spec, params, coh_batch.token_ids, coh_batch.mask, spec.head, 'head.',
                                  training, rng)
    if spec.head.kind == 'rank_score':
        if coh_batch.neg_token_ids is None:
            raise ContractError('ranking batches need permuted documents')
        neg_out = _token_head_forward(spec, params, coh_batch.neg_token_ids, coh_batch.neg_mask, spec.head,
                                      'head.', training, rng)
        coh_loss = T.margin_ranking_loss(coh_out, neg_out, margin)
    else:
        coh_loss = task_loss(spec.head, coh_out, coh_batch.targets)
    entail_out = _token_head_forward(spec, params, entail_batch.token_ids, entail_batch.mask, spec.aux_head,
                                     'aux_head.', training, rng)
    entail_loss = task_loss(spec.aux_head, entail_out, entail_batch.targets)
    return coh_out, entail_out, T.add(coh_loss, entail_loss)


class CoherenceModel:
    """
    An ArchitectureSpec with its parameters, the vocabulary its inputs were encoded with and the task it
    was trained for. Works on EncodedDocument batches.
    """

    def __init__(self, spec: ArchitectureSpec, params: Mapping[str, T.Tensor], vocab: Optional[Vocabulary] = None,
                 task: Optional[str] = None):
        self.spec = spec
        self.params = dict(params)
        self.vocab = vocab
        self.task = task

    @classmethod
    def initialise(cls, spec: ArchitectureSpec, rng: np.random.Generator, vocab=None, task=None, init_std=0.02):
        return cls(spec, init_params(spec, rng, init_std), vocab, task)

    def document_batch(self, documents: Sequence[EncodedDocument], pad_to: Optional[int] = None):
        max_len = self.spec.encoder_cfg.max_seq_len
        return pad_batch([document_sequence(d, max_len) for d in documents], pad_to)

    def entailment_batch(self, pairs: Sequence[EncodedPair]) -> Batch:
        token_ids, mask = pad_batch([entailment_sequence(p, self.spec.encoder_cfg.max_seq_len) for p in pairs])
        return Batch(token_ids, mask, np.array([p.label for p in pairs], dtype=np.int64))

    def represent(self, documents: Sequence[EncodedDocument], training=False, rng=None, params=None) -> T.Tensor:
        """Document vectors (B, d_model) fed to the coherence head."""
        params = self.params if params is None else params
        spec = self.spec
        if spec.kind == 'hierarchical':
            return hierarchical_represent(spec, params, [d.sentences for d in documents], training, rng)
        token_ids, mask = self.document_batch(documents)
        if spec.kind == 'fact_aware':
            return fact_aware_represent(spec, params, token_ids, mask, [d.facts for d in documents], training,
                                        rng, [len(d.sentences) for d in documents])
        return encode(spec.encoder_cfg, params, token_ids, mask, training, rng, 'encoder.').cls

    def forward(self, documents: Sequence[EncodedDocument], training=False, rng=None, params=None) -> T.Tensor:
        params = self.params if params is None else params
        return apply_head(self.spec.head, params, self.represent(documents, training, rng, params))

    def loss(self, documents: Sequence[EncodedDocument], targets=None, negatives=None,
             entail_pairs: Optional[Sequence[EncodedPair]] = None, margin=1.0, training=False, rng=None,
             params=None) -> T.Tensor:
        """
        Training loss of one batch: margin ranking against ``negatives`` for rank_score heads, otherwise
        cross-entropy / MSE against ``targets``; multi-task models add the entailment loss.
        """
        params = self.params if params is None else params
        spec = self.spec
        if spec.head.kind == 'rank_score' and (negatives is None or len(negatives) != len(documents)):
            raise ContractError('ranking needs one permuted document per original')
        if spec.kind == 'mtl':
            if not entail_pairs:
                raise ContractError('multi-task training needs entailment pairs')
            coh_batch = Batch(*self.document_batch(documents),
                              targets=None if targets is None else np.asarray(targets))
            if negatives is not None:
                coh_batch.neg_token_ids, coh_batch.neg_mask = self.document_batch(negatives)
            return mtl_forward(spec, params, coh_batch, self.entailment_batch(entail_pairs), training, rng,
                               margin)[2]
        if spec.head.kind == 'rank_score':
            return siamese_rank(lambda p, docs: self.forward(docs, training, rng, p), params, documents, negatives,
                                margin)[2]
        return task_loss(spec.head, self.forward(documents, training, rng, params), targets)

    def score(self, documents: Sequence[EncodedDocument]) -> np.ndarray:
        """Eval-mode outputs: class probabilities for classifier heads, scalar scores otherwise."""
        out = self.forward(documents)
        if self.spec.head.is_classifier:
            return T.softmax(out, axis=-1).numpy()
        return out.numpy()

    def predict(self, documents: Sequence[EncodedDocument]) -> np.ndarray:
        scores = self.score(documents)
        if self.spec.head.is_classifier:
            return scores.argmax(axis=1)
        return scores

    def save(self, directory):
        """
        Writes ``architecture.json``, ``params.json`` / ``params.bin`` and, if known, ``vocab.json``.
        """
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, 'architecture.json'), 'w') as f:
            json.dump({'architecture': self.spec.to_dict(), 'task': self.task}, f, indent=1)
        save_parameters(self.params, os.path.join(directory, 'params'))
        if self.vocab is not None:
            self.vocab.save(os.path.join(directory, 'vocab.json'))

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, 'architecture.json'), 'r') as f:
            meta = json.load(f)
        spec = ArchitectureSpec.from_dict(meta['architecture'])
        params = load_parameters(os.path.join(directory, 'params'))
        expected = {name: p.shape for name, p in init_params(spec, np.random.default_rng(0)).items()}
        found = {name: p.shape for name, p in params.items()}
        if expected != found:
            missing = sorted(set(expected) - set(found))
            raise ParseError(f'parameters in {directory} do not match the architecture (missing {missing[:5]}, '
                             f'{len(set(found) - set(expected))} unexpected, or shapes differ)')
        vocab_path = os.path.join(directory, 'vocab.json')
        vocab = Vocabulary.load(vocab_path) if os.path.exists(vocab_path) else None
        return cls(spec, params, vocab, meta.get('task'))


def random_documents(rng, n_docs, vocab_size, n_sentences=(2, 4), sentence_len=(2, 4), n_facts=(0, 3)):
    """Random encoded documents over ids [4, vocab_size), with random facts."""
    def ids(low, high):
        return [int(i) for i in rng.integers(4, vocab_size, size=rng.integers(low, high + 1))]

    documents = []
    for i in range(n_docs):
        sentences = [ids(*sentence_len) for _ in range(rng.integers(n_sentences[0], n_sentences[1] + 1))]
        facts = [EncodedFact(int(rng.integers(len(sentences))), ids(1, 2), ids(1, 1), ids(1, 2))
                 for _ in range(rng.integers(n_facts[0], n_facts[1] + 1))]
        documents.append(EncodedDocument(doc_id=f'random-{i}', sentences=sentences, facts=order_facts(facts)))
    return documents


def check_gradients(kind, tol=1e-4, eps=1e-5, seed=0, max_elements=None, head_kind='classify3', vocab_size=12,
                    init_std=0.5, pooling='mean') -> T.GradcheckReport:
    """
    End-to-end gradient check of an architecture at a tiny size (1 layer, 2 heads, d_model=8, no dropout).

    Parameters are drawn with a large ``init_std`` so that gradient elements stay well above the round-off
    of the finite differences.

    :return: GradcheckReport over every parameter
    """
    rng = np.random.default_rng(seed)
    spec = build_spec(kind, head_kind, vocab_size, d_model=8, n_layers=1, n_heads=2, d_ff=16, dropout_p=0.0,
                      max_seq_len=16, hidden_dim=8, pooling=pooling)
    model = CoherenceModel.initialise(spec, rng, init_std=init_std)
    documents = random_documents(rng, 3, vocab_size)
    negatives = random_documents(rng, 3, vocab_size)
    targets = rng.integers(HEAD_OUTPUTS[head_kind], size=3) if spec.head.is_classifier else rng.uniform(1, 3, 3)
    pairs = None
    if kind == 'mtl':
        pairs = [EncodedPair(d.sentences[0], d.sentences[1], int(rng.integers(2))) for d in random_documents(
            rng, 3, vocab_size)]

    def loss(params):
        return model.loss(documents, targets, negatives if head_kind == 'rank_score' else None, pairs,
                          params=params)
    return T.gradcheck(loss, model.params, eps=eps, tol=tol, max_elements=max_elements, rng=rng)
