#!/usr/bin/env python3

"""
This module contains the text side of the library: tokenisation and vocabularies, sentence
segmentation, the corpus / fact / permutation / entailment file formats, sentence-permutation
datasets, naive fact extraction, label derivation from expert ratings and the synthetic
entity-chain corpus.
"""
import itertools
import json
import math
import os
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from coherence_lab.errors import (ContractError, ConfigError, ExcludedDocumentError, FactAlignmentError,
                                  LabelError, ParseError)

PAD, UNK, CLS, SEP = '[PAD]', '[UNK]', '[CLS]', '[SEP]'
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)

LABEL3 = ('low', 'medium', 'high')
BINARY_LABELS = ('other', 'non_coherent')
ENTAILMENT_LABELS = ('not_entailment', 'entailment')
EXPERT_SCORES = (1, 2, 3)

_WORD_PATTERN = re.compile(r"\w+|[^\w\s]")
_SENTENCE_END = re.compile(r'[.!?]+(?=\s|$)')

# lower-cased words (without the final period) that do not end a sentence
ABBREVIATIONS = frozenset([
    'mr', 'mrs', 'ms', 'dr', 'prof', 'sr', 'jr', 'st', 'vs', 'e.g', 'i.e', 'inc', 'ltd', 'corp', 'u.s',
    'u.k', 'gen', 'gov', 'sen', 'rev', 'mt', 'jan', 'feb', 'apr', 'aug', 'sept', 'oct', 'nov',
])

DEFAULT_ENTITIES = (
    'Alice', 'Bob', 'Carol', 'Dave', 'Erin', 'Frank', 'Grace', 'Heidi', 'Ivan', 'Judy', 'Mallory', 'Niaj',
    'Olivia', 'Peggy', 'Quentin', 'Rupert', 'Sybil', 'Trent', 'Ursula', 'Victor', 'Walter', 'Xavier', 'Yvonne',
    'Zara', 'Amber', 'Basil', 'Cedric', 'Delia', 'Edgar', 'Fiona', 'Gustav', 'Hazel', 'Igor', 'Jasper', 'Kira',
    'Leon', 'Mabel', 'Nigel', 'Opal', 'Piers',
)
SYNTH_VERBS = ('introduces', 'meets', 'calls', 'helps', 'visits', 'writes to', 'thanks', 'follows')


def word_tokens(text: str) -> List[str]:
    """Lower-cased word and punctuation tokens."""
    return _WORD_PATTERN.findall(text.lower())


@dataclass
class Vocabulary:
    """Token list whose first four entries are PAD, UNK, CLS and SEP."""
    tokens: List[str]

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError(f'vocabulary must start with {SPECIAL_TOKENS}')
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError('vocabulary contains duplicate tokens')
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def detokenize(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path):
        with open(path, 'w') as f:
            json.dump({'tokens': self.tokens}, f)

    @classmethod
    def load(cls, path):
        with open(path, 'r') as f:
            return cls(tokens=json.load(f)['tokens'])


@dataclass
class Document:
    id: str
    text: str
    sentences: Optional[List[str]] = None
    label3: Optional[str] = None
    expert_scores: Optional[List[int]] = None
    gold_score: Optional[float] = None
    domain: Optional[str] = None

    def __post_init__(self):
        if self.sentences is None:
            self.sentences = segment_sentences(self.text)
        elif ''.join(''.join(self.sentences).split()) != ''.join(self.text.split()):
            raise ContractError(f'sentences of document {self.id} do not concatenate to its text')
        if self.label3 is not None and self.label3 not in LABEL3:
            raise LabelError(f'label3 of document {self.id} must be one of {LABEL3}, got {self.label3}')
        if self.expert_scores is not None:
            _check_scores(self.expert_scores)
            self.expert_scores = [int(s) for s in self.expert_scores]

    @property
    def n_sentences(self):
        return len(self.sentences)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Fact:
    doc_id: str
    sentence_index: int
    subject: str
    verb: str
    object: str

    def __post_init__(self):
        if not isinstance(self.sentence_index, int) or self.sentence_index < 0:
            raise FactAlignmentError(f'sentence_index must be a non-negative int, got {self.sentence_index}')
        for part in ('subject', 'verb', 'object'):
            if not isinstance(getattr(self, part), str) or not getattr(self, part).strip():
                raise ContractError(f'fact {part} must be a non-empty string')

    def to_dict(self):
        return asdict(self)


@dataclass
class PermutationPair:
    original_id: str
    perm_index: int
    order: Tuple[int, ...]

    def __post_init__(self):
        self.order = tuple(int(i) for i in self.order)
        if sorted(self.order) != list(range(len(self.order))):
            raise ContractError(f'order {self.order} is not a permutation')
        if self.order == tuple(range(len(self.order))):
            raise ContractError(f'permutation {self.perm_index} of {self.original_id} is the identity')

    def apply(self, items: Sequence):
        return [items[i] for i in self.order]

    def inverse(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.argsort(self.order))

    def to_dict(self):
        return {'original_id': self.original_id, 'perm_index': self.perm_index, 'order': list(self.order)}


@dataclass
class EntailmentExample:
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if self.label not in ENTAILMENT_LABELS:
            raise LabelError(f'entailment label must be one of {ENTAILMENT_LABELS}, got {self.label}')

    def to_dict(self):
        return asdict(self)


@dataclass
class EncodedFact:
    sentence_index: int
    subject: List[int]
    verb: List[int]
    object: List[int]


@dataclass
class EncodedDocument:
    """Token ids of a document without special tokens, per sentence and concatenated."""
    doc_id: str
    sentences: List[List[int]]
    facts: List[EncodedFact] = field(default_factory=list)

    @property
    def tokens(self) -> List[int]:
        return [t for s in self.sentences for t in s]


@dataclass
class EncodedPair:
    premise: List[int]
    hypothesis: List[int]
    label: int


def build_vocab(corpus: Sequence[Document], min_freq=1, extra_texts: Iterable[str] = ()) -> Vocabulary:
    """
    Builds a word vocabulary ordered by frequency (descending), then lexicographically.

    :param corpus: documents
    :param min_freq: minimum count for a token to be kept
    :param extra_texts: other texts the model will read, e.g. entailment pairs
    :return: Vocabulary with the four special tokens first
    """
    if len(corpus) == 0:
        raise ContractError('cannot build a vocabulary from an empty corpus')
    counts = Counter(t for doc in corpus for t in word_tokens(doc.text))
    counts.update(t for extra in extra_texts for t in word_tokens(extra))
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(tokens=list(SPECIAL_TOKENS) + kept)


def tokenize(vocab: Vocabulary, text: str) -> List[int]:
    return [vocab.id_of(t) for t in word_tokens(text)]


def segment_sentences(text: str) -> List[str]:
    """
    Splits on '.', '!' or '?' followed by whitespace or the end of the text, unless the period closes
    a known abbreviation (Mr., Dr., e.g., ...).
    """
    sentences, start = [], 0
    for match in _SENTENCE_END.finditer(text):
        if match.group().startswith('.') and len(match.group()) == 1:
            words = text[start:match.start()].split()
            if words and words[-1].lower().lstrip('(\'"') in ABBREVIATIONS:
                continue
        sentence = text[start:match.end()].strip()
        if sentence:
            sentences.append(sentence)
        start = match.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _check_scores(scores):
    for s in scores:
        if s not in EXPERT_SCORES or isinstance(s, bool):
            raise LabelError(f'expert scores must be in {EXPERT_SCORES}, got {s}')


def derive_binary_label(expert_scores: Sequence[int]) -> str:
    """non_coherent iff at least two experts rated the text low (1)."""
    _check_scores(expert_scores)
    return 'non_coherent' if sum(1 for s in expert_scores if s == 1) >= 2 else 'other'


def derive_gold_score(expert_scores: Sequence[int]) -> float:
    if len(expert_scores) == 0:
        raise LabelError('cannot derive a gold score from no expert scores')
    _check_scores(expert_scores)
    return float(np.mean(expert_scores))


def collapse_nli_label(label: str) -> str:
    """Maps three-way NLI labels onto the binary entailment label space."""
    label = label.strip().lower()
    if label in ENTAILMENT_LABELS:
        return label
    if label in ('neutral', 'contradiction'):
        return 'not_entailment'
    raise LabelError(f'unknown entailment label {label}')


def _distinct_arrangements(sentences: Sequence[str]) -> int:
    counts = Counter(sentences).values()
    return math.factorial(len(sentences)) // math.prod(math.factorial(c) for c in counts)


def generate_permutations(doc: Document, k=20, rng: Optional[np.random.Generator] = None,
                          max_enumeration=50000) -> List[PermutationPair]:
    """
    Samples up to ``k`` distinct sentence orderings of ``doc`` different from the original.

    Orderings are compared by the sentence texts they produce, so with repeated sentences a swap of
    two identical sentences counts as the original ordering. Uniform rejection sampling is tried for
    50*k draws, then the remaining orderings are enumerated.

    :return: min(k, number of distinct non-original orderings) pairs
    :raises ExcludedDocumentError: for documents with fewer than two sentences
    """
    n = doc.n_sentences
    if n < 2:
        raise ExcludedDocumentError(f'document {doc.id} has {n} sentence(s); ordering needs at least two')
    rng = np.random.default_rng() if rng is None else rng
    original = tuple(doc.sentences)
    target = min(k, _distinct_arrangements(doc.sentences) - 1)

    seen = {original}
    orders = []
    attempts = 0
    while len(orders) < target and attempts < 50 * k:
        attempts += 1
        order = tuple(int(i) for i in rng.permutation(n))
        key = tuple(original[i] for i in order)
        if key not in seen:
            seen.add(key)
            orders.append(order)

    if len(orders) < target:
        candidates = []
        for order in itertools.islice(itertools.permutations(range(n)), max_enumeration):
            key = tuple(original[i] for i in order)
            if key not in seen:
                seen.add(key)
                candidates.append(order)
        rng.shuffle(candidates)
        orders.extend(candidates[:target - len(orders)])

    return [PermutationPair(original_id=doc.id, perm_index=i, order=o) for i, o in enumerate(orders)]


def apply_permutation(doc: Document, pair: PermutationPair) -> Document:
    """The permuted document; coherence labels are not carried over."""
    if pair.original_id != doc.id or len(pair.order) != doc.n_sentences:
        raise ContractError(f'permutation for {pair.original_id} ({len(pair.order)} sentences) '
                            f'does not fit document {doc.id} ({doc.n_sentences} sentences)')
    sentences = pair.apply(doc.sentences)
    return Document(id=f'{doc.id}.perm-{pair.perm_index + 1}', text=' '.join(sentences), sentences=sentences,
                    domain=doc.domain)


def permute_facts(facts: Sequence[Fact], order: Sequence[int]) -> List[Fact]:
    """Moves every fact to the new position of its sentence under ``order``."""
    new_position = {old: new for new, old in enumerate(order)}
    return [Fact(doc_id=f.doc_id, sentence_index=new_position[f.sentence_index], subject=f.subject,
                 verb=f.verb, object=f.object) for f in facts]


def _words_with_case(sentence):
    return re.findall(r"[\w'-]+|[^\w\s]", sentence)


def extract_facts_naive(doc: Document, verb_lexicon: Iterable[str]) -> List[Fact]:
    """
    Lexicon-driven stand-in for an open information extraction system.

    In every sentence the earliest lexicon verb (longest entry when several start at the same word,
    case-insensitive) splits the sentence into subject, verb and object; a fact is emitted only when
    both sides are non-empty.
    """
    lexicon = sorted({tuple(v.lower().split()) for v in verb_lexicon if v.strip()}, key=len, reverse=True)
    if not lexicon:
        raise ContractError('verb lexicon is empty')

    facts = []
    for s_idx, sentence in enumerate(doc.sentences):
        words = _words_with_case(sentence)
        lowered = [w.lower() for w in words]
        for start in range(len(words)):
            verb = next((v for v in lexicon if tuple(lowered[start:start + len(v)]) == v), None)
            if verb is None:
                continue
            left = [w for w in words[:start] if re.match(r'\w', w)]
            right = [w for w in words[start + len(verb):] if re.match(r'\w', w)]
            if left and right:
                facts.append(Fact(doc_id=doc.id, sentence_index=s_idx, subject=' '.join(left),
                                  verb=' '.join(words[start:start + len(verb)]), object=' '.join(right)))
            break
    return facts


def _read_jsonl(path):
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as ex:
                raise ParseError(f'invalid JSON ({ex.msg})', path, line_number)
            if not isinstance(record, dict):
                raise ParseError('each line must be a JSON object', path, line_number)
            yield line_number, record


def _parse(record_type, record, path, line_number, required):
    missing = [k for k in required if k not in record]
    unknown = set(record) - {f for f in record_type.__dataclass_fields__}
    if missing or unknown:
        raise ParseError(f'missing keys {missing} / unknown keys {sorted(unknown)}', path, line_number)
    try:
        return record_type(**record)
    except (TypeError, ValueError) as ex:
        if isinstance(ex, FactAlignmentError):
            raise FactAlignmentError(f'{path}:{line_number}: {ex}')
        raise ParseError(str(ex), path, line_number)


def _write_jsonl(path, records, record_type):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        for rec in records:
            d = rec.to_dict()
            record_type(**json.loads(json.dumps(d)))  # self-check: the line must parse back
            f.write(json.dumps(d) + '\n')


def read_corpus(path) -> List[Document]:
    docs = [_parse(Document, r, path, n, ('id', 'text')) for n, r in _read_jsonl(path)]
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        raise ParseError(f'{path}: duplicate document ids')
    return docs


def write_corpus(path, documents: Iterable[Document]):
    _write_jsonl(path, documents, Document)


def load_facts_sidecar(path, documents: Optional[Mapping[str, Document]] = None) -> List[Fact]:
    """
    Reads externally extracted facts (one JSON object per line, order preserved).

    :param path: facts.jsonl
    :param documents: optional id -> Document map used to check every sentence_index
    :raises ParseError: on malformed lines (with line number)
    :raises FactAlignmentError: when a fact points outside its document
    """
    facts = []
    for n, r in _read_jsonl(path):
        fact = _parse(Fact, r, path, n, ('doc_id', 'sentence_index', 'subject', 'verb', 'object'))
        if documents is not None:
            check_fact_alignment(fact, documents.get(fact.doc_id), f'{path}:{n}: ')
        facts.append(fact)
    return facts


def check_fact_alignment(fact: Fact, doc: Optional[Document], where=''):
    if doc is None:
        raise FactAlignmentError(f'{where}fact refers to unknown document {fact.doc_id}')
    if fact.sentence_index >= doc.n_sentences:
        raise FactAlignmentError(f'{where}fact sentence_index {fact.sentence_index} is outside document '
                                 f'{doc.id} with {doc.n_sentences} sentences')


def write_facts(path, facts: Iterable[Fact]):
    _write_jsonl(path, facts, Fact)


def read_permutations(path) -> List[PermutationPair]:
    return [_parse(PermutationPair, r, path, n, ('original_id', 'perm_index', 'order')) for n, r in _read_jsonl(path)]


def write_permutations(path, pairs: Iterable[PermutationPair]):
    _write_jsonl(path, pairs, PermutationPair)


def read_entailment(path) -> List[EntailmentExample]:
    examples = []
    for n, r in _read_jsonl(path):
        if isinstance(r.get('label'), str):
            try:
                r['label'] = collapse_nli_label(r['label'])
            except LabelError as ex:
                raise ParseError(str(ex), path, n)
        examples.append(_parse(EntailmentExample, r, path, n, ('premise', 'hypothesis', 'label')))
    return examples


def write_entailment(path, examples: Iterable[EntailmentExample]):
    _write_jsonl(path, examples, EntailmentExample)


def filter_domains(documents: Sequence[Document], domains: Optional[Sequence[str]]) -> List[Document]:
    """Keeps documents of the given domains; None, [] or ['all'] keep everything."""
    if not domains or 'all' in domains:
        return list(documents)
    wanted = {d.lower() for d in domains}
    return [d for d in documents if (d.domain or '').lower() in wanted]


def select_high_coherence(documents: Sequence[Document]) -> List[Document]:
    return [d for d in documents if d.label3 == 'high']


def encode_document(vocab: Vocabulary, doc: Document, facts: Sequence[Fact] = ()) -> EncodedDocument:
    """
    Token ids per sentence plus the document's facts, ordered by (sentence_index, extraction order).
    """
    encoded_facts = []
    for f in facts:
        if f.doc_id != doc.id:
            raise FactAlignmentError(f'fact of document {f.doc_id} attached to document {doc.id}')
        check_fact_alignment(f, doc)
        encoded_facts.append(EncodedFact(f.sentence_index, tokenize(vocab, f.subject), tokenize(vocab, f.verb),
                                         tokenize(vocab, f.object)))
    encoded_facts.sort(key=lambda f: f.sentence_index)
    return EncodedDocument(doc_id=doc.id, sentences=[tokenize(vocab, s) for s in doc.sentences],
                           facts=encoded_facts)


def encode_entailment(vocab: Vocabulary, example: EntailmentExample) -> EncodedPair:
    return EncodedPair(premise=tokenize(vocab, example.premise), hypothesis=tokenize(vocab, example.hypothesis),
                       label=ENTAILMENT_LABELS.index(example.label))


def side_texts(facts: Iterable[Fact] = (), entailment: Iterable[EntailmentExample] = ()) -> List[str]:
    """Texts of facts and entailment pairs, for building a vocabulary that also covers them."""
    texts = [f'{f.subject} {f.verb} {f.object}' for f in facts]
    texts.extend(f'{e.premise} {e.hypothesis}' for e in entailment)
    return texts


def _chain(entities, rng):
    return [f'{a} {SYNTH_VERBS[rng.integers(len(SYNTH_VERBS))]} {b}.' for a, b in zip(entities[:-1], entities[1:])]


def synth_corpus(n_docs, sents_per_doc, vocab_entities: Sequence[str] = DEFAULT_ENTITIES,
                 rng: Optional[np.random.Generator] = None, kinds: Sequence[str] = LABEL3[::-1]):
    """
    Generates entity-chain documents.

    A chain document mentions entities e_0..e_n so that sentence i links e_i to e_(i+1): adjacent
    sentences share exactly one entity. ``high`` documents keep the chain order, ``medium`` ones swap
    one adjacent pair of sentences and ``low`` ones are a random reordering of the chain. Kinds cycle
    through ``kinds``; expert scores are (3,3,3), (2,2,3) and (1,1,2) respectively.

    :param n_docs: number of documents to emit
    :param sents_per_doc: sentences per document (>= 2)
    :param vocab_entities: entity names, at least sents_per_doc + 1 of them
    :param rng: random generator
    :param kinds: label3 values to cycle through, e.g. ('high',) for chain documents only
    :return: documents and their label3 values
    """
    if sents_per_doc < 2:
        raise ContractError(f'synthetic documents need at least two sentences, got {sents_per_doc}')
    if len(vocab_entities) < sents_per_doc + 1:
        raise ConfigError(f'{sents_per_doc} sentences need {sents_per_doc + 1} entities, '
                          f'got {len(vocab_entities)}')
    for kind in kinds:
        if kind not in LABEL3:
            raise LabelError(f'unknown synthetic document kind {kind}')
    rng = np.random.default_rng() if rng is None else rng
    scores = {'high': [3, 3, 3], 'medium': [2, 2, 3], 'low': [1, 1, 2]}

    documents, labels = [], []
    for i in range(n_docs):
        kind = kinds[i % len(kinds)]
        entities = [vocab_entities[j] for j in rng.choice(len(vocab_entities), sents_per_doc + 1, replace=False)]
        sentences = _chain(entities, rng)
        if kind == 'medium':
            j = int(rng.integers(sents_per_doc - 1))
            sentences[j], sentences[j + 1] = sentences[j + 1], sentences[j]
        elif kind == 'low':
            order = rng.permutation(sents_per_doc)
            while np.array_equal(order, np.arange(sents_per_doc)):
                order = rng.permutation(sents_per_doc)
            sentences = [sentences[o] for o in order]
        doc = Document(id=f'synth-{i:05d}', text=' '.join(sentences), sentences=sentences, label3=kind,
                       expert_scores=scores[kind], gold_score=derive_gold_score(scores[kind]), domain='synthetic')
        documents.append(doc)
        labels.append(kind)
    return documents, labels


def synth_entailment(n, vocab_entities: Sequence[str] = DEFAULT_ENTITIES,
                     rng: Optional[np.random.Generator] = None) -> List[EntailmentExample]:
    """
    Premise 'A <verb> B.' entails 'A knows B.' and does not entail the same claim about other people.
    Labels alternate between entailment and not_entailment.
    """
    rng = np.random.default_rng() if rng is None else rng
    examples = []
    for i in range(n):
        a, b, c, d = [vocab_entities[j] for j in rng.choice(len(vocab_entities), 4, replace=False)]
        premise = f'{a} {SYNTH_VERBS[rng.integers(len(SYNTH_VERBS))]} {b}.'
        if i % 2 == 0:
            examples.append(EntailmentExample(premise, f'{a} knows {b}.', 'entailment'))
        else:
            examples.append(EntailmentExample(premise, f'{c} knows {d}.', 'not_entailment'))
    return examples


def skip_short_documents(documents: Sequence[Document]) -> Tuple[List[Document], int]:
    """Drops one-sentence documents (they have no alternative ordering) and reports how many were dropped."""
    kept = [d for d in documents if d.n_sentences >= 2]
    dropped = len(documents) - len(kept)
    if dropped:
        warnings.warn(f'{dropped} document(s) with a single sentence were removed')
    return kept, dropped
