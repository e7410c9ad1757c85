#!/usr/bin/env python3

"""
This module contains the transformer encoder shared by all coherence architectures: configuration,
parameter initialisation, the pre-norm encoder stack, multi-head attention, segment pooling and the
parameter checkpoint format.

Parameter names (relative to an encoder prefix such as ``encoder.``)::

    token_embedding                     (vocab_size, d_model), absent when vocab_size == 0
    position_embedding                  (max_seq_len, d_model)
    layers.<i>.attn_norm.{gain,bias}    (d_model,)
    layers.<i>.attn.{query,key,value,output}.weight   (d_model, d_model)
    layers.<i>.attn.{query,value,output}.bias         (d_model,), keys have no bias
    layers.<i>.ffn_norm.{gain,bias}     (d_model,)
    layers.<i>.ffn.inner.weight / bias  (d_model, d_ff) / (d_ff,)
    layers.<i>.ffn.outer.weight / bias  (d_ff, d_model) / (d_model,)
    final_norm.{gain,bias}              (d_model,)
"""
import json
import os
from dataclasses import dataclass, asdict, fields
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from coherence_lab import tensor as T
from coherence_lab.errors import ConfigError, LengthError, ParseError, SegmentError, VocabError, DimensionError

POOLING_STRATEGIES = ('min', 'max', 'mean', 'sum', 'attention', 'none')
ATTENTION_PROJECTIONS = ('query', 'key', 'value', 'output')
PARAMS_FORMAT = 'coherence-lab-params'

ParameterSet = Dict[str, T.Tensor]


@dataclass
class EncoderConfig:
    """
    Hyperparameters of one transformer encoder.

    ``vocab_size == 0`` builds an encoder that takes vector inputs only (second level encoders).
    """
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 16
    d_ff: int = 32
    dropout_p: float = 0.1
    max_seq_len: int = 512
    vocab_size: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError(f'encoder needs at least one layer and one head, '
                              f'got n_layers={self.n_layers}, n_heads={self.n_heads}')
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f'd_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})')
        if self.max_seq_len < 2:
            raise ConfigError(f'max_seq_len must leave room for CLS and one token, got {self.max_seq_len}')
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f'dropout_p must be in [0, 1), got {self.dropout_p}')
        if self.d_ff < 1 or self.vocab_size < 0:
            raise ConfigError('d_ff must be positive and vocab_size non-negative')

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f'unknown encoder settings: {sorted(unknown)}')
        return cls(**values)


@dataclass
class EncoderOutput:
    hidden: T.Tensor
    cls: T.Tensor


def normal_param(rng, std, shape):
    return T.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return T.Tensor(np.ones(shape), requires_grad=True)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator, prefix='', init_std=0.02) -> ParameterSet:
    """
    Draws a fresh parameter set: weights from N(0, init_std), zero biases, unit layer-norm gains.

    :param config: encoder configuration
    :param rng: random generator
    :param prefix: prepended to every parameter name
    :param init_std: standard deviation of the weights
    :return: dict from parameter name to Tensor
    """
    d, d_ff = config.d_model, config.d_ff
    params = {}
    if config.vocab_size > 0:
        params['token_embedding'] = normal_param(rng, init_std, (config.vocab_size, d))
    params['position_embedding'] = normal_param(rng, init_std, (config.max_seq_len, d))
    for i in range(config.n_layers):
        layer = f'layers.{i}.'
        params[layer + 'attn_norm.gain'] = _ones(d)
        params[layer + 'attn_norm.bias'] = zeros_param(d)
        for proj in ATTENTION_PROJECTIONS:
            params[layer + f'attn.{proj}.weight'] = normal_param(rng, init_std, (d, d))
            if proj != 'key':
                params[layer + f'attn.{proj}.bias'] = zeros_param(d)
        params[layer + 'ffn_norm.gain'] = _ones(d)
        params[layer + 'ffn_norm.bias'] = zeros_param(d)
        params[layer + 'ffn.inner.weight'] = normal_param(rng, init_std, (d, d_ff))
        params[layer + 'ffn.inner.bias'] = zeros_param(d_ff)
        params[layer + 'ffn.outer.weight'] = normal_param(rng, init_std, (d_ff, d))
        params[layer + 'ffn.outer.bias'] = zeros_param(d)
    params['final_norm.gain'] = _ones(d)
    params['final_norm.bias'] = zeros_param(d)
    return {prefix + k: v for k, v in params.items()}


def linear(x, params: Mapping, name: str):
    return T.add(T.matmul(x, params[name + '.weight']), params[name + '.bias'])


def multi_head_attention(q, k, v, mask, n_heads: int, params: Mapping, prefix='') -> Tuple[T.Tensor, np.ndarray]:
    """
    Scaled dot-product attention over ``n_heads`` heads, concatenated and projected.

    :param q: queries source (B, L, d_model)
    :param k: keys source (B, L, d_model)
    :param v: values source (B, L, d_model)
    :param mask: bool (B, L), False on padded keys; those keys get exactly zero weight
    :param n_heads: number of heads
    :param params: parameter set holding ``<prefix>{query,key,value,output}.weight`` and the
        query, value and output biases
    :param prefix: name prefix of the attention block
    :return: output (B, L, d_model) and the attention weights (B, n_heads, L, L)
    """
    batch, length, d_model = q.shape
    if k.shape != v.shape or k.shape[0] != batch or k.shape[2] != d_model:
        raise DimensionError(f'attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}')
    if d_model % n_heads:
        raise DimensionError(f'attention: d_model {d_model} not divisible by {n_heads} heads')
    head_dim = d_model // n_heads
    key_len = k.shape[1]

    def split_heads(x, n):
        return T.transpose(T.reshape(x, (batch, n, n_heads, head_dim)), (0, 2, 1, 3))

    qh = split_heads(linear(q, params, prefix + 'query'), length)
    # a key bias only shifts every logit of a query by the same amount
    kh = split_heads(T.matmul(k, params[prefix + 'key.weight']), key_len)
    vh = split_heads(linear(v, params, prefix + 'value'), key_len)

    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    weights = T.softmax(scores, axis=-1, mask=key_mask)
    context = T.reshape(T.transpose(T.matmul(weights, vh), (0, 2, 1, 3)), (batch, length, d_model))
    return linear(context, params, prefix + 'output'), weights.data


def _feed_forward(x, params, prefix):
    return linear(T.gelu(linear(x, params, prefix + 'inner')), params, prefix + 'outer')


def encode_embeddings(config: EncoderConfig, params: Mapping, inputs: T.Tensor, mask, training=False,
                      rng: Optional[np.random.Generator] = None, prefix='') -> EncoderOutput:
    """
    Runs the encoder stack on already embedded inputs, adding learned absolute positions.

    :param inputs: (B, L, d_model) input vectors
    :param mask: bool (B, L), True on real positions
    """
    batch, length, d_model = inputs.shape
    if length > config.max_seq_len:
        raise LengthError(f'sequence length {length} exceeds max_seq_len {config.max_seq_len}')
    if d_model != config.d_model:
        raise DimensionError(f'input width {d_model} does not match d_model {config.d_model}')
    mask = np.ones((batch, length), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (batch, length):
        raise DimensionError(f'mask shape {mask.shape} does not match inputs {(batch, length)}')

    positions = T.take(params[prefix + 'position_embedding'], np.arange(length), axis=0)
    x = T.dropout(T.add(inputs, positions), config.dropout_p, training, rng)
    for i in range(config.n_layers):
        layer = f'{prefix}layers.{i}.'
        h = T.layer_norm(x, params[layer + 'attn_norm.gain'], params[layer + 'attn_norm.bias'], config.ln_eps)
        attn_out, _ = multi_head_attention(h, h, h, mask, config.n_heads, params, layer + 'attn.')
        x = T.add(x, T.dropout(attn_out, config.dropout_p, training, rng))
        h = T.layer_norm(x, params[layer + 'ffn_norm.gain'], params[layer + 'ffn_norm.bias'], config.ln_eps)
        x = T.add(x, T.dropout(_feed_forward(h, params, layer + 'ffn.'), config.dropout_p, training, rng))
    hidden = T.layer_norm(x, params[prefix + 'final_norm.gain'], params[prefix + 'final_norm.bias'], config.ln_eps)
    cls = T.reshape(T.take(hidden, [0], axis=1), (batch, d_model))
    return EncoderOutput(hidden=hidden, cls=cls)


def encode(config: EncoderConfig, params: Mapping, token_ids, mask, training=False,
           rng: Optional[np.random.Generator] = None, prefix='') -> EncoderOutput:
    """
    Encodes a padded batch of token ids.

    :param config: encoder configuration
    :param params: parameter set
    :param token_ids: int (B, L); position 0 is expected to hold CLS
    :param mask: bool (B, L), True exactly on non-pad positions
    :param training: enables dropout (needs ``rng``)
    :return: EncoderOutput with hidden (B, L, d_model) and cls (B, d_model)
    :raises LengthError: if L > max_seq_len
    :raises VocabError: if an id is outside the vocabulary
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 2:
        raise DimensionError(f'token ids must be (batch, length), got shape {token_ids.shape}')
    if token_ids.shape[1] > config.max_seq_len:
        raise LengthError(f'sequence length {token_ids.shape[1]} exceeds max_seq_len {config.max_seq_len}')
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= config.vocab_size):
        raise VocabError(f'token id {int(token_ids.max())} outside vocabulary of size {config.vocab_size}')
    embedded = T.embedding_lookup(params[prefix + 'token_embedding'], token_ids)
    return encode_embeddings(config, params, embedded, mask, training, rng, prefix)


def pool(hidden: T.Tensor, segment: Tuple[int, int], strategy='mean', attn_params: Optional[T.Tensor] = None):
    """
    Reduces the hidden states of positions ``segment = (start, stop)`` (half open) to one vector per row.

    ``attention`` weights the positions by softmax(w . h_t) with the learned query vector ``attn_params``;
    ``none`` returns the state at the last position of the segment.

    :return: Tensor (B, d)
    """
    start, stop = segment
    length = hidden.shape[1]
    if not 0 <= start < stop <= length:
        raise SegmentError(f'segment {segment} is empty or outside sequence length {length}')
    if strategy not in POOLING_STRATEGIES:
        raise ConfigError(f'pooling strategy must be one of {POOLING_STRATEGIES}, got {strategy}')

    if strategy == 'none':
        return T.reshape(T.take(hidden, [stop - 1], axis=1), (hidden.shape[0], hidden.shape[2]))
    part = T.take(hidden, np.arange(start, stop), axis=1)
    if strategy == 'sum':
        return T.reduce_sum(part, axis=1)
    if strategy == 'mean':
        return T.reduce_mean(part, axis=1)
    if strategy == 'max':
        return T.reduce_max(part, axis=1)
    if strategy == 'min':
        return T.reduce_min(part, axis=1)

    if attn_params is None:
        raise ConfigError('attention pooling needs a query vector')
    batch, seg_len, d = part.shape
    scores = T.reshape(T.matmul(part, T.reshape(attn_params, (d, 1))), (batch, seg_len))
    weights = T.reshape(T.softmax(scores, axis=-1), (batch, 1, seg_len))
    return T.reshape(T.matmul(weights, part), (batch, d))


def save_parameters(params: Mapping[str, T.Tensor], stem: str):
    """
    Writes ``<stem>.json`` (manifest) and ``<stem>.bin`` (little-endian float64 values in manifest order).
    """
    entries, offset = [], 0
    for name in sorted(params):
        size = int(params[name].size)
        entries.append({'name': name, 'shape': list(params[name].shape), 'offset': offset, 'size': size})
        offset += size
    flat = np.concatenate([params[e['name']].data.reshape(-1) for e in entries]) if entries else np.zeros(0)
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)
    flat.astype('<f8').tofile(stem + '.bin')
    with open(stem + '.json', 'w') as f:
        json.dump({'format': PARAMS_FORMAT, 'dtype': '<f8', 'parameters': entries}, f, indent=1)


def load_parameters(stem: str) -> ParameterSet:
    with open(stem + '.json', 'r') as f:
        manifest = json.load(f)
    if manifest.get('format') != PARAMS_FORMAT or manifest.get('dtype') != '<f8':
        raise ParseError(f'{stem}.json is not a {PARAMS_FORMAT} manifest')
    flat = np.fromfile(stem + '.bin', dtype='<f8')
    params = {}
    for e in manifest['parameters']:
        values = flat[e['offset']:e['offset'] + e['size']]
        if values.size != e['size']:
            raise ParseError(f'{stem}.bin is shorter than its manifest ({e["name"]})')
        params[e['name']] = T.Tensor(values.reshape(e['shape']), requires_grad=True)
    return params
