"""Constraint-aware question representation.

A closed-vocabulary encoder (word table plus one residual self-attention
layer) embeds the question and each retrieved fact. Entity and timestamp
mentions are not words: their positions are filled with projections of the
KG embeddings. Question tokens then cross-attend to the fact summaries and a
shared per-position gate blends the two aligned views.

Every function accepts a single instance (``n x d``) or a padded batch
(``B x n x d`` with boolean masks).
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, VocabularyError
from .store import Quadruple, QuestionRecord, TkgStore
from .tkge import ComplexEmbeddingTable, positional_table, timestamp_features

ENT_TOKEN, TIME_TOKEN = "<ent>", "<time>"


def linear(x: nx.Tensor, w: nx.Tensor, b: nx.Tensor | None = None) -> nx.Tensor:
    """Apply ``x @ w (+ b)`` over the last axis of ``x``."""
    lead = x.shape[:-1]
    out = nx.reshape(x, (-1, x.shape[-1])) @ w
    if b is not None:
        out = nx.add_bias(out, b)
    return nx.reshape(out, lead + (w.shape[1],))


def _glorot(rng, fan_in, fan_out):
    return rng.normal(scale=1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


class KgProjection:
    """Maps 2D-wide KG rows (entities, relations, timestamps) into the hidden width."""

    def __init__(self, kg_width: int, d_model: int, rng):
        self.entity = nx.parameter(_glorot(rng, kg_width, d_model))
        self.relation = nx.parameter(_glorot(rng, kg_width, d_model))
        self.time = nx.parameter(_glorot(rng, kg_width, d_model))

    def parameters(self):
        return [self.entity, self.relation, self.time]

    def project(self, tables: ComplexEmbeddingTable, codes: np.ndarray) -> "ProjectedKG":
        return ProjectedKG(
            entities=tables.entities @ self.entity,
            relations=tables.relations @ self.relation,
            timestamps=timestamp_features(tables, codes) @ self.time,
        )


class ProjectedKG:
    """Hidden-width views of the three KG tables for one forward pass."""

    def __init__(self, entities, relations, timestamps):
        self.entities = entities
        self.relations = relations
        self.timestamps = timestamps


class TextEncoder:
    """Word table, one self-attention layer and the placeholder projections."""

    def __init__(self, words, d_model: int, projection: KgProjection, rng, positional: bool = True):
        self.words = list(words)
        self.vocab = {w: k for k, w in enumerate(self.words)}
        self.d_model = d_model
        self.projection = projection
        self.positional = positional
        self.word_emb = nx.parameter(rng.normal(scale=1.0 / math.sqrt(d_model), size=(len(self.words), d_model)))
        self.w_q = nx.parameter(_glorot(rng, d_model, d_model))
        self.w_k = nx.parameter(_glorot(rng, d_model, d_model))
        self.w_v = nx.parameter(_glorot(rng, d_model, d_model))
        self.w_o = nx.parameter(_glorot(rng, d_model, d_model) * 0.5)

    def parameters(self):
        return [self.word_emb, self.w_q, self.w_k, self.w_v, self.w_o]

    def word_id(self, token: str) -> int:
        try:
            return self.vocab[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    # combined row index: [words | entities | timestamps]
    def entity_slot(self, e: int) -> int:
        return len(self.words) + e

    def time_slot(self, t: int, n_entities: int) -> int:
        return len(self.words) + n_entities + t

    def question_ids(self, record: QuestionRecord, n_entities: int) -> np.ndarray:
        ids = np.empty(len(record.tokens), dtype=np.int64)
        ents, times = dict(record.entities), dict(record.times)
        for pos, tok in enumerate(record.tokens):
            if pos in ents:
                ids[pos] = self.entity_slot(ents[pos])
            elif pos in times:
                ids[pos] = self.time_slot(times[pos], n_entities)
            else:
                ids[pos] = self.word_id(tok)
        return ids

    def fact_ids(self, fact: Quadruple, store: TkgStore) -> np.ndarray:
        """Verbalised fact: subject placeholder, relation word, object placeholder, time placeholder."""
        return np.array([self.entity_slot(fact.subject), self.word_id(store.relations[fact.predicate]),
                         self.entity_slot(fact.object), self.time_slot(fact.time_start, store.num_entities)],
                        dtype=np.int64)

    def token_table(self, kg: ProjectedKG) -> nx.Tensor:
        return nx.concat([self.word_emb, kg.entities, kg.timestamps], axis=0)


def _key_mask(mask, rows):
    """Broadcast a ``B x m`` key mask (True = real) to ``B x rows x m`` padding flags."""
    return np.repeat(~mask[:, None, :], rows, axis=1)


def self_attention(encoder: TextEncoder, x: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    """Residual single-head self-attention over ``B x n x d`` with key padding mask."""
    d = encoder.d_model
    q, k, v = linear(x, encoder.w_q), linear(x, encoder.w_k), linear(x, encoder.w_v)
    logits = nx.scale(q @ nx.transpose(k), 1.0 / math.sqrt(d))
    weights = nx.softmax(nx.masked_fill(logits, _key_mask(mask, x.shape[1]), -np.inf), axis=-1)
    return x + linear(weights @ v, encoder.w_o)


def encode_tokens(encoder: TextEncoder, table: nx.Tensor, ids: np.ndarray, mask: np.ndarray) -> nx.Tensor:
    """Encode padded rows of combined token ids: ``B x n`` -> ``B x n x d``."""
    x = nx.take_rows(table, ids)
    if encoder.positional:
        codes = positional_table(ids.shape[1], encoder.d_model)
        x = x + nx.constant(np.broadcast_to(codes, x.shape))
    return self_attention(encoder, x, mask)


def encode_question(encoder: TextEncoder, kg: ProjectedKG, record: QuestionRecord, n_entities: int) -> nx.Tensor:
    """Token representations ``Q`` (``n x d``) of one question."""
    if not record.tokens:
        raise DimensionError("question has no tokens")
    ids = encoder.question_ids(record, n_entities)[None, :]
    out = encode_tokens(encoder, encoder.token_table(kg), ids, np.ones(ids.shape, dtype=bool))
    return nx.reshape(out, out.shape[1:])


def encode_fact_ids(encoder: TextEncoder, table: nx.Tensor, fact_ids: np.ndarray) -> tuple:
    """Mean-pooled fact summaries for ``B x m x 4`` ids; returns (pooled ``B x m x d``, token states)."""
    b, m, length = fact_ids.shape
    flat = fact_ids.reshape(b * m, length)
    states = encode_tokens(encoder, table, flat, np.ones(flat.shape, dtype=bool))
    pooled = nx.mean(states, axis=1)
    return nx.reshape(pooled, (b, m, encoder.d_model)), states


def encode_spo(encoder: TextEncoder, kg: ProjectedKG, fact: Quadruple, store: TkgStore) -> nx.Tensor:
    """One fact summary ``s_i`` of width ``d``."""
    ids = encoder.fact_ids(fact, store)[None, None, :]
    pooled, _ = encode_fact_ids(encoder, encoder.token_table(kg), ids)
    return nx.reshape(pooled, (encoder.d_model,))


def _as_batch(x: nx.Tensor):
    return (nx.reshape(x, (1,) + x.shape), True) if x.ndim == 2 else (x, False)


def cross_attend(Q: nx.Tensor, S: nx.Tensor, q_mask=None, s_mask=None):
    """Align question tokens with facts.

    Returns ``(Q_bar, S_bar, no_facts)``. ``Q_bar[i]`` mixes fact summaries by
    ``softmax_j(q_i . s_j / sqrt(d))``; ``S_bar[i]`` re-expresses the question
    by ``softmax_j(q_i . q_j / sqrt(d))`` so both views have one row per token.
    Questions without facts get a zero ``Q_bar`` and ``no_facts`` set.
    """
    Qb, single = _as_batch(Q)
    b, n, d = Qb.shape
    if S.ndim == 2:
        S = nx.reshape(S, (1,) + S.shape)
    m = S.shape[1]
    q_mask = np.ones((b, n), dtype=bool) if q_mask is None else q_mask
    s_mask = np.ones((b, m), dtype=bool) if s_mask is None else s_mask
    no_facts = ~s_mask.any(axis=1)
    scale = 1.0 / math.sqrt(d)
    if m == 0:
        q_bar = nx.constant(np.zeros((b, n, d)))
    else:
        to_facts = nx.scale(Qb @ nx.transpose(S), scale)
        attn = nx.softmax(nx.masked_fill(to_facts, _key_mask(s_mask, n), -np.inf), axis=-1)
        q_bar = attn @ S
    to_self = nx.scale(Qb @ nx.transpose(Qb), scale)
    s_bar = nx.softmax(nx.masked_fill(to_self, _key_mask(q_mask, n), -np.inf), axis=-1) @ Qb
    if single:
        return nx.reshape(q_bar, (n, d)), nx.reshape(s_bar, (n, d)), bool(no_facts[0])
    return q_bar, s_bar, no_facts


def cross_attention_weights(Q: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Question-to-fact weights of :func:`cross_attend` for plain arrays (diagnostics)."""
    logits = Q @ S.T / math.sqrt(Q.shape[-1])
    with nx.no_grad():
        return nx.softmax(nx.constant(logits), axis=-1).values


class GateFuser:
    """Per-position sigmoid gate shared across token positions."""

    def __init__(self, d_model: int, rng):
        self.w_g = nx.parameter(_glorot(rng, 2 * d_model, d_model))
        self.b_g = nx.parameter(np.zeros(d_model))

    def parameters(self):
        return [self.w_g, self.b_g]


def gate_values(fuser: GateFuser, q_bar: nx.Tensor, s_bar: nx.Tensor) -> nx.Tensor:
    if q_bar.shape != s_bar.shape:
        raise ContractError(f"gate_fuse: {q_bar.shape} vs {s_bar.shape}")
    return nx.sigmoid(linear(nx.concat([q_bar, s_bar], axis=-1), fuser.w_g, fuser.b_g))


def gate_fuse(fuser: GateFuser, q_bar: nx.Tensor, s_bar: nx.Tensor) -> nx.Tensor:
    """``v_i = g_i * q_bar_i + (1 - g_i) * s_bar_i`` with ``g_i = sigmoid(W [q_bar_i ; s_bar_i] + b)``."""
    g = gate_values(fuser, q_bar, s_bar)
    return g * q_bar + (1.0 - g) * s_bar
