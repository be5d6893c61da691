"""Multi-view fusion of question and graph representations, and the answer head.

View 1 aligns question tokens and graph nodes by scaled dot-product
attention in both directions. View 2 mixes both alignments with a temporal
summary of the subgraph through a ReLU layer. View 3 gates between the two
alignments and adds the temporal view un-gated. The fused vector is scored
against every entity and timestamp.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .encoder import linear
from .errors import ContractError, DimensionError


def _glorot(rng, fan_in, fan_out, gain=1.0):
    return rng.normal(scale=gain / math.sqrt(fan_in), size=(fan_in, fan_out))


class FusionHead:
    """Temporal view, context gate and output projection.

    ``w_o`` has one row per answer (entities first, then timestamps). With
    ``tie_output`` the hidden-width candidate rows are added to ``w_o`` at
    scoring time, so every answer starts from its own embedding.
    """

    def __init__(self, d_model: int, n_answers: int, rng, tie_output: bool = True):
        self.d_model = d_model
        self.w_t = nx.parameter(_glorot(rng, 3 * d_model, d_model))
        self.w_g = nx.parameter(_glorot(rng, 3 * d_model, d_model))
        self.b_g = nx.parameter(np.zeros(d_model))
        self.w_o = nx.parameter(np.zeros((n_answers, d_model)) if tie_output
                                else _glorot(rng, d_model, n_answers).T.copy())
        self.b_o = nx.parameter(np.zeros(n_answers))
        self.tie_output = tie_output
        # concatenation head used when adaptive fusion is switched off
        self.w_c = nx.parameter(_glorot(rng, 3 * d_model, d_model))
        self.b_c = nx.parameter(np.zeros(d_model))

    @property
    def n_answers(self) -> int:
        return self.w_o.shape[0]

    def parameters(self, adaptive: bool = True):
        shared = [self.w_o, self.b_o]
        if adaptive:
            return [self.w_t, self.w_g, self.b_g] + shared
        return [self.w_c, self.b_c] + shared


def _masked_mean_rows(X: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    """Mean of the real rows of ``B x n x d``: ``B x d``."""
    B, n, d = X.shape
    counts = np.maximum(mask.sum(axis=1), 1)
    weights = (mask / counts[:, None]).reshape(B, 1, n)
    return nx.reshape(nx.constant(weights) @ X, (B, d))


def _attend(query: nx.Tensor, keys: nx.Tensor, key_mask: np.ndarray) -> nx.Tensor:
    d = query.shape[-1]
    logits = nx.scale(query @ nx.transpose(keys), 1.0 / math.sqrt(d))
    pad = np.repeat(~key_mask[:, None, :], query.shape[1], axis=1)
    return nx.softmax(nx.masked_fill(logits, pad, -np.inf), axis=-1) @ keys


def _batched(x: nx.Tensor, mask):
    if x.ndim == 2:
        m = np.ones((1, x.shape[0]), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)[None, :]
        return nx.reshape(x, (1,) + x.shape), m, True
    return x, (np.ones(x.shape[:2], dtype=bool) if mask is None else mask), False


def view1_align(Q_new: nx.Tensor, H_nodes: nx.Tensor, q_mask=None, node_mask=None):
    """Question-to-graph and graph-to-question alignment, each averaged to one vector."""
    Q, qm, single = _batched(Q_new, q_mask)
    H, hm, _ = _batched(H_nodes, node_mask)
    if Q.shape[1] == 0 or H.shape[1] == 0:
        raise DimensionError("view1_align needs at least one token and one node")
    q2g = _masked_mean_rows(_attend(Q, H, hm), qm)
    g2q = _masked_mean_rows(_attend(H, Q, qm), hm)
    if single:
        d = Q.shape[-1]
        return nx.reshape(q2g, (d,)), nx.reshape(g2q, (d,))
    return q2g, g2q


def view2_temporal(head: FusionHead, q2g: nx.Tensor, g2q: nx.Tensor, T: nx.Tensor) -> nx.Tensor:
    """``relu(W_t [q2g ; g2q ; T])``."""
    if not q2g.shape == g2q.shape == T.shape:
        raise DimensionError(f"view2: shapes {q2g.shape}, {g2q.shape}, {T.shape}")
    return nx.relu(linear(nx.concat([q2g, g2q, T], axis=-1), head.w_t))


def view3_gate(head: FusionHead, q2g: nx.Tensor, g2q: nx.Tensor, h_temp: nx.Tensor, with_gate: bool = False):
    """``g * q2g + (1 - g) * g2q + h_temp`` with ``g = sigmoid(W_g [q2g ; g2q ; h_temp] + b_g)``."""
    if not q2g.shape == g2q.shape == h_temp.shape:
        raise DimensionError(f"view3: shapes {q2g.shape}, {g2q.shape}, {h_temp.shape}")
    g = nx.sigmoid(linear(nx.concat([q2g, g2q, h_temp], axis=-1), head.w_g, head.b_g))
    fused = g * q2g + (1.0 - g) * g2q + h_temp
    return (fused, g) if with_gate else fused


def concat_fusion(head: FusionHead, q_summary: nx.Tensor, s_graph: nx.Tensor, T: nx.Tensor) -> nx.Tensor:
    """Plain concatenation plus one linear layer (the non-adaptive variant)."""
    return linear(nx.concat([q_summary, s_graph, T], axis=-1), head.w_c, head.b_c)


def temporal_feature(h_time_edges: nx.Tensor, edge_batch: np.ndarray, batch: int) -> nx.Tensor:
    """Mean timestamp feature over each subgraph's edges; zero rows for edgeless subgraphs."""
    d = h_time_edges.shape[-1]
    if len(edge_batch) == 0:
        return nx.constant(np.zeros((batch, d)))
    counts = np.bincount(edge_batch, minlength=batch).astype(np.float64)
    avg = np.zeros((batch, len(edge_batch)))
    avg[edge_batch, np.arange(len(edge_batch))] = 1.0
    avg /= np.maximum(counts, 1.0)[:, None]
    return nx.constant(avg) @ h_time_edges


def answer_logits(head: FusionHead, fused: nx.Tensor, candidates: nx.Tensor | None = None) -> nx.Tensor:
    """``W_o h + b_o`` over the answer space (entities, then timestamps)."""
    single = fused.ndim == 1
    h = nx.reshape(fused, (1, -1)) if single else fused
    w = head.w_o
    if head.tie_output:
        if candidates is None:
            raise ContractError("tied output needs the candidate embeddings")
        w = w + candidates
    logits = nx.add_bias(h @ nx.transpose(w), head.b_o)
    return nx.reshape(logits, (head.n_answers,)) if single else logits


def predict(head: FusionHead, fused: nx.Tensor, candidates: nx.Tensor | None = None) -> nx.Tensor:
    """Probability distribution over entities followed by timestamps."""
    return nx.softmax(answer_logits(head, fused, candidates), axis=-1)


def qa_loss(log_probs: nx.Tensor, gold) -> nx.Tensor:
    """Cross-entropy against a uniform target over each question's gold answers.

    ``log_probs`` is ``N`` or ``B x N``; ``gold`` is a list of answer indices
    (or one list per batch row). The batch loss is the mean over questions.
    """
    single = log_probs.ndim == 1
    lp = nx.reshape(log_probs, (1, -1)) if single else log_probs
    golds = [gold] if single else list(gold)
    B, N = lp.shape
    if len(golds) != B:
        raise ContractError(f"{len(golds)} gold sets for {B} predictions")
    rows, cols, weights = [], [], []
    for b, g in enumerate(golds):
        g = sorted(set(int(x) for x in g))
        if not g:
            raise ContractError("gold answer set is empty")
        if g[0] < 0 or g[-1] >= N:
            raise ContractError(f"gold answer outside [0, {N})")
        rows += [b] * len(g)
        cols += g
        weights += [1.0 / (len(g) * B)] * len(g)
    picked = lp[np.array(rows), np.array(cols)]
    return -nx.sum(picked * nx.constant(weights))
