"""Multi-hop temporal reasoning over question subgraphs.

Each layer scores every fact edge from the current node states and the
edge's relation and timestamp features, turns the scores into a
row-stochastic node-to-node matrix ``A``, mixes its powers into a diffusion
operator ``D = sum_tau xi_tau A^tau`` and propagates ``H <- D H``. Seed
nodes are finally pooled against the question summary.

A fact edge ``(i, r, j, t)`` is usable in both directions: row ``i`` may
attend to ``j`` (features ordered ``h_i, h_j``) and row ``j`` to ``i``
(ordered ``h_j, h_i``). Parallel edges between the same ordered pair are
merged by log-sum-exp, and every real node gets a self-loop with logit 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .store import TemporalSubgraph


class ReasonerLayer:
    """Edge scorer of one propagation layer: ``beta * relu(w . [h_i ; h_j ; h_r ; h_t])``."""

    def __init__(self, d_model: int, index: int, rng, beta: float = 1.0):
        self.index = index
        self.w_ad = nx.parameter(rng.normal(scale=1.0 / math.sqrt(4 * d_model), size=4 * d_model))
        self.beta = nx.parameter(beta)

    def parameters(self):
        return [self.w_ad, self.beta]


@dataclass
class DiffusionConfig:
    hops: int
    xi: nx.Tensor

    @classmethod
    def uniform(cls, hops: int) -> "DiffusionConfig":
        if hops < 0:
            raise ContractError("diffusion hops must be nonnegative")
        return cls(hops, nx.parameter(np.zeros(hops + 1)))

    def weights(self) -> nx.Tensor:
        """Normalised hop coefficients (softmax of the raw vector)."""
        return nx.softmax(self.xi, axis=-1)


@dataclass
class EdgeIndex:
    """Flat edge arrays for a padded batch of ``B`` subgraphs with ``V`` node slots.

    ``src``/``dst`` index rows of the ``(B*V) x d`` node matrix; ``rel`` and
    ``time`` index the relation and timestamp tables; ``nodes`` marks real
    node slots.
    """

    src: np.ndarray
    dst: np.ndarray
    rel: np.ndarray
    time: np.ndarray
    nodes: np.ndarray

    @property
    def batch(self) -> int:
        return self.nodes.shape[0]

    @property
    def width(self) -> int:
        return self.nodes.shape[1]

    @classmethod
    def from_subgraphs(cls, subgraphs, width=None) -> "EdgeIndex":
        width = width or max(g.num_nodes for g in subgraphs)
        src, dst, rel, time = [], [], [], []
        nodes = np.zeros((len(subgraphs), width), dtype=bool)
        for b, g in enumerate(subgraphs):
            nodes[b, :g.num_nodes] = True
            for i, r, j, t in g.edges:
                src.append(b * width + i)
                dst.append(b * width + j)
                rel.append(r)
                time.append(t)
        as_int = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
        return cls(as_int(src), as_int(dst), as_int(rel), as_int(time), nodes)

    def edge_batch(self) -> np.ndarray:
        return self.src // self.width


def edge_logits(layer: ReasonerLayer, H: nx.Tensor, h_rel: nx.Tensor, h_time: nx.Tensor, index: EdgeIndex) -> nx.Tensor:
    """Scores of every edge in both orientations: ``[forward (E), reverse (E)]``.

    ``H`` is ``B x V x d`` (or ``V x d``); ``h_rel``/``h_time`` are the
    per-edge relation and timestamp features (``E x d``).
    """
    d = H.shape[-1]
    flat = nx.reshape(H, (-1, d))
    h_i, h_j = nx.take_rows(flat, index.src), nx.take_rows(flat, index.dst)
    w = nx.reshape(layer.w_ad, (4 * d, 1))
    forward = nx.concat([h_i, h_j, h_rel, h_time], axis=1) @ w
    reverse = nx.concat([h_j, h_i, h_rel, h_time], axis=1) @ w
    both = nx.reshape(nx.concat([forward, reverse], axis=0), (-1,))
    return nx.mul(nx.relu(both), layer.beta)


def _segments(index: EdgeIndex):
    """Flat ``B*V*V`` cell of every forward edge, reverse edge and self-loop."""
    V = index.width
    b = index.edge_batch()
    i, j = index.src - b * V, index.dst - b * V
    fwd = b * V * V + i * V + j
    rev = b * V * V + j * V + i
    bb, ii = np.nonzero(index.nodes)
    loops = bb * V * V + ii * V + ii
    return np.concatenate([fwd, rev, loops]), len(loops)


def attention_matrix(logits: nx.Tensor, index: EdgeIndex) -> nx.Tensor:
    """Row-stochastic ``B x V x V`` attention; cells without an edge are masked."""
    segs, n_loops = _segments(index)
    B, V = index.batch, index.width
    all_logits = nx.concat([logits, nx.constant(np.zeros(n_loops))], axis=0)
    merged = nx.segment_logsumexp(all_logits, segs, B * V * V)
    return nx.softmax(nx.reshape(merged, (B, V, V)), axis=-1)


def diffusion(A: nx.Tensor, config: DiffusionConfig) -> nx.Tensor:
    """``D = sum_{tau=0..hops} xi_hat_tau A^tau`` with ``A^0 = I``."""
    xi = config.weights()
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape).copy()
    power = nx.constant(eye)
    D = nx.mul(power, xi[0])
    for tau in range(1, config.hops + 1):
        power = A if tau == 1 else power @ A
        D = D + nx.mul(power, xi[tau])
    return D


def propagate(H: nx.Tensor, D: nx.Tensor) -> nx.Tensor:
    """``H_next = D H``."""
    return D @ H


def pool(H: nx.Tensor, seed_mask: np.ndarray, q_hat: nx.Tensor) -> tuple:
    """Question-conditioned pooling of seed nodes.

    ``alpha = softmax over seeds of h_i . q_hat / sqrt(d)`` and the result is
    ``(1/|V_q|) sum_i alpha_i h_i``. Returns ``(S_graph, alpha)``; batched
    inputs are ``B x V x d``, ``B x V`` and ``B x d``.
    """
    single = H.ndim == 2
    if single:
        H = nx.reshape(H, (1,) + H.shape)
        q_hat = nx.reshape(q_hat, (1, -1))
        seed_mask = np.asarray(seed_mask, dtype=bool)[None, :]
    B, V, d = H.shape
    counts = seed_mask.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("pooling needs at least one seed node")
    scores = nx.scale(nx.reshape(H @ nx.reshape(q_hat, (B, d, 1)), (B, V)), 1.0 / math.sqrt(d))
    alpha = nx.softmax(nx.masked_fill(scores, ~seed_mask, -np.inf), axis=-1)
    pooled = nx.reshape(nx.reshape(alpha, (B, 1, V)) @ H, (B, d))
    out = nx.mul(pooled, nx.constant(np.repeat((1.0 / counts)[:, None], d, axis=1)))
    if single:
        return nx.reshape(out, (d,)), nx.reshape(alpha, (V,))
    return out, alpha


class GraphReasoner:
    """``L`` propagation layers sharing one diffusion coefficient vector."""

    def __init__(self, d_model: int, layers: int, hops: int, rng):
        self.layers = [ReasonerLayer(d_model, k, rng) for k in range(layers)]
        self.diffusion = DiffusionConfig.uniform(hops)

    def parameters(self):
        out = [p for layer in self.layers for p in layer.parameters()]
        return out + [self.diffusion.xi]

    def run(self, H0: nx.Tensor, h_rel: nx.Tensor, h_time: nx.Tensor, index: EdgeIndex, trace=None) -> nx.Tensor:
        """Propagate through every layer; attention is recomputed from each layer's states."""
        H = H0
        for layer in self.layers:
            if self.diffusion.hops == 0:
                # D = I exactly; skip the unused attention computation
                continue
            A = attention_matrix(edge_logits(layer, H, h_rel, h_time, index), index)
            D = diffusion(A, self.diffusion)
            if trace is not None:
                trace.append((A, D))
            H = propagate(H, D)
        return H


def subgraph_index(subgraph: TemporalSubgraph) -> EdgeIndex:
    return EdgeIndex.from_subgraphs([subgraph])


def seed_mask(subgraphs, width: int) -> np.ndarray:
    mask = np.zeros((len(subgraphs), width), dtype=bool)
    for b, g in enumerate(subgraphs):
        mask[b, list(g.seed_nodes)] = True
    return mask
