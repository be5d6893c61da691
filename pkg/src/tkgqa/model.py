"""End-to-end question answering model over padded question batches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoder import (
    ENT_TOKEN, TIME_TOKEN, GateFuser, KgProjection, TextEncoder, cross_attend, encode_fact_ids,
    encode_tokens, gate_fuse,
)
from .fusion import (
    FusionHead, answer_logits, concat_fusion, temporal_feature, view1_align, view2_temporal, view3_gate,
)
from .reasoner import EdgeIndex, GraphReasoner, pool, seed_mask
from .store import ENTITY, QuestionRecord, TkgStore, extract_subgraph, retrieve_spo
from .tkge import ComplexEmbeddingTable, OrderHead, make_codes


@dataclass
class ModelConfig:
    dim: int = 16
    d_model: int = 32
    layers: int = 2
    diffusion_hops: int = 2
    k_hops: int = 2
    max_nodes: int = 32
    max_facts: int = 16
    positional_tokens: bool = True
    tie_output: bool = True
    time_aware: bool = True
    adaptive_fusion: bool = True
    multi_hop: bool = True
    constraint_aware: bool = True
    answer_type_mask: bool = False
    lam: float = 0.5


@dataclass
class Prepared:
    """Parameter-independent inputs derived once per question."""

    record: QuestionRecord
    token_ids: np.ndarray
    fact_ids: np.ndarray
    subgraph: object
    gold: list
    facts: list = field(default_factory=list)


@dataclass
class Batch:
    items: list
    token_ids: np.ndarray
    token_mask: np.ndarray
    fact_ids: np.ndarray
    fact_mask: np.ndarray
    index: EdgeIndex
    node_ids: np.ndarray
    seeds: np.ndarray
    gold: list

    @property
    def size(self) -> int:
        return len(self.items)


def vocabulary(store: TkgStore, questions) -> list:
    words = {ENT_TOKEN, TIME_TOKEN}
    words.update(store.relations)
    for q in questions:
        words.update(q.tokens)
    return sorted(words)


class TkgqaModel:
    """All learnable parts plus the glue that runs them on a batch."""

    def __init__(self, store: TkgStore, words, config: ModelConfig, rng,
                 tables: ComplexEmbeddingTable | None = None, order_head: OrderHead | None = None):
        self.store = store
        self.config = config
        self.tables = tables or ComplexEmbeddingTable.random(
            store.num_entities, store.num_relations, store.num_timestamps, config.dim, rng, scale=0.3)
        if self.tables.dim != config.dim:
            raise ValueError(f"embedding dim {self.tables.dim} does not match config dim {config.dim}")
        lam = config.lam if config.time_aware else 0.0
        self.order_head = order_head or OrderHead(nx.parameter(rng.normal(scale=0.1, size=2 * config.dim)), lam)
        self.order_head.lam = lam
        self.codes = make_codes(store.num_timestamps, config.dim, positional=config.time_aware)
        width = 2 * config.dim
        self.projection = KgProjection(width, config.d_model, rng)
        self.encoder = TextEncoder(words, config.d_model, self.projection, rng, positional=config.positional_tokens)
        self.fuser = GateFuser(config.d_model, rng)
        hops = config.diffusion_hops if config.multi_hop else 0
        self.reasoner = GraphReasoner(config.d_model, config.layers, hops, rng)
        self.head = FusionHead(config.d_model, store.num_entities + store.num_timestamps, rng,
                               tie_output=config.tie_output)

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {f"kg.{k}": v for k, v in self.tables.named_arrays().items()}
        out["kg.w_ts"] = self.order_head.w_ts
        out["proj.entity"] = self.projection.entity
        out["proj.relation"] = self.projection.relation
        out["proj.time"] = self.projection.time
        enc = self.encoder
        out.update({"enc.word_emb": enc.word_emb, "enc.w_q": enc.w_q, "enc.w_k": enc.w_k,
                    "enc.w_v": enc.w_v, "enc.w_o": enc.w_o})
        out["gate.w_g"] = self.fuser.w_g
        out["gate.b_g"] = self.fuser.b_g
        for layer in self.reasoner.layers:
            out[f"graph.{layer.index}.w_ad"] = layer.w_ad
            out[f"graph.{layer.index}.beta"] = layer.beta
        out["graph.xi"] = self.reasoner.diffusion.xi
        h = self.head
        out.update({"fusion.w_t": h.w_t, "fusion.w_g": h.w_g, "fusion.b_g": h.b_g, "fusion.w_o": h.w_o,
                    "fusion.b_o": h.b_o, "fusion.w_c": h.w_c, "fusion.b_c": h.b_c})
        return out

    def kg_parameters(self) -> list:
        return self.tables.parameters() + ([self.order_head.w_ts] if self.order_head.lam > 0 else [])

    def qa_parameters(self) -> list:
        """Parameters the question-answering loss can reach under the active flags."""
        out = self.projection.parameters() + self.encoder.parameters()
        if self.config.constraint_aware:
            out += self.fuser.parameters()
        if self.reasoner.diffusion.hops > 0:
            out += self.reasoner.parameters()
        out += self.head.parameters(adaptive=self.config.adaptive_fusion)
        return out

    # -- inputs -------------------------------------------------------------
    def answer_index(self, kind: str, k: int) -> int:
        return k if kind == ENTITY else self.store.num_entities + k

    def prepare(self, record: QuestionRecord) -> Prepared:
        cfg = self.config
        facts = retrieve_spo(self.store, record, cfg.max_facts)
        fact_ids = (np.stack([self.encoder.fact_ids(f, self.store) for f in facts])
                    if facts else np.zeros((0, 4), dtype=np.int64))
        seeds = record.entity_ids()
        subgraph = extract_subgraph(self.store, seeds, cfg.k_hops, cfg.max_nodes) if seeds else None
        gold = sorted({self.answer_index(kind, k) for kind, k in record.answers})
        return Prepared(record, self.encoder.question_ids(record, self.store.num_entities), fact_ids,
                        subgraph, gold, facts)

    def collate(self, items) -> Batch:
        B = len(items)
        n = max(len(p.token_ids) for p in items)
        m = max(1, max(len(p.fact_ids) for p in items))
        token_ids = np.zeros((B, n), dtype=np.int64)
        token_mask = np.zeros((B, n), dtype=bool)
        fact_ids = np.zeros((B, m, 4), dtype=np.int64)
        fact_mask = np.zeros((B, m), dtype=bool)
        for b, p in enumerate(items):
            token_ids[b, :len(p.token_ids)] = p.token_ids
            token_mask[b, :len(p.token_ids)] = True
            if len(p.fact_ids):
                fact_ids[b, :len(p.fact_ids)] = p.fact_ids
                fact_mask[b, :len(p.fact_ids)] = True
        if any(p.subgraph is None for p in items):
            raise ValueError("every question needs at least one annotated entity")
        subgraphs = [p.subgraph for p in items]
        index = EdgeIndex.from_subgraphs(subgraphs)
        V = index.width
        node_ids = np.full((B, V), self.store.num_entities, dtype=np.int64)
        for b, g in enumerate(subgraphs):
            node_ids[b, :g.num_nodes] = g.nodes
        return Batch(items, token_ids, token_mask, fact_ids, fact_mask, index, node_ids,
                     seed_mask(subgraphs, V), [p.gold for p in items])

    # -- forward ------------------------------------------------------------
    def forward(self, batch: Batch, trace: dict | None = None) -> nx.Tensor:
        """Answer logits ``B x (|E| + |T|)``."""
        cfg = self.config
        kg = self.projection.project(self.tables, self.codes)
        table = self.encoder.token_table(kg)
        Q = encode_tokens(self.encoder, table, batch.token_ids, batch.token_mask)
        if cfg.constraint_aware:
            S, _ = encode_fact_ids(self.encoder, table, batch.fact_ids)
            q_bar, s_bar, _ = cross_attend(Q, S, batch.token_mask, batch.fact_mask)
            Q_new = gate_fuse(self.fuser, q_bar, s_bar)
        else:
            Q_new = Q

        B, V = batch.node_ids.shape
        d = cfg.d_model
        padded = nx.concat([kg.entities, nx.constant(np.zeros((1, d)))], axis=0)
        H0 = nx.take_rows(padded, batch.node_ids)
        idx = batch.index
        h_rel = nx.take_rows(kg.relations, idx.rel)
        h_time = nx.take_rows(kg.timestamps, idx.time)
        layers = [] if trace is not None else None
        HL = self.reasoner.run(H0, h_rel, h_time, idx, trace=layers)

        q_hat = _masked_mean(Q_new, batch.token_mask)
        s_graph, _ = pool(HL, batch.seeds, q_hat)
        T = temporal_feature(h_time, idx.edge_batch(), B)
        if cfg.adaptive_fusion:
            q2g, g2q = view1_align(Q_new, HL, batch.token_mask, idx.nodes)
            h_temp = view2_temporal(self.head, q2g, g2q, T)
            fused = view3_gate(self.head, q2g, g2q, h_temp)
        else:
            fused = concat_fusion(self.head, q_hat, s_graph, T)
        candidates = nx.concat([kg.entities, kg.timestamps], axis=0) if self.head.tie_output else None
        logits = answer_logits(self.head, fused, candidates)
        if cfg.answer_type_mask:
            logits = nx.masked_fill(logits, self._type_mask(batch), -1e30)
        if trace is not None:
            trace.update(Q=Q, Q_new=Q_new, H0=H0, HL=HL, layers=layers, s_graph=s_graph, T=T, fused=fused)
        return logits

    def _type_mask(self, batch: Batch) -> np.ndarray:
        n_e = self.store.num_entities
        mask = np.zeros((batch.size, self.head.n_answers), dtype=bool)
        for b, p in enumerate(batch.items):
            if p.record.atype == ENTITY:
                mask[b, n_e:] = True
            else:
                mask[b, :n_e] = True
        return mask


def _masked_mean(X: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
    B, n, d = X.shape
    counts = np.maximum(mask.sum(axis=1), 1)
    weights = (mask / counts[:, None]).reshape(B, 1, n)
    return nx.reshape(nx.constant(weights) @ X, (B, d))
