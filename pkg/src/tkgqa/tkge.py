"""Complex-valued temporal KG embeddings with a timestamp-ordering objective.

Rows of every table have width ``2D``: ``D`` real parts followed by ``D``
imaginary parts. Quadruples are scored by ``Re(<e_s, e_p * e_t, conj(e_o)>)``;
timestamp ranks additionally get fixed sinusoidal codes, which enter only the
ordering head and downstream consumers through :func:`timestamp_features`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError, NumericError, TrainingError, UnknownIdError
from .store import Quadruple, TkgStore

EPS = 1e-12


def positional_encoding(k: int, width: int) -> np.ndarray:
    """Sinusoidal code of rank ``k``: ``sin`` on even, ``cos`` on odd components."""
    if width % 2:
        raise ContractError(f"positional code width must be even, got {width}")
    if k < 0:
        raise ContractError(f"timestamp rank must be nonnegative, got {k}")
    c = np.arange(width)
    i = c // 2
    angle = k / np.power(10000.0, 2 * i / width)
    return np.where(c % 2 == 0, np.sin(angle), np.cos(angle))


def positional_table(n: int, width: int) -> np.ndarray:
    return np.stack([positional_encoding(k, width) for k in range(n)]) if n else np.zeros((0, width))


class ComplexEmbeddingTable:
    """Entity, relation and timestamp tables sharing one complex dimension ``D``."""

    def __init__(self, entities, relations, timestamps, time_offset=None):
        self.entities = entities if isinstance(entities, nx.Tensor) else nx.parameter(entities)
        self.relations = relations if isinstance(relations, nx.Tensor) else nx.parameter(relations)
        self.timestamps = timestamps if isinstance(timestamps, nx.Tensor) else nx.parameter(timestamps)
        widths = {self.entities.shape[1], self.relations.shape[1], self.timestamps.shape[1]}
        if len(widths) != 1:
            raise ContractError(f"tables disagree on width: {sorted(widths)}")
        width = widths.pop()
        if width % 2:
            raise ContractError(f"row width must be even (2D), got {width}")
        self.dim = width // 2
        # optional learnable additive offset on timestamp codes, off unless set
        self.time_offset = time_offset

    @classmethod
    def random(cls, n_entities, n_relations, n_timestamps, dim, rng, scale=0.1, learnable_offset=False):
        w = 2 * dim
        offset = nx.parameter(np.zeros((n_timestamps, w))) if learnable_offset else None
        return cls(rng.normal(scale=scale, size=(n_entities, w)),
                   rng.normal(scale=scale, size=(n_relations, w)),
                   rng.normal(scale=scale, size=(n_timestamps, w)), time_offset=offset)

    @property
    def width(self) -> int:
        return 2 * self.dim

    def parameters(self) -> list:
        out = [self.entities, self.relations, self.timestamps]
        if self.time_offset is not None:
            out.append(self.time_offset)
        return out

    def named_arrays(self) -> dict:
        out = {"entities": self.entities, "relations": self.relations, "timestamps": self.timestamps}
        if self.time_offset is not None:
            out["time_offset"] = self.time_offset
        return out

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def check_ids(self, entities=(), relations=(), timestamps=()):
        for ids, table, name in ((entities, self.entities, "entity"), (relations, self.relations, "relation"),
                                 (timestamps, self.timestamps, "timestamp")):
            ids = np.asarray(ids, dtype=np.int64).reshape(-1)
            if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
                raise UnknownIdError(f"{name} id out of range [0, {table.shape[0]})")


@dataclass
class OrderHead:
    w_ts: nx.Tensor
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError(f"ordering coefficient must be >= 0, got {self.lam}")
        if not isinstance(self.w_ts, nx.Tensor):
            self.w_ts = nx.parameter(self.w_ts)


def _halves(x: nx.Tensor, dim: int):
    return x[..., :dim], x[..., dim:]


def complex_product(a: nx.Tensor, b: nx.Tensor, dim: int) -> nx.Tensor:
    """Elementwise complex product of two ``[re | im]`` tensors."""
    ar, ai = _halves(a, dim)
    br, bi = _halves(b, dim)
    return nx.concat([ar * br - ai * bi, ar * bi + ai * br], axis=-1)


def conjugate(a: nx.Tensor, dim: int) -> nx.Tensor:
    ar, ai = _halves(a, dim)
    return nx.concat([ar, -ai], axis=-1)


def score_rows(e_s, e_p, e_o, e_t, dim: int) -> nx.Tensor:
    """Quadruple scores for matching rows (any leading shape)."""
    q = complex_product(complex_product(e_s, e_p, dim), e_t, dim)
    # Re(q * conj(o)) = q_re o_re + q_im o_im
    return nx.sum(q * e_o, axis=-1)


def score(tables: ComplexEmbeddingTable, s: int, p: int, o: int, t: int) -> nx.Tensor:
    """Real part of the trilinear complex product for one quadruple."""
    tables.check_ids(entities=[s, o], relations=[p], timestamps=[t])
    rows = (nx.take_rows(tables.entities, [s]), nx.take_rows(tables.relations, [p]),
            nx.take_rows(tables.entities, [o]), nx.take_rows(tables.timestamps, [t]))
    return nx.sum(score_rows(*rows, tables.dim))


def timestamp_features(tables: ComplexEmbeddingTable, codes: np.ndarray, ids=None) -> nx.Tensor:
    """Learned timestamp rows plus positional codes (and the optional offset).

    This is the one place where positional codes join timestamp embeddings.
    """
    base = tables.timestamps
    table = nx.add(base, nx.constant(codes))
    if tables.time_offset is not None:
        table = nx.add(table, tables.time_offset)
    return table if ids is None else nx.take_rows(table, ids)


def order_prob(tables: ComplexEmbeddingTable, codes: np.ndarray, head: OrderHead, m, n) -> nx.Tensor:
    """Probability that timestamp ``m`` precedes ``n``; vectorised over id arrays."""
    m_arr, n_arr = np.atleast_1d(np.asarray(m, dtype=np.int64)), np.atleast_1d(np.asarray(n, dtype=np.int64))
    tables.check_ids(timestamps=np.concatenate([m_arr, n_arr]))
    xm = timestamp_features(tables, codes, m_arr)
    xn = timestamp_features(tables, codes, n_arr)
    w = nx.reshape(head.w_ts, (tables.width, 1))
    rho = nx.sigmoid(nx.reshape((xm - xn) @ w, (len(m_arr),)))
    return rho if np.ndim(m) else nx.reshape(rho, ())


def order_labels(m, n) -> np.ndarray:
    return (np.asarray(m) < np.asarray(n)).astype(np.float64)


def order_loss(rho: nx.Tensor, m, n) -> nx.Tensor:
    """Binary cross-entropy against ``1[m < n]``, averaged over pairs."""
    alpha = nx.constant(order_labels(m, n).reshape(rho.shape))
    r = nx.clamp(rho, EPS, 1.0 - EPS)
    per_pair = -(alpha * nx.log(r) + (1.0 - alpha) * nx.log(1.0 - r))
    return nx.mean(per_pair)


def _fact_arrays(facts):
    arr = np.array([(f.subject, f.predicate, f.object, f.time_start) for f in facts], dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def candidate_scores(tables: ComplexEmbeddingTable, facts):
    """Scores of every entity as object and as subject for each fact: two ``B x |E|`` tensors."""
    s, p, o, t = _fact_arrays(facts)
    D = tables.dim
    es, ep = nx.take_rows(tables.entities, s), nx.take_rows(tables.relations, p)
    eo, et = nx.take_rows(tables.entities, o), nx.take_rows(tables.timestamps, t)
    E_T = nx.transpose(tables.entities)
    query_obj = complex_product(complex_product(es, ep, D), et, D)
    obj_scores = query_obj @ E_T
    # Re(s' u) with u = p * t * conj(o): s'_re u_re - s'_im u_im
    u = complex_product(complex_product(ep, et, D), conjugate(eo, D), D)
    subj_scores = conjugate(u, D) @ E_T
    return obj_scores, subj_scores


def reconstruction_loss(tables: ComplexEmbeddingTable, facts) -> nx.Tensor:
    """Mean over facts of the object- and subject-corruption cross-entropies."""
    facts = list(facts)
    if not facts:
        raise ContractError("reconstruction_loss needs a nonempty batch")
    s, _, o, _ = _fact_arrays(facts)
    obj_scores, subj_scores = candidate_scores(tables, facts)
    rows = np.arange(len(facts))
    ce_obj = -nx.mean(nx.log_softmax(obj_scores, axis=1)[rows, o])
    ce_subj = -nx.mean(nx.log_softmax(subj_scores, axis=1)[rows, s])
    return nx.scale(ce_obj + ce_subj, 0.5)


def sample_pairs(rng, n_timestamps: int, size: int):
    """Uniform ordered pairs ``(m, n)`` with ``m != n``."""
    m = rng.integers(0, n_timestamps, size=size)
    shift = rng.integers(1, n_timestamps, size=size)
    return m, (m + shift) % n_timestamps


def order_accuracy(tables, codes, head) -> float:
    """Fraction of ordered pairs ``m != n`` whose predicted order is right."""
    n = tables.timestamps.shape[0]
    m_ids, n_ids = np.nonzero(~np.eye(n, dtype=bool))
    with nx.no_grad():
        rho = order_prob(tables, codes, head, m_ids, n_ids).values
    return float(np.mean((rho > 0.5) == (m_ids < n_ids)))


def object_mrr(tables, facts) -> float:
    """Mean reciprocal rank of the true object, pessimistic on ties."""
    o = _fact_arrays(facts)[2]
    with nx.no_grad():
        scores = candidate_scores(tables, facts)[0].values
    true = scores[np.arange(len(o)), o][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    rank = 1 + (scores > true).sum(1) + ((scores == true) & (ids < o[:, None])).sum(1)
    return float(np.mean(1.0 / rank))


@dataclass
class PretrainConfig:
    dim: int = 16
    lam: float = 0.5
    lr: float = 0.5
    epochs: int = 100
    batch_size: int = 64
    pair_batch: int = 64
    init_scale: float = 0.3
    positional: bool = True
    learnable_offset: bool = False
    seed: int = 0


@dataclass
class PretrainResult:
    tables: ComplexEmbeddingTable
    head: OrderHead
    codes: np.ndarray
    trace: list = field(default_factory=list)


def make_codes(n_timestamps: int, dim: int, positional: bool = True) -> np.ndarray:
    return positional_table(n_timestamps, 2 * dim) if positional else np.zeros((n_timestamps, 2 * dim))


def fin_loss(tables, codes, head, facts, pairs):
    """``L_tc + lam * L_ts``; the ordering term is skipped entirely when ``lam == 0``."""
    l_tc = reconstruction_loss(tables, facts)
    if head.lam == 0:
        return l_tc, l_tc, None
    m, n = pairs
    l_ts = order_loss(order_prob(tables, codes, head, m, n), m, n)
    return l_tc + nx.scale(l_ts, head.lam), l_tc, l_ts


def sgd_step(params, lr: float):
    for p in params:
        if p.grad is not None:
            p.values -= lr * p.grad
            p.grad = None


def pretrain(store: TkgStore, config: PretrainConfig, facts=None) -> PretrainResult:
    """Plain SGD on the combined reconstruction and ordering objective.

    Returns the trained tables, the ordering head, the positional codes and a
    per-epoch trace of ``(fin, tc, ts)`` mean losses.
    """
    rng = np.random.default_rng(config.seed)
    facts = list(store.facts if facts is None else facts)
    tables = ComplexEmbeddingTable.random(store.num_entities, store.num_relations, store.num_timestamps,
                                          config.dim, rng, config.init_scale, config.learnable_offset)
    head = OrderHead(nx.parameter(rng.normal(scale=config.init_scale, size=2 * config.dim)), config.lam)
    codes = make_codes(store.num_timestamps, config.dim, config.positional)
    params = tables.parameters() + ([head.w_ts] if config.lam > 0 else [])
    result = PretrainResult(tables, head, codes)
    if not facts:
        return result
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(facts))
        sums = np.zeros(3)
        batches = 0
        for start in range(0, len(facts), config.batch_size):
            batch = [facts[k] for k in order[start:start + config.batch_size]]
            pairs = sample_pairs(rng, store.num_timestamps, config.pair_batch) if config.lam > 0 else None
            try:
                total, l_tc, l_ts = fin_loss(tables, codes, head, batch, pairs)
            except NumericError as exc:
                raise TrainingError(f"embedding loss diverged ({exc})", step=step) from None
            if not np.isfinite(total.item()):
                raise TrainingError("embedding loss is not finite", step=step)
            nx.backward(total)
            sgd_step(params, config.lr)
            sums += (total.item(), l_tc.item(), 0.0 if l_ts is None else l_ts.item())
            batches += 1
            step += 1
        result.trace.append(tuple(sums / batches))
    return result


def fit_order_head(n_timestamps: int = 64, dim: int = 16, steps: int = 200, lr: float = 1.0,
                   pair_batch: int = 64, seed: int = 0, eval_every: int = 20):
    """Train ``W_ts`` alone on zeroed embeddings plus fixed positional codes.

    Returns ``(accuracy, curve)`` where ``curve`` holds the mean ordering loss
    over all ordered pairs, measured before training and every
    ``eval_every`` steps.
    """
    rng = np.random.default_rng(seed)
    w = 2 * dim
    tables = ComplexEmbeddingTable(np.zeros((1, w)), np.zeros((1, w)), np.zeros((n_timestamps, w)))
    tables.set_trainable(False)
    codes = make_codes(n_timestamps, dim)
    head = OrderHead(nx.parameter(np.zeros(w)), 1.0)
    m_all, n_all = np.nonzero(~np.eye(n_timestamps, dtype=bool))

    def full_loss():
        with nx.no_grad():
            return order_loss(order_prob(tables, codes, head, m_all, n_all), m_all, n_all).item()

    curve = [full_loss()]
    for step in range(1, steps + 1):
        m, n = sample_pairs(rng, n_timestamps, pair_batch)
        nx.backward(order_loss(order_prob(tables, codes, head, m, n), m, n))
        sgd_step([head.w_ts], lr)
        if step % eval_every == 0:
            curve.append(full_loss())
    return order_accuracy(tables, codes, head), curve
