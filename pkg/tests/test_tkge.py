import math
from dataclasses import replace

import numpy as np
import pytest

from tkgqa import numerics as nx
from tkgqa.errors import ContractError, UnknownIdError
from tkgqa.store import TkgStore
from tkgqa.synthetic import SyntheticConfig, build_store
from tkgqa.tkge import (
    ComplexEmbeddingTable, OrderHead, PretrainConfig, candidate_scores, fit_order_head, make_codes, object_mrr,
    order_accuracy, order_labels, order_loss, order_prob, positional_encoding, pretrain, reconstruction_loss,
    score,
)


def tables_from(rng, n_e=3, n_r=2, n_t=4, dim=4, scale=1.0):
    return ComplexEmbeddingTable.random(n_e, n_r, n_t, dim, rng, scale=scale)


def as_complex(row):
    d = len(row) // 2
    return np.asarray(row[:d]) + 1j * np.asarray(row[d:])


def complex_oracle(tables, s, p, o, t):
    es = as_complex(tables.entities.values[s])
    ep = as_complex(tables.relations.values[p])
    eo = as_complex(tables.entities.values[o])
    et = as_complex(tables.timestamps.values[t])
    return sum((a * b * c * complex(d).conjugate()).real for a, b, c, d in zip(es, ep, et, eo))


class TestScore:
    def test_unit_relation_gives_squared_modulus(self):
        rng = np.random.default_rng(0)
        tables = tables_from(rng)
        tables.relations.values[0] = np.r_[np.ones(4), np.zeros(4)]
        tables.timestamps.values[0] = np.r_[np.ones(4), np.zeros(4)]
        expected = float(np.sum(tables.entities.values[1] ** 2))
        assert score(tables, 1, 0, 1, 0).item() == pytest.approx(expected, abs=1e-12)

    def test_zero_subject(self):
        tables = tables_from(np.random.default_rng(1))
        tables.entities.values[2] = 0.0
        assert score(tables, 2, 1, 0, 3).item() == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_python_complex(self, seed):
        rng = np.random.default_rng(seed)
        tables = tables_from(rng)
        s, o = rng.integers(0, 3, size=2)
        p, t = rng.integers(0, 2), rng.integers(0, 4)
        assert score(tables, s, p, o, t).item() == pytest.approx(complex_oracle(tables, s, p, o, t), abs=1e-12)

    def test_bad_id(self):
        with pytest.raises(UnknownIdError):
            score(tables_from(np.random.default_rng(0)), 0, 0, 7, 0)

    def test_gradient(self):
        tables = tables_from(np.random.default_rng(3))
        assert nx.grad_check(lambda: score(tables, 0, 1, 2, 3), tables.parameters()[:3]) < 1e-6

    def test_candidate_scores_agree_with_score(self):
        rng = np.random.default_rng(4)
        tables = tables_from(rng, n_e=5)
        store = TkgStore.from_labels([("a", "r", "b", "1", "2"), ("c", "q", "a", "2", "3")])
        facts = store.facts
        obj, subj = candidate_scores(tables, facts)
        for b, f in enumerate(facts):
            for e in range(5):
                assert obj.values[b, e] == pytest.approx(
                    complex_oracle(tables, f.subject, f.predicate, e, f.time_start), abs=1e-12)
                assert subj.values[b, e] == pytest.approx(
                    complex_oracle(tables, e, f.predicate, f.object, f.time_start), abs=1e-12)


class TestPositionalEncoding:
    def test_rank_zero(self):
        np.testing.assert_array_equal(positional_encoding(0, 6), [0, 1, 0, 1, 0, 1])

    def test_rank_one_width_four(self):
        expected = [math.sin(1), math.cos(1), math.sin(1 / 10000 ** 0.5), math.cos(1 / 10000 ** 0.5)]
        np.testing.assert_allclose(positional_encoding(1, 4), expected, atol=1e-15)

    @pytest.mark.parametrize("k", [0, 1, 7, 39, 1000])
    def test_pairs_on_unit_circle(self, k):
        code = positional_encoding(k, 32)
        np.testing.assert_allclose(code[0::2] ** 2 + code[1::2] ** 2, 1.0, atol=1e-12)

    def test_exact_recomputation(self):
        assert np.array_equal(positional_encoding(13, 32), positional_encoding(13, 32))

    def test_odd_width(self):
        with pytest.raises(ContractError):
            positional_encoding(1, 5)

    def test_negative_rank(self):
        with pytest.raises(ContractError):
            positional_encoding(-1, 4)


class TestOrdering:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(0)
        tables = tables_from(rng, n_t=6)
        codes = make_codes(6, 4)
        head = OrderHead(nx.parameter(rng.normal(size=8)), 1.0)
        return tables, codes, head

    def test_same_timestamp_is_half(self, setup):
        assert order_prob(*setup, 3, 3).item() == 0.5

    def test_zero_head_is_half(self, setup):
        tables, codes, head = setup
        head.w_ts.values[:] = 0
        np.testing.assert_array_equal(order_prob(tables, codes, head, [0, 1, 5], [4, 2, 0]).values, 0.5)

    def test_labels(self):
        assert order_labels(3, 5) == 1.0
        assert order_labels(5, 3) == 0.0

    def test_loss_at_half(self):
        assert order_loss(nx.Tensor([0.5]), [0], [1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_saturated_prob_is_clamped(self):
        assert math.isfinite(order_loss(nx.Tensor([0.0]), [0], [1]).item())
        assert math.isfinite(order_loss(nx.Tensor([1.0]), [1], [0]).item())

    @pytest.mark.parametrize("seed", range(5))
    def test_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        rho = rng.uniform(0.01, 0.99, size=10)
        m = rng.integers(0, 6, size=10)
        n = (m + rng.integers(1, 6, size=10)) % 6
        a = order_loss(nx.Tensor(rho), m, n).item()
        b = order_loss(nx.Tensor(1 - rho), n, m).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_prob_antisymmetric(self, setup):
        p = order_prob(*setup, 1, 4).item()
        q = order_prob(*setup, 4, 1).item()
        assert p + q == pytest.approx(1.0, abs=1e-12)

    def test_fit_on_fixed_codes(self):
        accuracy, curve = fit_order_head(64, 16, steps=200, seed=0)
        assert accuracy >= 0.95
        assert all(b < a for a, b in zip(curve, curve[1:]))


class TestReconstructionLoss:
    def test_single_entity(self):
        tables = tables_from(np.random.default_rng(0), n_e=1, n_r=1, n_t=1)
        store = TkgStore.from_labels([("a", "r", "a", "1", "1")])
        assert reconstruction_loss(tables, store.facts).item() == pytest.approx(0.0, abs=1e-15)

    def test_two_entities_zero_embeddings(self):
        tables = ComplexEmbeddingTable(np.zeros((2, 4)), np.zeros((1, 4)), np.zeros((1, 4)))
        store = TkgStore.from_labels([("a", "r", "b", "1", "1")])
        assert reconstruction_loss(tables, store.facts).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_dense_oracle(self):
        rng = np.random.default_rng(5)
        tables = tables_from(rng, n_e=4, n_r=2, n_t=3, dim=3)
        store = TkgStore.from_labels([("e0", "r0", "e1", "1", "2"), ("e2", "r1", "e3", "2", "3"),
                                      ("e3", "r0", "e0", "3", "3")])
        total = 0.0
        for f in store.facts:
            obj = np.array([complex_oracle(tables, f.subject, f.predicate, e, f.time_start) for e in range(4)])
            subj = np.array([complex_oracle(tables, e, f.predicate, f.object, f.time_start) for e in range(4)])
            ce_o = -(obj[f.object] - np.log(np.exp(obj).sum()))
            ce_s = -(subj[f.subject] - np.log(np.exp(subj).sum()))
            total += 0.5 * (ce_o + ce_s)
        loss = reconstruction_loss(tables, store.facts).item()
        assert loss == pytest.approx(total / 3, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            reconstruction_loss(tables_from(np.random.default_rng(0)), [])


SMALL = SyntheticConfig(entities=50, organizations=6, timestamps=20, facts_per_entity=2.5, roles_per_org=3)


class TestPretrain:
    def test_zero_lambda_leaves_w_ts_alone(self):
        store = build_store(SMALL, 0)
        result = pretrain(store, PretrainConfig(dim=4, lam=0.0, epochs=2))
        before = np.random.default_rng(0)
        # same construction order as pretrain: three tables, then the head
        ComplexEmbeddingTable.random(store.num_entities, store.num_relations, store.num_timestamps, 4,
                                     before, 0.3)
        expected = before.normal(scale=0.3, size=8)
        np.testing.assert_array_equal(result.head.w_ts.values, expected)
        assert result.head.w_ts.grad is None
        assert all(ts == 0.0 for _, _, ts in result.trace)

    def test_deterministic(self):
        store = build_store(SMALL, 0)
        cfg = PretrainConfig(dim=4, epochs=3)
        a, b = pretrain(store, cfg), pretrain(store, cfg)
        assert a.trace == b.trace
        assert np.array_equal(a.tables.entities.values, b.tables.entities.values)

    def test_held_out_mrr_beats_random(self):
        store = build_store(SMALL, 0)
        rng = np.random.default_rng(0)
        order = rng.permutation(len(store.facts))
        held = [store.facts[k] for k in order[:len(order) // 5]]
        kept = [store.facts[k] for k in order[len(order) // 5:]]
        result = pretrain(store, PretrainConfig(dim=16, lam=0.5, lr=0.5, epochs=100, batch_size=32), facts=kept)
        mrr = object_mrr(result.tables, held)
        assert mrr >= 5 * 2 / store.num_entities

    def test_lambda_raises_order_accuracy(self):
        store = build_store(SMALL, 0)
        base = PretrainConfig(dim=8, epochs=30, lam=0.0)
        off = pretrain(store, base)
        on = pretrain(store, replace(base, lam=1.0))
        assert order_accuracy(on.tables, on.codes, on.head) > order_accuracy(off.tables, off.codes, off.head)

    def test_divergence_reports_step(self):
        store = build_store(SMALL, 0)
        from tkgqa.errors import TrainingError
        with pytest.raises(TrainingError, match="step"):
            pretrain(store, PretrainConfig(dim=8, epochs=20, lr=1e6, init_scale=3.0))
