import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tkgqa import numerics as nx
from tkgqa.encoder import (
    ENT_TOKEN, TIME_TOKEN, GateFuser, KgProjection, TextEncoder, cross_attend, cross_attention_weights,
    encode_fact_ids, encode_question, encode_spo, gate_fuse, gate_values,
)
from tkgqa.errors import ContractError, VocabularyError
from tkgqa.store import ENTITY, QuestionRecord, TkgStore
from tkgqa.tkge import ComplexEmbeddingTable, make_codes

D_MODEL = 8
WORDS = [ENT_TOKEN, TIME_TOKEN, "who", "held", "at", "in", "worked"]


@pytest.fixture
def parts():
    rng = np.random.default_rng(0)
    store = TkgStore.from_labels([("a", "worked", "b", "1", "2"), ("c", "held", "b", "2", "3"),
                                  ("a", "held", "c", "3", "3")])
    tables = ComplexEmbeddingTable.random(store.num_entities, store.num_relations, store.num_timestamps, 3, rng)
    codes = make_codes(store.num_timestamps, 3)
    projection = KgProjection(6, D_MODEL, rng)
    encoder = TextEncoder(WORDS, D_MODEL, projection, rng)
    return store, tables, codes, encoder


def record(tokens, entities=(), times=()):
    return QuestionRecord(list(tokens), list(entities), list(times), [(ENTITY, 0)], "simple", "entity", "T1")


def kg_of(parts):
    store, tables, codes, encoder = parts
    return encoder.projection.project(tables, codes)


class TestEncodeQuestion:
    def test_single_token_attends_to_itself(self, parts):
        store, _, _, encoder = parts
        kg = kg_of(parts)
        Q = encode_question(encoder, kg, record(["who"]), store.num_entities)
        assert Q.shape == (1, D_MODEL)
        x = encoder.word_emb.values[encoder.word_id("who")] + np.tile([0.0, 1.0], D_MODEL // 2)
        expected = x + (x @ encoder.w_v.values) @ encoder.w_o.values
        np.testing.assert_allclose(Q.values[0], expected, atol=1e-12)

    def test_length_preserved(self, parts):
        store, *_, encoder = parts
        r = record(["who", "held", ENT_TOKEN, "in", TIME_TOKEN], [(2, 0)], [(4, 1)])
        assert encode_question(encoder, kg_of(parts), r, store.num_entities).shape == (5, D_MODEL)

    def test_placeholder_uses_projected_entity(self, parts):
        store, tables, _, encoder = parts
        kg = kg_of(parts)
        a = encode_question(encoder, kg, record([ENT_TOKEN], [(0, 0)]), store.num_entities).values
        tables.entities.values[0] += 1.0
        b = encode_question(encoder, kg_of(parts), record([ENT_TOKEN], [(0, 0)]), store.num_entities).values
        assert not np.allclose(a, b)

    def test_permutation_without_positions(self, parts):
        store, *_, encoder = parts
        encoder.positional = False
        kg = kg_of(parts)
        tokens = ["who", "held", ENT_TOKEN, "at"]
        a = encode_question(encoder, kg, record(tokens, [(2, 1)]), store.num_entities).values
        swapped = ["at", "held", ENT_TOKEN, "who"]
        b = encode_question(encoder, kg, record(swapped, [(2, 1)]), store.num_entities).values
        np.testing.assert_allclose(b, a[[3, 1, 2, 0]], atol=1e-12)

    def test_unknown_token(self, parts):
        store, *_, encoder = parts
        with pytest.raises(VocabularyError):
            encode_question(encoder, kg_of(parts), record(["whom"]), store.num_entities)

    def test_entity_projection_gradient(self, parts):
        store, tables, codes, encoder = parts
        r = record(["who", "held", ENT_TOKEN], [(2, 1)])

        def pooled():
            kg = encoder.projection.project(tables, codes)
            Q = encode_question(encoder, kg, r, store.num_entities)
            return nx.sum(Q * Q)

        assert nx.grad_check(pooled, [encoder.projection.entity]) < 1e-4


class TestEncodeSpo:
    def test_pooled_is_row_mean(self, parts):
        store, *_, encoder = parts
        table = encoder.token_table(kg_of(parts))
        ids = np.stack([encoder.fact_ids(f, store) for f in store.facts])[None]
        pooled, states = encode_fact_ids(encoder, table, ids)
        assert pooled.shape == (1, len(store.facts), D_MODEL)
        np.testing.assert_allclose(pooled.values[0], states.values.mean(axis=1), atol=1e-12)

    def test_single_fact_matches_batch(self, parts):
        store, *_, encoder = parts
        kg = kg_of(parts)
        table = encoder.token_table(kg)
        ids = np.stack([encoder.fact_ids(f, store) for f in store.facts])[None]
        pooled, _ = encode_fact_ids(encoder, table, ids)
        for k, f in enumerate(store.facts):
            np.testing.assert_allclose(encode_spo(encoder, kg, f, store).values, pooled.values[0, k], atol=1e-12)

    def test_object_pathway_only(self, parts):
        store, tables, _, encoder = parts
        f = store.facts[0]
        ids = encoder.fact_ids(f, store)
        assert ids[0] == encoder.entity_slot(f.subject) and ids[2] == encoder.entity_slot(f.object)
        before = encode_spo(encoder, kg_of(parts), f, store).values
        other = [e for e in range(store.num_entities) if e not in (f.subject, f.object)][0]
        tables.entities.values[other] += 5.0
        np.testing.assert_array_equal(encode_spo(encoder, kg_of(parts), f, store).values, before)


class TestCrossAttend:
    def test_one_fact_copies_it(self):
        rng = np.random.default_rng(1)
        Q, S = rng.normal(size=(4, 6)), rng.normal(size=(1, 6))
        q_bar, _, no_facts = cross_attend(nx.constant(Q), nx.constant(S))
        np.testing.assert_array_equal(q_bar.values, np.repeat(S, 4, axis=0))
        assert not no_facts

    def test_orthogonal_gives_mean(self):
        Q = np.zeros((2, 4))
        Q[:, :2] = [[1.0, 2.0], [-3.0, 0.5]]
        S = np.zeros((3, 4))
        S[:, 2:] = [[1.0, 0.0], [0.0, 2.0], [4.0, 1.0]]
        q_bar, _, _ = cross_attend(nx.constant(Q), nx.constant(S))
        np.testing.assert_allclose(q_bar.values, np.tile(S.mean(axis=0), (2, 1)), atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_hand_rolled(self, seed):
        rng = np.random.default_rng(seed)
        Q, S = rng.normal(size=(2, 5)), rng.normal(size=(3, 5))
        q_bar, s_bar, _ = cross_attend(nx.constant(Q), nx.constant(S))
        exp_q = np.zeros((2, 5))
        exp_s = np.zeros((2, 5))
        for i in range(2):
            a = [math.exp(Q[i] @ S[j] / math.sqrt(5)) for j in range(3)]
            b = [math.exp(Q[i] @ Q[j] / math.sqrt(5)) for j in range(2)]
            exp_q[i] = sum(w * S[j] for j, w in enumerate(a)) / sum(a)
            exp_s[i] = sum(w * Q[j] for j, w in enumerate(b)) / sum(b)
        np.testing.assert_allclose(q_bar.values, exp_q, atol=1e-10)
        np.testing.assert_allclose(s_bar.values, exp_s, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
    def test_weight_rows_sum_to_one(self, n, m, seed):
        rng = np.random.default_rng(seed)
        w = cross_attention_weights(rng.normal(size=(n, 4)) * 3, rng.normal(size=(m, 4)) * 3)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)

    def test_no_facts_fallback(self):
        Q = nx.constant(np.random.default_rng(2).normal(size=(3, 4)))
        q_bar, s_bar, no_facts = cross_attend(Q, nx.constant(np.zeros((0, 4))))
        assert no_facts
        np.testing.assert_array_equal(q_bar.values, 0.0)
        assert np.all(np.isfinite(s_bar.values))

    def test_masked_batch_row_is_zero(self):
        rng = np.random.default_rng(3)
        Q, S = nx.constant(rng.normal(size=(2, 3, 4))), nx.constant(rng.normal(size=(2, 2, 4)))
        q_bar, _, no_facts = cross_attend(Q, S, None, np.array([[True, True], [False, False]]))
        assert list(no_facts) == [False, True]
        np.testing.assert_array_equal(q_bar.values[1], 0.0)


class TestGateFuse:
    def test_zero_weights_average(self):
        rng = np.random.default_rng(0)
        fuser = GateFuser(4, rng)
        fuser.w_g.values[:] = 0
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        np.testing.assert_array_equal(gate_values(fuser, nx.constant(a), nx.constant(b)).values, 0.5)
        np.testing.assert_allclose(gate_fuse(fuser, nx.constant(a), nx.constant(b)).values, (a + b) / 2, atol=1e-15)

    def test_saturated_bias_picks_question_view(self):
        rng = np.random.default_rng(1)
        fuser = GateFuser(4, rng)
        fuser.w_g.values[:] = 0
        fuser.b_g.values[:] = 30.0
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert np.abs(gate_fuse(fuser, nx.constant(a), nx.constant(b)).values - a).max() < 1e-9

    def test_convex_bound(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            fuser = GateFuser(5, rng)
            fuser.b_g.values[:] = rng.normal(size=5)
            a, b = rng.normal(size=(4, 5)) * 3, rng.normal(size=(4, 5)) * 3
            v = gate_fuse(fuser, nx.constant(a), nx.constant(b)).values
            assert np.all(v >= np.minimum(a, b) - 1e-12) and np.all(v <= np.maximum(a, b) + 1e-12)
            g = gate_values(fuser, nx.constant(a), nx.constant(b)).values
            assert np.all((g > 0) & (g < 1))

    def test_shape_mismatch(self):
        fuser = GateFuser(4, np.random.default_rng(0))
        with pytest.raises(ContractError):
            gate_fuse(fuser, nx.constant(np.zeros((2, 4))), nx.constant(np.zeros((3, 4))))


def test_encode_attend_fuse_gradient(parts):
    store, tables, codes, encoder = parts
    fuser = GateFuser(D_MODEL, np.random.default_rng(9))
    r = record(["who", "held", ENT_TOKEN, "in", TIME_TOKEN], [(2, 1)], [(4, 0)])

    def objective():
        kg = encoder.projection.project(tables, codes)
        Q = encode_question(encoder, kg, r, store.num_entities)
        S = nx.stack([encode_spo(encoder, kg, f, store) for f in store.facts])
        q_bar, s_bar, _ = cross_attend(Q, S)
        v = gate_fuse(fuser, q_bar, s_bar)
        return nx.sum(v * v)

    params = [encoder.projection.entity, encoder.w_q, encoder.w_v, fuser.w_g, fuser.b_g]
    assert nx.grad_check(objective, params) < 1e-4


def test_no_facts_pipeline_is_finite(parts):
    store, tables, codes, encoder = parts
    fuser = GateFuser(D_MODEL, np.random.default_rng(4))
    kg = encoder.projection.project(tables, codes)
    Q = encode_question(encoder, kg, record(["who", "worked"]), store.num_entities)
    q_bar, s_bar, no_facts = cross_attend(Q, nx.constant(np.zeros((0, D_MODEL))))
    assert no_facts
    assert np.all(np.isfinite(gate_fuse(fuser, q_bar, s_bar).values))
