import random
from collections import deque

import networkx
import pytest

from tkgqa.errors import ParseError, UnknownIdError, ValidationError
from tkgqa.store import (
    ENTITY, QuestionRecord, TkgStore, extract_subgraph, load_questions, load_tsv, question_from_json,
    question_to_json, retrieve_spo, write_questions, write_tsv,
)
from tkgqa.synthetic import SyntheticConfig, generate_synthetic


def write_lines(tmp_path, lines, name="facts.tsv"):
    path = tmp_path / name
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def question(entities, tokens=None):
    tokens = tokens or ["<ent>"] * len(entities)
    return QuestionRecord(tokens, [(k, e) for k, e in enumerate(entities)], [], [(ENTITY, entities[0])],
                          "simple", "entity", "T1")


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SyntheticConfig(), 0)


class TestLoadTsv:
    def test_single_line(self, tmp_path):
        store = load_tsv(write_lines(tmp_path, ["A\tp\tB\t2010\t2014"]))
        assert (store.num_entities, store.num_relations, store.num_timestamps) == (2, 1, 2)
        assert len(store.facts) == 1

    def test_duplicates_collapse(self, tmp_path):
        store = load_tsv(write_lines(tmp_path, ["A\tp\tB\t2010\t2014"] * 2))
        assert len(store.facts) == 1

    def test_timestamps_sorted_chronologically(self, tmp_path):
        store = load_tsv(write_lines(tmp_path, ["A\tp\tB\t2014\t2014", "A\tp\tC\t2010\t2010"]))
        assert store.timestamp("2010") == 0
        assert store.timestamp("2014") == 1

    def test_first_seen_order_for_entities_and_relations(self, tmp_path):
        store = load_tsv(write_lines(tmp_path, ["Z\tq\tY\t1\t2", "X\tp\tZ\t1\t1"]))
        assert store.entities == ("Z", "Y", "X")
        assert store.relations == ("q", "p")

    def test_numeric_order_not_lexicographic(self, tmp_path):
        store = load_tsv(write_lines(tmp_path, ["A\tp\tB\t9\t10"]))
        assert store.timestamps == ("9", "10")

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        store = load_tsv(write_lines(tmp_path, ["# header", "", "A\tp\tB\t1\t2"]))
        assert len(store.facts) == 1

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = write_lines(tmp_path, ["A\tp\tB\t1\t2", "A\tp\tB\t1"])
        with pytest.raises(ParseError, match="line 2") as info:
            load_tsv(path)
        assert info.value.line == 2

    def test_start_after_end_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            load_tsv(write_lines(tmp_path, ["A\tp\tB\t2014\t2010"]))

    def test_round_trip(self, tmp_path, synthetic):
        store = synthetic[0]
        write_tsv(store, tmp_path / "out.tsv")
        again = load_tsv(tmp_path / "out.tsv")
        assert [store.labels(f) for f in store.facts] == [again.labels(f) for f in again.facts]

    def test_adjacency_covers_fact_list(self, synthetic):
        store = synthetic[0]
        for e in range(store.num_entities):
            for k in store.incident(e):
                f = store.facts[k]
                assert e in (f.subject, f.object)
        count = sum(len(store.incident(e)) for e in range(store.num_entities))
        self_loops = sum(f.subject == f.object for f in store.facts)
        assert count == 2 * len(store.facts) - self_loops

    def test_unknown_label_lookup(self, synthetic):
        with pytest.raises(UnknownIdError):
            synthetic[0].entity("nobody")


class TestQuestionsJson:
    def test_round_trip(self, tmp_path, synthetic):
        store, train = synthetic[0], synthetic[1]
        write_questions(train[:20], store, tmp_path / "q.jsonl")
        assert load_questions(tmp_path / "q.jsonl", store) == train[:20]

    def test_field_names(self, synthetic):
        obj = question_to_json(synthetic[1][0], synthetic[0])
        assert set(obj) == {"tokens", "entities", "times", "answers", "qtype", "atype", "template"}
        assert set(obj["answers"][0]) == {"kind", "id"}

    def test_missing_field(self, synthetic):
        obj = question_to_json(synthetic[1][0], synthetic[0])
        del obj["answers"]
        with pytest.raises(ParseError):
            question_from_json(obj, synthetic[0])

    def test_template_label_mismatch(self, synthetic):
        obj = question_to_json(synthetic[1][0], synthetic[0])
        obj["qtype"] = "complex" if obj["qtype"] == "simple" else "simple"
        with pytest.raises(ValidationError):
            question_from_json(obj, synthetic[0])

    def test_empty_answers(self, synthetic):
        obj = question_to_json(synthetic[1][0], synthetic[0])
        obj["answers"] = []
        with pytest.raises(ValidationError):
            question_from_json(obj, synthetic[0])


class TestRetrieveSpo:
    @pytest.fixture
    def store(self, tmp_path):
        return load_tsv(write_lines(tmp_path, [
            "A\tp\tB\t2012\t2013", "A\tp\tC\t2010\t2011", "D\tq\tA\t2011\t2011", "C\tq\tD\t2009\t2009",
        ]))

    def test_single_entity_time_ascending(self, store):
        facts = retrieve_spo(store, question([store.entity("A")]), 10)
        assert [store.timestamps[f.time_start] for f in facts] == ["2010", "2011", "2012"]

    def test_max_facts_one_is_earliest(self, store):
        (fact,) = retrieve_spo(store, question([store.entity("A")]), 1)
        assert store.labels(fact)[:3] == ("A", "p", "C")

    def test_annotation_order_first(self, store):
        facts = retrieve_spo(store, question([store.entity("D"), store.entity("A")]), 10)
        labels = [store.labels(f)[:3] for f in facts]
        assert labels == [("C", "q", "D"), ("D", "q", "A"), ("A", "p", "C"), ("A", "p", "B")]

    def test_no_entities_gives_empty(self, store):
        q = QuestionRecord(["when"], [], [], [(ENTITY, 0)], "simple", "entity", "T1")
        assert retrieve_spo(store, q, 5) == []

    def test_two_entity_union_matches_scan(self, synthetic):
        store = synthetic[0]
        rng = random.Random(3)
        for _ in range(20):
            a, b = rng.sample(range(store.num_entities), 2)
            got = retrieve_spo(store, question([a, b]), 10_000)
            expected = []
            for e in (a, b):
                hits = [(f.time_start, k) for k, f in enumerate(store.facts) if e in (f.subject, f.object)]
                for _, k in sorted(hits):
                    if store.facts[k] not in expected:
                        expected.append(store.facts[k])
            assert got == expected


def bfs_oracle(store, seeds, hops):
    adj = {e: set() for e in range(store.num_entities)}
    for f in store.facts:
        adj[f.subject].add(f.object)
        adj[f.object].add(f.subject)
    dist = {s: 0 for s in seeds}
    queue = deque(seeds)
    while queue:
        u = queue.popleft()
        if dist[u] == hops:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


class TestExtractSubgraph:
    @pytest.fixture
    def chain(self, tmp_path):
        return load_tsv(write_lines(tmp_path, ["A\tp\tB\t1\t1", "B\tp\tC\t2\t2"]))

    def test_zero_hops(self, chain):
        g = extract_subgraph(chain, [chain.entity("A")], 0, 10)
        assert g.nodes == (chain.entity("A"),)
        assert g.edges == ()

    def test_zero_hops_keeps_edges_among_seeds(self, chain):
        g = extract_subgraph(chain, [chain.entity("A"), chain.entity("B")], 0, 10)
        assert len(g.edges) == 1

    def test_chain_one_hop(self, chain):
        g = extract_subgraph(chain, [chain.entity("A")], 1, 10)
        assert {chain.entities[e] for e in g.nodes} == {"A", "B"}
        assert len(g.edges) == 1

    def test_edges_reference_members(self, synthetic):
        store = synthetic[0]
        g = extract_subgraph(store, [5, 17], 2, 32)
        for i, r, j, t in g.edges:
            assert 0 <= i < g.num_nodes and 0 <= j < g.num_nodes
        assert set(g.seed_nodes) <= set(range(g.num_nodes)) and g.seed_nodes

    def test_cap_prefers_closer_hops(self, synthetic):
        store = synthetic[0]
        seed = store.facts[0].object
        dist = bfs_oracle(store, [seed], 2)
        g = extract_subgraph(store, [seed], 2, 12)
        admitted = [dist[e] for e in g.nodes]
        excluded = [d for e, d in dist.items() if e not in g.nodes]
        assert not excluded or max(admitted) <= min(excluded)

    def test_matches_bfs_oracle(self, synthetic):
        store = synthetic[0]
        rng = random.Random(0)
        for _ in range(25):
            seeds = rng.sample(range(store.num_entities), rng.choice([1, 2]))
            g = extract_subgraph(store, seeds, 2, 10_000)
            assert set(g.nodes) == set(bfs_oracle(store, seeds, 2))
            members = set(g.nodes)
            assert len(g.edges) == sum(f.subject in members and f.object in members for f in store.facts)

    def test_unknown_seed(self, chain):
        with pytest.raises(UnknownIdError):
            extract_subgraph(chain, [99], 1, 10)

    def test_empty_seeds(self, chain):
        with pytest.raises(ValidationError):
            extract_subgraph(chain, [], 1, 10)

    def test_file_order_invariance(self, tmp_path, synthetic):
        store = synthetic[0]
        rows = ["\t".join(store.labels(f)) for f in store.facts]
        rng = random.Random(7)
        shuffled = rows[:]
        rng.shuffle(shuffled)
        other = load_tsv(write_lines(tmp_path, shuffled, "shuffled.tsv"))

        def canonical(s, g):
            labels = [s.entities[e] for e in g.nodes]
            edges = sorted((labels[i], s.relations[r], labels[j], s.timestamps[t]) for i, r, j, t in g.edges)
            return labels, edges, sorted(labels[k] for k in g.seed_nodes)

        for label in rng.sample(store.entities, 15):
            a = extract_subgraph(store, [store.entity(label)], 2, 20)
            b = extract_subgraph(other, [other.entity(label)], 2, 20)
            assert canonical(store, a) == canonical(other, b)

    def test_component_size_on_small_graphs(self):
        for seed in range(10):
            rng = random.Random(seed)
            n = rng.randint(5, 50)
            rows = []
            for _ in range(rng.randint(3, 60)):
                a, b = rng.randrange(n), rng.randrange(n)
                rows.append((f"e{a}", "r", f"e{b}", "1", "1"))
            store = TkgStore.from_labels(rows)
            graph = networkx.Graph()
            graph.add_nodes_from(range(store.num_entities))
            graph.add_edges_from((f.subject, f.object) for f in store.facts)
            start = rng.randrange(store.num_entities)
            g = extract_subgraph(store, [start], store.num_entities, 10_000)
            assert g.num_nodes == len(networkx.node_connected_component(graph, start))
