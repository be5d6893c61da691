"""Temporal KG data model: quadruples, vocabularies, retrieval and subgraphs."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, UnknownIdError, ValidationError

SIMPLE, COMPLEX = "simple", "complex"
ENTITY, TIME = "entity", "time"


@dataclass(frozen=True, order=True)
class Quadruple:
    subject: int
    predicate: int
    object: int
    time_start: int
    time_end: int


def edge_time(fact: Quadruple) -> int:
    """Timestamp attached to the edge a fact contributes to a subgraph.

    Interval facts are reduced to their start time; every edge-level
    consumer goes through this function.
    """
    return fact.time_start


def _time_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


class TkgStore:
    """Immutable temporal KG with entity, relation and ordered timestamp vocabularies."""

    def __init__(self, entities: Sequence[str], relations: Sequence[str], timestamps: Sequence[str],
                 facts: Iterable[Quadruple]):
        self.entities = tuple(entities)
        self.relations = tuple(relations)
        self.timestamps = tuple(timestamps)
        self.entity_ids = {e: k for k, e in enumerate(self.entities)}
        self.relation_ids = {r: k for k, r in enumerate(self.relations)}
        self.timestamp_ids = {t: k for k, t in enumerate(self.timestamps)}
        if len(self.entity_ids) != len(self.entities):
            raise ValidationError("duplicate entity labels")
        if len(self.relation_ids) != len(self.relations):
            raise ValidationError("duplicate relation labels")
        if len(self.timestamp_ids) != len(self.timestamps):
            raise ValidationError("duplicate timestamp labels")
        if list(self.timestamps) != sorted(self.timestamps, key=_time_key):
            raise ValidationError("timestamp vocabulary is not in chronological order")

        seen = set()
        ordered = []
        for f in facts:
            self._validate(f)
            if f not in seen:
                seen.add(f)
                ordered.append(f)
        self.facts = tuple(ordered)
        adjacency = defaultdict(list)
        for k, f in enumerate(self.facts):
            adjacency[f.subject].append(k)
            if f.object != f.subject:
                adjacency[f.object].append(k)
        self.adjacency = {e: tuple(ks) for e, ks in adjacency.items()}

    def _validate(self, f: Quadruple):
        if not 0 <= f.subject < len(self.entities) or not 0 <= f.object < len(self.entities):
            raise UnknownIdError(f"entity id out of range in {f}")
        if not 0 <= f.predicate < len(self.relations):
            raise UnknownIdError(f"relation id out of range in {f}")
        if not (0 <= f.time_start < len(self.timestamps) and 0 <= f.time_end < len(self.timestamps)):
            raise UnknownIdError(f"timestamp id out of range in {f}")
        if f.time_start > f.time_end:
            raise ValidationError(f"time_start after time_end in {f}")

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_timestamps(self) -> int:
        return len(self.timestamps)

    def entity(self, label: str) -> int:
        try:
            return self.entity_ids[label]
        except KeyError:
            raise UnknownIdError(f"unknown entity {label!r}") from None

    def relation(self, label: str) -> int:
        try:
            return self.relation_ids[label]
        except KeyError:
            raise UnknownIdError(f"unknown relation {label!r}") from None

    def timestamp(self, label: str) -> int:
        try:
            return self.timestamp_ids[label]
        except KeyError:
            raise UnknownIdError(f"unknown timestamp {label!r}") from None

    def incident(self, entity: int) -> tuple:
        """Fact indices touching ``entity`` as subject or object."""
        if not 0 <= entity < len(self.entities):
            raise UnknownIdError(f"entity id {entity} out of range")
        return self.adjacency.get(entity, ())

    def labels(self, fact: Quadruple) -> tuple:
        return (self.entities[fact.subject], self.relations[fact.predicate], self.entities[fact.object],
                self.timestamps[fact.time_start], self.timestamps[fact.time_end])

    @classmethod
    def from_labels(cls, rows: Iterable[Sequence[str]]) -> "TkgStore":
        """Build vocabularies from labelled 5-tuples.

        Entities and relations keep first-seen order; timestamps are sorted
        chronologically (numerically when every label parses as a number).
        """
        rows = [tuple(r) for r in rows]
        entities, relations, times = {}, {}, set()
        for s, p, o, ts, te in rows:
            entities.setdefault(s, len(entities))
            relations.setdefault(p, len(relations))
            entities.setdefault(o, len(entities))
            times.update((ts, te))
        timestamps = sorted(times, key=_time_key)
        tid = {t: k for k, t in enumerate(timestamps)}
        facts = [Quadruple(entities[s], relations[p], entities[o], tid[ts], tid[te]) for s, p, o, ts, te in rows]
        return cls(list(entities), list(relations), timestamps, facts)


def load_tsv(path) -> TkgStore:
    """Read ``subject<TAB>predicate<TAB>object<TAB>time_start<TAB>time_end`` lines."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5 or any(not p for p in parts):
                raise ParseError(f"expected 5 tab-separated fields, got {len(parts)}", line=lineno)
            s, p, o, ts, te = parts
            if _time_key(ts) > _time_key(te):
                raise ValidationError(f"line {lineno}: time_start {ts} after time_end {te}")
            rows.append((s, p, o, ts, te))
    return TkgStore.from_labels(rows)


def write_tsv(store: TkgStore, path):
    with open(path, "w", encoding="utf-8") as fh:
        for f in store.facts:
            fh.write("\t".join(store.labels(f)) + "\n")


@dataclass
class QuestionRecord:
    """One question: tokens with placeholder annotations, gold answers and labels.

    ``entities`` and ``times`` map token positions to ids; ``answers`` holds
    ``(kind, id)`` pairs with kind ``"entity"`` or ``"time"``.
    """

    tokens: list
    entities: list
    times: list
    answers: list
    qtype: str
    atype: str
    template: str
    meta: dict = field(default_factory=dict, compare=False)

    def entity_ids(self) -> list:
        """Annotated entities in annotation order, without repeats."""
        out = []
        for _, e in self.entities:
            if e not in out:
                out.append(e)
        return out


TEMPLATE_LABELS = {
    "T1": (SIMPLE, ENTITY),
    "T2": (SIMPLE, TIME),
    "T3": (COMPLEX, ENTITY),
    "T4": (COMPLEX, ENTITY),
    "T5": (COMPLEX, ENTITY),
}


def validate_question(q: QuestionRecord, store: TkgStore):
    if not q.answers:
        raise ValidationError("question has no answers")
    for kind, k in q.answers:
        limit = store.num_entities if kind == ENTITY else store.num_timestamps if kind == TIME else None
        if limit is None:
            raise ValidationError(f"unknown answer kind {kind!r}")
        if not 0 <= k < limit:
            raise UnknownIdError(f"answer {kind} id {k} out of range")
    expected = TEMPLATE_LABELS.get(q.template)
    if expected is not None and expected != (q.qtype, q.atype):
        raise ValidationError(f"template {q.template} must be {expected}, got {(q.qtype, q.atype)}")
    for pos, _ in list(q.entities) + list(q.times):
        if not 0 <= pos < len(q.tokens):
            raise ValidationError(f"annotation position {pos} outside the token sequence")


def question_to_json(q: QuestionRecord, store: TkgStore) -> dict:
    return {
        "tokens": list(q.tokens),
        "entities": [{"pos": p, "id": store.entities[e]} for p, e in q.entities],
        "times": [{"pos": p, "id": store.timestamps[t]} for p, t in q.times],
        "answers": [{"kind": kind, "id": store.entities[k] if kind == ENTITY else store.timestamps[k]}
                    for kind, k in q.answers],
        "qtype": q.qtype,
        "atype": q.atype,
        "template": q.template,
    }


def question_from_json(obj: dict, store: TkgStore) -> QuestionRecord:
    try:
        answers = []
        for a in obj["answers"]:
            if a["kind"] == ENTITY:
                answers.append((ENTITY, store.entity(a["id"])))
            elif a["kind"] == TIME:
                answers.append((TIME, store.timestamp(a["id"])))
            else:
                raise ValidationError(f"unknown answer kind {a['kind']!r}")
        q = QuestionRecord(
            tokens=list(obj["tokens"]),
            entities=[(int(a["pos"]), store.entity(a["id"])) for a in obj["entities"]],
            times=[(int(a["pos"]), store.timestamp(a["id"])) for a in obj["times"]],
            answers=answers,
            qtype=obj["qtype"],
            atype=obj["atype"],
            template=obj["template"],
        )
    except KeyError as exc:
        if isinstance(exc, UnknownIdError):
            raise
        raise ParseError(f"question object lacks field {exc}") from None
    validate_question(q, store)
    return q


def write_questions(questions: Sequence[QuestionRecord], store: TkgStore, path):
    with open(path, "w", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(question_to_json(q, store), sort_keys=False) + "\n")


def load_questions(path, store: TkgStore) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=lineno) from None
            out.append(question_from_json(obj, store))
    return out


# ---------------------------------------------------------------------------
# retrieval

def retrieve_spo(store: TkgStore, question: QuestionRecord, max_facts: int) -> list:
    """Facts incident to the question's annotated entities.

    Ordered by annotation order, then time_start, then fact index; a fact
    touching two annotated entities is listed once, under the first.
    """
    picked, seen = [], set()
    for e in question.entity_ids():
        for k in sorted(store.incident(e), key=lambda k: (store.facts[k].time_start, k)):
            if k not in seen:
                seen.add(k)
                picked.append(store.facts[k])
    return picked[:max_facts]


@dataclass(frozen=True)
class TemporalSubgraph:
    """Nodes (entity ids, local index = position), timestamped edges, seed nodes."""

    nodes: tuple
    edges: tuple
    seed_nodes: tuple

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


def extract_subgraph(store: TkgStore, seeds: Sequence[int], hops: int, max_nodes: int) -> TemporalSubgraph:
    """Breadth-first neighbourhood of ``seeds`` over facts in either direction.

    Nodes are admitted by (hop distance, entity label) until ``max_nodes``;
    every fact whose two endpoints were admitted becomes an edge
    ``(i, relation, j, edge_time)`` in local indices.
    """
    if not seeds:
        raise ValidationError("extract_subgraph needs at least one seed")
    for s in seeds:
        if not 0 <= s < store.num_entities:
            raise UnknownIdError(f"seed entity {s} not in vocabulary")
    dist = {s: 0 for s in seeds}
    frontier = list(dict.fromkeys(seeds))
    for hop in range(1, hops + 1):
        nxt = []
        for e in frontier:
            for k in store.incident(e):
                f = store.facts[k]
                for other in (f.subject, f.object):
                    if other not in dist:
                        dist[other] = hop
                        nxt.append(other)
        frontier = nxt
    ranked = sorted(dist, key=lambda e: (dist[e], store.entities[e]))
    nodes = tuple(ranked[:max(max_nodes, 0)])
    local = {e: k for k, e in enumerate(nodes)}
    edge_set = set()
    for e in nodes:
        for k in store.incident(e):
            f = store.facts[k]
            if f.subject in local and f.object in local:
                edge_set.add((local[f.subject], f.predicate, local[f.object], edge_time(f)))
    edges = tuple(sorted(edge_set, key=lambda x: (x[0], x[2], store.relations[x[1]], x[3])))
    seed_nodes = tuple(local[s] for s in dict.fromkeys(seeds) if s in local)
    if not seed_nodes:
        raise ValidationError("max_nodes excludes every seed")
    return TemporalSubgraph(nodes=nodes, edges=edges, seed_nodes=seed_nodes)
