"""Synthetic temporal KG with role-holder chains and five question templates.

Organisations own a few roles (relations). Each (organisation, role) pair is
a chain of consecutive, strictly disjoint tenures held by distinct members
of that organisation. Every person belongs to exactly one organisation.
Questions are instantiated from the chains and their gold answers are
computed by exhaustive scans over the generated facts.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .store import (
    COMPLEX, ENTITY, SIMPLE, TIME, QuestionRecord, Quadruple, TkgStore,
    write_questions, write_tsv,
)

ROLE_NAMES = ("coach", "president", "captain", "director", "treasurer",
              "manager", "chair", "secretary", "advisor", "curator")
ENT, TOK_TIME = "<ent>", "<time>"
TEMPLATES = ("T1", "T2", "T3", "T4", "T5")


@dataclass(frozen=True)
class SyntheticConfig:
    entities: int = 200
    organizations: int = 25
    relations: int = 6
    roles_per_org: int = 2
    timestamps: int = 40
    facts_per_entity: float = 1.5
    min_tenure: int = 2
    max_tenure: int = 6
    questions_per_template: int = 200
    dev_fraction: float = 0.15
    test_fraction: float = 0.15
    start_year: int = 1980
    max_attempts: int = 50

    @property
    def persons(self) -> int:
        return self.entities - self.organizations


def _check(cfg: SyntheticConfig):
    if cfg.organizations < 1 or cfg.persons < 1:
        raise ConfigError("need at least one organisation and one person")
    if not 1 <= cfg.roles_per_org <= cfg.relations:
        raise ConfigError("roles_per_org must lie in [1, relations]")
    if cfg.relations > len(ROLE_NAMES) * 10:
        raise ConfigError("too many relations")
    if not 1 <= cfg.min_tenure <= cfg.max_tenure:
        raise ConfigError("need 1 <= min_tenure <= max_tenure")
    if cfg.timestamps < 2:
        raise ConfigError("need at least two timestamps")
    if cfg.dev_fraction < 0 or cfg.test_fraction < 0 or cfg.dev_fraction + cfg.test_fraction >= 1:
        raise ConfigError("split fractions must be nonnegative and leave room for training")
    chains = cfg.organizations * cfg.roles_per_org
    total = int(round(cfg.facts_per_entity * cfg.persons))
    per_chain = -(-total // chains)
    members = -(-cfg.persons // cfg.organizations)
    if total < chains:
        raise ConfigError(f"{total} facts cannot fill {chains} role chains")
    # each member holds a role at most once and tenures never overlap in a chain
    if per_chain > cfg.persons // cfg.organizations or per_chain * cfg.min_tenure > cfg.timestamps:
        raise ConfigError(
            f"unsatisfiable: {per_chain} tenures per chain exceed the slots "
            f"({members} members, {cfg.timestamps} timestamps, min tenure {cfg.min_tenure})")
    if cfg.persons // cfg.organizations < 1:
        raise ConfigError("fewer persons than organisations")


def _role_names(n: int) -> list:
    names = list(ROLE_NAMES[:n])
    k = 0
    while len(names) < n:
        names.append(f"{ROLE_NAMES[k % len(ROLE_NAMES)]}{k // len(ROLE_NAMES) + 2}")
        k += 1
    return names


def _durations(rng, count: int, cfg: SyntheticConfig) -> list:
    d = [int(x) for x in rng.integers(cfg.min_tenure, cfg.max_tenure + 1, size=count)]
    while sum(d) > cfg.timestamps:
        k = int(np.argmax(d))
        d[k] -= 1
    return d


def _generate_facts(rng, cfg: SyntheticConfig):
    orgs = [f"org_{k:02d}" for k in range(cfg.organizations)]
    persons = [f"person_{k:03d}" for k in range(cfg.persons)]
    roles = _role_names(cfg.relations)
    perm = rng.permutation(cfg.persons)
    members = {o: [] for o in range(cfg.organizations)}
    for rank, p in enumerate(perm):
        members[rank % cfg.organizations].append(int(p))

    chains = [(o, r) for o in range(cfg.organizations)
              for r in sorted(int(x) for x in rng.choice(cfg.relations, cfg.roles_per_org, replace=False))]
    total = int(round(cfg.facts_per_entity * cfg.persons))
    counts = [total // len(chains) + (1 if k < total % len(chains) else 0) for k in range(len(chains))]

    facts = []
    load = np.zeros(cfg.persons, dtype=int)
    for (o, r), n in zip(chains, counts):
        n = min(n, len(members[o]))
        dur = _durations(rng, n, cfg)
        span = sum(dur)
        t = int(rng.integers(0, cfg.timestamps - span + 1))
        used = set()
        for length in dur:
            pool = [p for p in members[o] if p not in used]
            least = min(load[p] for p in pool)
            candidates = [p for p in pool if load[p] == least]
            holder = candidates[int(rng.integers(len(candidates)))]
            used.add(holder)
            load[holder] += 1
            facts.append((holder, r, o, t, t + length - 1))
            t += length
    return orgs, persons, roles, facts


def _covers(facts, cfg) -> bool:
    years = set()
    for *_, s, e in facts:
        years.update((s, e))
    return len(years) == cfg.timestamps


def build_store(cfg: SyntheticConfig, seed: int) -> TkgStore:
    _check(cfg)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_attempts):
        orgs, persons, roles, facts = _generate_facts(rng, cfg)
        held = {f[0] for f in facts}
        if _covers(facts, cfg) and len(held) == cfg.persons:
            break
    else:
        raise ConfigError("could not cover every person and timestamp; loosen the config")
    years = [str(cfg.start_year + k) for k in range(cfg.timestamps)]
    rows = [(persons[p], roles[r], orgs[o], years[s], years[e]) for p, r, o, s, e in facts]
    return TkgStore.from_labels(rows)


# ---------------------------------------------------------------------------
# question templates

def _facts_by(store: TkgStore):
    chains = {}
    for f in store.facts:
        chains.setdefault((f.object, f.predicate), []).append(f)
    for v in chains.values():
        v.sort(key=lambda f: (f.time_start, f.subject))
    by_subject = {}
    for f in store.facts:
        by_subject.setdefault(f.subject, []).append(f)
    return chains, by_subject


def _question(template, tokens, entities, times, answers):
    qtype = SIMPLE if template in ("T1", "T2") else COMPLEX
    atype = TIME if template == "T2" else ENTITY
    return QuestionRecord(tokens=tokens, entities=entities, times=times, answers=sorted(set(answers)),
                          qtype=qtype, atype=atype, template=template)


def instantiate(store: TkgStore) -> dict:
    """Every instantiation of every template, keyed by template.

    Each entry is ``(key, QuestionRecord)``; the key identifies the
    instantiation so that splits never share one.
    """
    chains, by_subject = _facts_by(store)
    rel = store.relations
    out = {t: [] for t in TEMPLATES}

    for (org, r), tenure in sorted(chains.items()):
        for f in tenure:
            t = f.time_start
            answers = [(ENTITY, g.subject) for g in tenure if g.time_start <= t <= g.time_end]
            out["T1"].append((("T1", org, r, t), _question(
                "T1", ["who", "held", rel[r], "of", ENT, "at", TOK_TIME], [(4, org)], [(6, t)], answers)))
        for f in tenure:
            for word in ("before", "after"):
                if word == "before":
                    earlier = [g for g in tenure if g.time_end < f.time_start]
                    if not earlier:
                        continue
                    edge = max(g.time_end for g in earlier)
                    answers = [(ENTITY, g.subject) for g in earlier if g.time_end == edge]
                else:
                    later = [g for g in tenure if g.time_start > f.time_end]
                    if not later:
                        continue
                    edge = min(g.time_start for g in later)
                    answers = [(ENTITY, g.subject) for g in later if g.time_start == edge]
                out["T3"].append((("T3", org, r, f.subject, word), _question(
                    "T3", ["who", "held", rel[r], "of", ENT, word, ENT, "did"],
                    [(4, org), (6, f.subject)], [], answers)))
        for word in ("first", "last"):
            edge = (min if word == "first" else max)(g.time_start for g in tenure)
            answers = [(ENTITY, g.subject) for g in tenure if g.time_start == edge]
            out["T4"].append((("T4", org, r, word), _question(
                "T4", ["who", "was", "the", word, rel[r], "of", ENT], [(6, org)], [], answers)))

    pairs = sorted({(f.subject, f.predicate, f.object) for f in store.facts})
    for person, r, org in pairs:
        spans = [f for f in by_subject[person] if f.predicate == r and f.object == org]
        answers = [(TIME, f.time_start) for f in spans] + [(TIME, f.time_end) for f in spans]
        out["T2"].append((("T2", person, r, org), _question(
            "T2", ["when", "did", ENT, "hold", rel[r], "of", ENT], [(2, person), (6, org)], [], answers)))

    for person in sorted(by_subject):
        roles_held = sorted({f.predicate for f in by_subject[person]})
        for r1 in roles_held:
            own = [f for f in by_subject[person] if f.predicate == r1]
            for r2 in range(store.num_relations):
                if r2 == r1:
                    continue
                answers = set()
                for f in own:
                    for g in chains.get((f.object, r2), ()):
                        if g.time_start <= f.time_end and f.time_start <= g.time_end:
                            answers.add((ENTITY, g.subject))
                if not answers or (ENTITY, person) in answers:
                    continue
                out["T5"].append((("T5", person, r1, r2), _question(
                    "T5", ["who", "held", rel[r2], "during", "the", "time", ENT, "held", rel[r1]],
                    [(6, person)], [], sorted(answers))))
    return out


def split_questions(store: TkgStore, cfg: SyntheticConfig, seed: int):
    """Sample up to ``questions_per_template`` instantiations per template and split them."""
    rng = np.random.default_rng([seed, 1])
    splits = {"train": [], "dev": [], "test": []}
    for template, items in instantiate(store).items():
        if not items:
            raise ConfigError(f"template {template} has no instantiation in this KG")
        order = rng.permutation(len(items))[:cfg.questions_per_template]
        chosen = [items[k] for k in order]
        n = len(chosen)
        n_dev = int(round(cfg.dev_fraction * n))
        n_test = int(round(cfg.test_fraction * n))
        parts = {"dev": chosen[:n_dev], "test": chosen[n_dev:n_dev + n_test], "train": chosen[n_dev + n_test:]}
        for name, part in parts.items():
            for key, q in part:
                q.meta["key"] = key
                splits[name].append(q)
    return splits


def generate_synthetic(cfg: SyntheticConfig, seed: int):
    """Build the KG and its train/dev/test question sets, reproducibly from ``seed``."""
    store = build_store(cfg, seed)
    splits = split_questions(store, cfg, seed)
    return store, splits["train"], splits["dev"], splits["test"]


def write_dataset(out_dir, cfg: SyntheticConfig, seed: int) -> dict:
    """Generate and write ``facts.tsv`` plus ``{train,dev,test}.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store, train, dev, test = generate_synthetic(cfg, seed)
    write_tsv(store, out / "facts.tsv")
    paths = {"facts": out / "facts.tsv"}
    for name, qs in (("train", train), ("dev", dev), ("test", test)):
        write_questions(qs, store, out / f"{name}.jsonl")
        paths[name] = out / f"{name}.jsonl"
    with open(out / "generator.txt", "w", encoding="utf-8") as fh:
        fh.write(f"seed={seed}\n")
        for k, v in asdict(cfg).items():
            fh.write(f"{k}={v}\n")
    return paths
