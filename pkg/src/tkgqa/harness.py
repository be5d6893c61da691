"""Training loop, Hits@k evaluation, reports and ablation runs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import load_embeddings, load_model, save_model
from .config import RunConfig
from .errors import ContractError, NumericError, TrainingError
from .fusion import qa_loss
from .model import TkgqaModel, vocabulary
from .store import TkgStore, load_questions, load_tsv
from .tkge import PretrainConfig, fin_loss, pretrain, sample_pairs

QTYPES = ("complex", "simple")
ATYPES = ("entity", "time")
TEMPLATES = ("T1", "T2", "T3", "T4", "T5")


# -- metric ---------------------------------------------------------------

def gold_ranks(scores, gold) -> np.ndarray:
    """Pessimistic rank of each gold id: ties with a smaller id count as ahead."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(scores.shape[0])
    out = []
    for g in gold:
        s = scores[g]
        out.append(1 + int(np.sum(scores > s)) + int(np.sum((scores == s) & (ids < g))))
    return np.array(out, dtype=np.int64)


def hits_at_k(scores, gold, k: int) -> int:
    """1 if any gold answer ranks within the top ``k`` under pessimistic ties, else 0."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    gold = list(gold)
    if not gold:
        raise ContractError("gold answer set is empty")
    return int(gold_ranks(scores, gold).min() <= k)


# -- reports --------------------------------------------------------------

def _cell(rows) -> dict:
    n = len(rows)
    if n == 0:
        return {"hits1": 0.0, "hits10": 0.0, "n": 0}
    return {"hits1": sum(r["hits1"] for r in rows) / n, "hits10": sum(r["hits10"] for r in rows) / n, "n": n}


@dataclass
class EvalReport:
    """Hits@1/Hits@10 overall and per question type, answer type and template."""

    overall: dict
    by_qtype: dict
    by_atype: dict
    by_template: dict
    meta: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows, meta=None) -> "EvalReport":
        return cls(
            overall=_cell(rows),
            by_qtype={q: _cell([r for r in rows if r["qtype"] == q]) for q in QTYPES},
            by_atype={a: _cell([r for r in rows if r["atype"] == a]) for a in ATYPES},
            by_template={t: _cell([r for r in rows if r["template"] == t]) for t in TEMPLATES},
            meta=dict(meta or {}), rows=list(rows),
        )

    def cells(self):
        yield "overall", self.overall
        for group, name in ((self.by_qtype, "qtype"), (self.by_atype, "atype"), (self.by_template, "template")):
            for key, cell in group.items():
                yield f"{name}.{key}", cell

    def to_json(self) -> dict:
        return {"overall": self.overall, "by_qtype": self.by_qtype, "by_atype": self.by_atype,
                "by_template": self.by_template, "meta": self.meta}

    def to_text(self) -> str:
        lines = [f"{'cell':<18}{'n':>6}{'Hits@1':>9}{'Hits@10':>9}"]
        for name, cell in self.cells():
            lines.append(f"{name:<18}{cell['n']:>6}{cell['hits1']:>9.3f}{cell['hits10']:>9.3f}")
        return "\n".join(lines)


def check_report(report: EvalReport, tol: float = 1e-12):
    """Raise ContractError unless Hits@1 <= Hits@10 everywhere and every grouping re-weights to overall."""
    for name, cell in report.cells():
        if cell["hits1"] > cell["hits10"] + tol:
            raise ContractError(f"{name}: Hits@1 {cell['hits1']} exceeds Hits@10 {cell['hits10']}")
    n = report.overall["n"]
    for group in (report.by_qtype, report.by_atype, report.by_template):
        if sum(c["n"] for c in group.values()) != n:
            raise ContractError("category counts do not add up to the overall count")
        for metric in ("hits1", "hits10"):
            if n and abs(sum(c[metric] * c["n"] for c in group.values()) / n - report.overall[metric]) > 1e-9:
                raise ContractError(f"{metric}: category cells do not re-weight to the overall value")


def write_report(report: EvalReport, out_dir, stem: str = "report"):
    """Write ``<stem>.txt``, ``<stem>.json`` and per-question ``<stem>.rows.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    (out / f"{stem}.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    with open(out / f"{stem}.rows.jsonl", "w", encoding="utf-8") as fh:
        for row in report.rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# -- data and model -------------------------------------------------------

@dataclass
class Data:
    store: TkgStore
    train: list
    dev: list
    test: list


def load_data(config: RunConfig) -> Data:
    store = load_tsv(config.facts)
    return Data(store, load_questions(config.train, store), load_questions(config.dev, store),
                load_questions(config.test, store))


def score_questions(model: TkgqaModel, prepared, batch_size: int = 64) -> np.ndarray:
    out = []
    with nx.no_grad():
        for start in range(0, len(prepared), batch_size):
            out.append(model.forward(model.collate(prepared[start:start + batch_size])).values)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.head.n_answers))


def evaluate_prepared(model: TkgqaModel, prepared, meta=None) -> EvalReport:
    scores = score_questions(model, prepared)
    rows = []
    for k, p in enumerate(prepared):
        r = p.record
        ranks = gold_ranks(scores[k], p.gold)
        rows.append({"index": k, "template": r.template, "qtype": r.qtype, "atype": r.atype,
                     "gold": list(p.gold), "best_rank": int(ranks.min()), "prediction": int(np.argmax(scores[k])),
                     "hits1": hits_at_k(scores[k], p.gold, 1), "hits10": hits_at_k(scores[k], p.gold, 10)})
    return EvalReport.from_rows(rows, meta)


# -- optimiser ------------------------------------------------------------

class Adam:
    """Adam with bias correction over a fixed parameter list."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- training -------------------------------------------------------------

@dataclass
class TrainResult:
    model: TkgqaModel
    trace: list
    reports: list
    best_epoch: int
    best_state: dict
    pretrain_trace: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    def restore_best(self):
        for name, tensor in self.model.named_parameters().items():
            tensor.values[...] = self.best_state[name]


def build_model(config: RunConfig, data: Data, rng, embeddings=None):
    """Model with pretrained tables (from ``embeddings`` dir, a fresh pretraining run, or random)."""
    mcfg = config.model_config()
    lam = config.lam if config.time_aware else 0.0
    pre_trace = []
    if embeddings is not None:
        tables, head, _ = load_embeddings(embeddings, data.store)
    elif config.pretrain_epochs > 0:
        pre = pretrain(data.store, PretrainConfig(dim=config.dim, lam=lam, lr=config.pretrain_lr,
                                                  epochs=config.pretrain_epochs, init_scale=config.pretrain_init,
                                                  positional=config.time_aware, seed=config.seed))
        tables, head, pre_trace = pre.tables, pre.head, pre.trace
    else:
        tables, head = None, None
    model = TkgqaModel(data.store, vocabulary(data.store, data.train), mcfg, rng, tables=tables, order_head=head)
    return model, pre_trace


def _snapshot(model) -> dict:
    return {k: v.values.copy() for k, v in model.named_parameters().items()}


def train(config: RunConfig, data: Data | None = None, embeddings=None, checkpoint_dir=None,
          log=None) -> TrainResult:
    """End-to-end training with per-epoch dev evaluation.

    Epoch 0 in the trace is the untrained model. The best dev Hits@1 (first
    occurrence wins) is kept in memory and, when ``checkpoint_dir`` is given,
    written there.
    """
    data = data or load_data(config)
    rng = np.random.default_rng(config.seed)
    model, pre_trace = build_model(config, data, rng, embeddings)
    if config.mu == 0:
        model.tables.set_trainable(False)
    params = model.qa_parameters() + (model.kg_parameters() if config.mu > 0 else [])
    opt = Adam(params, config.lr)
    train_items = [model.prepare(q) for q in data.train]
    dev_items = [model.prepare(q) for q in data.dev]

    def dev_report(epoch, loss):
        report = evaluate_prepared(model, dev_items, meta={"epoch": epoch, "split": "dev"})
        trace.append({"epoch": epoch, "loss": loss, "dev_hits1": report.overall["hits1"],
                      "dev_hits10": report.overall["hits10"]})
        reports.append(report)
        if log:
            shown = "-" if loss is None else f"{loss:.6f}"
            log(f"epoch {epoch:3d}  loss {shown:>9}  dev Hits@1 {report.overall['hits1']:.3f}")
        return report

    trace, reports = [], []
    best = dev_report(0, None)
    best_epoch, best_state = 0, _snapshot(model)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_items))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = model.collate([train_items[k] for k in order[start:start + config.batch_size]])
            try:
                loss = qa_loss(nx.log_softmax(model.forward(batch), axis=-1), batch.gold)
                if config.mu > 0:
                    facts = [data.store.facts[k] for k in rng.integers(0, len(data.store.facts), config.batch_size)]
                    pairs = (sample_pairs(rng, data.store.num_timestamps, config.batch_size)
                             if model.order_head.lam > 0 else None)
                    kg_loss, _, _ = fin_loss(model.tables, model.codes, model.order_head, facts, pairs)
                    loss = loss + nx.scale(kg_loss, config.mu)
            except NumericError as exc:
                raise TrainingError(f"loss is not finite ({exc})", step=step) from None
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError("loss is not finite", step=step)
            nx.backward(loss)
            opt.step()
            total += value
            batches += 1
            step += 1
        report = dev_report(epoch, total / max(batches, 1))
        if report.overall["hits1"] > best.overall["hits1"]:
            best, best_epoch, best_state = report, epoch, _snapshot(model)
    result = TrainResult(model, trace, reports, best_epoch, best_state, pre_trace)
    if checkpoint_dir is not None:
        current = _snapshot(model)
        result.restore_best()
        save_model(checkpoint_dir, model, config.seed, extra={"best_epoch": best_epoch})
        for name, tensor in model.named_parameters().items():
            tensor.values[...] = current[name]
    return result


def evaluate(config: RunConfig, checkpoint_dir, split: str = "test", data: Data | None = None) -> EvalReport:
    data = data or load_data(config)
    model, manifest = load_model(checkpoint_dir, data.store)
    questions = getattr(data, split)
    report = evaluate_prepared(model, [model.prepare(q) for q in questions],
                               meta={"split": split, "seed": int(manifest["seed"])})
    check_report(report)
    return report


# -- ablation -------------------------------------------------------------

ABLATIONS = (
    ("full", {}),
    ("w/o time-aware", {"time_aware": False}),
    ("w/o adaptive", {"adaptive_fusion": False}),
    ("w/o multi-hop", {"multi_hop": False}),
    ("w/o constraint-aware", {"constraint_aware": False}),
)


def multi_hop_identity(model: TkgqaModel, items) -> bool:
    """True when the reasoner leaves node states untouched on a batch (``H^L == H^0``)."""
    trace = {}
    with nx.no_grad():
        model.forward(model.collate(items), trace=trace)
    return bool(np.array_equal(trace["H0"].values, trace["HL"].values))


@dataclass
class AblationResult:
    names: list
    reports: dict
    results: dict

    def to_json(self) -> dict:
        return {name: self.reports[name].to_json() for name in self.names}

    def to_text(self) -> str:
        cols = [("Hits@1", lambda r: r.overall["hits1"]), ("Hits@10", lambda r: r.overall["hits10"]),
                ("complex", lambda r: r.by_qtype["complex"]["hits1"]),
                ("simple", lambda r: r.by_qtype["simple"]["hits1"]),
                ("entity", lambda r: r.by_atype["entity"]["hits1"]),
                ("time", lambda r: r.by_atype["time"]["hits1"])]
        cols += [(t, (lambda t: lambda r: r.by_template[t]["hits1"])(t)) for t in TEMPLATES]
        head = f"{'model':<22}" + "".join(f"{c:>9}" for c, _ in cols)
        lines = [head]
        for name in self.names:
            r = self.reports[name]
            lines.append(f"{name:<22}" + "".join(f"{fn(r):>9.3f}" for _, fn in cols))
        return "\n".join(lines)


def ablate(config: RunConfig, data: Data | None = None, variants=ABLATIONS, log=None) -> AblationResult:
    """Train and test the full model and each single-flag-off variant under one seed."""
    data = data or load_data(config)
    names, reports, results = [], {}, {}
    for name, flags in variants:
        cfg = config.replace(**flags)
        result = train(cfg, data)
        result.restore_best()
        if not cfg.multi_hop:
            probe = [result.model.prepare(q) for q in data.dev[:8]]
            result.checks["multi_hop_identity"] = multi_hop_identity(result.model, probe)
            if not result.checks["multi_hop_identity"]:
                raise TrainingError("multi-hop disabled but node states changed")
        test_items = [result.model.prepare(q) for q in data.test]
        report = evaluate_prepared(result.model, test_items, meta={"variant": name, "split": "test"})
        check_report(report)
        names.append(name)
        reports[name] = report
        results[name] = result
        if log:
            log(f"{name:<22} test Hits@1 {report.overall['hits1']:.3f}")
    return AblationResult(names, reports, results)
