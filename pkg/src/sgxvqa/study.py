"""Pairwise-comparison study: session planning, durable choice log,
Bradley-Terry ranking with ties, and the HTTP service behind the web UI."""
from __future__ import annotations

import hashlib
import itertools
import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .graphcore import STRUCTURAL_TYPES, SEMANTIC_TYPES

STUDY_METHODS = ("intrinsic", "gnnexplainer", "intgrad", "random")
OUTCOMES = ("A", "B", "equally_good", "equally_bad")
ITEMS_PER_SESSION = 18
PAIR_REPEATS = 3


class StudyError(ValueError):
    pass


class DuplicateChoice(StudyError):
    pass


@dataclass(frozen=True)
class ComparisonItem:
    item_id: str
    graph_id: str
    question_id: str
    method_a: str          # shown on the left
    method_b: str          # shown on the right

    def to_json(self):
        return {"item_id": self.item_id, "graph_id": self.graph_id,
                "question_id": self.question_id, "method_a": self.method_a,
                "method_b": self.method_b}


@dataclass
class SessionPlan:
    participant_hash: str
    items: list[ComparisonItem]

    def to_json(self):
        return {"participant_hash": self.participant_hash,
                "items": [i.to_json() for i in self.items]}


@dataclass(frozen=True)
class ChoiceRecord:
    participant_hash: str
    item_id: str
    question_id: str
    method_a: str
    method_b: str
    outcome: str
    structural_type: str
    semantic_type: str
    timestamp: float = 0.0

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise StudyError(f"unknown outcome {self.outcome!r}")
        if self.structural_type not in STRUCTURAL_TYPES:
            raise StudyError(f"unknown structural type {self.structural_type!r}")
        if self.semantic_type not in SEMANTIC_TYPES:
            raise StudyError(f"unknown semantic type {self.semantic_type!r}")

    def to_json(self):
        return self.__dict__.copy()

    @classmethod
    def from_json(cls, rec):
        return cls(**{k: rec[k] for k in cls.__dataclass_fields__})


def participant_hash(username: str, salt: str) -> str:
    return hashlib.sha256((salt + ":" + username).encode()).hexdigest()[:16]


def plan_session(rng: np.random.Generator, instance_pool,
                 methods=STUDY_METHODS, participant: str = "") -> SessionPlan:
    """18 items covering each unordered method pair exactly three times, with
    randomized order, orientation, and instances sampled without replacement."""
    pairs = list(itertools.combinations(methods, 2))
    needed = len(pairs) * PAIR_REPEATS
    if needed != ITEMS_PER_SESSION:
        raise StudyError("method count incompatible with 18-item sessions")
    if len(instance_pool) < needed:
        raise StudyError(
            f"instance pool has {len(instance_pool)} items, need {needed}")
    chosen = [instance_pool[i] for i in
              rng.choice(len(instance_pool), size=needed, replace=False)]
    assignments = [p for p in pairs for _ in range(PAIR_REPEATS)]
    order = rng.permutation(needed)
    items = []
    for slot, idx in enumerate(order):
        a, b = assignments[idx]
        if rng.random() < 0.5:
            a, b = b, a
        q = chosen[slot]
        items.append(ComparisonItem(
            item_id=f"{participant}-{slot:02d}",
            graph_id=q.graph_id, question_id=q.question_id,
            method_a=a, method_b=b))
    return SessionPlan(participant_hash=participant, items=items)


class ChoiceStore:
    """Append-only line-delimited log, fsynced before acknowledging."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str]] = set()
        self._records: list[ChoiceRecord] = []
        if os.path.exists(path):
            with open(path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = ChoiceRecord.from_json(json.loads(line))
                        self._records.append(rec)
                        self._seen.add((rec.participant_hash, rec.item_id))

    def append(self, record: ChoiceRecord) -> None:
        key = (record.participant_hash, record.item_id)
        with self._lock:
            if key in self._seen:
                raise DuplicateChoice(f"choice already recorded for {key}")
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record.to_json()) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._seen.add(key)
            self._records.append(record)

    def records(self) -> list[ChoiceRecord]:
        with self._lock:
            return list(self._records)

    def records_for(self, participant: str) -> list[ChoiceRecord]:
        return [r for r in self.records() if r.participant_hash == participant]


# -- Bradley-Terry --------------------------------------------------------

@dataclass
class BTResult:
    overall: dict[str, float]
    by_group: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self):
        return {"overall": self.overall, "by_group": self.by_group}


def _bt_mm(wins: np.ndarray, games: np.ndarray, tol: float = 1e-10,
           max_iter: int = 10000) -> np.ndarray:
    """Minorization-maximization iteration for Bradley-Terry strengths.

    wins[i] = total (possibly fractional) wins of i; games[i, j] = number of
    comparisons between i and j."""
    n = len(wins)
    p = np.ones(n) / n
    for _ in range(max_iter):
        denom = np.zeros(n)
        for i in range(n):
            for j in range(n):
                if i != j and games[i, j] > 0:
                    denom[i] += games[i, j] / (p[i] + p[j])
        new = np.where(denom > 0, wins / np.maximum(denom, 1e-300), p)
        new = new / new.sum()
        if np.max(np.abs(new - p)) < tol:
            return new
        p = new
    return p


def _check_connected(methods, games: np.ndarray) -> None:
    n = len(methods)
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in range(n):
            if games[i, j] > 0 and j not in seen:
                seen.add(j)
                frontier.append(j)
    if len(seen) != n:
        inside = sorted(methods[i] for i in seen)
        outside = sorted(methods[i] for i in range(n) if i not in seen)
        raise StudyError(
            f"comparison graph disconnected: {inside} vs {outside}")


def bt_fit(records, grouping: str = "none") -> BTResult:
    """Maximum-likelihood preference strengths; ties count half a win each.

    grouping: none | structural | semantic."""
    if grouping not in ("none", "structural", "semantic"):
        raise StudyError(f"unknown grouping {grouping!r}")

    def fit_subset(recs) -> dict[str, float]:
        methods = sorted({r.method_a for r in recs} | {r.method_b for r in recs})
        idx = {m: i for i, m in enumerate(methods)}
        n = len(methods)
        wins = np.zeros(n)
        games = np.zeros((n, n))
        for r in recs:
            a, b = idx[r.method_a], idx[r.method_b]
            games[a, b] += 1
            games[b, a] += 1
            if r.outcome == "A":
                wins[a] += 1
            elif r.outcome == "B":
                wins[b] += 1
            else:
                wins[a] += 0.5
                wins[b] += 0.5
        _check_connected(methods, games)
        p = _bt_mm(wins, games)
        return {m: float(p[idx[m]]) for m in methods}

    if not records:
        raise StudyError("no records to fit")
    result = BTResult(overall=fit_subset(records))
    if grouping != "none":
        keyattr = "structural_type" if grouping == "structural" else "semantic_type"
        groups = sorted({getattr(r, keyattr) for r in records})
        for gkey in groups:
            subset = [r for r in records if getattr(r, keyattr) == gkey]
            result.by_group[gkey] = fit_subset(subset)
    return result


# -- HTTP service ---------------------------------------------------------

try:
    from pydantic import BaseModel as _BaseModel
except ImportError:         # service endpoints unavailable without fastapi stack
    _BaseModel = object


class ChoiceBody(_BaseModel):
    participant_hash: str
    item_id: str
    outcome: str


def build_app(store: ChoiceStore, dataset, explanations_by_method: dict,
              salt: str = "sgxvqa", predictions: dict | None = None,
              seed: int = 0, frontend_dir=None):
    """FastAPI app exposing the study endpoints."""
    from fastapi import FastAPI, HTTPException
    from fastapi.responses import FileResponse

    app = FastAPI(title="subgraph preference study")
    exp_index = {m: {e.question_id: e for e in exps}
                 for m, exps in explanations_by_method.items()}
    by_qid = {q.question_id: q for q in (dataset.train + dataset.val)}
    pool = [q for q in dataset.val
            if all(q.question_id in exp_index.get(m, {}) for m in STUDY_METHODS)]
    plans: dict[str, SessionPlan] = {}
    counter = itertools.count()

    def item_payload(item: ComparisonItem) -> dict:
        q = by_qid[item.question_id]
        g = dataset.graphs[item.graph_id]
        payload = item.to_json()
        payload.update({
            "question": " ".join(q.tokens),
            "answer": q.answer,
            "predicted": (predictions or {}).get(q.question_id, q.answer),
            "structural_type": q.structural_type,
            "semantic_type": q.semantic_type,
            "nodes": [{"name": nd.name, "bbox": list(nd.bbox)} for nd in g.nodes],
            "edges": [[e.src, e.dst] for e in g.edges],
            "selected_a": list(exp_index[item.method_a][q.question_id].selected),
            "selected_b": list(exp_index[item.method_b][q.question_id].selected),
        })
        # method identities stay server-side; the client must not see them
        payload.pop("method_a")
        payload.pop("method_b")
        return payload

    @app.get("/api/health")
    def health():
        return {"status": "ok"}

    @app.get("/api/session")
    def session(user: str):
        if not user:
            raise HTTPException(status_code=400, detail="missing user")
        phash = participant_hash(user, salt)
        if phash not in plans:
            rng = np.random.default_rng([seed, next(counter)])
            plans[phash] = plan_session(rng, pool, participant=phash)
        plan = plans[phash]
        answered = {r.item_id for r in store.records_for(phash)}
        return {
            "participant_hash": phash,
            "items": [item_payload(i) for i in plan.items],
            "answered": sorted(answered),
        }

    @app.post("/api/choice")
    def choice(body: ChoiceBody):
        plan = plans.get(body.participant_hash)
        if plan is None:
            raise HTTPException(status_code=404, detail="unknown participant")
        item = next((i for i in plan.items if i.item_id == body.item_id), None)
        if item is None:
            raise HTTPException(status_code=404, detail="unknown item")
        q = by_qid[item.question_id]
        try:
            store.append(ChoiceRecord(
                participant_hash=body.participant_hash,
                item_id=item.item_id,
                question_id=item.question_id,
                method_a=item.method_a,
                method_b=item.method_b,
                outcome=body.outcome,
                structural_type=q.structural_type,
                semantic_type=q.semantic_type,
                timestamp=time.time(),
            ))
        except DuplicateChoice:
            raise HTTPException(status_code=409, detail="already recorded")
        except StudyError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"status": "recorded"}

    @app.get("/api/results")
    def results(group_by: str = "none"):
        recs = store.records()
        if not recs:
            return {"overall": {}, "by_group": {}}
        try:
            return bt_fit(recs, grouping=group_by).to_json()
        except StudyError as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    if frontend_dir and os.path.isdir(frontend_dir):
        @app.get("/")
        def index():
            return FileResponse(os.path.join(frontend_dir, "index.html"))

        @app.get("/app.js")
        def bundle():
            return FileResponse(os.path.join(frontend_dir, "app.js"),
                                media_type="text/javascript")

    return app


def serve_study(store: ChoiceStore, dataset, explanations_by_method: dict,
                port: int = 8000, host: str = "127.0.0.1", salt: str = "sgxvqa",
                predictions=None, frontend_dir=None):
    import uvicorn
    app = build_app(store, dataset, explanations_by_method, salt=salt,
                    predictions=predictions, frontend_dir=frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
