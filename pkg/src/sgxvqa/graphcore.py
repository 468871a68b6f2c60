"""Scene-graph and QA data model, vocabularies, word vectors, dataset I/O."""
from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

STRUCTURAL_TYPES = ("verify", "query", "choose", "logical", "compare")
SEMANTIC_TYPES = ("object", "attribute", "category", "relation", "global")

MAX_ATTRIBUTES = 3
OOV_TOKEN = "<unk>"

_PUNCT_RE = re.compile("[" + re.escape(string.punctuation) + "]")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Node:
    name: str
    attributes: tuple[str, ...] = ()
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.attributes) > MAX_ATTRIBUTES:
            raise DataError(f"node {self.name!r}: more than {MAX_ATTRIBUTES} attributes")
        x, y, w, h = self.bbox
        if not all(np.isfinite(v) for v in self.bbox):
            raise DataError(f"node {self.name!r}: non-finite bbox {self.bbox}")
        if w < 0 or h < 0:
            raise DataError(f"node {self.name!r}: negative bbox extent {self.bbox}")


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: str

    def __post_init__(self):
        if self.src == self.dst:
            raise DataError(f"self-loop edge at node {self.src}")


@dataclass(frozen=True)
class SceneGraph:
    graph_id: str
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]

    def __post_init__(self):
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n):
                raise DataError(
                    f"graph {self.graph_id}: edge ({e.src},{e.dst}) references a missing node"
                )

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def node_names(self) -> list[str]:
        return [nd.name for nd in self.nodes]


@dataclass(frozen=True)
class QAInstance:
    question_id: str
    graph_id: str
    tokens: tuple[str, ...]
    answer: str
    structural_type: str
    semantic_type: str
    gold_relevant_nodes: frozenset[int] | None = None

    def __post_init__(self):
        if self.structural_type not in STRUCTURAL_TYPES:
            raise DataError(
                f"question {self.question_id}: unknown structural type {self.structural_type!r}"
            )
        if self.semantic_type not in SEMANTIC_TYPES:
            raise DataError(
                f"question {self.question_id}: unknown semantic type {self.semantic_type!r}"
            )
        if not self.tokens:
            raise DataError(f"question {self.question_id}: empty question")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase, strip punctuation, split on whitespace."""
    return tuple(_PUNCT_RE.sub(" ", text.lower()).split())


class Vocabulary:
    """Dense bidirectional token <-> id map with an OOV sentinel at id 0."""

    def __init__(self, tokens=(), oov: bool = True):
        self._tok2id: dict[str, int] = {}
        self._id2tok: list[str] = []
        if oov:
            self.add(OOV_TOKEN)
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self._tok2id:
            self._tok2id[token] = len(self._id2tok)
            self._id2tok.append(token)
        return self._tok2id[token]

    def id(self, token: str) -> int:
        if token in self._tok2id:
            return self._tok2id[token]
        if OOV_TOKEN in self._tok2id:
            return self._tok2id[OOV_TOKEN]
        raise KeyError(f"token {token!r} not in vocabulary (no OOV sentinel)")

    def token(self, idx: int) -> str:
        return self._id2tok[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._tok2id

    def __len__(self) -> int:
        return len(self._id2tok)

    def tokens(self) -> list[str]:
        return list(self._id2tok)

    def to_json(self) -> dict:
        return {"tokens": self._id2tok}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        v = cls(oov=False)
        for t in obj["tokens"]:
            v.add(t)
        return v


@dataclass
class EmbeddingTable:
    """id -> vector table; rows finite, one per vocabulary id."""

    dim: int
    vectors: np.ndarray  # (len(vocab), dim)
    coverage: float = 1.0  # fraction of vocab tokens found in the source file

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise DataError(f"embedding table shape {self.vectors.shape} != (*, {self.dim})")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding table contains non-finite rows")

    def row(self, idx: int) -> np.ndarray:
        return self.vectors[idx]


# ---------------------------------------------------------------------------
# loaders

def load_scene_graphs(path) -> list[SceneGraph]:
    """Load scene graphs from a GQA-shaped JSON file.

    File layout: {graph_id: {width, height, objects: {obj_id: {name,
    attributes, x, y, w, h, relations: [{name, object}]}}}}.  Pixel bboxes
    are normalized by image width/height.
    """
    with open(path) as fh:
        raw = json.load(fh)
    graphs = []
    for gid, rec in raw.items():
        graphs.append(_parse_graph(gid, rec))
    return graphs


def _parse_graph(gid: str, rec: dict) -> SceneGraph:
    try:
        width = float(rec["width"])
        height = float(rec["height"])
        objects = rec["objects"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"graph {gid}: missing field {exc}") from None
    if width <= 0 or height <= 0:
        raise DataError(f"graph {gid}: non-positive image size {width}x{height}")

    obj_ids = list(objects.keys())
    index = {oid: i for i, oid in enumerate(obj_ids)}
    nodes, edges = [], []
    for oid in obj_ids:
        obj = objects[oid]
        try:
            name = str(obj["name"]).lower()
            attrs = [str(a).lower() for a in obj.get("attributes", [])]
            x, y, w, h = (float(obj[k]) for k in ("x", "y", "w", "h"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"graph {gid}, object {oid}: bad field ({exc})") from None
        if len(attrs) > MAX_ATTRIBUTES:
            log.warning(
                "graph %s, object %s: %d attributes, keeping first %d",
                gid, oid, len(attrs), MAX_ATTRIBUTES,
            )
            attrs = attrs[:MAX_ATTRIBUTES]
        bbox = (x / width, y / height, w / width, h / height)
        nodes.append(Node(name=name, attributes=tuple(attrs), bbox=bbox))
        for rel in obj.get("relations", []):
            target = rel.get("object")
            if target not in index:
                raise DataError(
                    f"graph {gid}, object {oid}: relation targets missing object {target!r}"
                )
            edges.append(Edge(src=index[oid], dst=index[target],
                              relation=str(rel["name"]).lower()))
    return SceneGraph(graph_id=gid, nodes=tuple(nodes), edges=tuple(edges))


def save_scene_graphs(graphs, path, width: float = 1.0, height: float = 1.0) -> None:
    """Write graphs in the load_scene_graphs layout (bbox re-scaled by width/height)."""
    out = {}
    for g in graphs:
        objects = {}
        for i, nd in enumerate(g.nodes):
            x, y, w, h = nd.bbox
            objects[str(i)] = {
                "name": nd.name,
                "attributes": list(nd.attributes),
                "x": x * width, "y": y * height, "w": w * width, "h": h * height,
                "relations": [],
            }
        for e in g.edges:
            objects[str(e.src)]["relations"].append({"name": e.relation, "object": str(e.dst)})
        out[g.graph_id] = {"width": width, "height": height, "objects": objects}
    with open(path, "w") as fh:
        json.dump(out, fh)


def load_questions(path, answer_vocab: Vocabulary | None = None) -> list[QAInstance]:
    """Load line-delimited question records.

    When answer_vocab is given (training load), answers outside it are an error.
    """
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
            out.append(parse_question(rec, answer_vocab))
    return out


def parse_question(rec: dict, answer_vocab: Vocabulary | None = None) -> QAInstance:
    tokens = tokenize(rec["question"])
    answer = str(rec["answer"]).lower()
    if answer_vocab is not None and answer not in answer_vocab:
        raise DataError(
            f"question {rec.get('question_id')}: answer {answer!r} not in answer vocabulary"
        )
    gold = rec.get("gold_relevant_nodes")
    return QAInstance(
        question_id=str(rec["question_id"]),
        graph_id=str(rec["graph_id"]),
        tokens=tokens,
        answer=answer,
        structural_type=rec["structural_type"],
        semantic_type=rec["semantic_type"],
        gold_relevant_nodes=frozenset(int(i) for i in gold) if gold is not None else None,
    )


def save_questions(instances, path) -> None:
    with open(path, "w") as fh:
        for q in instances:
            rec = {
                "question_id": q.question_id,
                "graph_id": q.graph_id,
                "question": " ".join(q.tokens),
                "answer": q.answer,
                "structural_type": q.structural_type,
                "semantic_type": q.semantic_type,
            }
            if q.gold_relevant_nodes is not None:
                rec["gold_relevant_nodes"] = sorted(q.gold_relevant_nodes)
            fh.write(json.dumps(rec) + "\n")


def load_word_vectors(path, vocab: Vocabulary, dim: int,
                      rng: np.random.Generator) -> EmbeddingTable:
    """Read "token f1 ... fd" lines; vocab tokens absent from the file get
    seeded uniform [-0.05, 0.05] rows."""
    file_vecs: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split()
            if not parts:
                continue
            token, floats = parts[0], parts[1:]
            if len(floats) != dim:
                raise DataError(f"{path}:{lineno}: expected {dim} floats, got {len(floats)}")
            file_vecs[token] = np.array([float(f) for f in floats])
    vectors = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    hits = 0
    for idx, token in enumerate(vocab.tokens()):
        if token in file_vecs:
            vectors[idx] = file_vecs[token]
            hits += 1
    coverage = hits / max(1, len(vocab))
    log.info("word vectors: %d/%d vocab tokens covered (%.1f%%)",
             hits, len(vocab), 100 * coverage)
    return EmbeddingTable(dim=dim, vectors=vectors, coverage=coverage)


def random_word_vectors(vocab: Vocabulary, dim: int,
                        rng: np.random.Generator) -> EmbeddingTable:
    """Seeded uniform [-0.05, 0.05] table for runs without a vector file."""
    vectors = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    return EmbeddingTable(dim=dim, vectors=vectors, coverage=0.0)


def answer_groundable(graph: SceneGraph, answer: str) -> bool:
    """True iff the answer token equals some node name (names only, not attributes)."""
    return any(nd.name == answer for nd in graph.nodes)


@dataclass
class Dataset:
    """Immutable bundle of graphs and questions plus vocabularies."""

    graphs: dict[str, SceneGraph]
    train: list[QAInstance] = field(default_factory=list)
    val: list[QAInstance] = field(default_factory=list)
    vocab: Vocabulary = field(default_factory=Vocabulary)
    answer_vocab: Vocabulary = field(default_factory=lambda: Vocabulary(oov=False))

    def graph_for(self, q: QAInstance) -> SceneGraph:
        return self.graphs[q.graph_id]


def build_vocab(graphs, questions) -> Vocabulary:
    """Question/node vocabulary over the corpus: question tokens, node names,
    attributes, and relation words."""
    v = Vocabulary()
    for q in questions:
        for t in q.tokens:
            v.add(t)
    for g in graphs:
        for nd in g.nodes:
            for t in tokenize(nd.name):
                v.add(t)
            for a in nd.attributes:
                for t in tokenize(a):
                    v.add(t)
        for e in g.edges:
            for t in tokenize(e.relation):
                v.add(t)
    return v


def build_answer_vocab(questions) -> Vocabulary:
    v = Vocabulary(oov=False)
    for q in questions:
        v.add(q.answer)
    return v
