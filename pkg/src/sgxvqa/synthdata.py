"""Deterministic desk-scale scene-graph and question generator.

Every question is produced by a template whose answer is computed from the
graph, and carries the set of nodes the template referenced as gold relevant
nodes for explainer evaluation.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .graphcore import (
    Dataset, Edge, Node, QAInstance, SceneGraph,
    build_answer_vocab, build_vocab, tokenize,
)

OBJECT_NAMES = (
    "cat", "dog", "bird", "horse", "cow",
    "table", "chair", "sofa", "lamp", "shelf",
    "car", "bus", "bike", "truck",
    "ball", "book", "cup", "plate", "hat", "phone",
)
CATEGORIES = {
    "animal": ("cat", "dog", "bird", "horse", "cow"),
    "furniture": ("table", "chair", "sofa", "lamp", "shelf"),
    "vehicle": ("car", "bus", "bike", "truck"),
}
COLORS = ("black", "white", "red", "blue", "green", "brown", "yellow", "gray")
SIZES = ("small", "large")
MATERIALS = ("wooden", "metal", "plastic")
LOCATIONS = ("indoors", "outdoors", "street", "field")
OTHER_RELATIONS = ("holding", "on", "near")

SCENE_NODE_NAME = "scene"


class GenerationError(ValueError):
    """Config cannot produce the requested dataset."""


@dataclass
class GenConfig:
    seed: int = 0
    num_graphs: int = 100
    nodes_min: int = 8
    nodes_max: int = 16
    questions_per_graph: int = 10
    object_names: tuple[str, ...] = OBJECT_NAMES
    colors: tuple[str, ...] = COLORS
    sizes: tuple[str, ...] = SIZES
    materials: tuple[str, ...] = MATERIALS
    locations: tuple[str, ...] = LOCATIONS
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.nodes_min < 2:
            raise GenerationError("nodes_min must be >= 2")
        for pool in (self.object_names, self.colors, self.sizes,
                     self.materials, self.locations):
            if not pool:
                raise GenerationError("empty ontology pool")


def generate_scene(rng: np.random.Generator, config: GenConfig,
                   graph_id: str) -> SceneGraph:
    """One scene: a scene node carrying the location tag plus object nodes on
    distinct grid cells; left-of/right-of edges follow bbox x-centers."""
    n_objects = int(rng.integers(config.nodes_min, config.nodes_max + 1)) - 1
    location = str(rng.choice(config.locations))
    nodes = [Node(name=SCENE_NODE_NAME, attributes=(location,),
                  bbox=(0.0, 0.0, 1.0, 1.0))]

    names = list(rng.choice(config.object_names, size=n_objects,
                            replace=n_objects > len(config.object_names)))
    # distinct grid cells keep bbox centers non-overlapping
    grid = 6
    cells = rng.choice(grid * grid, size=n_objects, replace=False)
    for name, cell in zip(names, cells):
        cx = (cell % grid + 0.5) / grid + float(rng.uniform(-0.05, 0.05))
        cy = (cell // grid + 0.5) / grid + float(rng.uniform(-0.05, 0.05))
        w = float(rng.uniform(0.05, 0.15))
        h = float(rng.uniform(0.05, 0.15))
        attrs = [str(rng.choice(config.colors))]
        if rng.random() < 0.6:
            attrs.append(str(rng.choice(config.sizes)))
        if rng.random() < 0.3:
            attrs.append(str(rng.choice(config.materials)))
        bbox = (min(max(cx - w / 2, 0.0), 1.0 - w), min(max(cy - h / 2, 0.0), 1.0 - h), w, h)
        nodes.append(Node(name=str(name), attributes=tuple(attrs), bbox=bbox))

    edges: list[Edge] = []
    obj_idx = list(range(1, len(nodes)))

    def center_x(i):
        return nodes[i].bbox[0] + nodes[i].bbox[2] / 2

    # spatial edges between a few pairs, direction fixed by geometry
    pairs = set()
    for _ in range(max(2, n_objects)):
        i, j = rng.choice(obj_idx, size=2, replace=False)
        i, j = int(i), int(j)
        if (i, j) in pairs or (j, i) in pairs or center_x(i) == center_x(j):
            continue
        pairs.add((i, j))
        if center_x(i) < center_x(j):
            edges.append(Edge(src=i, dst=j, relation="left of"))
        else:
            edges.append(Edge(src=i, dst=j, relation="right of"))
    # a few non-spatial edges
    for _ in range(max(1, n_objects // 3)):
        i, j = rng.choice(obj_idx, size=2, replace=False)
        i, j = int(i), int(j)
        if (i, j) in pairs:
            continue
        pairs.add((i, j))
        edges.append(Edge(src=i, dst=j, relation=str(rng.choice(OTHER_RELATIONS))))

    return SceneGraph(graph_id=graph_id, nodes=tuple(nodes), edges=tuple(edges))


class TemplateSkip(Exception):
    """Graph does not admit the requested template; caller resamples."""


def _unique_named(graph: SceneGraph, rng: np.random.Generator,
                  count: int = 1, exclude_scene: bool = True) -> list[int]:
    """Pick nodes whose names are unique in the graph (unambiguous reference)."""
    names = Counter(nd.name for nd in graph.nodes)
    candidates = [i for i, nd in enumerate(graph.nodes)
                  if names[nd.name] == 1 and (not exclude_scene or nd.name != SCENE_NODE_NAME)]
    if len(candidates) < count:
        raise TemplateSkip
    return [int(i) for i in rng.choice(candidates, size=count, replace=False)]


def _color_of(node: Node, config: GenConfig) -> str | None:
    for a in node.attributes:
        if a in config.colors:
            return a
    return None


def generate_question(rng: np.random.Generator, graph: SceneGraph,
                      structural_type: str, config: GenConfig,
                      question_id: str) -> QAInstance:
    """Instantiate a template of the given structural type on the graph.

    Raises TemplateSkip when the graph does not support the template.
    """
    maker = {
        "verify": _make_verify,
        "query": _make_query,
        "choose": _make_choose,
        "logical": _make_logical,
        "compare": _make_compare,
    }[structural_type]
    text, answer, semantic, gold = maker(rng, graph, config)
    return QAInstance(
        question_id=question_id,
        graph_id=graph.graph_id,
        tokens=tokenize(text),
        answer=answer,
        structural_type=structural_type,
        semantic_type=semantic,
        gold_relevant_nodes=frozenset(gold),
    )


def _make_verify(rng, graph, config):
    if rng.random() < 0.5:
        # attribute verification: "is the cat black"
        (i,) = _unique_named(graph, rng)
        node = graph.nodes[i]
        color = _color_of(node, config)
        if color is None:
            raise TemplateSkip
        if rng.random() < 0.5:
            return f"is the {node.name} {color}", "yes", "attribute", {i}
        wrong = str(rng.choice([c for c in config.colors if c != color]))
        return f"is the {node.name} {wrong}", "no", "attribute", {i}
    # object existence: "is there a cat in the scene"
    present = {nd.name for nd in graph.nodes}
    if rng.random() < 0.5:
        (i,) = _unique_named(graph, rng)
        return f"is there a {graph.nodes[i].name} in the scene", "yes", "object", {i}
    absent = [n for n in config.object_names if n not in present]
    if not absent:
        raise TemplateSkip
    # no single node evidences absence; the scene node stands in as gold
    return f"is there a {rng.choice(absent)} in the scene", "no", "object", {0}


def _make_query(rng, graph, config):
    r = rng.random()
    if r < 0.35:
        # "what color is the cat"
        (i,) = _unique_named(graph, rng)
        node = graph.nodes[i]
        color = _color_of(node, config)
        if color is None:
            raise TemplateSkip
        return f"what color is the {node.name}", color, "attribute", {i}
    if r < 0.55:
        # global location: "what location is the scene"
        scene = graph.nodes[0]
        return "what location is the scene", scene.attributes[0], "global", {0}
    if r < 0.8:
        # category: "what kind of animal is in the scene" (unique member)
        cat = str(rng.choice(list(CATEGORIES)))
        members = [i for i, nd in enumerate(graph.nodes) if nd.name in CATEGORIES[cat]]
        if len(members) != 1:
            raise TemplateSkip
        return f"what kind of {cat} is in the scene", graph.nodes[members[0]].name, "category", {members[0]}
    # relation target: "what is the cat holding"
    names = Counter(nd.name for nd in graph.nodes)
    pair_counts = Counter((e.src, e.relation) for e in graph.edges)
    candidates = [e for e in graph.edges
                  if e.relation in OTHER_RELATIONS
                  and names[graph.nodes[e.src].name] == 1
                  and pair_counts[(e.src, e.relation)] == 1]
    if not candidates:
        raise TemplateSkip
    e = candidates[int(rng.integers(len(candidates)))]
    return (f"what is the {graph.nodes[e.src].name} {e.relation}",
            graph.nodes[e.dst].name, "relation", {e.src, e.dst})


def _make_choose(rng, graph, config):
    # "is the cat to the left or to the right of the dog"
    names = Counter(nd.name for nd in graph.nodes)
    spatial = [e for e in graph.edges if e.relation in ("left of", "right of")
               and names[graph.nodes[e.src].name] == 1
               and names[graph.nodes[e.dst].name] == 1]
    if not spatial:
        raise TemplateSkip
    e = spatial[int(rng.integers(len(spatial)))]
    answer = "left" if e.relation == "left of" else "right"
    text = (f"is the {graph.nodes[e.src].name} to the left or to the right "
            f"of the {graph.nodes[e.dst].name}")
    return text, answer, "relation", {e.src, e.dst}


def _make_logical(rng, graph, config):
    # "are both the cat and the dog red"
    i, j = _unique_named(graph, rng, count=2)
    a, b = graph.nodes[i], graph.nodes[j]
    ca, cb = _color_of(a, config), _color_of(b, config)
    if ca is None or cb is None:
        raise TemplateSkip
    color = ca if rng.random() < 0.5 else str(rng.choice(config.colors))
    answer = "yes" if (ca == color and cb == color) else "no"
    return f"are both the {a.name} and the {b.name} {color}", answer, "attribute", {i, j}


def _make_compare(rng, graph, config):
    # "do the cat and the dog have the same color"
    i, j = _unique_named(graph, rng, count=2)
    a, b = graph.nodes[i], graph.nodes[j]
    ca, cb = _color_of(a, config), _color_of(b, config)
    if ca is None or cb is None:
        raise TemplateSkip
    answer = "yes" if ca == cb else "no"
    return f"do the {a.name} and the {b.name} have the same color", answer, "attribute", {i, j}


def reevaluate_answer(q: QAInstance, graph: SceneGraph, config: GenConfig) -> str:
    """Independent brute-force evaluation of a generated question's predicate."""
    t = list(q.tokens)
    by_name = {}
    for i, nd in enumerate(graph.nodes):
        by_name.setdefault(nd.name, []).append(i)

    def the_node(name):
        idxs = by_name.get(name, [])
        assert len(idxs) == 1, f"ambiguous reference {name!r}"
        return graph.nodes[idxs[0]]

    if q.structural_type == "verify":
        if t[:3] == ["is", "there", "a"]:
            return "yes" if t[3] in by_name else "no"
        name, attr = t[2], t[3]
        return "yes" if attr in the_node(name).attributes else "no"
    if q.structural_type == "query":
        if t[:2] == ["what", "color"]:
            return _color_of(the_node(t[4]), config)
        if t[:2] == ["what", "location"]:
            return graph.nodes[0].attributes[0]
        if t[:2] == ["what", "kind"]:
            cat = t[3]
            members = [nd.name for nd in graph.nodes if nd.name in CATEGORIES[cat]]
            assert len(members) == 1
            return members[0]
        # "what is the X <relation...>"
        name = t[3]
        rel = " ".join(t[4:])
        src = by_name[name][0]
        for e in graph.edges:
            if e.src == src and e.relation == rel:
                return graph.nodes[e.dst].name
        raise AssertionError("relation edge vanished")
    if q.structural_type == "choose":
        a, b = t[2], t[-1]
        na, nb = the_node(a), the_node(b)
        return "left" if na.bbox[0] + na.bbox[2] / 2 < nb.bbox[0] + nb.bbox[2] / 2 else "right"
    if q.structural_type == "logical":
        a, b, color = t[3], t[6], t[7]
        return ("yes" if color in the_node(a).attributes and color in the_node(b).attributes
                else "no")
    if q.structural_type == "compare":
        a, b = t[2], t[5]
        return "yes" if _color_of(the_node(a), config) == _color_of(the_node(b), config) else "no"
    raise AssertionError(q.structural_type)


@dataclass
class DatasetDigest:
    sha256: str
    num_graphs: int
    num_questions: int
    structural_counts: dict = field(default_factory=dict)
    semantic_counts: dict = field(default_factory=dict)
    answer_counts: dict = field(default_factory=dict)

    def to_json(self):
        return self.__dict__


def generate_dataset(config: GenConfig) -> tuple[Dataset, DatasetDigest]:
    """Full dataset: graph-disjoint 90/10 split, all five structural types
    present with frequency >= 10%."""
    rng = np.random.default_rng(config.seed)
    graphs = [generate_scene(rng, config, graph_id=f"g{gi:05d}")
              for gi in range(config.num_graphs)]

    types = ["verify", "query", "choose", "logical", "compare"]
    questions: list[QAInstance] = []
    qi = 0
    for g in graphs:
        for slot in range(config.questions_per_graph):
            stype = types[slot % len(types)]  # round-robin keeps each type at ~20%
            made = None
            for attempt in range(40):
                try:
                    made = generate_question(rng, g, stype, config, f"q{qi:06d}")
                    break
                except TemplateSkip:
                    continue
            if made is None:
                # fall back to any type this graph supports
                for alt in types:
                    try:
                        made = generate_question(rng, g, alt, config, f"q{qi:06d}")
                        break
                    except TemplateSkip:
                        continue
            if made is None:
                raise GenerationError(f"graph {g.graph_id} admits no template")
            questions.append(made)
            qi += 1

    counts = Counter(q.structural_type for q in questions)
    for stype in types:
        if counts[stype] < 0.10 * len(questions):
            raise GenerationError(
                f"structural type {stype!r} below 10% frequency ({counts[stype]}/{len(questions)})"
            )

    n_val = max(1, int(round(config.val_fraction * len(graphs))))
    val_ids = {g.graph_id for g in graphs[-n_val:]}
    train = [q for q in questions if q.graph_id not in val_ids]
    val = [q for q in questions if q.graph_id in val_ids]

    vocab = build_vocab(graphs, questions)
    answer_vocab = build_answer_vocab(questions)
    ds = Dataset(
        graphs={g.graph_id: g for g in graphs},
        train=train, val=val, vocab=vocab, answer_vocab=answer_vocab,
    )
    digest = DatasetDigest(
        sha256=dataset_hash(ds),
        num_graphs=len(graphs),
        num_questions=len(questions),
        structural_counts=dict(counts),
        semantic_counts=dict(Counter(q.semantic_type for q in questions)),
        answer_counts=dict(Counter(q.answer for q in questions)),
    )
    return ds, digest


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    for gid in sorted(ds.graphs):
        g = ds.graphs[gid]
        h.update(gid.encode())
        for nd in g.nodes:
            h.update(repr((nd.name, nd.attributes, tuple(round(v, 12) for v in nd.bbox))).encode())
        for e in g.edges:
            h.update(repr((e.src, e.dst, e.relation)).encode())
    for q in ds.train + ds.val:
        h.update(json.dumps([q.question_id, q.graph_id, list(q.tokens), q.answer,
                             q.structural_type, q.semantic_type,
                             sorted(q.gold_relevant_nodes or [])]).encode())
    return h.hexdigest()
