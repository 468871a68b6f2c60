"""Node-importance explainers: intrinsic mask, random, GNNExplainer-style
soft mask, integrated gradients, and a simplified perturbation explainer."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphcore import QAInstance, SceneGraph
from .imle import topk_map
from .model import ForwardTrace, VQAModel

METHODS = ("intrinsic", "random", "gnnexplainer", "intgrad", "perturb")


class ExplainerError(ValueError):
    pass


@dataclass
class Explanation:
    method: str
    question_id: str
    scores: np.ndarray
    selected: tuple[int, ...]
    k: int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.selected = tuple(int(i) for i in self.selected)
        if len(self.selected) != self.k:
            raise ExplainerError(f"|selected|={len(self.selected)} != k={self.k}")

    def to_json(self) -> dict:
        return {"question_id": self.question_id, "method": self.method,
                "k": self.k, "scores": [float(s) for s in self.scores],
                "selected": list(self.selected)}

    @classmethod
    def from_json(cls, rec: dict) -> "Explanation":
        return cls(method=rec["method"], question_id=rec["question_id"],
                   scores=np.array(rec["scores"]), selected=tuple(rec["selected"]),
                   k=rec["k"])


def _select(scores: np.ndarray, k: int) -> tuple[int, ...]:
    """Top-k under the shared lower-index tie rule."""
    return tuple(int(i) for i in np.flatnonzero(topk_map(scores, k)))


def save_explanations(explanations, path) -> None:
    with open(path, "w") as fh:
        for e in explanations:
            fh.write(json.dumps(e.to_json()) + "\n")


def load_explanations(path) -> list[Explanation]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Explanation.from_json(json.loads(line)))
    return out


# -- methods --------------------------------------------------------------

def explain_intrinsic(trace: ForwardTrace, question_id: str) -> Explanation:
    """The model's own mask; no extra model evaluations."""
    if trace.scores is None:
        raise ExplainerError("trace came from an unmasked schedule; no intrinsic mask")
    return Explanation(
        method="intrinsic", question_id=question_id,
        scores=trace.scores.data.astype(np.float64),
        selected=tuple(trace.selected), k=int(trace.gamma.sum()))


def explain_random(n: int, k: int, rng: np.random.Generator,
                   question_id: str = "") -> Explanation:
    if k > n:
        raise ExplainerError(f"k={k} > n={n}")
    # random scores induce a uniform k-subset through top-k selection
    scores = rng.random(n)
    return Explanation(method="random", question_id=question_id,
                       scores=scores, selected=_select(scores, k), k=k)


def explain_gnnexplainer(model: VQAModel, graph: SceneGraph, question: QAInstance,
                         k: int, steps: int = 200, lr: float = 0.05,
                         size_coeff: float = 0.005, entropy_coeff: float = 0.1,
                         rng: np.random.Generator | None = None) -> Explanation:
    """Learn a sigmoid soft node mask at the final layer input that preserves
    the model's original prediction, with size and entropy penalties."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = graph.num_nodes
    base = model.forward(graph, question.tokens, rng=rng)
    target = int(np.argmax(base.logits.data))
    base_mask = base.gamma  # keep the discrete mask fixed during optimization

    theta = np.zeros(n)  # sigmoid(0) = 0.5 initial mask
    moment = np.zeros(n)
    for _ in range(steps):
        theta_t = Tensor(theta, requires_grad=True)
        m = ad.sigmoid(theta_t)
        trace = model.forward(graph, question.tokens, rng=rng,
                              final_layer_node_scale=m,
                              mask_override=base_mask)
        ce = ad.cross_entropy(trace.logits, target)
        size = ad.tsum(m) * size_coeff
        ent = ad.tsum(-(m * ad.log(m + 1e-12) + (1.0 - m) * ad.log(1.0 - m + 1e-12)))
        loss = ce + size + ent * entropy_coeff
        loss.backward()
        moment = 0.9 * moment + theta_t.grad
        theta = theta - lr * moment

    scores = 1.0 / (1.0 + np.exp(-theta))
    return Explanation(method="gnnexplainer", question_id=question.question_id,
                       scores=scores, selected=_select(scores, k), k=k)


def explain_integrated_gradients(model: VQAModel, graph: SceneGraph,
                                 question: QAInstance, k: int,
                                 steps: int = 64,
                                 rng: np.random.Generator | None = None) -> Explanation:
    """Midpoint-rule path integral from the zero node-embedding baseline to the
    actual embeddings, attributing the predicted-class logit. Attribution runs
    on the unmasked model path."""
    if rng is None:
        rng = np.random.default_rng(0)
    all_ones = tuple(1.0 for _ in model.config.mask_schedule)
    with_mask_off = dict(mask_schedule=all_ones)

    enc, _, _ = model.encode_scene_graph(graph)
    x0 = enc.data.copy()
    base = model.forward(graph, question.tokens, rng=rng, **with_mask_off)
    target = int(np.argmax(base.logits.data))

    total = np.zeros_like(x0)
    for s in range(steps):
        alpha = (s + 0.5) / steps
        xt = Tensor(alpha * x0, requires_grad=True)
        trace = model.forward(graph, question.tokens, rng=rng,
                              node_embed_override=xt, **with_mask_off)
        trace.logits[target].backward()
        total += xt.grad
    attribution = (total / steps) * x0  # (x - baseline) with baseline 0

    signed = attribution.sum(axis=1)
    magnitude = np.abs(signed)
    return Explanation(method="intgrad", question_id=question.question_id,
                       scores=signed, selected=_select(magnitude, k), k=k)


def explain_perturbation(model: VQAModel, graph: SceneGraph, question: QAInstance,
                         k: int, samples: int = 200, p_perturb: float = 0.3,
                         rng: np.random.Generator | None = None) -> Explanation:
    """PGM-style flip statistic: score = P(prediction flips | node perturbed)
    - P(flips | node untouched), with random embedding replacement."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = graph.num_nodes
    enc, _, _ = model.encode_scene_graph(graph)
    x0 = enc.data.copy()
    base = model.forward(graph, question.tokens, rng=rng)
    target = int(np.argmax(base.logits.data))
    mu, sd = x0.mean(), x0.std() + 1e-8

    flips = np.zeros((n, 2))   # [perturbed, untouched] flip counts
    counts = np.zeros((n, 2))
    for _ in range(samples):
        chosen = rng.random(n) < p_perturb
        x = x0.copy()
        if chosen.any():
            x[chosen] = rng.normal(mu, sd, size=(int(chosen.sum()), x0.shape[1]))
        trace = model.forward(graph, question.tokens, rng=rng, node_embed_override=x)
        flipped = float(int(np.argmax(trace.logits.data)) != target)
        for i in range(n):
            col = 0 if chosen[i] else 1
            flips[i, col] += flipped
            counts[i, col] += 1
    rates = np.divide(flips, counts, out=np.zeros_like(flips), where=counts > 0)
    scores = rates[:, 0] - rates[:, 1]
    return Explanation(method="perturb", question_id=question.question_id,
                       scores=scores, selected=_select(scores, k), k=k)


def explain(method: str, model: VQAModel, graph: SceneGraph, question: QAInstance,
            k: int, rng: np.random.Generator, **kwargs) -> Explanation:
    """Dispatch on method name."""
    if method == "intrinsic":
        trace = model.forward(graph, question.tokens, rng=rng)
        return explain_intrinsic(trace, question.question_id)
    if method == "random":
        return explain_random(graph.num_nodes, k, rng, question_id=question.question_id)
    if method == "gnnexplainer":
        return explain_gnnexplainer(model, graph, question, k, rng=rng, **kwargs)
    if method == "intgrad":
        return explain_integrated_gradients(model, graph, question, k, rng=rng, **kwargs)
    if method == "perturb":
        return explain_perturbation(model, graph, question, k, rng=rng, **kwargs)
    raise ExplainerError(f"unknown method {method!r}")
