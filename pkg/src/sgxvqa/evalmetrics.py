"""Explanation-quality metrics (answer/question token co-occurrence, subgraph
removal) and Pearson/Spearman correlation of metrics against preference scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphcore import QAInstance, SceneGraph, answer_groundable
from .model import VQAModel


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    """method -> metric percentages plus the denominators behind each rate."""
    per_method: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return {"per_method": self.per_method, "metadata": self.metadata}


def _index_explanations(explanations):
    return {e.question_id: e for e in explanations}


def at_coo(explanations, instances, graphs) -> tuple[float | None, int, int]:
    """Answer-token co-occurrence: of instances whose answer names a graph
    node, the share whose explanation contains such a node.

    Returns (percent or None, numerator, denominator)."""
    by_qid = _index_explanations(explanations)
    num = den = 0
    for q in instances:
        g = graphs[q.graph_id]
        if not answer_groundable(g, q.answer):
            continue
        den += 1
        exp = by_qid[q.question_id]
        if any(g.nodes[i].name == q.answer for i in exp.selected):
            num += 1
    if den == 0:
        return None, 0, 0
    return 100.0 * num / den, num, den


def qt_coo(explanations, instances, graphs,
           aggregation: str = "macro") -> tuple[float | None, float, int]:
    """Question-token co-occurrence over feasible question-token matches.

    A candidate token is a question token equal to some node name. The
    per-instance rate is the fraction of candidate tokens with a matching
    node in the explanation; instances without candidates are skipped.
    macro averages instance rates; micro pools counts."""
    by_qid = _index_explanations(explanations)
    rates = []
    micro_num = micro_den = 0
    for q in instances:
        g = graphs[q.graph_id]
        names = set(g.node_names())
        candidates = [t for t in set(q.tokens) if t in names]
        if not candidates:
            continue
        exp = by_qid[q.question_id]
        selected_names = {g.nodes[i].name for i in exp.selected}
        hits = sum(1 for t in candidates if t in selected_names)
        rates.append(hits / len(candidates))
        micro_num += hits
        micro_den += len(candidates)
    if not rates:
        return None, 0.0, 0
    if aggregation == "macro":
        return 100.0 * float(np.mean(rates)), float(np.sum(rates)), len(rates)
    if aggregation == "micro":
        return 100.0 * micro_num / micro_den, micro_num, micro_den
    raise MetricError(f"unknown aggregation {aggregation!r}")


def _embedding_stats(model: VQAModel, instances, graphs) -> tuple[float, float]:
    rows = []
    for gid in sorted({q.graph_id for q in instances}):
        enc, _, _ = model.encode_scene_graph(graphs[gid])
        rows.append(enc.data)
    allx = np.concatenate(rows, axis=0)
    return float(allx.mean()), float(allx.std() + 1e-8)


def _raw_stats(model: VQAModel, instances, graphs) -> tuple[float, float]:
    rows = []
    for gid in sorted({q.graph_id for q in instances}):
        x_raw, rel_raw = model.raw_word_sums(graphs[gid])
        rows.append(x_raw)
        if rel_raw is not None:
            rows.append(rel_raw)
    allx = np.concatenate(rows, axis=0)
    return float(allx.mean()), float(allx.std() + 1e-8)


def subgraph_removal_accuracy(model: VQAModel, instances, graphs, explanations,
                              rng: np.random.Generator) -> tuple[float, int]:
    """Accuracy after randomizing the embeddings of explanation nodes (and of
    edges internal to the explanation) while keeping the graph structure.

    Both content channels are destroyed: the encoder-space embeddings and the
    raw word-sum vectors that feed the lexical/copy paths. Randomizing only
    the encoder channel leaves a removed node fully readable through the
    word-sum paths, which makes removal a no-op."""
    by_qid = _index_explanations(explanations)
    mu, sd = _embedding_stats(model, instances, graphs)
    rmu, rsd = _raw_stats(model, instances, graphs)
    hits = []
    for q in instances:
        g = graphs[q.graph_id]
        exp = by_qid[q.question_id]
        selected = set(exp.selected)
        enc, edge_enc, _ = model.encode_scene_graph(g)
        x = enc.data.copy()
        x_raw, rel_raw = model.raw_word_sums(g)
        x_raw = x_raw.copy()
        for i in selected:
            x[i] = rng.normal(mu, sd, size=x.shape[1])
            x_raw[i] = rng.normal(rmu, rsd, size=x_raw.shape[1])
        edge_override = rel_override = None
        if edge_enc is not None:
            e = edge_enc.data.copy()
            rel = rel_raw.copy()
            for idx, edge in enumerate(g.edges):
                if edge.src in selected and edge.dst in selected:
                    e[idx] = rng.normal(mu, sd, size=e.shape[1])
                    rel[idx] = rng.normal(rmu, rsd, size=rel.shape[1])
            edge_override = e
            rel_override = rel
        trace = model.forward(g, q.tokens, rng=rng, node_embed_override=x,
                              edge_embed_override=edge_override,
                              raw_embed_override=x_raw,
                              rel_raw_override=rel_override)
        hits.append(float(model.predict(trace) == q.answer))
    return 100.0 * float(np.mean(hits)) if hits else 0.0, len(hits)


def compute_metrics(model: VQAModel, instances, graphs,
                    explanations_by_method: dict, seed: int = 0) -> MetricsReport:
    report = MetricsReport(metadata={
        "n_instances": len(instances),
        "qt_coo_aggregation": "macro (micro also reported)",
        "seed": seed,
    })
    for method, explanations in explanations_by_method.items():
        at, at_num, at_den = at_coo(explanations, instances, graphs)
        qt, qt_num, qt_den = qt_coo(explanations, instances, graphs)
        qt_micro, _, _ = qt_coo(explanations, instances, graphs, aggregation="micro")
        rem, rem_n = subgraph_removal_accuracy(
            model, instances, graphs, explanations, np.random.default_rng(seed))
        report.per_method[method] = {
            "at_coo": at, "at_coo_num": at_num, "at_coo_den": at_den,
            "qt_coo": qt, "qt_coo_den": qt_den, "qt_coo_micro": qt_micro,
            "qa_subg": rem, "qa_subg_n": rem_n,
        }
    return report


# -- correlations ---------------------------------------------------------

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 3:
        raise MetricError("pearson needs equal-length vectors of length >= 3")
    xm, ym = x - x.mean(), y - y.mean()
    denom = np.sqrt((xm @ xm) * (ym @ ym))
    if denom == 0:
        raise MetricError("pearson undefined for constant input")
    return float((xm @ ym) / denom)


def rankdata(x) -> np.ndarray:
    """Average ranks, ties get the mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    ranks[order] = np.arange(1, len(x) + 1)
    for v in np.unique(x):
        m = x == v
        ranks[m] = ranks[m].mean()
    return ranks


def spearman(x, y) -> float:
    return pearson(rankdata(x), rankdata(y))


def correlation_report(metrics_per_method: dict, preference_per_method: dict) -> dict:
    """{metric -> (pearson, spearman)} across methods present in both tables."""
    m_methods = set(metrics_per_method)
    p_methods = set(preference_per_method)
    if m_methods != p_methods:
        raise MetricError(
            f"method sets differ: metrics-only={sorted(m_methods - p_methods)}, "
            f"preferences-only={sorted(p_methods - m_methods)}")
    methods = sorted(m_methods)
    prefs = [preference_per_method[m] for m in methods]
    out = {}
    metric_names = sorted({k for v in metrics_per_method.values() for k in v})
    for name in metric_names:
        vals = [metrics_per_method[m].get(name) for m in methods]
        if any(v is None for v in vals):
            continue
        try:
            out[name] = (pearson(vals, prefs), spearman(vals, prefs))
        except MetricError:
            # constant metric: correlation undefined, skip rather than fail
            continue
    return out
