import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgxvqa.evalmetrics import (
    MetricError, at_coo, correlation_report, pearson, qt_coo, rankdata,
    spearman, subgraph_removal_accuracy,
)
from sgxvqa.explainers import Explanation
from sgxvqa.graphcore import Edge, Node, QAInstance, SceneGraph
from sgxvqa.model import ModelConfig, VQAModel
from sgxvqa.synthdata import GenConfig, generate_dataset


def graph_with(names, graph_id="g0"):
    nodes = tuple(Node(name=n, attributes=(), bbox=(0.1 * i, 0.1, 0.05, 0.05))
                  for i, n in enumerate(names))
    return SceneGraph(graph_id=graph_id, nodes=nodes, edges=())


def question(qid, gid, tokens, answer, stype="query", sem="object"):
    return QAInstance(question_id=qid, graph_id=gid, tokens=tuple(tokens),
                      answer=answer, structural_type=stype, semantic_type=sem)


def expl(qid, selected, n, method="intrinsic"):
    return Explanation(method=method, question_id=qid, scores=np.zeros(n),
                       selected=tuple(selected), k=len(selected))


class TestAtCoo:
    """Hand-counted cases: the denominator is groundable answers only."""

    def test_manual_recount(self):
        g = graph_with(["cat", "dog", "tree"])
        graphs = {"g0": g}
        instances = [
            question("q1", "g0", ["what", "is", "x"], "cat"),    # groundable, hit
            question("q2", "g0", ["what", "is", "y"], "dog"),    # groundable, miss
            question("q3", "g0", ["is", "it", "red"], "yes", "verify", "attribute"),
            question("q4", "g0", ["what", "is", "z"], "tree"),   # groundable, hit
        ]
        explanations = [
            expl("q1", [0, 2], 3), expl("q2", [0, 2], 3),
            expl("q3", [1], 3), expl("q4", [2], 3),
        ]
        pct, num, den = at_coo(explanations, instances, graphs)
        assert (num, den) == (2, 3)
        assert pct == pytest.approx(100 * 2 / 3)

    def test_no_groundable_answers_returns_none(self):
        g = graph_with(["cat"])
        instances = [question("q1", "g0", ["a"], "yes", "verify", "object")]
        pct, num, den = at_coo([expl("q1", [0], 1)], instances, {"g0": g})
        assert pct is None and den == 0


class TestQtCoo:
    def test_manual_macro_average(self):
        g = graph_with(["cat", "dog", "tree"])
        graphs = {"g0": g}
        instances = [
            # candidates cat, dog; explanation covers cat only -> 1/2
            question("q1", "g0", ["is", "cat", "near", "dog"], "yes", "verify", "object"),
            # candidates tree; covered -> 1/1
            question("q2", "g0", ["where", "is", "tree"], "yes", "verify", "object"),
            # no candidates -> skipped
            question("q3", "g0", ["what", "is", "here"], "yes", "verify", "object"),
        ]
        explanations = [expl("q1", [0], 3), expl("q2", [2], 3), expl("q3", [1], 3)]
        pct, _, den = qt_coo(explanations, instances, graphs)
        assert den == 2
        assert pct == pytest.approx(100 * (0.5 + 1.0) / 2)   # macro = 75.0

    def test_micro_pools_counts(self):
        g = graph_with(["cat", "dog", "tree"])
        graphs = {"g0": g}
        instances = [
            question("q1", "g0", ["is", "cat", "near", "dog"], "yes", "verify", "object"),
            question("q2", "g0", ["where", "is", "tree"], "yes", "verify", "object"),
        ]
        explanations = [expl("q1", [0], 3), expl("q2", [2], 3)]
        pct, num, den = qt_coo(explanations, instances, graphs, aggregation="micro")
        assert (num, den) == (2, 3)
        assert pct == pytest.approx(100 * 2 / 3)   # micro = 66.67

    def test_duplicate_tokens_counted_once(self):
        g = graph_with(["cat"])
        instances = [question("q1", "g0", ["cat", "cat", "cat"], "yes",
                              "verify", "object")]
        pct, _, den = qt_coo([expl("q1", [0], 1)], instances, {"g0": g})
        assert pct == 100.0 and den == 1


@pytest.fixture(scope="module")
def removal_setup():
    ds, _ = generate_dataset(GenConfig(seed=3, num_graphs=20,
                                       questions_per_graph=10))
    cfg = ModelConfig(mask_schedule=(1.0, 1.0, 1.0, 0.3), seed=5, d_x=16,
                      word_dim=16, heads=2, enc_layers=1, dec_layers=1,
                      dropout=0.0)
    return ds, VQAModel(cfg, ds.vocab, ds.answer_vocab)


class TestSubgraphRemoval:
    def test_preserves_graph_structure(self, removal_setup):
        """Removal randomizes embeddings; graphs themselves are untouched."""
        ds, model = removal_setup
        instances = ds.val[:10]
        before = {q.graph_id: (ds.graphs[q.graph_id].num_nodes,
                               len(ds.graphs[q.graph_id].edges))
                  for q in instances}
        explanations = [expl(q.question_id, [0, 1], ds.graphs[q.graph_id].num_nodes)
                        for q in instances]
        acc, n = subgraph_removal_accuracy(model, instances, ds.graphs,
                                           explanations, np.random.default_rng(0))
        assert n == 10 and 0.0 <= acc <= 100.0
        for q in instances:
            g = ds.graphs[q.graph_id]
            assert (g.num_nodes, len(g.edges)) == before[q.graph_id]


class TestPearson:
    def test_perfect_linear(self):
        assert pearson([1, 2, 3, 4], [2, 4, 6, 8]) == pytest.approx(1.0)

    def test_sign_flip(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_constant_rejected(self):
        with pytest.raises(MetricError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_short_input_rejected(self):
        with pytest.raises(MetricError):
            pearson([1, 2], [1, 2])


class TestSpearman:
    def test_ties_get_mean_ranks(self):
        np.testing.assert_allclose(rankdata([10, 20, 20, 30]),
                                   [1, 2.5, 2.5, 4])

    def test_monotone_transform_invariance(self):
        x = [1.0, 5.0, 2.0, 8.0]
        y = [0.3, 0.9, 0.5, 0.1]
        assert spearman(x, y) == pytest.approx(spearman(np.exp(x), y))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=10, unique=True))
    def test_perfect_on_any_strictly_monotone_pair(self, xs):
        assert spearman(xs, np.argsort(np.argsort(xs))) == pytest.approx(1.0)


class TestCorrelationReport:
    def test_method_set_mismatch_is_an_error(self):
        with pytest.raises(MetricError, match="differ"):
            correlation_report({"a": {"m": 1.0}}, {"a": 0.5, "b": 0.5})

    def test_skips_metrics_with_missing_values(self):
        metrics = {m: {"good": v, "partial": None if m == "a" else v}
                   for m, v in [("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 4.0)]}
        prefs = {"a": 0.1, "b": 0.2, "c": 0.3, "d": 0.4}
        out = correlation_report(metrics, prefs)
        assert "good" in out and "partial" not in out
