"""Release gate: end-to-end checks of every headline guarantee.

Each test prints one pass/fail line (see conftest). The training-dependent
checks share three session-scoped models, so the gate trains exactly three
times. Expect the full gate to take tens of minutes; everything else in the
suite stays fast.
"""
import itertools
import json
import time

import numpy as np
import pytest

from sgxvqa import autodiff as ad
from sgxvqa.autodiff import Tensor
from sgxvqa.cli import main
from sgxvqa.evalmetrics import at_coo, qt_coo, subgraph_removal_accuracy
from sgxvqa.explainers import explain, explain_random
from sgxvqa.graphcore import Node, QAInstance, SceneGraph
from sgxvqa.gradsuite import TOLERANCE, run_suite
from sgxvqa.imle import HardTopKMask, TopKConfig, k_for, topk_map
from sgxvqa.model import ModelConfig, VQAModel, evaluate_accuracy, train
from sgxvqa.study import (
    STUDY_METHODS, ChoiceRecord, ChoiceStore, bt_fit, build_app,
)
from sgxvqa.synthdata import GenConfig, generate_dataset

TRAIN_SEEDS = (11, 12, 13)
TRAIN_BUDGET_SECONDS = 15 * 60
TARGET_VAL_ACC = 0.90
MASK_SCHEDULE = (1.0, 1.0, 1.0, 0.3)


@pytest.fixture(scope="session")
def dataset2k():
    # 2100 questions over 8-16 node graphs
    ds, _ = generate_dataset(GenConfig(seed=1, num_graphs=210,
                                       questions_per_graph=10))
    assert len(ds.train) + len(ds.val) >= 2000
    return ds


@pytest.fixture(scope="session")
def trained(dataset2k, tmp_path_factory):
    """Three independently seeded training runs against the wall clock."""
    runs = {}
    for seed in TRAIN_SEEDS:
        cfg = ModelConfig(mask_schedule=MASK_SCHEDULE, seed=seed)
        model = VQAModel(cfg, dataset2k.vocab, dataset2k.answer_vocab)
        out = tmp_path_factory.mktemp(f"train-{seed}")
        started = time.time()
        result = train(model, dataset2k, out, target_val_acc=TARGET_VAL_ACC)
        elapsed = time.time() - started
        acc = evaluate_accuracy(model, dataset2k.val, dataset2k.graphs)
        runs[seed] = {"model": model, "elapsed": elapsed,
                      "val_acc": acc["accuracy"], "history": result["history"]}
    return runs


# -- 1: embedded reference tables reproduce the published correlations ------

def test_reference_correlations_reproduced_fast(tmp_path):
    started = time.time()
    assert main(["correlate", "--fixtures", "paper", "--out", str(tmp_path)]) == 0
    elapsed = time.time() - started
    rows = (tmp_path / "correlations.tsv").read_text().strip().splitlines()
    table = {}
    for row in rows[1:]:
        name, pe, sp = row.split("\t")
        table[name] = (float(pe), float(sp))
    expected = {"at_coo": (0.84, 0.60), "qt_coo": (0.99, 1.00),
                "qa_subg": (-0.48, -0.32)}
    for name, (pe, sp) in expected.items():
        assert table[name][0] == pytest.approx(pe, abs=0.01), name
        assert table[name][1] == pytest.approx(sp, abs=0.01), name
    assert elapsed < 1.0


# -- 2: synthetic training reaches 90% val accuracy, 3 seeds, 15 min each ---

def test_training_reaches_target_accuracy_three_seeds(trained):
    for seed, run in trained.items():
        assert run["elapsed"] <= TRAIN_BUDGET_SECONDS, \
            f"seed {seed} took {run['elapsed']:.0f}s"
        assert run["val_acc"] >= TARGET_VAL_ACC, \
            f"seed {seed} reached only {run['val_acc']:.3f}"


# -- 3: finite-difference gradient suite ------------------------------------

def test_gradient_suite_all_primitives_and_model_loss():
    started = time.time()
    results = run_suite(eps=1e-4)
    elapsed = time.time() - started
    bad = {k: v for k, v in results.items() if v > TOLERANCE}
    assert not bad, bad
    assert "model_loss" in results
    assert elapsed < 60.0


# -- 4: top-k subset recovery across 100 seeds ------------------------------

def test_topk_subset_recovery_95_of_100_seeds():
    n, k = 20, 5
    cfg = TopKConfig(noise="sum_of_gamma", lam=10.0)
    recovered = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        target = np.zeros(n)
        target[rng.choice(n, size=k, replace=False)] = 1.0
        theta = np.zeros(n)
        for _ in range(500):
            if np.array_equal(topk_map(theta, k), target):
                recovered += 1
                break
            t = Tensor(theta, requires_grad=True)
            gamma, _ = HardTopKMask.apply(t, cfg, rng, k=k)
            err = gamma - Tensor(target)
            loss = ad.tsum(err * err.data)
            loss.backward()
            theta = theta - 0.5 * t.grad
    assert recovered >= 95, f"recovered {recovered}/100"


# -- 5: mask size law and hard-masking bit-identity on 1000 forwards --------

def test_mask_invariants_on_1000_forwards(dataset2k):
    cfg = ModelConfig(mask_schedule=MASK_SCHEDULE, seed=5, d_x=32, word_dim=32,
                      heads=2, enc_layers=1, dec_layers=1, dropout=0.0)
    model = VQAModel(cfg, dataset2k.vocab, dataset2k.answer_vocab)
    rng = np.random.default_rng(0)
    pert_rng = np.random.default_rng(99)
    pool = (dataset2k.train + dataset2k.val)[:1000]
    assert len(pool) == 1000
    for q in pool:
        g = dataset2k.graphs[q.graph_id]
        trace = model.forward(g, q.tokens, train=True, rng=rng)
        assert trace.gamma.sum() == k_for(MASK_SCHEDULE[-1], g.num_nodes)

        base = model.forward(g, q.tokens, rng=rng)
        out = base.gamma == 0
        offset = np.zeros((g.num_nodes, cfg.d_x))
        offset[out] = pert_rng.normal(scale=1000.0,
                                      size=(int(out.sum()), cfg.d_x))
        pert = model.forward(g, q.tokens, rng=rng, final_output_offset=offset)
        assert np.array_equal(base.gamma, pert.gamma)
        assert np.array_equal(base.x_g.data, pert.x_g.data)
        assert np.array_equal(base.logits.data, pert.logits.data)


# -- 6: metric oracles on handcrafted instances -----------------------------

def _handcrafted_batch():
    """50 instances over small graphs with explanations chosen per-case."""
    rng = np.random.default_rng(42)
    names = ["cat", "dog", "tree", "car", "ball", "chair", "bird", "lamp"]
    graphs, instances, explanations = {}, [], []
    from sgxvqa.explainers import Explanation
    for i in range(50):
        n = int(rng.integers(3, 7))
        picked = list(rng.choice(names, size=n, replace=False))
        gid = f"hand-g{i}"
        graphs[gid] = SceneGraph(
            graph_id=gid,
            nodes=tuple(Node(name=nm, attributes=(),
                             bbox=(0.1 * j, 0.1, 0.05, 0.05))
                        for j, nm in enumerate(picked)),
            edges=())
        answer = picked[0] if i % 3 else "yes"   # mix groundable and not
        tokens = ["is", "the", picked[1], "near", picked[-1]]
        instances.append(QAInstance(
            question_id=f"hand-q{i}", graph_id=gid, tokens=tuple(tokens),
            answer=answer, structural_type="verify", semantic_type="object"))
        k = int(rng.integers(1, n + 1))
        sel = tuple(int(v) for v in rng.choice(n, size=k, replace=False))
        explanations.append(Explanation(
            method="random", question_id=f"hand-q{i}",
            scores=np.zeros(n), selected=sel, k=k))
    return graphs, instances, explanations


def test_cooccurrence_metrics_match_brute_force_recounts():
    graphs, instances, explanations = _handcrafted_batch()
    by_qid = {e.question_id: e for e in explanations}

    # independent recount, written against the metric definitions
    at_num = at_den = 0
    qt_rates = []
    for q in instances:
        g = graphs[q.graph_id]
        node_names = [nd.name for nd in g.nodes]
        sel_names = {node_names[i] for i in by_qid[q.question_id].selected}
        if q.answer in node_names:
            at_den += 1
            if q.answer in sel_names:
                at_num += 1
        cands = {t for t in q.tokens if t in node_names}
        if cands:
            qt_rates.append(len(cands & sel_names) / len(cands))

    pct, num, den = at_coo(explanations, instances, graphs)
    assert (num, den) == (at_num, at_den)
    assert pct == 100.0 * at_num / at_den
    qpct, _, qden = qt_coo(explanations, instances, graphs)
    assert qden == len(qt_rates)
    assert qpct == pytest.approx(100.0 * float(np.mean(qt_rates)), abs=1e-12)


def test_subgraph_removal_preserves_graph_structure(dataset2k):
    cfg = ModelConfig(mask_schedule=MASK_SCHEDULE, seed=5, d_x=32, word_dim=32,
                      heads=2, enc_layers=1, dec_layers=1, dropout=0.0)
    model = VQAModel(cfg, dataset2k.vocab, dataset2k.answer_vocab)
    instances = dataset2k.val[:30]
    before = {}
    for q in instances:
        g = dataset2k.graphs[q.graph_id]
        before[q.graph_id] = (g.num_nodes,
                              [(e.src, e.dst, e.relation) for e in g.edges])
    explanations = []
    rng = np.random.default_rng(3)
    for q in instances:
        n = dataset2k.graphs[q.graph_id].num_nodes
        explanations.append(explain_random(n, k_for(0.3, n), rng,
                                           question_id=q.question_id))
    subgraph_removal_accuracy(model, instances, dataset2k.graphs, explanations,
                              np.random.default_rng(0))
    for gid, (n_nodes, edges) in before.items():
        g = dataset2k.graphs[gid]
        assert g.num_nodes == n_nodes
        assert [(e.src, e.dst, e.relation) for e in g.edges] == edges


# -- 7: removing the learned subgraph hurts more than random ----------------

def test_intrinsic_removal_hurts_more_than_random(trained, dataset2k):
    diffs = []
    for seed, run in trained.items():
        model = run["model"]
        instances = dataset2k.val[:200]
        rng = np.random.default_rng(seed)
        intrinsic, random_eq = [], []
        for q in instances:
            g = dataset2k.graphs[q.graph_id]
            e = explain("intrinsic", model, g, q,
                        k=k_for(MASK_SCHEDULE[-1], g.num_nodes), rng=rng)
            intrinsic.append(e)
            random_eq.append(explain_random(g.num_nodes, e.k, rng,
                                            question_id=q.question_id))
        acc_int, _ = subgraph_removal_accuracy(
            model, instances, dataset2k.graphs, intrinsic,
            np.random.default_rng(seed))
        acc_rnd, _ = subgraph_removal_accuracy(
            model, instances, dataset2k.graphs, random_eq,
            np.random.default_rng(seed))
        diffs.append(acc_rnd - acc_int)
    assert float(np.mean(diffs)) >= 5.0, diffs


# -- 8: gold-node recall ordering vs random ---------------------------------

def _gold_recalls(method, model, dataset, instances, rng):
    recalls = []
    for q in instances:
        g = dataset.graphs[q.graph_id]
        gold = set(q.gold_relevant_nodes or ())
        if not gold:
            continue
        kwargs = {"steps": 25} if method == "gnnexplainer" else {}
        e = explain(method, model, g, q,
                    k=k_for(MASK_SCHEDULE[-1], g.num_nodes), rng=rng, **kwargs)
        recalls.append(len(gold & set(e.selected)) / len(gold))
    return np.asarray(recalls)


def test_intrinsic_and_gnnexplainer_beat_random_gold_recall(trained, dataset2k):
    model = trained[TRAIN_SEEDS[0]]["model"]
    instances = dataset2k.val[:210]
    rng = np.random.default_rng(0)
    random_rec = _gold_recalls("random", model, dataset2k, instances, rng)
    assert len(random_rec) >= 200
    for method in ("intrinsic", "gnnexplainer"):
        rec = _gold_recalls(method, model, dataset2k, instances, rng)
        gap = rec.mean() - random_rec.mean()
        se = np.sqrt(rec.var(ddof=1) / len(rec)
                     + random_rec.var(ddof=1) / len(random_rec))
        assert gap > 2 * se, f"{method}: gap {gap:.3f} vs 2se {2 * se:.3f}"


# -- 9: Bradley-Terry guarantees --------------------------------------------

def _rec(a, b, outcome, item):
    return ChoiceRecord(participant_hash="p", item_id=item, question_id="q",
                        method_a=a, method_b=b, outcome=outcome,
                        structural_type="verify", semantic_type="object")


def test_bradley_terry_closed_form_recovery_and_invariance():
    # (3 wins + 1 tie) -> exactly (0.875, 0.125)
    recs = [_rec("a", "b", "A", f"i{i}") for i in range(3)]
    recs.append(_rec("a", "b", "equally_good", "i3"))
    res = bt_fit(recs).overall
    assert res["a"] == pytest.approx(0.875, abs=1e-9)
    assert res["b"] == pytest.approx(0.125, abs=1e-9)

    # recovery of known strengths at 5000 comparisons per pair
    p_true = {"a": 0.52, "b": 0.35, "c": 0.09, "d": 0.04}
    rng = np.random.default_rng(5)
    sim = []
    n = 0
    for x, y in itertools.combinations(sorted(p_true), 2):
        for _ in range(5000):
            win = rng.random() < p_true[x] / (p_true[x] + p_true[y])
            sim.append(_rec(x, y, "A" if win else "B", f"s{n}"))
            n += 1
    fit = bt_fit(sim).overall
    assert max(abs(fit[m] - p_true[m]) for m in p_true) <= 0.02

    # duplication and relabel invariance
    base = bt_fit(sim).overall
    doubled = bt_fit(sim + [_rec(r.method_a, r.method_b, r.outcome,
                                 r.item_id + "x") for r in sim]).overall
    assert all(doubled[m] == pytest.approx(base[m], abs=1e-8) for m in base)
    rename = {"a": "w", "b": "x", "c": "y", "d": "z"}
    relabeled = bt_fit([_rec(rename[r.method_a], rename[r.method_b], r.outcome,
                             r.item_id) for r in sim]).overall
    assert all(relabeled[rename[m]] == pytest.approx(base[m], abs=1e-9)
               for m in base)


# -- 10: web study round-trip, persistence, ranking -------------------------

def test_web_study_round_trip_and_restart(dataset2k, tmp_path):
    from fastapi.testclient import TestClient
    from sgxvqa.explainers import Explanation

    rng = np.random.default_rng(0)
    explanations = {}
    for m in STUDY_METHODS:
        exps = []
        for q in dataset2k.val:
            n = dataset2k.graphs[q.graph_id].num_nodes
            sel = tuple(int(i) for i in rng.choice(n, size=2, replace=False))
            exps.append(Explanation(method=m, question_id=q.question_id,
                                    scores=np.zeros(n), selected=sel, k=2))
        explanations[m] = exps

    store_path = tmp_path / "choices.jsonl"
    client = TestClient(build_app(ChoiceStore(store_path), dataset2k,
                                  explanations, salt="gate", seed=7))
    session = client.get("/api/session", params={"user": "annotator"}).json()
    assert len(session["items"]) == 18
    outcomes = ["A", "B", "equally_good", "equally_bad"]
    for i, item in enumerate(session["items"]):
        r = client.post("/api/choice", json={
            "participant_hash": session["participant_hash"],
            "item_id": item["item_id"],
            "outcome": outcomes[i % 4]})
        assert r.status_code == 200

    # all 18 records persisted and each method pair appears exactly 3 times
    reopened = ChoiceStore(store_path)
    records = reopened.records()
    assert len(records) == 18
    pair_counts = {}
    for r in records:
        key = frozenset((r.method_a, r.method_b))
        pair_counts[key] = pair_counts.get(key, 0) + 1
    assert len(pair_counts) == 6
    assert all(c == 3 for c in pair_counts.values())

    # survive a service restart and fit preferences without error
    client2 = TestClient(build_app(reopened, dataset2k, explanations,
                                   salt="gate", seed=7))
    answered = client2.get("/api/session",
                           params={"user": "annotator"}).json()["answered"]
    assert len(answered) == 18
    out = tmp_path / "bt"
    assert main(["bt-fit", "--choices", str(store_path),
                 "--out", str(out)]) == 0
    fit = json.loads((out / "preferences.json").read_text())
    assert set(fit["overall"]) == set(STUDY_METHODS)
