"""Command-line entry points.

Every subcommand that produces files also writes a run manifest (inputs,
arguments, outputs, wall time) atomically next to the outputs. Exit codes:
0 success, 1 runtime failure, 2 usage error."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
import zlib

import numpy as np

from . import fixtures, reports
from .evalmetrics import MetricError, compute_metrics, correlation_report
from .explainers import METHODS, explain, load_explanations, save_explanations
from .graphcore import (
    Dataset, DataError, build_answer_vocab, build_vocab, load_questions,
    load_scene_graphs, load_word_vectors, random_word_vectors, save_questions,
    save_scene_graphs,
)
from .gradsuite import TOLERANCE, run_suite
from .imle import k_for
from .model import (
    ModelConfig, TrainingDiverged, VQAModel, evaluate_accuracy, load_model,
    save_model_meta, train,
)
from .study import ChoiceStore, StudyError, bt_fit, serve_study
from .synthdata import GenConfig, GenerationError, dataset_hash, generate_dataset

log = logging.getLogger("sgxvqa")


def write_manifest(out_dir, command: str, args: dict, outputs: list,
                   started: float) -> str:
    """Atomic write (temp file + rename) so readers never see a partial manifest."""
    manifest = {
        "command": command,
        "arguments": args,
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
        "started_unix": started,
        "elapsed_seconds": round(time.time() - started, 3),
    }
    path = os.path.join(out_dir, "manifest.json")
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".manifest")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, path)
    return path


def _public_args(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k != "func"}


def _load_dataset(data_dir) -> Dataset:
    graphs = {g.graph_id: g for g in
              load_scene_graphs(os.path.join(data_dir, "graphs.json"))}
    train_qs = load_questions(os.path.join(data_dir, "train.jsonl"))
    val_qs = load_questions(os.path.join(data_dir, "val.jsonl"))
    vocab = build_vocab(graphs.values(), train_qs + val_qs)
    answer_vocab = build_answer_vocab(train_qs + val_qs)
    return Dataset(graphs=graphs, train=train_qs, val=val_qs,
                   vocab=vocab, answer_vocab=answer_vocab)


def _split(dataset: Dataset, name: str):
    if name == "train":
        return dataset.train
    if name == "val":
        return dataset.val
    raise DataError(f"unknown split {name!r}")


# -- subcommands ------------------------------------------------------------

def cmd_generate_data(ns) -> int:
    started = time.time()
    cfg = GenConfig(seed=ns.seed, num_graphs=ns.graphs,
                    questions_per_graph=ns.questions_per_graph,
                    nodes_min=ns.nodes_min, nodes_max=ns.nodes_max)
    ds, digest = generate_dataset(cfg)
    os.makedirs(ns.out, exist_ok=True)
    paths = {
        "graphs": os.path.join(ns.out, "graphs.json"),
        "train": os.path.join(ns.out, "train.jsonl"),
        "val": os.path.join(ns.out, "val.jsonl"),
        "digest": os.path.join(ns.out, "digest.json"),
    }
    save_scene_graphs(ds.graphs.values(), paths["graphs"])
    save_questions(ds.train, paths["train"])
    save_questions(ds.val, paths["val"])
    with open(paths["digest"], "w") as fh:
        json.dump({**digest.to_json(), "dataset_sha256": dataset_hash(ds)},
                  fh, indent=2)
    write_manifest(ns.out, "generate-data", _public_args(ns),
                   list(paths.values()), started)
    log.info("wrote %d graphs, %d train / %d val questions to %s",
             len(ds.graphs), len(ds.train), len(ds.val), ns.out)
    return 0


def cmd_train(ns) -> int:
    started = time.time()
    ds = _load_dataset(ns.data)
    cfg = ModelConfig(seed=ns.seed, max_epochs=ns.epochs, lr=ns.lr,
                      mask_schedule=tuple(float(v) for v in ns.mask_schedule.split(",")))
    rng = np.random.default_rng(ns.seed)
    if ns.word_vectors:
        emb = load_word_vectors(ns.word_vectors, ds.vocab, cfg.word_dim, rng)
    else:
        emb = random_word_vectors(ds.vocab, cfg.word_dim, rng)
    model = VQAModel(cfg, ds.vocab, ds.answer_vocab, embeddings=emb)
    os.makedirs(ns.out, exist_ok=True)
    save_model_meta(model, ns.out)
    try:
        result = train(model, ds, ns.out, target_val_acc=ns.target_val_acc)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return 1
    outputs = [result["checkpoint"], result["metrics_log"],
               os.path.join(ns.out, "config.json")]
    outputs += reports.render_training_report(result["metrics_log"], ns.out)
    write_manifest(ns.out, "train", _public_args(ns), outputs, started)
    last = result["history"][-1]
    log.info("finished: best epoch %d, last val acc %.3f",
             result["best_epoch"], last["val_acc"])
    return 0


def cmd_eval(ns) -> int:
    started = time.time()
    ds = _load_dataset(ns.data)
    model = load_model(ns.model)
    instances = _split(ds, ns.split)
    result = evaluate_accuracy(model, instances, ds.graphs)
    os.makedirs(ns.out, exist_ok=True)
    path = os.path.join(ns.out, "accuracy.json")
    with open(path, "w") as fh:
        json.dump(result, fh, indent=2)
    rows = [["overall", f"{result['accuracy']:.4f}"]]
    rows += [[k, f"{v:.4f}"] for k, v in sorted(result["by_structural_type"].items())]
    rows += [[k, f"{v:.4f}"] for k, v in sorted(result["by_semantic_type"].items())]
    tsv = os.path.join(ns.out, "accuracy.tsv")
    reports.write_tsv(tsv, ["group", "accuracy"], rows)
    write_manifest(ns.out, "eval", _public_args(ns), [path, tsv], started)
    log.info("accuracy %.4f over %d instances", result["accuracy"], len(instances))
    return 0


def _explain_one(model, ds, q, method, k_fraction, seed):
    g = ds.graphs[q.graph_id]
    k = k_for(k_fraction, g.num_nodes)
    # crc32 rather than hash(): stable across interpreter runs
    rng = np.random.default_rng([seed, zlib.crc32(q.question_id.encode())])
    return explain(method, model, g, q, k, rng)


def cmd_explain(ns) -> int:
    started = time.time()
    ds = _load_dataset(ns.data)
    model = load_model(ns.model)
    instances = _split(ds, ns.split)
    if ns.limit:
        instances = instances[:ns.limit]

    if ns.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        work = [(q,) for q in instances]
        with ProcessPoolExecutor(max_workers=ns.workers, mp_context=ctx) as pool:
            explanations = list(pool.map(
                _ExplainWorker(model, ds, ns.method, ns.k_fraction, ns.seed),
                instances, chunksize=8))
    else:
        explanations = [_explain_one(model, ds, q, ns.method, ns.k_fraction, ns.seed)
                        for q in instances]

    os.makedirs(ns.out, exist_ok=True)
    path = os.path.join(ns.out, f"explanations_{ns.method}.jsonl")
    save_explanations(explanations, path)
    write_manifest(ns.out, "explain", _public_args(ns), [path], started)
    log.info("wrote %d explanations to %s", len(explanations), path)
    return 0


class _ExplainWorker:
    """Picklable callable for the process pool (fork start method)."""

    def __init__(self, model, ds, method, k_fraction, seed):
        self.model, self.ds = model, ds
        self.method, self.k_fraction, self.seed = method, k_fraction, seed

    def __call__(self, q):
        return _explain_one(self.model, self.ds, q, self.method,
                            self.k_fraction, self.seed)


def cmd_metrics(ns) -> int:
    started = time.time()
    ds = _load_dataset(ns.data)
    model = load_model(ns.model)
    instances = _split(ds, ns.split)
    by_method = {}
    for path in ns.explanations:
        exps = load_explanations(path)
        if not exps:
            log.error("no explanations in %s", path)
            return 1
        by_method[exps[0].method] = exps
    # score only questions every supplied file explains
    covered = set.intersection(
        *({e.question_id for e in exps} for exps in by_method.values()))
    instances = [q for q in instances if q.question_id in covered]
    if not instances:
        log.error("no overlap between the split and the explanation files")
        return 1
    report = compute_metrics(model, instances, ds.graphs, by_method, seed=ns.seed)
    outputs = reports.render_metrics_report(report, ns.out)
    write_manifest(ns.out, "metrics", _public_args(ns), outputs, started)
    return 0


def cmd_correlate(ns) -> int:
    started = time.time()
    if ns.fixtures == "paper":
        metrics_per_method = fixtures.REFERENCE_METRICS
        prefs = fixtures.REFERENCE_PREFERENCES
    else:
        with open(ns.metrics) as fh:
            metrics_per_method = {
                m: {k: v for k, v in vals.items()
                    if k in ("at_coo", "qt_coo", "qa_subg")}
                for m, vals in json.load(fh)["per_method"].items()}
        with open(ns.preferences) as fh:
            prefs = json.load(fh)["overall"]
    corr = correlation_report(metrics_per_method, prefs)
    os.makedirs(ns.out, exist_ok=True)
    outputs = reports.render_correlation_report(
        corr, metrics_per_method, prefs, ns.out)
    write_manifest(ns.out, "correlate", _public_args(ns), outputs, started)
    for name, (pe, sp) in sorted(corr.items()):
        log.info("%s: pearson %.4f spearman %.4f", name, pe, sp)
    return 0


def cmd_bt_fit(ns) -> int:
    started = time.time()
    store = ChoiceStore(ns.choices)
    result = bt_fit(store.records(), grouping=ns.group_by)
    os.makedirs(ns.out, exist_ok=True)
    outputs = reports.render_bt_report(result, ns.out)
    write_manifest(ns.out, "bt-fit", _public_args(ns), outputs, started)
    for m, p in sorted(result.overall.items(), key=lambda kv: -kv[1]):
        log.info("%s: %.4f", m, p)
    return 0


def cmd_serve_study(ns) -> int:
    ds = _load_dataset(ns.data)
    by_method = {}
    for path in ns.explanations:
        exps = load_explanations(path)
        if exps:
            by_method[exps[0].method] = exps
    store = ChoiceStore(ns.store)
    try:
        serve_study(store, ds, by_method, port=ns.port, host=ns.host,
                    frontend_dir=ns.frontend)
    except OSError as exc:
        log.error("cannot bind %s:%d: %s", ns.host, ns.port, exc)
        return 1
    return 0


def cmd_gradcheck(ns) -> int:
    results = run_suite(eps=ns.eps)
    worst_name = max(results, key=results.get)
    failed = {k: v for k, v in results.items() if v > TOLERANCE}
    for name in sorted(results):
        status = "FAIL" if name in failed else "ok"
        print(f"{status:4s} {name:24s} {results[name]:.3e}")
    print(f"worst: {worst_name} {results[worst_name]:.3e} (tolerance {TOLERANCE})")
    return 1 if failed else 0


def cmd_paper_fixtures(ns) -> int:
    started = time.time()
    os.makedirs(ns.out, exist_ok=True)
    path = os.path.join(ns.out, "reference.json")
    with open(path, "w") as fh:
        json.dump({"metrics": fixtures.REFERENCE_METRICS,
                   "preferences": fixtures.REFERENCE_PREFERENCES,
                   "correlations": fixtures.REFERENCE_CORRELATIONS},
                  fh, indent=2)
    write_manifest(ns.out, "paper-fixtures", _public_args(ns), [path], started)
    log.info("wrote %s", path)
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgxvqa",
                                description="graph VQA with built-in explanations")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--graphs", type=int, default=100)
    g.add_argument("--questions-per-graph", type=int, default=10)
    g.add_argument("--nodes-min", type=int, default=8)
    g.add_argument("--nodes-max", type=int, default=16)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--mask-schedule", default="1,1,1,0.15",
                   help="comma-separated per-layer keep fractions")
    t.add_argument("--word-vectors", default=None)
    t.add_argument("--target-val-acc", type=float, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="answer accuracy of a trained model")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="produce explanation subgraphs")
    x.add_argument("--data", required=True)
    x.add_argument("--model", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--method", required=True, choices=METHODS)
    x.add_argument("--split", default="val", choices=("train", "val"))
    x.add_argument("--k-fraction", type=float, default=0.15)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--limit", type=int, default=None)
    x.add_argument("--workers", type=int, default=1)
    x.set_defaults(func=cmd_explain)

    m = sub.add_parser("metrics", help="explanation-quality metrics")
    m.add_argument("--data", required=True)
    m.add_argument("--model", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--explanations", nargs="+", required=True)
    m.add_argument("--split", default="val", choices=("train", "val"))
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_metrics)

    c = sub.add_parser("correlate", help="metric vs preference correlations")
    c.add_argument("--out", required=True)
    c.add_argument("--fixtures", choices=("paper",), default=None)
    c.add_argument("--metrics", default=None, help="metrics.json from `metrics`")
    c.add_argument("--preferences", default=None, help="preferences.json from `bt-fit`")
    c.set_defaults(func=cmd_correlate)

    b = sub.add_parser("bt-fit", help="Bradley-Terry fit over recorded choices")
    b.add_argument("--choices", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--group-by", default="none",
                   choices=("none", "structural", "semantic"))
    b.set_defaults(func=cmd_bt_fit)

    s = sub.add_parser("serve-study", help="run the pairwise study service")
    s.add_argument("--data", required=True)
    s.add_argument("--explanations", nargs="+", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--frontend", default=None)
    s.set_defaults(func=cmd_serve_study)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("paper-fixtures", help="dump the reference result tables")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_paper_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    if ns.command == "correlate" and not ns.fixtures and not (ns.metrics and ns.preferences):
        parser.error("correlate needs --fixtures paper or both --metrics and --preferences")
    try:
        return ns.func(ns)
    except (DataError, GenerationError, MetricError, StudyError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
