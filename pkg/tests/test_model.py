import numpy as np
import pytest

from sgxvqa.graphcore import Dataset
from sgxvqa.imle import k_for
from sgxvqa.model import (
    ModelConfig, VQAModel, evaluate_accuracy, load_model, lr_at_epoch,
    save_model_meta, train,
)
from sgxvqa.nn import ConfigError
from sgxvqa.synthdata import GenConfig, generate_dataset


SMALL = dict(d_x=16, word_dim=16, heads=2, enc_layers=1, dec_layers=1,
             dropout=0.0)


@pytest.fixture(scope="module")
def dataset():
    ds, _ = generate_dataset(GenConfig(seed=3, num_graphs=20,
                                       questions_per_graph=10))
    return ds


@pytest.fixture(scope="module")
def model(dataset):
    cfg = ModelConfig(mask_schedule=(1.0, 1.0, 1.0, 0.3), seed=5, **SMALL)
    return VQAModel(cfg, dataset.vocab, dataset.answer_vocab)


class TestConfig:
    def test_schedule_length_must_match_layers(self):
        with pytest.raises(ConfigError):
            ModelConfig(layers=3, mask_schedule=(1.0, 1.0, 1.0, 0.5))

    def test_json_round_trip(self):
        cfg = ModelConfig(mask_schedule=(1.0, 0.9, 0.8, 0.3), lr=5e-4)
        cfg2 = ModelConfig.from_json(cfg.to_json())
        assert cfg2 == cfg

    def test_unknown_attention_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(attention="transformer")


class TestLrSchedule:
    def test_warmup_then_decay(self):
        cfg = ModelConfig(lr=1e-3, warmup_start_lr=1e-6, warmup_epochs=4,
                          lr_decay=0.98)
        assert lr_at_epoch(cfg, 0) < lr_at_epoch(cfg, 1) < lr_at_epoch(cfg, 3)
        assert lr_at_epoch(cfg, 3) == pytest.approx(1e-3)
        assert lr_at_epoch(cfg, 5) == pytest.approx(1e-3 * 0.98)
        assert lr_at_epoch(cfg, 7) == pytest.approx(1e-3 * 0.98 ** 3)


class TestForward:
    def test_mask_size_law(self, dataset, model):
        """Sum of the final-layer mask always equals max(1, round(k% * n))."""
        rng = np.random.default_rng(0)
        for q in dataset.train[:50]:
            g = dataset.graphs[q.graph_id]
            trace = model.forward(g, q.tokens, train=True, rng=rng)
            assert trace.gamma.sum() == k_for(0.3, g.num_nodes)

    def test_eval_forward_deterministic(self, dataset, model):
        q = dataset.train[0]
        g = dataset.graphs[q.graph_id]
        a = model.forward(g, q.tokens, rng=np.random.default_rng(1))
        b = model.forward(g, q.tokens, rng=np.random.default_rng(2))
        np.testing.assert_array_equal(a.logits.data, b.logits.data)
        np.testing.assert_array_equal(a.gamma, b.gamma)

    def test_pool_weights_are_distribution(self, dataset, model):
        """Masked-out rows are zero vectors: their pool logits are exactly 0,
        so they share one common weight and contribute nothing to X_g."""
        q = dataset.train[0]
        g = dataset.graphs[q.graph_id]
        trace = model.forward(g, q.tokens, rng=np.random.default_rng(0))
        w = trace.pool_weights.data
        assert w.sum() == pytest.approx(1.0, abs=1e-5)
        out = w[trace.gamma == 0]
        assert out.size == 0 or np.all(out == out[0])

    def test_masked_out_perturbation_leaves_output_bit_identical(self, dataset, model):
        """Zeroed final-layer rows cannot influence X_g or the logits."""
        rng = np.random.default_rng(0)
        checked = 0
        for q in dataset.train[:20]:
            g = dataset.graphs[q.graph_id]
            base = model.forward(g, q.tokens, rng=rng)
            out = base.gamma == 0
            if not out.any():
                continue
            offset = np.zeros((g.num_nodes, model.config.d_x))
            offset[out] = np.random.default_rng(1).normal(
                scale=100.0, size=(int(out.sum()), model.config.d_x))
            pert = model.forward(g, q.tokens, rng=rng,
                                 final_output_offset=offset)
            np.testing.assert_array_equal(base.gamma, pert.gamma)
            np.testing.assert_array_equal(base.logits.data, pert.logits.data)
            np.testing.assert_array_equal(base.x_g.data, pert.x_g.data)
            checked += 1
        assert checked > 0

    def test_all_ones_schedule_has_no_mask(self, dataset, model):
        q = dataset.train[0]
        g = dataset.graphs[q.graph_id]
        trace = model.forward(g, q.tokens, rng=np.random.default_rng(0),
                              mask_schedule=(1.0, 1.0, 1.0, 1.0))
        assert trace.scores is None
        np.testing.assert_array_equal(trace.gamma, np.ones(g.num_nodes))

    def test_node_override_changes_output(self, dataset, model):
        q = dataset.train[0]
        g = dataset.graphs[q.graph_id]
        base = model.forward(g, q.tokens, rng=np.random.default_rng(0))
        enc, _, _ = model.encode_scene_graph(g)
        pert = model.forward(g, q.tokens, rng=np.random.default_rng(0),
                             node_embed_override=enc.data + 1.0)
        assert not np.array_equal(base.logits.data, pert.logits.data)


class TestPersistence:
    def test_save_load_round_trip(self, dataset, model, tmp_path):
        save_model_meta(model, tmp_path)
        model.save(tmp_path / "best.ckpt")
        loaded = load_model(tmp_path)
        q = dataset.train[0]
        g = dataset.graphs[q.graph_id]
        a = model.forward(g, q.tokens, rng=np.random.default_rng(0))
        b = loaded.forward(g, q.tokens, rng=np.random.default_rng(0))
        np.testing.assert_allclose(a.logits.data, b.logits.data, atol=1e-6)


class TestTraining:
    def test_two_epochs_decrease_loss_and_log_metrics(self, tmp_path):
        ds, _ = generate_dataset(GenConfig(seed=4, num_graphs=10,
                                           questions_per_graph=10))
        cfg = ModelConfig(mask_schedule=(1.0, 1.0, 1.0, 0.3), seed=1,
                          max_epochs=2, batch_size=16, **SMALL)
        model = VQAModel(cfg, ds.vocab, ds.answer_vocab)
        res = train(model, ds, tmp_path)
        assert len(res["history"]) == 2
        assert res["history"][1]["train_loss"] < res["history"][0]["train_loss"]
        assert (tmp_path / "best.ckpt").exists()
        assert (tmp_path / "metrics.jsonl").exists()

    def test_evaluate_accuracy_reports_by_type(self, dataset, model):
        res = evaluate_accuracy(model, dataset.val, dataset.graphs)
        assert 0.0 <= res["accuracy"] <= 1.0
        assert set(res["by_structural_type"]) <= {
            "verify", "query", "choose", "logical", "compare"}
