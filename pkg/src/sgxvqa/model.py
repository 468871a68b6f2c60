"""Question-conditioned masked graph attention VQA model.

Pipeline: transformer question encoding, instruction decoding, scene-graph
encoding, instruction-conditioned GAT layers with a hard top-k node mask in
the final layer, masked global attention pooling, and the answer head.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import nn
from .graphcore import (
    Dataset, EmbeddingTable, QAInstance, SceneGraph, Vocabulary, tokenize,
)
from .imle import EdgeMaskDense, HardTopKMask, TopKConfig, k_for

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class ModelConfig:
    layers: int = 4
    d_x: int = 64
    word_dim: int = 64
    heads: int = 4
    enc_layers: int = 1
    dec_layers: int = 1
    mask_schedule: tuple[float, ...] = (1.0, 1.0, 1.0, 0.15)
    attention: str = "gat-v2"      # or "gat-v1"
    gated_residual: bool = True
    grad_aggregation: str = "sum"  # or "product-rule"
    dropout: float = 0.0
    # deterministic selection while training keeps the mask the answer head
    # sees consistent between training and evaluation; I-MLE still gets its
    # finite-difference gradient without perturbation noise
    topk: TopKConfig = field(default_factory=lambda: TopKConfig(noise="none"))
    # training (small-corpus settings; large corpora want a lower lr, a
    # bigger batch and a longer warmup)
    lr: float = 1e-3
    warmup_start_lr: float = 1e-6
    warmup_epochs: int = 2
    lr_decay: float = 0.98
    weight_decay: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 55
    patience: int = 12
    # first epochs train without the mask so the answering pathway settles
    # before the top-k selector starts gating it
    mask_anneal_epochs: int = 6
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.topk, dict):
            self.topk = TopKConfig(**self.topk)
        self.mask_schedule = tuple(self.mask_schedule)
        if len(self.mask_schedule) != self.layers:
            raise nn.ConfigError(
                f"mask schedule length {len(self.mask_schedule)} != layers {self.layers}")
        if self.attention not in ("gat-v1", "gat-v2"):
            raise nn.ConfigError(f"unknown attention style {self.attention!r}")
        self.topk.k_fraction_per_layer = self.mask_schedule

    def to_json(self) -> dict:
        d = asdict(self)
        d["mask_schedule"] = list(self.mask_schedule)
        d["topk"]["k_fraction_per_layer"] = list(self.topk.k_fraction_per_layer)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def lr_at_epoch(cfg: ModelConfig, epoch: int) -> float:
    """Linear warmup to cfg.lr, then exponential decay per epoch."""
    if epoch < cfg.warmup_epochs:
        frac = (epoch + 1) / cfg.warmup_epochs
        return cfg.warmup_start_lr + frac * (cfg.lr - cfg.warmup_start_lr)
    return cfg.lr * cfg.lr_decay ** (epoch - cfg.warmup_epochs)


@dataclass
class ForwardTrace:
    node_embeddings: list            # per-layer X' (Tensor), index 0 = encoder output
    edge_embeddings: Tensor | None
    instructions: Tensor             # (L, d_x)
    q_global: Tensor
    scores: Tensor | None            # node scores s from the masked layer
    gamma: np.ndarray                # binary node mask
    k: int
    pool_weights: Tensor
    x_g: Tensor
    logits: Tensor

    @property
    def selected(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.gamma)]


def _scatter_edges(edge_emb: Tensor, edges, n: int, d: int) -> Tensor:
    """Dense (n, n, d) edge-feature tensor, rows = destination."""
    dense = np.zeros((n, n, d), dtype=edge_emb.data.dtype)
    for e, (src, dst) in enumerate(edges):
        dense[dst, src] += edge_emb.data[e]

    def bw(g):
        if edge_emb.requires_grad:
            ge = np.stack([g[dst, src] for src, dst in edges]) if edges else \
                np.zeros_like(edge_emb.data)
            edge_emb._accum(ge)

    return Tensor(dense, parents=(edge_emb,), backward=bw)


class VQAModel:
    """Holds parameters and runs the forward pipeline on one instance."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 answer_vocab: Vocabulary, embeddings: EmbeddingTable | None = None):
        self.config = config
        self.vocab = vocab
        self.answer_vocab = answer_vocab
        self.registry = nn.ParameterRegistry()
        self.forward_count = 0
        self._gcache: dict[str, dict] = {}
        rng = np.random.default_rng(config.seed)
        d, wd, L = config.d_x, config.word_dim, config.layers

        if embeddings is None:
            # near unit-norm word vectors with ~1/sqrt(wd) cross-talk, so raw
            # lexical similarity is informative from the first step
            vecs = rng.normal(0.0, 1.0 / np.sqrt(wd), size=(len(vocab), wd))
        else:
            if embeddings.dim != wd:
                raise nn.ConfigError(
                    f"embedding dim {embeddings.dim} != config word_dim {wd}")
            vecs = embeddings.vectors
        self.embed = self.registry.register("embed", vecs)

        reg = self.registry
        self.q_in = nn.Linear(reg, rng, "q_in", wd, d)
        self.encoder = nn.TransformerEncoder(reg, rng, "enc", d, config.heads,
                                             config.enc_layers)
        self.decoder = nn.TransformerDecoder(reg, rng, "dec", d, config.heads,
                                             config.dec_layers, num_queries=L)
        self.q_global_mlp = nn.MLP(reg, rng, "q_global", L * d, d, d)

        self.bbox_mlp = nn.MLP(reg, rng, "bbox", 4, 32, 16)
        self.node_mlp = nn.MLP(reg, rng, "node", wd + 16, d, d)
        self.edge_mlp = nn.MLP(reg, rng, "edge", 3 * wd, d, d)
        # normalized to unit scale so instruction conditioning (which comes out
        # of a layer-normed decoder) does not drown the node identities
        self.node_ln = nn.LayerNorm(reg, "node_ln", d)
        self.edge_ln = nn.LayerNorm(reg, "edge_ln", d)

        self.gat_theta, self.gat_att, self.gat_gate = [], [], []
        for l in range(L):
            self.gat_theta.append(nn.Linear(reg, rng, f"gat{l}.theta", d, d))
            if config.attention == "gat-v2":
                att = {
                    "dst": nn.Linear(reg, rng, f"gat{l}.att_dst", d, d),
                    "src": nn.Linear(reg, rng, f"gat{l}.att_src", d, d),
                    "edge": nn.Linear(reg, rng, f"gat{l}.att_edge", d, d),
                    "a": reg.register(f"gat{l}.att_a", rng.normal(0, 0.1, size=d)),
                }
            else:
                att = {
                    "edge": nn.Linear(reg, rng, f"gat{l}.att_edge", d, d),
                    "a": reg.register(f"gat{l}.att_a", rng.normal(0, 0.1, size=3 * d)),
                }
            self.gat_att.append(att)
            self.gat_gate.append(nn.Linear(reg, rng, f"gat{l}.gate", 2 * d, d))

        # tied answer head: candidates are scored against their own word
        # vectors, so an unseen graph's node name maps onto the matching
        # answer without a dedicated softmax row having to be learned
        self.answer_proj = nn.MLP(reg, rng, "answer", 3 * d + 6, d, wd)
        self.answer_bias = reg.register("answer.bias", np.zeros(len(answer_vocab)))
        # temperatures for the word-overlap paths; raw word-vector
        # similarity of a full match is about 1 at init
        self.copy_gain = reg.register("answer.copy_gain", np.array([4.0]))
        self.match_gain = reg.register("pool.match_gain", np.array([4.0]))
        self.rel_gain = reg.register("answer.rel_gain", np.array([4.0]))
        self.overlap_gain = reg.register("answer.overlap_gain", np.array([4.0]))
        self.coherence_gain = reg.register("answer.coherence_gain", np.array([4.0]))
        self.edge_match_gain = reg.register("pool.edge_match_gain", np.array([2.0]))
        # the selector starts out dominated by lexical overlap; the learned
        # term earns its weight through training
        self.select_mix = reg.register("select.mix", np.array([0.25]))
        # question-gated linear route from the scalar evidence straight to the
        # answer logits; yes/no style answers hang off these scalars and the
        # MLP route alone is too slow to pick that up
        self.feat_gate = nn.MLP(reg, rng, "answer.feat_gate", d, 32, 6)
        self.feat_head = nn.Linear(reg, rng, "answer.feat", 6, len(answer_vocab))
        width = max(1, max(len(tokenize(answer_vocab.token(i)))
                           for i in range(len(answer_vocab))))
        self._ans_ids = np.zeros((len(answer_vocab), width), dtype=np.intp)
        self._ans_mask = np.zeros((len(answer_vocab), width, 1))
        for i in range(len(answer_vocab)):
            for c, t in enumerate(tokenize(answer_vocab.token(i))):
                self._ans_ids[i, c] = vocab.id(t)
                self._ans_mask[i, c, 0] = 1.0

    # -- encoding ---------------------------------------------------------

    def _word_vec_sum(self, tokens) -> Tensor:
        ids = [self.vocab.id(t) for t in tokens]
        return ad.tsum(ad.embedding(self.embed, ids), axis=0)

    def _graph_cache(self, graph: SceneGraph) -> dict:
        """Precomputed index matrices per graph; graphs are immutable."""
        cached = self._gcache.get(graph.graph_id)
        if cached is not None:
            return cached

        def pad_ids(token_lists):
            width = max(1, max((len(t) for t in token_lists), default=1))
            ids = np.zeros((len(token_lists), width), dtype=np.intp)
            mask = np.zeros((len(token_lists), width, 1))
            for r, toks in enumerate(token_lists):
                for c, t in enumerate(toks):
                    ids[r, c] = self.vocab.id(t)
                    mask[r, c, 0] = 1.0
            return ids, mask

        node_tokens = []
        for nd in graph.nodes:
            toks = list(tokenize(nd.name))
            for a in nd.attributes:
                toks.extend(tokenize(a))
            node_tokens.append(toks)
        node_ids, node_mask = pad_ids(node_tokens)
        rel_ids, rel_mask = pad_ids([list(tokenize(e.relation)) for e in graph.edges]) \
            if graph.edges else (None, None)

        n = graph.num_nodes
        support = np.eye(n, dtype=bool)
        inc_src = np.zeros((n, len(graph.edges)))
        inc_dst = np.zeros((n, len(graph.edges)))
        for i, e in enumerate(graph.edges):
            support[e.dst, e.src] = True
            inc_src[e.src, i] = 1.0
            inc_dst[e.dst, i] = 1.0
        cached = {
            "node_ids": node_ids, "node_mask": node_mask,
            "rel_ids": rel_ids, "rel_mask": rel_mask,
            "src": np.array([e.src for e in graph.edges], dtype=np.intp),
            "dst": np.array([e.dst for e in graph.edges], dtype=np.intp),
            "inc_src": inc_src, "inc_dst": inc_dst,
            "bboxes": np.array([nd.bbox for nd in graph.nodes]),
            "support": support,
            "edges": [(e.src, e.dst) for e in graph.edges],
        }
        self._gcache[graph.graph_id] = cached
        return cached

    def encode_question(self, tokens, train=False, rng=None) -> Tensor:
        if not tokens:
            raise nn.ConfigError("empty question")
        ids = [self.vocab.id(t) for t in tokens]
        x = self.q_in(ad.embedding(self.embed, ids))
        x = ad.dropout(x, self.config.dropout, train, rng)
        return self.encoder(x)

    def decode_instructions(self, q_enc: Tensor) -> Tensor:
        return self.decoder(q_enc)

    def global_question_vector(self, instructions: Tensor) -> Tensor:
        return self.q_global_mlp(ad.flatten(instructions))

    def encode_scene_graph(self, graph: SceneGraph) -> tuple[Tensor, Tensor | None, Tensor]:
        """Returns (node embeddings X', edge embeddings X'_e, raw word-sum vectors)."""
        gc = self._graph_cache(graph)
        x_raw = ad.tsum(ad.embedding(self.embed, gc["node_ids"]) * Tensor(gc["node_mask"]),
                        axis=1)
        b = self.bbox_mlp(Tensor(gc["bboxes"]))
        x_nodes = self.node_ln(self.node_mlp(ad.concat([x_raw, b], axis=1)))

        if graph.edges:
            rel_raw = ad.tsum(ad.embedding(self.embed, gc["rel_ids"]) * Tensor(gc["rel_mask"]),
                              axis=1)
            src_raw = x_raw[gc["src"]]
            dst_raw = x_raw[gc["dst"]]
            x_edges = self.edge_ln(self.edge_mlp(ad.concat([src_raw, rel_raw, dst_raw], axis=1)))
        else:
            x_edges = None
        return x_nodes, x_edges, x_raw

    def raw_word_sums(self, graph: SceneGraph) -> tuple[np.ndarray, np.ndarray | None]:
        """Per-node and per-edge raw word-sum vectors (the lexical channel)."""
        gc = self._graph_cache(graph)
        x_raw = (self.embed.data[gc["node_ids"]] * gc["node_mask"]).sum(axis=1)
        rel_raw = None
        if graph.edges:
            rel_raw = (self.embed.data[gc["rel_ids"]] * gc["rel_mask"]).sum(axis=1)
        return x_raw, rel_raw

    # -- GAT --------------------------------------------------------------

    def gat_attention(self, x: Tensor, e_dense: Tensor | None, support: np.ndarray,
                      layer: int) -> Tensor:
        """Per-destination attention over incoming neighbors plus self."""
        n, d = x.shape
        att = self.gat_att[layer]
        if self.config.attention == "gat-v2":
            term = ad.reshape(att["dst"](x), (n, 1, d)) + ad.reshape(att["src"](x), (1, n, d))
            if e_dense is not None:
                term = term + nn_affine_nd(e_dense, att["edge"])
            logits = ad.matmul(ad.leaky_relu(term), att["a"]) * (1.0 / np.sqrt(d))
        else:
            h = self.gat_theta[layer](x)
            hd = ad.reshape(h, (n, 1, d)) + Tensor(np.zeros((n, n, d), dtype=h.data.dtype))
            hs = ad.reshape(h, (1, n, d)) + Tensor(np.zeros((n, n, d), dtype=h.data.dtype))
            ee = nn_affine_nd(e_dense, att["edge"]) if e_dense is not None \
                else Tensor(np.zeros((n, n, d), dtype=h.data.dtype))
            cat = ad.concat([hd, hs, ee], axis=2)
            logits = ad.leaky_relu(ad.matmul(cat, att["a"])) * (1.0 / np.sqrt(d))
        return ad.masked_softmax(logits, support, axis=-1)

    def mgat_layer(self, x: Tensor, alpha: Tensor, gamma_dense: Tensor | None,
                   layer: int) -> Tensor:
        """Masked message passing with the gated residual."""
        h = self.gat_theta[layer](x)
        weights = alpha if gamma_dense is None else alpha * gamma_dense
        f = ad.matmul(weights, h)
        if not self.config.gated_residual:
            return f + x
        g = ad.sigmoid(self.gat_gate[layer](ad.concat([f, x], axis=1)))
        return g * f + (1.0 - g) * x

    def score_nodes(self, x: Tensor, instruction: Tensor,
                    lexical: Tensor | None = None) -> Tensor:
        """s_i = sigmoid(<x_i, I_l> / d_x [+ lexical overlap]).

        1/d_x rather than 1/sqrt(d_x): post-GAT embeddings are O(sqrt(d_x))
        long and the steeper scale saturates the sigmoid, which starves the
        selector of gradient.
        """
        logits = ad.matmul(x, instruction) * (1.0 / self.config.d_x) * self.select_mix
        if lexical is not None:
            logits = logits + lexical
        return ad.sigmoid(logits)

    # -- full forward -----------------------------------------------------

    def forward(self, graph: SceneGraph, tokens, train: bool = False,
                rng: np.random.Generator | None = None,
                node_embed_override: np.ndarray | Tensor | None = None,
                edge_embed_override: np.ndarray | Tensor | None = None,
                mask_override: np.ndarray | None = None,
                final_layer_node_scale: Tensor | None = None,
                mask_schedule: tuple[float, ...] | None = None,
                final_output_offset: np.ndarray | None = None,
                raw_embed_override: np.ndarray | None = None,
                rel_raw_override: np.ndarray | None = None) -> ForwardTrace:
        self.forward_count += 1
        cfg = self.config
        if rng is None:
            rng = np.random.default_rng(0)
        schedule = cfg.mask_schedule if mask_schedule is None else tuple(mask_schedule)
        n = graph.num_nodes
        gc = self._graph_cache(graph)
        edges = gc["edges"]

        q_enc = self.encode_question(tokens, train=train, rng=rng)
        instructions = self.decode_instructions(q_enc)
        q_global = self.global_question_vector(instructions)

        if node_embed_override is not None:
            x = node_embed_override if isinstance(node_embed_override, Tensor) \
                else Tensor(node_embed_override)
            if edge_embed_override is not None:
                x_e = edge_embed_override if isinstance(edge_embed_override, Tensor) \
                    else Tensor(edge_embed_override)
            elif edges:
                _, x_e, _ = self.encode_scene_graph(graph)
            else:
                x_e = None
        else:
            x, x_e, _ = self.encode_scene_graph(graph)
            if edge_embed_override is not None:
                x_e = edge_embed_override if isinstance(edge_embed_override, Tensor) \
                    else Tensor(edge_embed_override)

        e_dense = _scatter_edges(x_e, edges, n, cfg.d_x) if x_e is not None and edges else None
        support = gc["support"]

        if raw_embed_override is not None:
            x_raw = Tensor(raw_embed_override)
        else:
            x_raw = ad.tsum(ad.embedding(self.embed, gc["node_ids"]) * Tensor(gc["node_mask"]),
                            axis=1)
        q_raw = self._word_vec_sum(tokens)
        lex_n = ad.matmul(x_raw, q_raw)
        rel_raw = None
        if edges:
            if rel_raw_override is not None:
                rel_raw = Tensor(rel_raw_override)
            else:
                rel_raw = ad.tsum(
                    ad.embedding(self.embed, gc["rel_ids"]) * Tensor(gc["rel_mask"]),
                    axis=1)
            lex_e = ad.matmul(rel_raw, q_raw)
        # question-word overlap per node, plus one propagation step along
        # edges: a node is also relevant when an incident edge's relation
        # words match the question and the far endpoint matches too ("what is
        # on the table" reaches the thing on the table); shared with the
        # selector and the pooling so relevance needs no training to emerge
        lexical = lex_n * self.match_gain
        if edges:
            spread = ad.matmul(Tensor(gc["inc_src"]), lex_e * lex_n[gc["dst"]]) \
                + ad.matmul(Tensor(gc["inc_dst"]), lex_e * lex_n[gc["src"]])
            lexical = lexical + spread * self.edge_match_gain

        gamma_t: Tensor | None = None
        scores_t: Tensor | None = None
        k = n
        layer_outputs = [x]
        for l in range(cfg.layers):
            if l == cfg.layers - 1 and final_layer_node_scale is not None:
                scale = final_layer_node_scale
                if scale.ndim == 1:
                    scale = ad.reshape(scale, (n, 1))
                x = x * scale
            frac = schedule[l]
            gamma_dense = None
            if frac < 1.0:
                inst_l = instructions[l]
                scores_t = self.score_nodes(x, inst_l, lexical=lexical)
                k = k_for(frac, n)
                if mask_override is not None:
                    gamma_t = Tensor(np.asarray(mask_override, dtype=x.data.dtype))
                else:
                    # exploration noise only while training; MAP mask at inference
                    topk_cfg = cfg.topk if train else replace(cfg.topk, noise="none")
                    gamma_t, _ = HardTopKMask.apply(scores_t, topk_cfg, rng, k=k)
                if edges:
                    gamma_dense = EdgeMaskDense.apply(gamma_t, edges, n,
                                                      mode=cfg.grad_aggregation)
            x_cond = x + ad.reshape(instructions[l], (1, -1))
            alpha = self.gat_attention(x_cond, e_dense, support, l)
            x = self.mgat_layer(x_cond, alpha, gamma_dense, l)
            x = ad.dropout(x, cfg.dropout, train, rng)
            layer_outputs.append(x)

        if final_output_offset is not None:
            x = x + Tensor(np.asarray(final_output_offset, dtype=x.data.dtype))

        if gamma_t is None:
            gamma = np.ones(n)
            x_masked = x
        else:
            gamma = gamma_t.data.astype(np.float64)
            x_masked = x * ad.reshape(gamma_t, (n, 1))

        raw_masked = x_raw if gamma_t is None else x_raw * ad.reshape(gamma_t, (n, 1))
        lex_n_masked = ad.matmul(raw_masked, q_raw)
        match_logits = lex_n_masked * self.match_gain
        if edges:
            lex_e_m = lex_e
            if gamma_t is not None:
                lex_e_m = lex_e * gamma_t[gc["src"]] * gamma_t[gc["dst"]]
            spread_m = ad.matmul(Tensor(gc["inc_src"]), lex_e_m * lex_n_masked[gc["dst"]]) \
                + ad.matmul(Tensor(gc["inc_dst"]), lex_e_m * lex_n_masked[gc["src"]])
            match_logits = match_logits + spread_m * self.edge_match_gain

        # plain softmax over gamma-zeroed rows rather than a support-restricted
        # one: masked rows contribute logit exactly 0 and value 0, so pooling
        # cannot read them, yet d pool / d gamma stays nonzero for excluded
        # nodes, which is the counterfactual signal the top-k estimator needs;
        # the query mixes a learned bilinear term with the same lexical
        # relevance the selector uses, so attention lands on the asked-about
        # node (or its relation partner) before training
        pool_logits = ad.matmul(x_masked, q_global) * (1.0 / np.sqrt(cfg.d_x)) \
            + match_logits
        pool_w = ad.softmax(pool_logits, axis=-1)
        x_g = ad.matmul(pool_w, x_masked)

        # copy path: answers are also scored against the attended nodes' raw
        # word sums, so naming an attended object needs no learned mapping
        r_g = ad.matmul(pool_w, raw_masked)

        # relation copy: edges whose two endpoints are both attended lend
        # their relation words to the answer scores ("left of" answers which
        # side questions); a masked endpoint silences the edge
        rel_g = None
        if edges:
            we = pool_w[gc["src"]] * pool_w[gc["dst"]]
            if gamma_t is not None:
                we = we * gamma_t[gc["src"]] * gamma_t[gc["dst"]]
            rel_g = ad.matmul(we, rel_raw)

        # scalar evidence the softmax pooling normalizes away: how strongly
        # anything matched (existence), how many question words the attended
        # nodes and edges carry (attribute / relation verification), and how
        # much the attended nodes' words reinforce each other (comparison)
        m = float(match_logits.data.max())
        # masked rows sit at logit exactly 0; subtract that known baseline so
        # the evidence does not drift with how many nodes were masked out
        zero_rows = 0.0 if gamma_t is None else float(n - k)
        exist = ad.log(ad.tsum(ad.exp(match_logits - m))
                       - (zero_rows * np.exp(-m) - 1e-6)) + m
        overlap = ad.matmul(r_g, q_raw) * self.overlap_gain
        coherence = ad.matmul(r_g, r_g) * self.coherence_gain
        rel_overlap = ad.matmul(rel_g, q_raw) * self.rel_gain if rel_g is not None \
            else Tensor(np.zeros(1))
        k_frac = Tensor(np.array([k / n if gamma_t is not None else 1.0]))
        feats = ad.concat([ad.reshape(t, (1,)) for t in
                           (exist, overlap, coherence, rel_overlap,
                            ad.tsum(pool_w * pool_w), k_frac)], axis=0)

        h = self.answer_proj(ad.concat([x_g, q_global, x_g * q_global, feats], axis=0))
        answer_vecs = ad.tsum(
            ad.embedding(self.embed, self._ans_ids) * Tensor(self._ans_mask),
            axis=1)
        gates = ad.sigmoid(self.feat_gate(q_global))
        logits = ad.matmul(answer_vecs, h) * (1.0 / np.sqrt(cfg.word_dim)) \
            + ad.matmul(answer_vecs, r_g) * self.copy_gain \
            + self.feat_head(feats * gates) + self.answer_bias
        if rel_g is not None:
            logits = logits + ad.matmul(answer_vecs, rel_g) * self.rel_gain

        return ForwardTrace(
            node_embeddings=layer_outputs,
            edge_embeddings=x_e,
            instructions=instructions,
            q_global=q_global,
            scores=scores_t,
            gamma=gamma,
            k=k if gamma_t is not None else n,
            pool_weights=pool_w,
            x_g=x_g,
            logits=logits,
        )

    def loss(self, trace: ForwardTrace, answer: str) -> Tensor:
        return ad.cross_entropy(trace.logits, self.answer_vocab.id(answer))

    def predict(self, trace: ForwardTrace) -> str:
        return self.answer_vocab.token(int(np.argmax(trace.logits.data)))

    # -- persistence ------------------------------------------------------

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.registry.state())

    def load(self, path) -> None:
        self.registry.load_state(nn.load_checkpoint(path))


def save_model_meta(model: VQAModel, out_dir) -> str:
    """Write config + vocabularies next to the checkpoint so a model directory
    is self-contained."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    meta = {
        "config": model.config.to_json(),
        "vocab": model.vocab.to_json(),
        "answer_vocab": model.answer_vocab.to_json(),
    }
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2)
    return path


def load_model(model_dir, checkpoint: str = "best.ckpt") -> VQAModel:
    with open(os.path.join(model_dir, "config.json")) as fh:
        meta = json.load(fh)
    model = VQAModel(ModelConfig.from_json(meta["config"]),
                     Vocabulary.from_json(meta["vocab"]),
                     Vocabulary.from_json(meta["answer_vocab"]))
    model.load(os.path.join(model_dir, checkpoint))
    return model


def nn_affine_nd(x: Tensor, linear: nn.Linear) -> Tensor:
    """Linear layer applied over the last axis of an ND tensor."""
    return ad.matmul(x, linear.W) + linear.b


# -- training -------------------------------------------------------------

def evaluate_accuracy(model: VQAModel, instances, graphs,
                      rng: np.random.Generator | None = None) -> dict:
    """Answer accuracy overall and broken down by question type."""
    if rng is None:
        rng = np.random.default_rng(0)
    overall = []
    by_struct: dict[str, list] = {}
    by_sem: dict[str, list] = {}
    for q in instances:
        trace = model.forward(graphs[q.graph_id], q.tokens, rng=rng)
        hit = float(model.predict(trace) == q.answer)
        overall.append(hit)
        by_struct.setdefault(q.structural_type, []).append(hit)
        by_sem.setdefault(q.semantic_type, []).append(hit)
    return {
        "accuracy": float(np.mean(overall)) if overall else 0.0,
        "n": len(overall),
        "by_structural_type": {k: float(np.mean(v)) for k, v in sorted(by_struct.items())},
        "by_semantic_type": {k: float(np.mean(v)) for k, v in sorted(by_sem.items())},
    }


def mean_loss(model: VQAModel, instances, graphs, rng) -> float:
    total = 0.0
    for q in instances:
        trace = model.forward(graphs[q.graph_id], q.tokens, rng=rng)
        total += model.loss(trace, q.answer).item()
    return total / max(1, len(instances))


def train(model: VQAModel, dataset: Dataset, out_dir,
          log_every: int = 1, target_val_acc: float | None = None) -> dict:
    """AdamW training with warmup + exponential decay and early stopping.

    Writes metrics.jsonl and best.ckpt under out_dir; returns the final
    metrics summary.
    """
    cfg = model.config
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    opt = nn.AdamW(model.registry, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    graphs = dataset.graphs
    best_val = np.inf
    best_epoch = -1
    history = []

    with open(metrics_path, "w") as mfh:
        for epoch in range(cfg.max_epochs):
            opt.lr = lr_at_epoch(cfg, epoch)
            anneal = (1.0,) * cfg.layers if epoch < cfg.mask_anneal_epochs else None
            order = rng.permutation(len(dataset.train))
            epoch_loss = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [dataset.train[i] for i in order[start:start + cfg.batch_size]]
                model.registry.zero_grad()
                for q in batch:
                    # skip per-op finite checks in the hot loop; the loss
                    # itself is still validated right below
                    with ad.no_finite_checks():
                        trace = model.forward(graphs[q.graph_id], q.tokens,
                                              train=True, rng=rng,
                                              mask_schedule=anneal)
                        loss = model.loss(trace, q.answer) * (1.0 / len(batch))
                    if not np.isfinite(loss.item()):
                        raise TrainingDiverged(
                            f"loss diverged at epoch {epoch}",
                            checkpoint_path=ckpt_path if best_epoch >= 0 else None)
                    with ad.no_finite_checks():
                        loss.backward()
                    epoch_loss += loss.item() * len(batch)
                opt.step()
            train_loss = epoch_loss / max(1, len(order))

            val_losses, val_hits = [], []
            for q in dataset.val:
                trace = model.forward(graphs[q.graph_id], q.tokens, rng=rng)
                val_losses.append(model.loss(trace, q.answer).item())
                val_hits.append(float(model.predict(trace) == q.answer))
            val_loss = float(np.mean(val_losses))
            val_acc = float(np.mean(val_hits))
            rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                   "val_acc": val_acc, "lr": opt.lr}
            history.append(rec)
            mfh.write(json.dumps(rec) + "\n")
            mfh.flush()
            if epoch % log_every == 0:
                log.info("epoch %d: train %.4f val %.4f acc %.3f lr %.2e",
                         epoch, train_loss, val_loss, val_acc, opt.lr)

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                model.save(ckpt_path)
            elif epoch - best_epoch >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
            if target_val_acc is not None and val_acc >= target_val_acc:
                model.save(ckpt_path)
                best_epoch = epoch
                break

    model.load(ckpt_path)
    return {"history": history, "best_epoch": best_epoch,
            "checkpoint": ckpt_path, "metrics_log": metrics_path}
