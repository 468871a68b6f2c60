"""Differentiable discrete top-k node selection.

Forward: perturb-and-MAP (top-k of noised scores). Backward: implicit
maximum-likelihood estimation, i.e. the difference of two MAP solves at
finite target strength lambda.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

NOISE_KINDS = ("sum_of_gamma", "gumbel", "none")


class ImleConfigError(ValueError):
    pass


@dataclass
class TopKConfig:
    k_fraction_per_layer: tuple[float, ...] = (1.0, 1.0, 1.0, 0.15)
    lam: float = 10.0
    noise: str = "sum_of_gamma"
    # scores live in (0, 1); exploration noise must not drown their ordering
    tau: float = 0.05
    samples: int = 1
    sog_iterations: int = 10

    def __post_init__(self):
        for f in self.k_fraction_per_layer:
            if not 0 < f <= 1:
                raise ImleConfigError(f"k_fraction {f} outside (0, 1]")
        if self.lam <= 0:
            raise ImleConfigError("lambda must be positive")
        if self.tau <= 0:
            raise ImleConfigError("tau must be positive")
        if self.noise not in NOISE_KINDS:
            raise ImleConfigError(f"unknown noise kind {self.noise!r}")


@dataclass
class MaskSample:
    gamma: np.ndarray           # binary, exactly k ones
    perturbed_scores: np.ndarray
    k: int
    noise: np.ndarray = field(default_factory=lambda: np.zeros(0))


def k_for(fraction: float, n: int) -> int:
    """k = max(1, round(fraction * n)); a floor of one keeps explanations non-empty."""
    return max(1, int(np.rint(fraction * n)))


def topk_map(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary indicator of the k largest entries; ties break toward lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ImleConfigError(f"k={k} out of range for n={n}")
    # stable sort on (-score, index) realizes the lower-index tie rule
    order = np.argsort(-scores, kind="stable")
    out = np.zeros(n)
    out[order[:k]] = 1.0
    return out


def sample_noise(n: int, k: int, config: TopKConfig, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. perturbations per the configured family."""
    if config.noise == "none":
        return np.zeros(n)
    if config.noise == "gumbel":
        u = rng.random(n)
        return -config.tau * np.log(-np.log(u))
    # Sum-of-Gamma: sum_{i=1..m} Gamma(1/k, k/i), centered by log m; its mean
    # matches the Gumbel mean and its k-sums approximate Gumbel perturbations.
    m = config.sog_iterations
    s = np.zeros(n)
    for i in range(1, m + 1):
        s += rng.gamma(1.0 / k, k / i, size=n)
    return config.tau * (s - np.log(m))


def imle_forward(scores: np.ndarray, config: TopKConfig,
                 rng: np.random.Generator, k: int | None = None) -> MaskSample:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ImleConfigError("scores must be finite")
    n = scores.shape[0]
    if k is None:
        k = k_for(config.k_fraction_per_layer[-1], n)
    eps = sample_noise(n, k, config, rng)
    perturbed = scores + eps
    return MaskSample(gamma=topk_map(perturbed, k), perturbed_scores=perturbed,
                      k=k, noise=eps)


def imle_backward(sample: MaskSample, upstream: np.ndarray,
                  lam: float) -> np.ndarray:
    """d Loss / d scores = (MAP(s~) - MAP(s~ - lam * upstream)) / lam."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != sample.perturbed_scores.shape:
        raise ImleConfigError(
            f"upstream shape {upstream.shape} != scores shape {sample.perturbed_scores.shape}")
    target = topk_map(sample.perturbed_scores - lam * upstream, sample.k)
    return (sample.gamma - target) / lam


def node_grad_aggregate(edge_grads, edges, n: int, gamma: np.ndarray,
                        mode: str = "sum") -> np.ndarray:
    """Collapse per-edge mask gradients to per-node mask gradients.

    sum: each endpoint receives the full edge gradient. product-rule: the
    chain rule through gamma_ij = gamma_i * gamma_j.
    """
    if mode not in ("sum", "product-rule"):
        raise ImleConfigError(f"unknown aggregation mode {mode!r}")
    out = np.zeros(n)
    for g, (src, dst) in zip(edge_grads, edges):
        if mode == "sum":
            out[src] += g
            out[dst] += g
        else:
            out[src] += g * gamma[dst]
            out[dst] += g * gamma[src]
    return out


class HardTopKMask:
    """Autodiff bridge: scores Tensor -> binary mask Tensor with I-MLE backward."""

    @staticmethod
    def apply(scores: Tensor, config: TopKConfig, rng: np.random.Generator,
              k: int | None = None) -> tuple[Tensor, MaskSample]:
        sample = imle_forward(scores.data, config, rng, k=k)

        def bw(g):
            if scores.requires_grad:
                scores._accum(imle_backward(sample, g, config.lam).astype(scores.data.dtype))

        gamma = Tensor(sample.gamma.astype(scores.data.dtype),
                       parents=(scores,), backward=bw)
        return gamma, sample


def edge_mask_from_node_mask(gamma: np.ndarray, edges) -> np.ndarray:
    """gamma_ij = 1 iff both endpoints are selected."""
    gamma = np.asarray(gamma)
    return np.array([gamma[src] * gamma[dst] for src, dst in edges])


class EdgeMaskDense:
    """Dense (n, n) message mask: diag 1, gamma_i * gamma_j at edge (src->dst)
    positions (row = destination). Backward aggregates edge gradients to node
    gradients per the configured mode."""

    @staticmethod
    def apply(gamma: Tensor, edges, n: int, mode: str = "sum") -> Tensor:
        g = gamma.data
        dense = np.eye(n, dtype=g.dtype)
        for src, dst in edges:
            dense[dst, src] = g[src] * g[dst]

        def bw(grad):
            if gamma.requires_grad:
                edge_grads = [grad[dst, src] for src, dst in edges]
                gamma._accum(
                    node_grad_aggregate(edge_grads, edges, n, g, mode).astype(g.dtype))

        return Tensor(dense, parents=(gamma,), backward=bw)
