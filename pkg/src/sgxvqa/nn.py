"""Layers, parameter registry, AdamW, and checkpoint serialization."""
from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


class ParameterRegistry:
    """Named parameter store; each parameter registered exactly once."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(data), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self):
        return len(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in self._params.items():
            if state[k].shape != p.data.shape:
                raise ConfigError(f"parameter {k}: shape {state[k].shape} != {p.data.shape}")
            p.data = state[k].astype(p.data.dtype)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, reg: ParameterRegistry, rng, name: str, d_in: int, d_out: int):
        self.W = reg.register(f"{name}.W", xavier_uniform(rng, d_in, d_out))
        self.b = reg.register(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.W, self.b)


class MLP:
    """Two-layer perceptron with ReLU."""

    def __init__(self, reg, rng, name: str, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(reg, rng, f"{name}.fc1", d_in, d_hidden)
        self.fc2 = Linear(reg, rng, f"{name}.fc2", d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class LayerNorm:
    def __init__(self, reg, name: str, d: int):
        self.g = reg.register(f"{name}.g", np.ones(d))
        self.b = reg.register(f"{name}.b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)


class MultiHeadAttention:
    """Scaled dot-product attention; model dim must divide into heads."""

    def __init__(self, reg, rng, name: str, d_model: int, heads: int):
        if d_model % heads != 0:
            raise ConfigError(f"{name}: d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(reg, rng, f"{name}.wq", d_model, d_model)
        self.wk = Linear(reg, rng, f"{name}.wk", d_model, d_model)
        self.wv = Linear(reg, rng, f"{name}.wv", d_model, d_model)
        self.wo = Linear(reg, rng, f"{name}.wo", d_model, d_model)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        nq, d = q.shape
        nk = k.shape[0]
        h, dh = self.heads, self.d_head

        def split(t, n):
            return ad.swapaxes(ad.reshape(t, (n, h, dh)), 0, 1)  # (h, n, dh)

        Q = split(self.wq(q), nq)
        K = split(self.wk(k), nk)
        V = split(self.wv(v), nk)
        scores = ad.matmul(Q, ad.swapaxes(K, 1, 2)) * (1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, V)                       # (h, nq, dh)
        merged = ad.reshape(ad.swapaxes(ctx, 0, 1), (nq, d))
        return self.wo(merged)


_POS_CACHE: dict[tuple, np.ndarray] = {}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    cached = _POS_CACHE.get((n, d))
    if cached is not None:
        return cached
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.zeros((n, d))
    enc[:, 0::2] = np.sin(angle[:, 0::2])
    enc[:, 1::2] = np.cos(angle[:, 1::2])
    _POS_CACHE[(n, d)] = enc
    return enc


class EncoderBlock:
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, reg, rng, name, d_model, heads, d_ff):
        self.ln1 = LayerNorm(reg, f"{name}.ln1", d_model)
        self.attn = MultiHeadAttention(reg, rng, f"{name}.attn", d_model, heads)
        self.ln2 = LayerNorm(reg, f"{name}.ln2", d_model)
        self.ff = MLP(reg, rng, f"{name}.ff", d_model, d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.ff(self.ln2(x))


class DecoderBlock:
    """Pre-norm block over learned query slots with cross-attention."""

    def __init__(self, reg, rng, name, d_model, heads, d_ff):
        self.ln1 = LayerNorm(reg, f"{name}.ln1", d_model)
        self.self_attn = MultiHeadAttention(reg, rng, f"{name}.self", d_model, heads)
        self.ln2 = LayerNorm(reg, f"{name}.ln2", d_model)
        self.cross_attn = MultiHeadAttention(reg, rng, f"{name}.cross", d_model, heads)
        self.ln3 = LayerNorm(reg, f"{name}.ln3", d_model)
        self.ff = MLP(reg, rng, f"{name}.ff", d_model, d_ff, d_model)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h, h)
        h = self.ln2(x)
        x = x + self.cross_attn(h, memory, memory)
        return x + self.ff(self.ln3(x))


class TransformerEncoder:
    def __init__(self, reg, rng, name, d_model, heads, layers, d_ff=None):
        d_ff = d_ff or 2 * d_model
        self.blocks = [EncoderBlock(reg, rng, f"{name}.block{i}", d_model, heads, d_ff)
                       for i in range(layers)]
        self.ln_out = LayerNorm(reg, f"{name}.ln_out", d_model)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] == 0:
            raise ConfigError("transformer_encode: empty sequence")
        x = x + Tensor(sinusoidal_positions(x.shape[0], x.shape[1]))
        for blk in self.blocks:
            x = blk(x)
        return self.ln_out(x)


class TransformerDecoder:
    """Decodes the encoded question into a fixed number of instruction rows."""

    def __init__(self, reg, rng, name, d_model, heads, layers, num_queries, d_ff=None):
        d_ff = d_ff or 2 * d_model
        self.queries = reg.register(
            f"{name}.queries", rng.normal(0.0, 0.02, size=(num_queries, d_model)))
        self.blocks = [DecoderBlock(reg, rng, f"{name}.block{i}", d_model, heads, d_ff)
                       for i in range(layers)]
        self.ln_out = LayerNorm(reg, f"{name}.ln_out", d_model)

    def __call__(self, memory: Tensor) -> Tensor:
        x = self.queries
        for blk in self.blocks:
            x = blk(x, memory)
        return self.ln_out(x)


# -- optimizer ------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay."""

    def __init__(self, registry: ParameterRegistry, lr=1e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=1e-5):
        self.registry = registry
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in registry.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in registry.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for name, p in self.registry.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise ad.NumericsError(f"NaN gradient in parameter {name}")
            g = g.astype(np.float64)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t)
            vhat = self.v[name] / (1 - b2 ** t)
            new = p.data.astype(np.float64)
            new -= self.lr * self.weight_decay * new
            new -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data = new.astype(p.data.dtype)

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, st: dict) -> None:
        self.step_count = st["step"]
        self.m = {k: v.copy() for k, v in st["m"].items()}
        self.v = {k: v.copy() for k, v in st["v"].items()}


# -- checkpoint format ----------------------------------------------------

_MAGIC = b"SGXVQACK"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Versioned header + named little-endian float64 payloads."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            out[name] = arr.copy()
    return out
