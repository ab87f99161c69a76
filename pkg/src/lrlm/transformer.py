"""Decoder-only transformer with hand-written backward, pluggable linear
backends (dense / low-rank / LoRA / quantized / alpha-blend), recompute
policies, and KV-cached greedy decoding.

Layout conventions: activations are (batch, seq, dim); a weight is stored
(fan_out, fan_in) and applied as x @ W.T. Per-head views reshape dim into
(heads, head_dim) contiguously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .quant import QuantizedMatrix, qmatmul, qmatmul_t, quantize_rows

__all__ = [
    "ModelConfig",
    "LayerSpec",
    "ModelError",
    "Param",
    "DenseLinear",
    "LowRankLinear",
    "LoraLinear",
    "BlendLinear",
    "QuantizedLinear",
    "RecomputePolicy",
    "STORE_ALL",
    "PER_LAYER",
    "selective",
    "DecoderTape",
    "DecoderModel",
    "KvCache",
    "MATRIX_NAMES",
    "softmax",
    "rmsnorm",
    "rope_apply",
    "attention",
    "ffn_forward",
    "cross_entropy_loss",
    "cross_entropy_grad",
    "build_model",
    "model_forward",
    "model_backward",
    "kv_decode_step",
    "greedy_decode",
    "quantize_model",
]

RMSNORM_EPS = 1e-5
INIT_STD = 0.02

MATRIX_NAMES = ("wq", "wk", "wv", "wo", "wu", "wg", "wd", "we", "wh")
ATTENTION_MATRICES = ("wq", "wk", "wv", "wo")
FFN_MATRICES = ("wu", "wg", "wd")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    dim: int
    heads: int
    layers: int
    ffn_dim: int
    max_seq: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab", "dim", "heads", "ffn_dim", "max_seq"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.layers < 0:  # 0 layers allowed for degenerate counting configs
            raise ModelError("layers must be >= 0")
        if self.dim % self.heads:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ModelError(f"head_dim {self.head_dim} must be even for rotary embedding")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "dim": self.dim,
            "heads": self.heads,
            "layers": self.layers,
            "ffn_dim": self.ffn_dim,
            "max_seq": self.max_seq,
            "rope_base": self.rope_base,
        }


@dataclass(frozen=True)
class LayerSpec:
    """Implementation choice for one named weight matrix."""

    kind: str = "dense"  # dense | lowrank | lora | quantized | blend
    r: int = 0
    bits: int = 8
    start_alpha: float = 1.0
    end_step: int = 1

    def __post_init__(self):
        if self.kind not in ("dense", "lowrank", "lora", "quantized", "blend"):
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("lowrank", "lora", "blend") and self.r < 1:
            raise ModelError(f"{self.kind} spec needs r >= 1")
        if self.kind == "quantized" and self.bits not in (4, 8):
            raise ModelError("quantized spec needs bits in {4, 8}")
        if self.kind == "blend" and not 0.0 <= self.start_alpha <= 1.0:
            raise ModelError("blend start_alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("lowrank", "lora", "blend"):
            d["r"] = self.r
        if self.kind == "quantized":
            d["bits"] = self.bits
        if self.kind == "blend":
            d["start_alpha"] = self.start_alpha
            d["end_step"] = self.end_step
        return d

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(**d)


class Param:
    __slots__ = ("name", "data", "trainable")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True):
        self.name = name
        self.data = data
        self.trainable = trainable

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape}, trainable={self.trainable})"


def _accumulate(grads: dict, param: Param, g: np.ndarray):
    if not param.trainable:
        return
    if param.name in grads:
        grads[param.name] += g
    else:
        grads[param.name] = g


def _flat2(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matmul with float64 accumulation, result in the promoted input dtype."""
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(np.result_type(a.dtype, b.dtype), copy=False)


# ---------------------------------------------------------------------------
# Linear backends
# ---------------------------------------------------------------------------


class DenseLinear:
    kind = "dense"

    def __init__(self, name: str, weight: np.ndarray, trainable: bool = True):
        self.name = name
        self.weight = Param(name + ".weight", weight, trainable)

    @property
    def fan_out(self):
        return self.weight.data.shape[0]

    @property
    def fan_in(self):
        return self.weight.data.shape[1]

    def params(self):
        return [self.weight]

    def forward(self, x, step: int = 0):
        return _mm(x, self.weight.data.T)

    def backward(self, x, dy, grads, step: int = 0):
        _accumulate(grads, self.weight, _mm(_flat2(dy).T, _flat2(x)))
        return _mm(dy, self.weight.data)

    def astype(self, dtype):
        return DenseLinear(self.name, self.weight.data.astype(dtype), self.weight.trainable)


class LowRankLinear:
    """Two narrow layers: y = up @ (down @ x); never materializes up @ down."""

    kind = "lowrank"

    def __init__(self, name: str, down: np.ndarray, up: np.ndarray, trainable: bool = True):
        if down.shape[0] != up.shape[1]:
            raise ModelError(f"{name}: rank mismatch {down.shape} vs {up.shape}")
        self.name = name
        self.down = Param(name + ".down", down, trainable)
        self.up = Param(name + ".up", up, trainable)

    @property
    def rank(self):
        return self.down.data.shape[0]

    @property
    def fan_out(self):
        return self.up.data.shape[0]

    @property
    def fan_in(self):
        return self.down.data.shape[1]

    def params(self):
        return [self.down, self.up]

    def forward(self, x, step: int = 0):
        return _mm(_mm(x, self.down.data.T), self.up.data.T)

    def backward(self, x, dy, grads, step: int = 0):
        hidden = _mm(x, self.down.data.T)
        _accumulate(grads, self.up, _mm(_flat2(dy).T, _flat2(hidden)))
        dh = _mm(dy, self.up.data)
        _accumulate(grads, self.down, _mm(_flat2(dh).T, _flat2(x)))
        return _mm(dh, self.down.data)

    def astype(self, dtype):
        return LowRankLinear(
            self.name, self.down.data.astype(dtype), self.up.data.astype(dtype), self.down.trainable
        )


class QuantizedLinear:
    """Frozen quantized weight; forward/backward never dequantize the full grid."""

    kind = "quantized"

    def __init__(self, name: str, q: QuantizedMatrix):
        self.name = name
        self.q = q

    @property
    def fan_out(self):
        return self.q.rows

    @property
    def fan_in(self):
        return self.q.cols

    def params(self):
        return []

    def forward(self, x, step: int = 0):
        return qmatmul(self.q, x).astype(x.dtype, copy=False)

    def backward(self, x, dy, grads, step: int = 0):
        return qmatmul_t(self.q, dy).astype(dy.dtype, copy=False)

    def astype(self, dtype):
        return self


class LoraLinear:
    """Frozen base plus trainable low-rank delta: y = base(x) + up @ (down @ x)."""

    kind = "lora"

    def __init__(self, name: str, base, down: np.ndarray, up: np.ndarray):
        self.name = name
        self.base = base  # DenseLinear (frozen) or QuantizedLinear
        self.down = Param(name + ".down", down, True)
        self.up = Param(name + ".up", up, True)
        self.merged = False
        self._merged_weight = None

    @property
    def rank(self):
        return self.down.data.shape[0]

    @property
    def fan_out(self):
        return self.up.data.shape[0]

    @property
    def fan_in(self):
        return self.down.data.shape[1]

    def params(self):
        return self.base.params() + [self.down, self.up]

    def forward(self, x, step: int = 0):
        if self.merged:
            return _mm(x, self._merged_weight.T)
        y = self.base.forward(x, step)
        return y + _mm(_mm(x, self.down.data.T), self.up.data.T)

    def backward(self, x, dy, grads, step: int = 0):
        if self.merged:
            raise ModelError(f"{self.name}: merged adapter is inference-only")
        hidden = _mm(x, self.down.data.T)
        _accumulate(grads, self.up, _mm(_flat2(dy).T, _flat2(hidden)))
        dh = _mm(dy, self.up.data)
        _accumulate(grads, self.down, _mm(_flat2(dh).T, _flat2(x)))
        dx = self.base.backward(x, dy, grads, step)
        return dx + _mm(dh, self.down.data)

    def astype(self, dtype):
        clone = LoraLinear(
            self.name, self.base.astype(dtype), self.down.data.astype(dtype), self.up.data.astype(dtype)
        )
        clone.merged = self.merged
        if self._merged_weight is not None:
            clone._merged_weight = self._merged_weight.astype(dtype)
        return clone


class BlendLinear:
    """y = alpha(step) * base(x) + (1 - alpha(step)) * up @ (down @ x).

    alpha decays linearly from start_alpha to 0 at end_step and stays clamped;
    the base weight is frozen from step 0.
    """

    kind = "blend"

    def __init__(self, name: str, base_weight: np.ndarray, down, up, start_alpha: float, end_step: int):
        self.name = name
        self.base = Param(name + ".base", base_weight, trainable=False)
        self.down = Param(name + ".down", down, True)
        self.up = Param(name + ".up", up, True)
        self.start_alpha = float(start_alpha)
        self.end_step = int(end_step)

    @property
    def fan_out(self):
        return self.up.data.shape[0]

    @property
    def fan_in(self):
        return self.down.data.shape[1]

    def alpha(self, step: int) -> float:
        if step < 0:
            raise ModelError("step must be >= 0")
        frac = 1.0 - step / self.end_step
        return self.start_alpha * min(max(frac, 0.0), 1.0)

    def params(self):
        return [self.base, self.down, self.up]

    def forward(self, x, step: int = 0):
        a = self.alpha(step)
        low = _mm(_mm(x, self.down.data.T), self.up.data.T)
        if a == 0.0:
            return low
        return a * _mm(x, self.base.data.T) + (1.0 - a) * low

    def backward(self, x, dy, grads, step: int = 0):
        a = self.alpha(step)
        dy_low = (1.0 - a) * dy
        hidden = _mm(x, self.down.data.T)
        _accumulate(grads, self.up, _mm(_flat2(dy_low).T, _flat2(hidden)))
        dh = _mm(dy_low, self.up.data)
        _accumulate(grads, self.down, _mm(_flat2(dh).T, _flat2(x)))
        dx = _mm(dh, self.down.data)
        if a != 0.0:
            dx = dx + a * _mm(dy, self.base.data)
        return dx

    def astype(self, dtype):
        return BlendLinear(
            self.name,
            self.base.data.astype(dtype),
            self.down.data.astype(dtype),
            self.up.data.astype(dtype),
            self.start_alpha,
            self.end_step,
        )


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------


class DenseEmbedding:
    kind = "dense"

    def __init__(self, name: str, weight: np.ndarray, trainable: bool = True):
        self.name = name
        self.weight = Param(name + ".weight", weight, trainable)  # (vocab, dim)

    def params(self):
        return [self.weight]

    def forward(self, tokens):
        return self.weight.data[tokens]

    def backward(self, tokens, dx, grads):
        if not self.weight.trainable:
            return
        g = np.zeros_like(self.weight.data)
        np.add.at(g, tokens.ravel(), _flat2(dx))
        _accumulate(grads, self.weight, g)

    def astype(self, dtype):
        return DenseEmbedding(self.name, self.weight.data.astype(dtype), self.weight.trainable)


class LowRankEmbedding:
    """Factored lookup: row(t) = (down.T[t]) @ up.T, factors shaped like a linear."""

    kind = "lowrank"

    def __init__(self, name: str, down: np.ndarray, up: np.ndarray, trainable: bool = True):
        self.name = name
        self.down = Param(name + ".down", down, trainable)  # (r, vocab)
        self.up = Param(name + ".up", up, trainable)        # (dim, r)

    def params(self):
        return [self.down, self.up]

    def forward(self, tokens):
        rows = self.down.data.T[tokens]
        return _mm(rows, self.up.data.T)

    def backward(self, tokens, dx, grads):
        rows = self.down.data.T[tokens]
        _accumulate(grads, self.up, _mm(_flat2(dx).T, _flat2(rows)))
        drows = _mm(dx, self.up.data)
        gdown = np.zeros_like(self.down.data.T)
        np.add.at(gdown, tokens.ravel(), _flat2(drows))
        _accumulate(grads, self.down, gdown.T)

    def astype(self, dtype):
        return LowRankEmbedding(
            self.name, self.down.data.astype(dtype), self.up.data.astype(dtype), self.down.trainable
        )


# ---------------------------------------------------------------------------
# Elementwise pieces
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = RMSNORM_EPS) -> np.ndarray:
    """x_i / sqrt(mean(x^2) + eps) * gain_i over the last axis."""
    x = np.asarray(x)
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    return x * inv * gain


def _rmsnorm_backward(x, gain_param: Param, dy, grads, eps: float = RMSNORM_EPS):
    n = x.shape[-1]
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x * inv.astype(x.dtype)
    if gain_param.trainable:
        _accumulate(grads, gain_param, np.sum(_flat2(dy * xhat), axis=0))
    gdy = dy * gain_param.data
    inner = np.sum((gdy * x).astype(np.float64), axis=-1, keepdims=True)
    dx = gdy * inv.astype(x.dtype) - x * ((inner * inv**3) / n).astype(x.dtype)
    return dx


def _rope_tables(length: int, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    angles = np.arange(length, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope_rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, heads: int, sign: float):
    """Rotate adjacent pairs of each head vector; sign -1 applies the inverse."""
    shape = x.shape
    d = shape[-1] // heads
    xh = x.reshape(*shape[:-1], heads, d // 2, 2)
    even = xh[..., 0]
    odd = xh[..., 1]
    # cos/sin are (L, d/2); broadcast over batch and heads.
    c = cos.reshape(cos.shape[0], 1, cos.shape[1])
    s = sin.reshape(sin.shape[0], 1, sin.shape[1]) * sign
    out = np.empty_like(xh)
    out[..., 0] = even * c - odd * s
    out[..., 1] = even * s + odd * c
    return out.reshape(shape)


def rope_apply(v: np.ndarray, position: int, base: float = 10000.0) -> np.ndarray:
    """Rotary position encoding of a single head vector (even length).

    Pair (v[2i], v[2i+1]) rotates by position * base**(-2i/d).
    """
    v = np.asarray(v)
    d = v.shape[-1]
    if d % 2:
        raise ModelError(f"rope needs an even dimension, got {d}")
    half = d // 2
    even = v[..., 0::2]
    odd = v[..., 1::2]
    angles = position * (base ** (-2.0 * np.arange(half) / d))
    c = np.cos(angles).astype(v.dtype)
    s = np.sin(angles).astype(v.dtype)
    out = np.empty_like(v)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Single-head attention on (head_dim, seq) grids.

    Scores are q.T @ k / sqrt(d) plus the additive mask; each softmax row sums
    to one over the allowed positions. Returns the (head_dim, seq) context.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.shape != k.shape or q.shape[1] != v.shape[1]:
        raise ModelError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    d = q.shape[0]
    scores = _mm(q.T, k) / np.asarray(math.sqrt(d), dtype=q.dtype)
    if mask is not None:
        scores = scores + mask
    probs = softmax(scores, axis=-1)
    return _mm(v, probs.T)


def ffn_forward(x: np.ndarray, w_up: np.ndarray, w_gate: np.ndarray, w_down: np.ndarray) -> np.ndarray:
    """Gated feed-forward: w_down @ (w_up x * SiLU(w_gate x))."""
    up = _mm(np.asarray(x)[None, :], np.asarray(w_up).T)[0]
    gate = _mm(np.asarray(x)[None, :], np.asarray(w_gate).T)[0]
    return _mm((up * _silu(gate))[None, :], np.asarray(w_down).T)[0]


def cross_entropy_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean over positions of -log softmax(logits)[target], log-sum-exp stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    m = flat.max(axis=-1)
    lse = m + np.log(np.exp(flat - m[:, None]).sum(axis=-1))
    picked = flat[np.arange(flat.shape[0]), tgt]
    return float(np.mean(lse - picked))


def cross_entropy_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d loss / d logits for the mean cross entropy above, in the logits dtype."""
    probs = softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    tgt = np.asarray(targets).reshape(-1)
    flat[np.arange(flat.shape[0]), tgt] -= 1.0
    flat /= flat.shape[0]
    return probs.reshape(logits.shape).astype(np.asarray(logits).dtype)


_MASK_CACHE: dict = {}


def causal_mask(length: int, dtype) -> np.ndarray:
    """Shared additive mask: 0 on and below the diagonal, -inf above."""
    key = (length, np.dtype(dtype).str)
    m = _MASK_CACHE.get(key)
    if m is None:
        m = np.triu(np.full((length, length), -np.inf, dtype=dtype), k=1)
        m.flags.writeable = False
        _MASK_CACHE[key] = m
    return m


# ---------------------------------------------------------------------------
# Recompute policies and the activation tape
# ---------------------------------------------------------------------------

_TAPE_KEYS = ("x_in", "norm1", "q", "k", "v", "qkT", "s", "res1", "norm2", "up", "gate")
_RECOMPUTABLE = frozenset({"qkT", "s"})


@dataclass(frozen=True)
class RecomputePolicy:
    kind: str  # store_all | per_layer | selective
    drop: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in ("store_all", "per_layer", "selective"):
            raise ModelError(f"unknown recompute policy {self.kind!r}")
        if self.kind == "selective" and not self.drop <= _RECOMPUTABLE:
            raise ModelError(f"selective drop set must be within {sorted(_RECOMPUTABLE)}")

    def kept_keys(self):
        if self.kind == "store_all":
            return _TAPE_KEYS
        if self.kind == "per_layer":
            return ("x_in",)
        return tuple(k for k in _TAPE_KEYS if k not in self.drop)


STORE_ALL = RecomputePolicy("store_all")
PER_LAYER = RecomputePolicy("per_layer")


def selective(drop=("qkT", "s")) -> RecomputePolicy:
    return RecomputePolicy("selective", frozenset(drop))


@dataclass
class DecoderTape:
    policy: RecomputePolicy
    tokens: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    mask: np.ndarray
    entries: list = field(default_factory=list)
    x_final: np.ndarray | None = None
    peak_bytes: int = 0

    def stored_bytes(self) -> int:
        total = sum(a.nbytes for e in self.entries for a in e.values())
        if self.x_final is not None:
            total += self.x_final.nbytes
        return total


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class DecoderLayer:
    def __init__(self, index: int, norm1: Param, norm2: Param, mats: dict):
        self.index = index
        self.norm1 = norm1
        self.norm2 = norm2
        self.wq = mats["wq"]
        self.wk = mats["wk"]
        self.wv = mats["wv"]
        self.wo = mats["wo"]
        self.wu = mats["wu"]
        self.wg = mats["wg"]
        self.wd = mats["wd"]

    def matrices(self) -> dict:
        return {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "wu": self.wu, "wg": self.wg, "wd": self.wd,
        }

    def params(self):
        out = []
        for m in self.matrices().values():
            out.extend(m.params())
        out.append(self.norm1)
        out.append(self.norm2)
        return out


class DecoderModel:
    def __init__(self, config: ModelConfig, specs: dict, embed, layers, head, dtype=np.float32):
        self.config = config
        self.specs = specs
        self.embed = embed
        self.layers = layers
        self.head = head
        self.dtype = np.dtype(dtype)

    def named_parameters(self) -> dict:
        out = {}
        for p in self.embed.params():
            out[p.name] = p
        for layer in self.layers:
            for p in layer.params():
                out[p.name] = p
        for p in self.head.params():
            out[p.name] = p
        return out

    def trainable_parameters(self) -> dict:
        return {k: v for k, v in self.named_parameters().items() if v.trainable}

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def astype(self, dtype) -> "DecoderModel":
        return DecoderModel(
            self.config,
            self.specs,
            self.embed.astype(dtype),
            [
                DecoderLayer(
                    l.index,
                    Param(l.norm1.name, l.norm1.data.astype(dtype), l.norm1.trainable),
                    Param(l.norm2.name, l.norm2.data.astype(dtype), l.norm2.trainable),
                    {k: m.astype(dtype) for k, m in l.matrices().items()},
                )
                for l in self.layers
            ],
            self.head.astype(dtype),
            dtype,
        )

    def state_signature(self) -> bytes:
        """Byte digest of all parameters, for replica-equality checks."""
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.named_parameters()):
            p = self.named_parameters()[name]
            h.update(name.encode())
            h.update(p.data.tobytes())
        for name, mat in self._quantized_mats():
            h.update(name.encode())
            h.update(mat.q.codes.tobytes())
        return h.digest()

    def _quantized_mats(self):
        found = []
        mats = {"embed": self.embed, "head": self.head}
        for layer in self.layers:
            for k, m in layer.matrices().items():
                mats[f"layers.{layer.index}.{k}"] = m
        for name, m in mats.items():
            if isinstance(m, QuantizedLinear):
                found.append((name, m))
            elif isinstance(m, LoraLinear) and isinstance(m.base, QuantizedLinear):
                found.append((name + ".base", m.base))
        return found


def _child_seed(seed: int, index: int) -> int:
    mixed = linalg.SplitMix64((seed * 0x9E3779B97F4A7C15 + index + 1) & 0xFFFFFFFFFFFFFFFF)
    return int(mixed.next_uint64(1)[0])


def _fan_shapes(config: ModelConfig, name: str) -> tuple[int, int]:
    n, m, t = config.dim, config.ffn_dim, config.vocab
    return {
        "wq": (n, n), "wk": (n, n), "wv": (n, n), "wo": (n, n),
        "wu": (m, n), "wg": (m, n), "wd": (n, m),
        "we": (n, t), "wh": (t, n),
    }[name]


def _build_matrix(name: str, full_name: str, spec: LayerSpec, config: ModelConfig, seed_stream, dtype):
    fan_out, fan_in = _fan_shapes(config, name)
    dense = lambda: linalg.seeded_random(fan_out, fan_in, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
    if spec.kind == "dense":
        return DenseLinear(full_name, dense())
    if spec.kind == "lowrank":
        if spec.r >= min(fan_in, fan_out):
            raise ModelError(f"{full_name}: rank {spec.r} must be < min(fan_in, fan_out)")
        down = linalg.seeded_random(spec.r, fan_in, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        up = linalg.seeded_random(fan_out, spec.r, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        return LowRankLinear(full_name, down, up)
    if spec.kind == "lora":
        if spec.r >= min(fan_in, fan_out):
            raise ModelError(f"{full_name}: rank {spec.r} must be < min(fan_in, fan_out)")
        base = DenseLinear(full_name + ".base", dense(), trainable=False)
        # Zero-initialized up factor so the adapter starts as the identity delta.
        down = linalg.seeded_random(spec.r, fan_in, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        up = np.zeros((fan_out, spec.r), dtype=dtype)
        return LoraLinear(full_name, base, down, up)
    if spec.kind == "quantized":
        return QuantizedLinear(full_name, quantize_rows(dense(), spec.bits))
    if spec.kind == "blend":
        down = linalg.seeded_random(spec.r, fan_in, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        up = linalg.seeded_random(fan_out, spec.r, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        return BlendLinear(full_name, dense(), down, up, spec.start_alpha, spec.end_step)
    raise ModelError(f"unsupported kind {spec.kind}")


def build_model(config: ModelConfig, specs: dict | None = None, seed: int = 0, dtype=np.float32) -> DecoderModel:
    """Construct a model; specs maps matrix names to LayerSpec (default dense)."""
    specs = dict(specs or {})
    for name in specs:
        if name not in MATRIX_NAMES:
            raise ModelError(f"unknown matrix name {name!r}; expected one of {MATRIX_NAMES}")
    full_specs = {name: specs.get(name, LayerSpec()) for name in MATRIX_NAMES}

    counter = iter(range(1, 1 << 30))
    seed_stream = (  # one child seed per tensor, in construction order
        _child_seed(seed, i) for i in counter
    )

    emb_spec = full_specs["we"]
    t, n = config.vocab, config.dim
    if emb_spec.kind == "dense":
        embed = DenseEmbedding("embed", linalg.seeded_random(t, n, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype))
    elif emb_spec.kind == "lowrank":
        down = linalg.seeded_random(emb_spec.r, t, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        up = linalg.seeded_random(n, emb_spec.r, next(seed_stream), "gaussian", std=INIT_STD, dtype=dtype)
        embed = LowRankEmbedding("embed", down, up)
    else:
        raise ModelError(f"embedding supports dense or lowrank, not {emb_spec.kind!r}")

    layers = []
    for i in range(config.layers):
        mats = {
            name: _build_matrix(name, f"layers.{i}.{name}", full_specs[name], config, seed_stream, dtype)
            for name in ("wq", "wk", "wv", "wo", "wu", "wg", "wd")
        }
        norm1 = Param(f"layers.{i}.norm1.gain", np.ones(config.dim, dtype=dtype))
        norm2 = Param(f"layers.{i}.norm2.gain", np.ones(config.dim, dtype=dtype))
        layers.append(DecoderLayer(i, norm1, norm2, mats))

    head = _build_matrix("wh", "head", full_specs["wh"], config, seed_stream, dtype)
    return DecoderModel(config, full_specs, embed, layers, head, dtype)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, l, n = x.shape
    return x.reshape(b, l, heads, n // heads).transpose(0, 2, 1, 3)


def _unheads(x: np.ndarray) -> np.ndarray:
    b, h, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * d)


def _layer_forward(layer: DecoderLayer, x, cos, sin, mask, heads: int, step: int):
    d = x.shape[-1] // heads
    scale = np.asarray(1.0 / math.sqrt(d), dtype=x.dtype)
    norm1 = rmsnorm(x, layer.norm1.data)
    q = _rope_rotate(layer.wq.forward(norm1, step), cos, sin, heads, 1.0)
    k = _rope_rotate(layer.wk.forward(norm1, step), cos, sin, heads, 1.0)
    v = layer.wv.forward(norm1, step)
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    qkT = _mm(qh, kh.transpose(0, 1, 3, 2)) * scale + mask
    s = softmax(qkT, axis=-1)
    context = _unheads(_mm(s, vh))
    attn = layer.wo.forward(context, step)
    res1 = x + attn
    norm2 = rmsnorm(res1, layer.norm2.data)
    up = layer.wu.forward(norm2, step)
    gate = layer.wg.forward(norm2, step)
    ffn = layer.wd.forward(up * _silu(gate), step)
    out = res1 + ffn
    entry = {
        "x_in": x, "norm1": norm1, "q": q, "k": k, "v": v,
        "qkT": qkT, "s": s, "res1": res1, "norm2": norm2, "up": up, "gate": gate,
    }
    return out, entry


def _filter_entry(entry: dict, policy: RecomputePolicy) -> dict:
    kept = policy.kept_keys()
    return {k: entry[k] for k in kept}


def _rebuild_entry(layer: DecoderLayer, stored: dict, tape: DecoderTape, heads: int, step: int) -> dict:
    policy = tape.policy
    if policy.kind == "store_all":
        missing = [k for k in _TAPE_KEYS if k not in stored]
        if missing:
            raise ModelError(f"store-all tape is missing entries {missing} for layer {layer.index}")
        return stored
    if policy.kind == "per_layer":
        _, full = _layer_forward(layer, stored["x_in"], tape.cos, tape.sin, tape.mask, heads, step)
        return full
    full = dict(stored)
    if "qkT" in policy.drop:
        d = full["q"].shape[-1] // heads
        scale = np.asarray(1.0 / math.sqrt(d), dtype=full["q"].dtype)
        qh = _heads(full["q"], heads)
        kh = _heads(full["k"], heads)
        full["qkT"] = _mm(qh, kh.transpose(0, 1, 3, 2)) * scale + tape.mask
    if "s" in policy.drop:
        full["s"] = softmax(full["qkT"], axis=-1)
    return full


def _layer_backward(layer: DecoderLayer, e: dict, dout, grads: dict, heads: int, step: int, cos, sin):
    d = e["q"].shape[-1] // heads
    scale = np.asarray(1.0 / math.sqrt(d), dtype=e["q"].dtype)

    # out = res1 + wd(up * silu(gate))
    gate = e["gate"]
    sg = _sigmoid(gate)
    silu_gate = gate * sg
    act = e["up"] * silu_gate
    dact = layer.wd.backward(act, dout, grads, step)
    dup = dact * silu_gate
    dgate = dact * e["up"] * (sg * (1.0 + gate * (1.0 - sg)))
    dnorm2 = layer.wu.backward(e["norm2"], dup, grads, step)
    dnorm2 += layer.wg.backward(e["norm2"], dgate, grads, step)
    dres1 = dout + _rmsnorm_backward(e["res1"], layer.norm2, dnorm2, grads)

    # res1 = x_in + wo(context), context = s @ v
    vh = _heads(e["v"], heads)
    context = _unheads(_mm(e["s"], vh))
    dcontext = layer.wo.backward(context, dres1, grads, step)
    dch = _heads(dcontext, heads)
    ds = _mm(dch, vh.transpose(0, 1, 3, 2))
    dvh = _mm(e["s"].transpose(0, 1, 3, 2), dch)
    # Softmax backward; rows of s are zero on masked positions, so no re-mask needed.
    dqkT = e["s"] * (ds - np.sum(ds * e["s"], axis=-1, keepdims=True))
    qh = _heads(e["q"], heads)
    kh = _heads(e["k"], heads)
    dqh = _mm(dqkT, kh) * scale
    dkh = _mm(dqkT.transpose(0, 1, 3, 2), qh) * scale
    # Undo the rotary rotation (orthogonal, so the inverse is the transpose).
    dq_pre = _rope_rotate(_unheads(dqh), cos, sin, heads, -1.0)
    dk_pre = _rope_rotate(_unheads(dkh), cos, sin, heads, -1.0)
    dnorm1 = layer.wq.backward(e["norm1"], dq_pre, grads, step)
    dnorm1 += layer.wk.backward(e["norm1"], dk_pre, grads, step)
    dnorm1 += layer.wv.backward(e["norm1"], _unheads(dvh), grads, step)
    dx = dres1 + _rmsnorm_backward(e["x_in"], layer.norm1, dnorm1, grads)
    return dx


def model_forward(model: DecoderModel, tokens, policy: RecomputePolicy = STORE_ALL, step: int = 0):
    """Full forward pass: embed -> N decoder layers -> output head.

    Returns (logits, tape); logits has a vocab-sized last axis per position,
    and the tape retains exactly the policy's keep-set per layer.
    """
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ModelError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > model.config.max_seq:
        raise ModelError(f"sequence length {tokens.shape[1]} exceeds max_seq {model.config.max_seq}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise ModelError(f"token id out of range [0, {model.config.vocab})")

    length = tokens.shape[1]
    dtype = model.dtype
    cos, sin = _rope_tables(length, model.config.head_dim, model.config.rope_base, dtype)
    mask = causal_mask(length, dtype)

    x = model.embed.forward(tokens)
    tape = DecoderTape(policy=policy, tokens=tokens, cos=cos, sin=sin, mask=mask)
    for layer in model.layers:
        x, entry = _layer_forward(layer, x, cos, sin, mask, model.config.heads, step)
        tape.entries.append(_filter_entry(entry, policy))
    tape.x_final = x
    tape.peak_bytes = tape.stored_bytes()
    logits = model.head.forward(x, step)
    if squeeze:
        logits = logits[0]
    return logits, tape


def model_backward(model: DecoderModel, tape: DecoderTape, dlogits, step: int = 0) -> dict:
    """Gradients for every trainable parameter; frozen tensors get no entry.

    Under per-layer or selective policies the missing activations are
    recomputed from the kept set, so gradients match the store-all policy.
    """
    dlogits = np.asarray(dlogits)
    if dlogits.ndim == 2:
        dlogits = dlogits[None, ...]
    if tape.x_final is None:
        raise ModelError("tape is missing the final hidden state; run model_forward first")
    grads: dict = {}
    heads = model.config.heads
    dx = model.head.backward(tape.x_final, dlogits, grads, step)
    rebuild_peak = 0
    for layer, stored in zip(reversed(model.layers), reversed(tape.entries)):
        full = _rebuild_entry(layer, stored, tape, heads, step)
        if tape.policy.kind != "store_all":
            extra = sum(a.nbytes for k, a in full.items() if k not in stored)
            rebuild_peak = max(rebuild_peak, extra)
        dx = _layer_backward(layer, full, dx, grads, heads, step, tape.cos, tape.sin)
    model.embed.backward(tape.tokens, dx, grads)
    tape.peak_bytes = tape.stored_bytes() + rebuild_peak
    return grads


# ---------------------------------------------------------------------------
# KV-cached decoding
# ---------------------------------------------------------------------------


class KvCache:
    """Per-layer key/value grids, one column appended per decode step."""

    def __init__(self, model: DecoderModel):
        cfg = model.config
        self.max_seq = cfg.max_seq
        self.length = 0
        self.k = [np.zeros((cfg.max_seq, cfg.dim), dtype=model.dtype) for _ in range(cfg.layers)]
        self.v = [np.zeros((cfg.max_seq, cfg.dim), dtype=model.dtype) for _ in range(cfg.layers)]

    @property
    def current_len(self) -> int:
        return self.length


def _rope_vec(x: np.ndarray, heads: int, position: int, base: float):
    d = x.shape[-1] // heads
    half = d // 2
    freqs = base ** (-2.0 * np.arange(half, dtype=np.float64) / d)
    c = np.cos(position * freqs).astype(x.dtype)
    s = np.sin(position * freqs).astype(x.dtype)
    xh = x.reshape(heads, half, 2)
    out = np.empty_like(xh)
    out[..., 0] = xh[..., 0] * c - xh[..., 1] * s
    out[..., 1] = xh[..., 0] * s + xh[..., 1] * c
    return out.reshape(x.shape)


def kv_decode_step(model: DecoderModel, cache: KvCache, token: int, step: int = 0):
    """One autoregressive step: exactly one token pass through the model.

    Returns (logits vector, cache); the cache grows by one position and the
    logits equal the final column of a full forward over the whole prefix.
    """
    if cache.length >= cache.max_seq:
        raise ModelError(f"kv cache overflow: length {cache.length} at max_seq {cache.max_seq}")
    if not 0 <= token < model.config.vocab:
        raise ModelError(f"token id {token} out of range")
    cfg = model.config
    heads, d = cfg.heads, cfg.head_dim
    pos = cache.length
    scale = 1.0 / math.sqrt(d)

    x = model.embed.forward(np.array([token]))[0]
    for li, layer in enumerate(model.layers):
        norm1 = rmsnorm(x, layer.norm1.data)
        q = _rope_vec(layer.wq.forward(norm1, step), heads, pos, cfg.rope_base)
        k = _rope_vec(layer.wk.forward(norm1, step), heads, pos, cfg.rope_base)
        v = layer.wv.forward(norm1, step)
        cache.k[li][pos] = k
        cache.v[li][pos] = v
        keys = cache.k[li][: pos + 1].reshape(pos + 1, heads, d)
        vals = cache.v[li][: pos + 1].reshape(pos + 1, heads, d)
        qh = q.reshape(heads, d)
        scores = np.einsum("hd,lhd->hl", qh.astype(np.float64), keys.astype(np.float64)) * scale
        probs = softmax(scores, axis=-1)
        context = np.einsum("hl,lhd->hd", probs, vals.astype(np.float64)).astype(x.dtype)
        attn = layer.wo.forward(context.reshape(cfg.dim), step)
        res1 = x + attn
        norm2 = rmsnorm(res1, layer.norm2.data)
        up = layer.wu.forward(norm2, step)
        gate = layer.wg.forward(norm2, step)
        x = res1 + layer.wd.forward(up * _silu(gate), step)
    cache.length += 1
    logits = model.head.forward(x, step)
    return logits, cache


def greedy_decode(model: DecoderModel, prompt, max_new: int, use_cache: bool = True):
    """Greedy continuation of the prompt; returns (generated ids, token passes)."""
    prompt = list(int(t) for t in np.asarray(prompt).ravel())
    if not prompt:
        raise ModelError("prompt must hold at least one token")
    generated: list[int] = []
    passes = 0
    if use_cache:
        cache = KvCache(model)
        logits = None
        for tok in prompt:
            logits, cache = kv_decode_step(model, cache, tok)
            passes += 1
        for _ in range(max_new):
            nxt = int(np.argmax(logits))
            generated.append(nxt)
            if len(generated) == max_new:
                break
            logits, cache = kv_decode_step(model, cache, nxt)
            passes += 1
    else:
        seq = list(prompt)
        for _ in range(max_new):
            logits, _ = model_forward(model, np.array(seq, dtype=np.int64))
            passes += len(seq)
            nxt = int(np.argmax(logits[-1]))
            generated.append(nxt)
            seq.append(nxt)
    return generated, passes


def quantize_model(model: DecoderModel, bits: int, targets=None) -> DecoderModel:
    """Replace targeted dense matrices with per-row quantized backends."""
    targets = tuple(targets or ("wq", "wk", "wv", "wo", "wu", "wg", "wd", "wh"))
    for name in targets:
        if name == "we":
            raise ModelError("quantized embedding lookup is not supported")
        if name not in MATRIX_NAMES:
            raise ModelError(f"unknown matrix name {name!r}")
    specs = dict(model.specs)

    def convert(name, mat):
        if not isinstance(mat, DenseLinear):
            raise ModelError(f"{mat.name}: only dense matrices can be quantized, found {mat.kind}")
        return QuantizedLinear(mat.name, quantize_rows(mat.weight.data, bits))

    head = convert("wh", model.head) if "wh" in targets else model.head
    layers = []
    for layer in model.layers:
        mats = {
            k: (convert(k, m) if k in targets else m)
            for k, m in layer.matrices().items()
        }
        layers.append(DecoderLayer(layer.index, layer.norm1, layer.norm2, mats))
    for name in targets:
        specs[name] = LayerSpec(kind="quantized", bits=bits)
    return DecoderModel(model.config, specs, model.embed, layers, head, model.dtype)
