"""Low-rank factor pairs, LoRA adapters, alpha-blend layers, and SVD
decomposition of dense weights or whole models.

Orientation is fixed as down-then-up: y = up @ (down @ x), with down = V_r^T
(applied first) and up = U_r S_r when factors come from an SVD.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import linalg, thread_cap
from .quant import dequantize_rows
from .transformer import (
    BlendLinear,
    DecoderLayer,
    DecoderModel,
    DenseLinear,
    LayerSpec,
    LoraLinear,
    LowRankEmbedding,
    LowRankLinear,
    MATRIX_NAMES,
    ModelError,
    QuantizedLinear,
)

__all__ = [
    "LowRankFactors",
    "lr_forward",
    "lr_param_count",
    "decompose_linear",
    "decompose_model",
    "attach_adapters",
    "lora_forward",
    "lora_merge",
    "merge_model",
    "blend_forward",
    "blend_model",
    "collapse_blend",
]


@dataclass
class LowRankFactors:
    """Factor pair of a rank-r linear map: down (r x fan_in), up (fan_out x r)."""

    down: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        if self.down.ndim != 2 or self.up.ndim != 2 or self.down.shape[0] != self.up.shape[1]:
            raise ModelError(
                f"inconsistent factors: down {self.down.shape}, up {self.up.shape}"
            )

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def fan_in(self) -> int:
        return self.down.shape[1]

    @property
    def fan_out(self) -> int:
        return self.up.shape[0]

    def param_count(self) -> int:
        return self.down.size + self.up.size


def lr_param_count(r: int, fan_in: int, fan_out: int) -> int:
    return r * (fan_in + fan_out)


def lr_forward(f: LowRankFactors, x: np.ndarray) -> np.ndarray:
    """up @ (down @ x); 2*r*(fan_in + fan_out) multiplies, up@down never formed."""
    x = np.asarray(x)
    if x.shape[0] != f.fan_in:
        raise ModelError(f"lr_forward dimension mismatch: fan_in {f.fan_in}, x {x.shape}")
    return linalg.matvec(f.up, linalg.matvec(f.down, x))


def decompose_linear(w: np.ndarray, r: int) -> LowRankFactors:
    """Best rank-r factors of a dense weight via truncated SVD (Eckart-Young)."""
    u_sigma, v_t, _ = linalg.truncated_svd(w, r)
    return LowRankFactors(down=v_t, up=u_sigma)


def _decompose_backend(mat, r: int):
    if isinstance(mat, DenseLinear):
        w = mat.weight.data
    elif isinstance(mat, QuantizedLinear):
        w = dequantize_rows(mat.q, dtype=np.float32)
    else:
        raise ModelError(f"{mat.name}: cannot decompose a {mat.kind} matrix")
    if r >= min(w.shape):
        raise ModelError(f"{mat.name}: rank {r} does not reduce a {w.shape} matrix")
    f = decompose_linear(w, r)
    return LowRankLinear(mat.name, f.down, f.up)


def decompose_model(
    model: DecoderModel,
    r: int,
    worker_count: int | None = None,
    targets=None,
) -> DecoderModel:
    """Replace every targeted linear layer with its rank-r SVD factors.

    Matrices are decomposed independently (one worker each, pool size capped by
    worker_count / LRLM_THREADS); the result is bit-stable regardless of
    scheduling because each matrix is reassembled under its own key.
    """
    targets = tuple(targets or ("wq", "wk", "wv", "wo", "wu", "wg", "wd", "we", "wh"))
    for t in targets:
        if t not in MATRIX_NAMES:
            raise ModelError(f"unknown matrix name {t!r}")
    workers = worker_count if worker_count is not None else thread_cap()

    jobs: dict[str, object] = {}
    for layer in model.layers:
        for name, mat in layer.matrices().items():
            if name in targets:
                jobs[f"layers.{layer.index}.{name}"] = mat
    if "wh" in targets:
        jobs["head"] = model.head

    results: dict[str, LowRankLinear] = {}
    failures: dict[str, Exception] = {}

    def run(key_mat):
        key, mat = key_mat
        try:
            return key, _decompose_backend(mat, r)
        except Exception as exc:  # re-raised with the matrix name below
            return key, exc

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for key, res in pool.map(run, jobs.items()):
                (failures if isinstance(res, Exception) else results)[key] = res
    else:
        for item in jobs.items():
            key, res = run(item)
            (failures if isinstance(res, Exception) else results)[key] = res
    if failures:
        key = sorted(failures)[0]
        raise ModelError(f"decomposition failed for {key}: {failures[key]}") from failures[key]

    embed = model.embed
    if "we" in targets:
        if not hasattr(model.embed, "weight"):
            raise ModelError("embed: cannot decompose a non-dense embedding")
        table = model.embed.weight.data  # (vocab, dim); linear-equivalent weight is its transpose
        if r >= min(table.shape):
            raise ModelError(f"embed: rank {r} does not reduce a {table.shape} table")
        f = decompose_linear(table.T, r)
        embed = LowRankEmbedding("embed", f.down, f.up)

    layers = [
        DecoderLayer(
            layer.index,
            layer.norm1,
            layer.norm2,
            {
                name: results.get(f"layers.{layer.index}.{name}", mat)
                for name, mat in layer.matrices().items()
            },
        )
        for layer in model.layers
    ]
    head = results.get("head", model.head)
    specs = dict(model.specs)
    for t in targets:
        specs[t] = LayerSpec(kind="lowrank", r=r)
    return DecoderModel(model.config, specs, embed, layers, head, model.dtype)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


def attach_adapters(model: DecoderModel, r: int, targets=("wq", "wv"), seed: int = 0) -> DecoderModel:
    """Wrap targeted dense/quantized matrices with trainable low-rank deltas.

    The base weight is frozen; down is gaussian(0.02), up starts at zero so the
    adapter is initially the identity delta.
    """
    targets = tuple(targets)
    for t in targets:
        if t == "we":
            raise ModelError("adapters on the embedding lookup are not supported")
        if t not in MATRIX_NAMES:
            raise ModelError(f"unknown matrix name {t!r}")

    counter = [0]

    def wrap(mat):
        counter[0] += 1
        if isinstance(mat, DenseLinear):
            base = DenseLinear(mat.name + ".base", mat.weight.data, trainable=False)
        elif isinstance(mat, QuantizedLinear):
            base = QuantizedLinear(mat.name + ".base", mat.q)
        else:
            raise ModelError(f"{mat.name}: adapters need a dense or quantized base, found {mat.kind}")
        fan_out, fan_in = base.fan_out, base.fan_in
        if r >= min(fan_in, fan_out):
            raise ModelError(f"{mat.name}: rank {r} must be < min(fan_in, fan_out)")
        down = linalg.seeded_random(
            r, fan_in, seed * 7919 + counter[0], "gaussian", std=0.02, dtype=model.dtype
        )
        up = np.zeros((fan_out, r), dtype=model.dtype)
        return LoraLinear(mat.name, base, down, up)

    layers = [
        DecoderLayer(
            layer.index,
            layer.norm1,
            layer.norm2,
            {name: (wrap(mat) if name in targets else mat) for name, mat in layer.matrices().items()},
        )
        for layer in model.layers
    ]
    head = wrap(model.head) if "wh" in targets else model.head
    specs = dict(model.specs)
    for t in targets:
        specs[t] = LayerSpec(kind="lora", r=r)
    return DecoderModel(model.config, specs, model.embed, layers, head, model.dtype)


def lora_forward(adapter: LoraLinear, x: np.ndarray) -> np.ndarray:
    """base(x) + up @ (down @ x); quantized bases stay in code form."""
    x = np.asarray(x)
    if x.shape[-1] != adapter.fan_in:
        raise ModelError(f"lora_forward dimension mismatch: fan_in {adapter.fan_in}, x {x.shape}")
    return adapter.forward(x)


def lora_merge(adapter: LoraLinear) -> np.ndarray:
    """Fold the delta into the base: W + up @ down. Full-precision bases only."""
    if adapter.merged:
        raise ModelError(f"{adapter.name}: adapter already merged")
    if isinstance(adapter.base, QuantizedLinear):
        raise ModelError(
            f"{adapter.name}: cannot merge onto a quantized base; dequantize it explicitly first"
        )
    delta = linalg.matmul(adapter.up.data, adapter.down.data)
    merged = adapter.base.weight.data + delta
    adapter.merged = True
    adapter._merged_weight = merged
    return merged


def merge_model(model: DecoderModel) -> DecoderModel:
    """Merge every LoRA adapter in the model into plain dense matrices."""
    specs = dict(model.specs)

    def fold(name, mat):
        if isinstance(mat, LoraLinear):
            merged = lora_merge(mat)
            specs[name] = LayerSpec(kind="dense")
            return DenseLinear(mat.name, merged)
        return mat

    layers = [
        DecoderLayer(
            layer.index,
            layer.norm1,
            layer.norm2,
            {name: fold(name, mat) for name, mat in layer.matrices().items()},
        )
        for layer in model.layers
    ]
    head = fold("wh", model.head)
    return DecoderModel(model.config, specs, model.embed, layers, head, model.dtype)


# ---------------------------------------------------------------------------
# Alpha-blend transition layers
# ---------------------------------------------------------------------------


def blend_forward(layer: BlendLinear, x: np.ndarray, step: int) -> np.ndarray:
    """alpha(step) * base(x) + (1 - alpha(step)) * low-rank path."""
    return layer.forward(np.asarray(x), step)


def collapse_blend(model: DecoderModel, step: int) -> DecoderModel:
    """Drop the frozen bases of blend layers whose schedule has reached zero.

    Once alpha hits 0 the layer is exactly its low-rank path, so the result is
    a plain low-rank model. Layers still mid-schedule are left untouched.
    """
    specs = dict(model.specs)

    def fold(name, mat):
        if isinstance(mat, BlendLinear) and mat.alpha(step) == 0.0:
            specs[name] = LayerSpec(kind="lowrank", r=mat.down.data.shape[0])
            return LowRankLinear(mat.name, mat.down.data, mat.up.data)
        return mat

    layers = [
        DecoderLayer(
            layer.index,
            layer.norm1,
            layer.norm2,
            {name: fold(name, mat) for name, mat in layer.matrices().items()},
        )
        for layer in model.layers
    ]
    head = fold("wh", model.head)
    return DecoderModel(model.config, specs, model.embed, layers, head, model.dtype)


def blend_model(
    model: DecoderModel,
    r: int,
    start_alpha: float = 0.9,
    end_step: int = 100,
    targets=("wq", "wk", "wv", "wo", "wu", "wg", "wd"),
    seed: int = 0,
) -> DecoderModel:
    """Put trainable low-rank factors on a parallel path of frozen dense weights."""
    targets = tuple(targets)
    for t in targets:
        if t in ("we",):
            raise ModelError("blend layers on the embedding lookup are not supported")
        if t not in MATRIX_NAMES:
            raise ModelError(f"unknown matrix name {t!r}")
    counter = [0]

    def wrap(mat):
        counter[0] += 1
        if not isinstance(mat, DenseLinear):
            raise ModelError(f"{mat.name}: blend needs a dense base, found {mat.kind}")
        fan_out, fan_in = mat.fan_out, mat.fan_in
        if r >= min(fan_in, fan_out):
            raise ModelError(f"{mat.name}: rank {r} must be < min(fan_in, fan_out)")
        down = linalg.seeded_random(
            r, fan_in, seed * 104729 + counter[0], "gaussian", std=0.02, dtype=model.dtype
        )
        up = linalg.seeded_random(
            fan_out, r, seed * 104729 + counter[0] + 500000, "gaussian", std=0.02, dtype=model.dtype
        )
        return BlendLinear(mat.name, mat.weight.data, down, up, start_alpha, end_step)

    layers = [
        DecoderLayer(
            layer.index,
            layer.norm1,
            layer.norm2,
            {name: (wrap(mat) if name in targets else mat) for name, mat in layer.matrices().items()},
        )
        for layer in model.layers
    ]
    head = wrap(model.head) if "wh" in targets else model.head
    specs = dict(model.specs)
    for t in targets:
        specs[t] = LayerSpec(kind="blend", r=r, start_alpha=start_alpha, end_step=end_step)
    return DecoderModel(model.config, specs, model.embed, layers, head, model.dtype)
