"""Binary checkpoint format.

Layout: magic "LRLM" | version u32 LE | header length u64 LE | UTF-8 JSON
header | zero padding to a 64-byte boundary | tensor payload. Every tensor
starts at a 64-byte-aligned offset relative to the payload start and is stored
as raw little-endian bytes. Quantized tensors store packed codes under dtype
"u8q"/"u4q" with companion "<name>.scale" / "<name>.offset" float32 tensors.
Saving is deterministic, so save(load(x)) is byte-identical to x.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .quant import QuantizedMatrix
from .transformer import (
    BlendLinear,
    DecoderModel,
    DenseEmbedding,
    DenseLinear,
    LayerSpec,
    LoraLinear,
    LowRankEmbedding,
    LowRankLinear,
    ModelConfig,
    QuantizedLinear,
    build_model,
)

__all__ = ["CheckpointError", "MAGIC", "VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"LRLM"
VERSION = 1
ALIGN = 64

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "u8q": np.dtype("<u1"),
    "u4q": np.dtype("<u1"),
}


class CheckpointError(RuntimeError):
    pass


def _matrix_slots(model: DecoderModel):
    """(path, backend, setter) for every pluggable matrix in the model."""
    slots = [("embed", model.embed, lambda b: setattr(model, "embed", b))]
    for layer in model.layers:
        for name in ("wq", "wk", "wv", "wo", "wu", "wg", "wd"):
            slots.append(
                (f"layers.{layer.index}.{name}", getattr(layer, name),
                 (lambda l, n: lambda b: setattr(l, n, b))(layer, name))
            )
    slots.append(("head", model.head, lambda b: setattr(model, "head", b)))
    return slots


def _quant_entries(name: str, q: QuantizedMatrix):
    tag = "u4q" if q.bits == 4 else "u8q"
    return [
        (name, tag, [q.rows, q.cols], q.codes),
        (name + ".scale", "f32", list(q.scale.shape), q.scale),
        (name + ".offset", "f32", list(q.offset.shape), q.offset),
    ]


def _collect(model: DecoderModel):
    """Deterministically ordered (name, dtype_tag, logical_shape, array) entries."""
    entries = []
    merged = {}
    for path, backend, _ in _matrix_slots(model):
        if isinstance(backend, (DenseLinear, DenseEmbedding)):
            entries.append((backend.weight.name, "f32", list(backend.weight.data.shape), backend.weight.data))
        elif isinstance(backend, (LowRankLinear, LowRankEmbedding)):
            entries.append((backend.down.name, "f32", list(backend.down.data.shape), backend.down.data))
            entries.append((backend.up.name, "f32", list(backend.up.data.shape), backend.up.data))
        elif isinstance(backend, LoraLinear):
            if isinstance(backend.base, QuantizedLinear):
                entries.extend(_quant_entries(backend.base.name, backend.base.q))
            else:
                entries.append((backend.base.weight.name, "f32",
                                list(backend.base.weight.data.shape), backend.base.weight.data))
            entries.append((backend.down.name, "f32", list(backend.down.data.shape), backend.down.data))
            entries.append((backend.up.name, "f32", list(backend.up.data.shape), backend.up.data))
            merged[path] = backend.merged
        elif isinstance(backend, BlendLinear):
            entries.append((backend.base.name, "f32", list(backend.base.data.shape), backend.base.data))
            entries.append((backend.down.name, "f32", list(backend.down.data.shape), backend.down.data))
            entries.append((backend.up.name, "f32", list(backend.up.data.shape), backend.up.data))
        elif isinstance(backend, QuantizedLinear):
            entries.extend(_quant_entries(backend.name, backend.q))
        else:
            raise CheckpointError(f"{path}: cannot serialize backend {type(backend).__name__}")
    for layer in model.layers:
        entries.append((layer.norm1.name, "f32", list(layer.norm1.data.shape), layer.norm1.data))
        entries.append((layer.norm2.name, "f32", list(layer.norm2.data.shape), layer.norm2.data))
    entries.sort(key=lambda e: e[0])
    return entries, merged


def save_checkpoint(path, model: DecoderModel) -> None:
    if model.dtype != np.float32:
        model = model.astype(np.float32)
    entries, merged = _collect(model)

    table = {}
    offset = 0
    blobs = []
    for name, tag, shape, array in entries:
        raw = np.ascontiguousarray(array).astype(_DTYPES[tag], copy=False).tobytes()
        table[name] = {"dtype": tag, "shape": shape, "offset": offset, "length": len(raw)}
        blobs.append((offset, raw))
        offset += len(raw)
        offset += (-offset) % ALIGN

    header = {
        "layer_specs": {k: v.to_dict() for k, v in model.specs.items()},
        "merged": merged,
        "model_config": model.config.to_dict(),
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += VERSION.to_bytes(4, "little")
    out += len(header_bytes).to_bytes(8, "little")
    out += header_bytes
    out += b"\x00" * ((-len(out)) % ALIGN)
    payload_start = len(out)
    out += b"\x00" * offset
    for off, raw in blobs:
        out[payload_start + off : payload_start + off + len(raw)] = raw
    Path(path).write_bytes(bytes(out))


def _read_header(data: bytes):
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    hlen = int.from_bytes(data[8:16], "little")
    if 16 + hlen > len(data):
        raise CheckpointError("truncated checkpoint: header runs past end of file")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    payload_start = 16 + hlen
    payload_start += (-payload_start) % ALIGN
    return header, payload_start


def _validate_table(table: dict, payload_len: int):
    spans = []
    for name, ent in table.items():
        off, length = ent["offset"], ent["length"]
        if off % ALIGN:
            raise CheckpointError(f"{name}: offset {off} not {ALIGN}-byte aligned")
        if off < 0 or off + length > payload_len:
            raise CheckpointError(f"{name}: tensor bytes run past end of file (truncated?)")
        spans.append((off, off + length, name))
        if ent["dtype"] in ("u8q", "u4q"):
            for companion in (name + ".scale", name + ".offset"):
                if companion not in table:
                    raise CheckpointError(f"{name}: missing companion tensor {companion}")
    spans.sort()
    for (a0, a1, n1), (b0, _b1, n2) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"overlapping tensors {n1} and {n2}")


def load_checkpoint(path) -> DecoderModel:
    data = Path(path).read_bytes()
    header, payload_start = _read_header(data)
    table = header["tensors"]
    _validate_table(table, len(data) - payload_start)

    def fetch(name, expect_tag=None):
        if name not in table:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        ent = table[name]
        if expect_tag and ent["dtype"] != expect_tag:
            raise CheckpointError(f"{name}: expected dtype {expect_tag}, found {ent['dtype']}")
        raw = data[payload_start + ent["offset"] : payload_start + ent["offset"] + ent["length"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]]).copy()
        if ent["dtype"] in ("f32", "f16"):
            arr = arr.reshape(ent["shape"]).astype(np.float32)
        return arr, ent

    def fetch_quant(name):
        codes, ent = fetch(name)
        rows, cols = ent["shape"]
        bits = 4 if ent["dtype"] == "u4q" else 8
        packed_cols = (cols + 1) // 2 if bits == 4 else cols
        scale, _ = fetch(name + ".scale", "f32")
        offs, _ = fetch(name + ".offset", "f32")
        return QuantizedMatrix(
            rows=rows, cols=cols, bits=bits,
            codes=codes.reshape(rows, packed_cols),
            scale=scale, offset=offs,
        )

    config = ModelConfig(**header["model_config"])
    specs = {k: LayerSpec.from_dict(v) for k, v in header["layer_specs"].items()}
    model = build_model(config, specs, seed=0)

    for path_name, backend, setter in _matrix_slots(model):
        if isinstance(backend, (DenseLinear, DenseEmbedding)):
            arr, _ = fetch(backend.weight.name, "f32")
            backend.weight.data = arr.reshape(backend.weight.data.shape)
        elif isinstance(backend, (LowRankLinear, LowRankEmbedding)):
            backend.down.data = fetch(backend.down.name, "f32")[0].reshape(backend.down.data.shape)
            backend.up.data = fetch(backend.up.name, "f32")[0].reshape(backend.up.data.shape)
        elif isinstance(backend, LoraLinear):
            base_name = path_name + ".base"
            if table.get(base_name, {}).get("dtype") in ("u8q", "u4q"):
                backend.base = QuantizedLinear(base_name, fetch_quant(base_name))
            else:
                arr, _ = fetch(base_name + ".weight", "f32")
                backend.base = DenseLinear(base_name, arr, trainable=False)
            backend.down.data = fetch(backend.down.name, "f32")[0].reshape(backend.down.data.shape)
            backend.up.data = fetch(backend.up.name, "f32")[0].reshape(backend.up.data.shape)
            if header.get("merged", {}).get(path_name):
                backend.merged = False  # re-fold to regenerate the merged weight
                from .lowrank import lora_merge

                lora_merge(backend)
        elif isinstance(backend, BlendLinear):
            backend.base.data = fetch(backend.base.name, "f32")[0].reshape(backend.base.data.shape)
            backend.down.data = fetch(backend.down.name, "f32")[0].reshape(backend.down.data.shape)
            backend.up.data = fetch(backend.up.name, "f32")[0].reshape(backend.up.data.shape)
        elif isinstance(backend, QuantizedLinear):
            setter(QuantizedLinear(backend.name, fetch_quant(backend.name)))
    for layer in model.layers:
        layer.norm1.data = fetch(layer.norm1.name, "f32")[0].reshape(layer.norm1.data.shape)
        layer.norm2.data = fetch(layer.norm2.name, "f32")[0].reshape(layer.norm2.data.shape)
    return model
