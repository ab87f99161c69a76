"""Closed-form parameter, memory, FLOP, and inference-workload accounting.

Everything here is integer/float arithmetic over a model shape; no tensors are
allocated. GB means 1e9 bytes throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .quant import quantized_size_bytes
from .transformer import LayerSpec, ModelConfig, RecomputePolicy, STORE_ALL

__all__ = [
    "BYTES_PER_PARAM",
    "GRAD_BYTES",
    "OPTIMIZER_BYTES",
    "ACTIVATION_BYTES",
    "HardwareProfile",
    "A100",
    "PHONE",
    "PROFILES",
    "MatrixRow",
    "ParamCountReport",
    "count_params",
    "lowrank_savings",
    "MemoryReport",
    "memory_report",
    "recompute_ratios",
    "flops_per_token",
    "WorkloadReport",
    "inference_workload",
    "throughput_estimate",
    "model_size_bytes",
]

GB = 1e9

BYTES_PER_PARAM = {"fp32": 4.0, "fp16": 2.0, "int8": 1.0, "int4": 0.5}
GRAD_BYTES = 2        # 16-bit gradients in mixed-precision training
OPTIMIZER_BYTES = 12  # float32 master + momentum + variance per trainable param
ACTIVATION_BYTES = 2  # 16-bit activations


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    tflops: dict          # precision -> peak TFLOPS
    gpu_mem_gb: float
    host_link_gbps: float
    disk_gbps: float
    net_mbps: float

    def __post_init__(self):
        rates = list(self.tflops.values()) + [
            self.gpu_mem_gb, self.host_link_gbps, self.disk_gbps, self.net_mbps
        ]
        if any(r <= 0 for r in rates):
            raise ValueError(f"profile {self.name!r} has a non-positive rate")

    def rate(self, precision: str) -> float:
        if precision not in self.tflops:
            raise KeyError(f"profile {self.name!r} has no rate for precision {precision!r}")
        return self.tflops[precision] * 1e12


A100 = HardwareProfile(
    "a100",
    {"fp32": 19.5, "fp16": 312.0, "int8": 624.0, "int4": 1248.0},
    gpu_mem_gb=80.0,
    host_link_gbps=32.5,
    disk_gbps=4.0,
    net_mbps=50.0,
)

PHONE = HardwareProfile(
    "phone",
    {"fp32": 2.0, "fp16": 2.0, "int8": 2.0, "int4": 2.0},
    gpu_mem_gb=8.0,
    host_link_gbps=10.0,
    disk_gbps=1.0,
    net_mbps=50.0,
)

PROFILES = {"a100": A100, "phone": PHONE}


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------


@dataclass
class MatrixRow:
    name: str
    size: str
    dense_count: int
    count: int
    trainable: int
    kind: str

    @property
    def millions(self) -> float:
        return self.count / 1e6


@dataclass
class ParamCountReport:
    rows: list
    total: int
    trainable: int
    dense_total: int

    def row(self, name: str) -> MatrixRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "name": r.name,
                    "size": r.size,
                    "count": r.count,
                    "amount_m": round(r.millions, 2),
                    "trainable": r.trainable,
                    "kind": r.kind,
                }
                for r in self.rows
            ],
            "total": self.total,
            "trainable": self.trainable,
            "dense_total": self.dense_total,
        }


def _inventory(config: ModelConfig, arch: str):
    """(name, rows, cols, instances) for every counted tensor, in table order."""
    t, n, m, N, l = config.vocab, config.dim, config.ffn_dim, config.layers, config.max_seq
    if arch == "llama":
        return [
            ("we", t, n, 1),
            ("rmsnorm_attn", n, 1, N),
            ("wq", n, n, N),
            ("wk", n, n, N),
            ("wv", n, n, N),
            ("wo", n, n, N),
            ("rmsnorm_ffn", n, 1, N),
            ("wu", n, m, N),
            ("wg", n, m, N),
            ("wd", m, n, N),
            ("wh", n, t, 1),
        ]
    if arch == "gpt2":
        # Tied output head, learned positions, two-matrix FFN, gain+bias norms.
        return [
            ("we", t, n, 1),
            ("wpe", l, n, 1),
            ("layernorm", 2 * n, 1, 2 * N + 1),
            ("wq", n, n, N),
            ("wk", n, n, N),
            ("wv", n, n, N),
            ("wo", n, n, N),
            ("wu", n, m, N),
            ("wd", m, n, N),
        ]
    raise ValueError(f"unknown arch {arch!r}")


_NORM_NAMES = {"rmsnorm_attn", "rmsnorm_ffn", "layernorm", "wpe"}


def _spec_counts(spec: LayerSpec, rows: int, cols: int) -> tuple[int, int]:
    """(total params, trainable params) for one matrix instance under a spec."""
    dense = rows * cols
    if spec.kind == "dense":
        return dense, dense
    if spec.kind == "lowrank":
        lr = spec.r * (rows + cols)
        return lr, lr
    if spec.kind == "lora":
        lr = spec.r * (rows + cols)
        return dense + lr, lr
    if spec.kind == "blend":
        lr = spec.r * (rows + cols)
        return dense + lr, lr
    if spec.kind == "quantized":
        return dense, 0
    raise ValueError(spec.kind)


def count_params(config: ModelConfig, layer_specs: dict | None = None, arch: str = "llama") -> ParamCountReport:
    """Exact integer parameter counts per named matrix and in total."""
    specs = layer_specs or {}
    rows_out = []
    total = trainable_total = dense_total = 0
    for name, r, c, instances in _inventory(config, arch):
        if name in _NORM_NAMES:
            count = r * c * instances
            rows_out.append(MatrixRow(name, f"{r}", count, count, count, "dense"))
            total += count
            trainable_total += count
            dense_total += count
            continue
        spec = specs.get(name, LayerSpec())
        per_total, per_trainable = _spec_counts(spec, r, c)
        count = per_total * instances
        tr = per_trainable * instances
        rows_out.append(
            MatrixRow(name, f"{r} x {c}", r * c * instances, count, tr, spec.kind)
        )
        total += count
        trainable_total += tr
        dense_total += r * c * instances
    return ParamCountReport(rows=rows_out, total=total, trainable=trainable_total, dense_total=dense_total)


def lowrank_savings(config: ModelConfig, r: int) -> dict:
    """Closed-form reduction arithmetic for a rank-r replacement of each group.

    The embed/head entry carries the two-matrix dense total, the per-matrix
    factored count r*(vocab+dim), and the two-matrix factored total.
    """
    n, m, t, N = config.dim, config.ffn_dim, config.vocab, config.layers
    return {
        "rank": r,
        "attention_per_matrix": {"dense": n * n, "lowrank": r * 2 * n},
        "attention_total": {"dense": 4 * N * n * n, "lowrank": 4 * N * r * 2 * n},
        "ffn_per_matrix": {"dense": n * m, "lowrank": r * (n + m)},
        "ffn_total": {"dense": 3 * N * n * m, "lowrank": 3 * N * r * (n + m)},
        "embed_head": {
            "dense_pair": 2 * t * n,
            "lowrank_per_matrix": r * (t + n),
            "lowrank_pair": 2 * r * (t + n),
        },
    }


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------

# Per-decoder-layer activation shapes (elements per batch item), in table order.
# qkT and s are h*l^2; everything else scales with the stream or FFN width.
def _intermediate_shapes(config: ModelConfig, seq: int) -> dict:
    n, m, h = config.dim, config.ffn_dim, config.heads
    l = seq
    return {
        "x_tilde_e": n * l,
        "k": n * l,
        "q": n * l,
        "v": n * l,
        "qkT": h * l * l,
        "s": h * l * l,
        "x_o": n * l,
        "x_tilde_o": n * l,
        "x_u": m * l,
        "x_g": m * l,
    }


@dataclass
class MemoryReport:
    params_gb: float
    grads_gb: float
    optimizer_gb: float
    intermediates_gb: float
    total_gb: float
    per_variable_gb: dict
    policy: str
    batch: int
    seq: int
    precision: str
    param_count: int
    trainable_count: int
    exact_params_gb: float
    kept_inputs_gb: float
    annotations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params_gb": self.params_gb,
            "grads_gb": self.grads_gb,
            "optimizer_gb": self.optimizer_gb,
            "intermediates_gb": self.intermediates_gb,
            "total_gb": self.total_gb,
            "per_variable_gb": self.per_variable_gb,
            "policy": self.policy,
            "batch": self.batch,
            "seq": self.seq,
            "precision": self.precision,
            "param_count": self.param_count,
            "trainable_count": self.trainable_count,
            "exact_params_gb": self.exact_params_gb,
            "kept_inputs_gb": self.kept_inputs_gb,
            "annotations": self.annotations,
        }


def memory_report(
    config: ModelConfig,
    batch: int,
    seq: int,
    precision: str = "fp16",
    policy: RecomputePolicy = STORE_ALL,
    layer_specs: dict | None = None,
    method: str = "dense",
    nominal_params: int | None = None,
    arch: str = "llama",
) -> MemoryReport:
    """Training-memory breakdown: parameters, gradients, optimizer states, and
    the retained intermediate variables under the recompute policy.

    Parameter/gradient/optimizer lines use the nominal count when one is given
    (the rounded marketing size, e.g. 6.74 B priced as 7 B); exact counts ride
    along in exact_params_gb.
    """
    if batch < 1 or seq < 1:
        raise ValueError("batch and seq must be >= 1")
    if precision not in BYTES_PER_PARAM:
        raise ValueError(f"unknown precision {precision!r}")
    counts = count_params(config, layer_specs, arch)
    param_count = counts.total
    if method == "lora_finetune":
        trainable = sum(r.trainable for r in counts.rows if r.kind == "lora")
        if trainable == 0:
            raise ValueError("lora_finetune pricing needs lora specs on at least one matrix")
    else:
        trainable = counts.trainable
    priced_params = nominal_params if nominal_params is not None else param_count
    priced_trainable = trainable if trainable != param_count else priced_params

    bytes_per = BYTES_PER_PARAM[precision]
    params_gb = priced_params * bytes_per / GB
    grads_gb = priced_trainable * GRAD_BYTES / GB
    optimizer_gb = priced_trainable * OPTIMIZER_BYTES / GB

    shapes = _intermediate_shapes(config, seq)
    N = config.layers
    per_layer_elems = sum(shapes.values())
    annotations = [
        "x_d is materialized per layer but never read by backward; it is priced "
        f"like x_o in the breakdown ({config.dim * seq * N * ACTIVATION_BYTES * batch / GB:.2f} GB "
        "across layers) and excluded from the retained totals.",
        "intermediate totals scale linearly in batch by construction; measured batch-4/16 "
        "footprints grow faster than that (allocator and fragmentation effects are not modeled), "
        "so batch > 1 totals are lower-bound estimates.",
    ]
    if precision in ("int8", "int4"):
        annotations.append(
            "integer precisions price pure code bytes; per-row scale/offset metadata and "
            "runtime buffers (which can add 1-1.5 GB on 7B-class weights) are reported by "
            "model_size_bytes, not here."
        )

    if policy.kind == "store_all":
        inter_elems = per_layer_elems * N
    elif policy.kind == "per_layer":
        inter_elems = per_layer_elems  # peak: one decoder layer rebuilt at a time
        annotations.append(
            "per-layer policy additionally retains every layer input "
            f"({config.dim * seq * N * ACTIVATION_BYTES * batch / GB:.2f} GB), reported separately."
        )
    else:
        dropped = sum(shapes[k] for k in ("qkT", "s") if k in policy.drop)
        inter_elems = (per_layer_elems - dropped) * N
    intermediates_gb = inter_elems * ACTIVATION_BYTES * batch / GB

    per_variable = {
        "x_e": config.dim * seq * ACTIVATION_BYTES * batch / GB,
        **{k: v * N * ACTIVATION_BYTES * batch / GB for k, v in shapes.items()},
        "x_d": config.dim * seq * N * ACTIVATION_BYTES * batch / GB,
    }

    total = params_gb + grads_gb + optimizer_gb + intermediates_gb
    return MemoryReport(
        params_gb=params_gb,
        grads_gb=grads_gb,
        optimizer_gb=optimizer_gb,
        intermediates_gb=intermediates_gb,
        total_gb=total,
        per_variable_gb=per_variable,
        policy=policy.kind,
        batch=batch,
        seq=seq,
        precision=precision,
        param_count=param_count,
        trainable_count=trainable,
        exact_params_gb=param_count * bytes_per / GB,
        kept_inputs_gb=config.dim * seq * N * ACTIVATION_BYTES * batch / GB,
        annotations=annotations,
    )


def recompute_ratios(config: ModelConfig, seq: int, policy: RecomputePolicy, arch: str = "llama") -> dict:
    """Extra forward FLOPs a recompute policy costs, as ratios.

    vs_total divides by forward + backward with backward = 2x forward (the
    per-layer policy lands on exactly 1/3 there). vs_forward divides by one
    forward pass.
    """
    counts = count_params(config, None, arch)
    matmul_params = counts.total - config.vocab * config.dim  # lookup is not a matmul
    l, n, N, h = seq, config.dim, config.layers, config.heads
    fwd = 2.0 * matmul_params * l + 4.0 * l * l * n * N  # projections + score/context products
    if policy.kind == "store_all":
        extra = 0.0
    elif policy.kind == "per_layer":
        extra = fwd
    else:
        extra = 0.0
        if "qkT" in policy.drop:
            extra += 2.0 * l * l * n * N
        if "s" in policy.drop:
            extra += 5.0 * h * l * l * N  # softmax re-evaluation
    return {
        "policy": policy.kind,
        "extra_flops": extra,
        "forward_flops": fwd,
        "vs_forward": extra / fwd,
        "vs_total": extra / (3.0 * fwd),
    }


# ---------------------------------------------------------------------------
# Workload accounting
# ---------------------------------------------------------------------------


def flops_per_token(param_count: int) -> float:
    """Two operations (multiply + add) per parameter per token."""
    return 2.0 * param_count


@dataclass
class WorkloadReport:
    flops_per_token: float
    token_passes: int
    total_flops: float
    kv_cache: bool
    est_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "flops_per_token": self.flops_per_token,
            "token_passes": self.token_passes,
            "total_flops": self.total_flops,
            "kv_cache": self.kv_cache,
            "est_seconds": self.est_seconds,
        }


def inference_workload(
    l_in: int,
    gen: int,
    param_count: int,
    kv_cache: bool = False,
    profile: HardwareProfile | None = None,
) -> WorkloadReport:
    """Token passes and FLOPs to generate `gen` tokens from an `l_in` prompt.

    Without a cache every generated token reprocesses the whole prefix; with
    one, each prompt token and each new token passes through exactly once.
    """
    if gen < 1:
        raise ValueError("gen must be >= 1")
    if kv_cache:
        passes = l_in + (gen - 1)
    else:
        passes = sum(l_in + i for i in range(gen))
    per_token = flops_per_token(param_count)
    total = per_token * passes
    est = {}
    if profile is not None:
        est = {prec: total / profile.rate(prec) for prec in profile.tflops}
    return WorkloadReport(per_token, passes, total, kv_cache, est)


def throughput_estimate(report, profile: HardwareProfile, precision: str) -> float:
    """total FLOPs / peak rate; a lower bound that assumes full utilization."""
    total = report.total_flops if isinstance(report, WorkloadReport) else float(report)
    return total / profile.rate(precision)


def model_size_bytes(
    config: ModelConfig,
    layer_specs: dict | None = None,
    precision: str = "fp16",
    arch: str = "llama",
) -> float:
    """Stored model bytes: count_params x bytes(precision), plus per-row
    scale/offset metadata (rows of length dim) for the integer precisions."""
    if precision not in BYTES_PER_PARAM:
        raise ValueError(f"unknown precision {precision!r}")
    counts = count_params(config, layer_specs, arch)
    if counts.total == 0:
        return 0.0
    if precision in ("fp32", "fp16"):
        return counts.total * BYTES_PER_PARAM[precision]
    bits = 8 if precision == "int8" else 4
    return float(quantized_size_bytes(counts.total, bits, config.dim))
