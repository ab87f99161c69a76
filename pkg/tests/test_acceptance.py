"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines on the terminal.
"""

import functools
import json
import time

import numpy as np
import pytest

from lrlm import cli, costmodel as cm, distsim, lowrank, trainer
from lrlm import transformer as tfm
from lrlm.linalg import seeded_random
from lrlm.presets import get_preset
from lrlm.quant import dequantize_rows, qmatvec, quantize_rows
from lrlm.trainer import AdamWState, TrainConfig
from lrlm.transformer import LayerSpec


def criterion(number, label):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {number:>2}: FAIL - {label}")
                raise
            print(f"ACCEPTANCE {number:>2}: PASS - {label}")
        return run
    return wrap


# --------------------------------------------------------------------------
# 1. Parameter tables
# --------------------------------------------------------------------------

# Integer counts derived from each matrix's shape; displayed M-values are
# asserted to 2 decimals.
_TABLE_7B = {
    "we": 131_072_000, "wq": 536_870_912, "wk": 536_870_912, "wv": 536_870_912,
    "wo": 536_870_912, "wu": 1_442_840_576, "wg": 1_442_840_576, "wd": 1_442_840_576,
    "wh": 131_072_000, "rmsnorm_attn": 131_072, "rmsnorm_ffn": 131_072,
}
_TABLE_13B = {
    "we": 163_840_000, "wq": 1_048_576_000, "wk": 1_048_576_000, "wv": 1_048_576_000,
    "wo": 1_048_576_000, "wu": 2_831_155_200, "wg": 2_831_155_200, "wd": 2_831_155_200,
    "wh": 163_840_000, "rmsnorm_attn": 204_800, "rmsnorm_ffn": 204_800,
}


@criterion(1, "parameter tables reproduce exactly for llama2-7b and llama2-13b in < 1 s")
def test_criterion_1_parameter_tables(tmp_path, capsys):
    start = time.perf_counter()
    for preset_name, table in (("llama2-7b", _TABLE_7B), ("llama2-13b", _TABLE_13B)):
        rc = cli.main(["--seed", "0", "--out", str(tmp_path / preset_name),
                       "plan", "params", "--preset", preset_name])
        assert rc == 0
        counts = cm.count_params(get_preset(preset_name).config)
        for name, want in table.items():
            assert counts.row(name).count == want, (preset_name, name)
        stdout = capsys.readouterr().out
        for name, want in table.items():
            assert f"{want / 1e6:.2f}" in stdout, (preset_name, name)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"plan params took {elapsed:.2f}s"


# --------------------------------------------------------------------------
# 2. Low-rank reductions
# --------------------------------------------------------------------------


@criterion(2, "r=512 reductions 16.78M->4.19M, 2.15B->0.54B, 4.33B->0.74B, 262.14M->18.48M exact")
def test_criterion_2_lowrank_reductions():
    s = cm.lowrank_savings(get_preset("llama2-7b").config, 512)
    assert s["attention_per_matrix"] == {"dense": 16_777_216, "lowrank": 4_194_304}
    assert round(s["attention_per_matrix"]["dense"] / 1e6, 2) == 16.78
    assert round(s["attention_per_matrix"]["lowrank"] / 1e6, 2) == 4.19
    assert round(s["attention_total"]["dense"] / 1e9, 2) == 2.15
    assert round(s["attention_total"]["lowrank"] / 1e9, 2) == 0.54
    assert round(s["ffn_total"]["dense"] / 1e9, 2) == 4.33
    assert round(s["ffn_total"]["lowrank"] / 1e9, 2) == 0.74
    assert round(s["embed_head"]["dense_pair"] / 1e6, 2) == 262.14
    assert round(s["embed_head"]["lowrank_per_matrix"] / 1e6, 2) == 18.48


# --------------------------------------------------------------------------
# 3. Memory table
# --------------------------------------------------------------------------


@criterion(3, "memory table 14/14/84 GB exact (nominal), intermediates within 3% of 81 GB, cells match")
def test_criterion_3_memory_table(tmp_path):
    rc = cli.main(["--seed", "0", "--out", str(tmp_path / "mem"), "plan", "mem",
                   "--preset", "llama2-7b", "--batch", "1", "--seq", "4096"])
    assert rc == 0
    rep = json.loads((tmp_path / "mem" / "report.json").read_text())["report"]
    assert rep["params_gb"] == 14.0
    assert rep["grads_gb"] == 14.0
    assert rep["optimizer_gb"] == 84.0
    assert abs(rep["intermediates_gb"] - 81.0) / 81.0 < 0.03
    v = rep["per_variable_gb"]
    assert abs(v["x_tilde_e"] - 1.1) < 0.05
    assert abs(v["qkT"] - 34.4) < 0.1 and abs(v["s"] - 34.4) < 0.1
    assert abs(v["x_u"] - 2.8) < 0.1 and abs(v["x_g"] - 2.8) < 0.1
    # x_d and the batch-4/16 cells are flagged, not matched.
    notes = " ".join(rep["annotations"])
    assert "x_d" in notes and "batch-4/16" in notes
    assert abs(v["x_d"] - 1.07) < 0.01  # priced like x_o, flagged as not retained


# --------------------------------------------------------------------------
# 4. Recompute
# --------------------------------------------------------------------------


@criterion(4, "recompute: per-layer 2.5 GB/+33%, selective 12.2 GB (+~6%), grads within 1e-6 of store-all")
def test_criterion_4_recompute():
    cfg = get_preset("llama2-7b").config
    per_layer = cm.memory_report(cfg, 1, 4096, "fp16", tfm.PER_LAYER, nominal_params=7_000_000_000)
    assert abs(per_layer.intermediates_gb - 2.5) / 2.5 < 0.05
    sel = cm.memory_report(cfg, 1, 4096, "fp16", tfm.selective(), nominal_params=7_000_000_000)
    assert abs(sel.intermediates_gb - 12.2) / 12.2 < 0.05

    ratios_pl = cm.recompute_ratios(cfg, 4096, tfm.PER_LAYER)
    assert abs(ratios_pl["vs_total"] - 1 / 3) < 1 / 3 * 0.05
    ratios_sel = cm.recompute_ratios(cfg, 4096, tfm.selective())
    # Exact arithmetic on these shapes gives ~7% of a forward pass; a generic
    # 4n-FFN estimate gives ~6%. Assert the documented band around both.
    assert 0.05 <= ratios_sel["vs_forward"] <= 0.08

    toy = tfm.ModelConfig(vocab=11, dim=8, heads=2, layers=2, ffn_dim=12, max_seq=16)
    model = tfm.build_model(toy, seed=1)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 11, (2, 6))
    targets = rng.integers(0, 11, (2, 6))
    logits, tape = tfm.model_forward(model, tokens, tfm.STORE_ALL)
    base = tfm.model_backward(model, tape, tfm.cross_entropy_grad(logits, targets))
    for policy in (tfm.PER_LAYER, tfm.selective()):
        logits2, tape2 = tfm.model_forward(model, tokens, policy)
        other = tfm.model_backward(model, tape2, tfm.cross_entropy_grad(logits2, targets))
        for k in base:
            np.testing.assert_allclose(other[k], base[k], rtol=1e-6, atol=1e-12)


# --------------------------------------------------------------------------
# 5. Pipeline
# --------------------------------------------------------------------------


@criterion(5, "pipeline utilization equals M/(N+M-1) exactly for N in 1..8, M in 1..32; N=4,M=1 -> 0.25")
def test_criterion_5_pipeline():
    assert distsim.pipeline_schedule(4, 1).utilization == 0.25
    for n in range(1, 9):
        for m in range(1, 33):
            plan = distsim.pipeline_schedule(n, m)
            assert plan.utilization == m / (n + m - 1), (n, m)


# --------------------------------------------------------------------------
# 6. Sharding
# --------------------------------------------------------------------------


@criterion(6, "70B preset sharded over 8 GPUs -> 262.5 GB/GPU exact; 1 GPU -> 1120 GB exact")
def test_criterion_6_sharding():
    nominal = get_preset("llama2-70b").nominal_params
    plan8 = distsim.shard_plan(nominal, nominal, 8)
    assert plan8.total_bytes_per_gpu == 262.5e9
    plan1 = distsim.shard_plan(nominal, nominal, 1)
    assert plan1.total_bytes_per_gpu == 1120e9


# --------------------------------------------------------------------------
# 7. Federated
# --------------------------------------------------------------------------


@criterion(7, "federated volumes 84/28 GB, 24.86 PB, 50.4 MB adapter; round == centralized within 1e-6")
def test_criterion_7_federated():
    rep = distsim.federated_comm_report(distsim.FederatedConfig(4, 14e9, 296_000))
    assert rep.center_bytes_per_iter == 84e9
    assert rep.worker_bytes_per_iter == 28e9
    assert rep.center_total_bytes == pytest.approx(24.864e15)  # ~24.9 PB, full precision

    adapter = distsim.federated_comm_report(distsim.FederatedConfig(4, 4.2e6 * 2))
    assert adapter.center_bytes_per_iter == pytest.approx(50.4e6)

    toy = tfm.ModelConfig(vocab=11, dim=8, heads=2, layers=2, ffn_dim=12, max_seq=16)
    rng = np.random.default_rng(1)
    batches = [
        (rng.integers(0, 11, (2, 6)), rng.integers(0, 11, (2, 6))) for _ in range(2)
    ]
    nodes = [(tfm.build_model(toy, seed=2), b) for b in batches]
    cfg = TrainConfig(lr=1e-2, batch=2, seq=6)
    state = AdamWState(nodes[0][0].trainable_parameters())
    distsim.federated_round(nodes, "full", state, cfg)

    central = tfm.build_model(toy, seed=2)
    state_c = AdamWState(central.trainable_parameters())
    concat = (np.concatenate([b[0] for b in batches]), np.concatenate([b[1] for b in batches]))
    trainer.train_step(central, concat, cfg, state_c)
    for name, p in central.named_parameters().items():
        np.testing.assert_allclose(
            nodes[0][0].named_parameters()[name].data, p.data, rtol=1e-6, atol=1e-7, err_msg=name
        )


# --------------------------------------------------------------------------
# 8. Inference workload
# --------------------------------------------------------------------------


@criterion(8, "inference: 14950 passes, ~210 TFLOP (2%), low-rank ~40 TFLOP (5%), 105 s at 2 TFLOPS")
def test_criterion_8_inference_workload():
    rep = cm.inference_workload(100, 100, 7_000_000_000, kv_cache=False)
    assert rep.token_passes == 14_950
    assert abs(rep.total_flops - 210e12) / 210e12 < 0.02
    low = cm.inference_workload(100, 100, 1_320_000_000, kv_cache=False)
    assert abs(low.total_flops - 40e12) / 40e12 < 0.05
    assert cm.throughput_estimate(210e12, cm.PHONE, "fp16") == 105.0
    assert cm.throughput_estimate(rep, cm.PHONE, "fp16") == pytest.approx(105.0, rel=0.02)


# --------------------------------------------------------------------------
# 9. Quantization properties
# --------------------------------------------------------------------------


@criterion(9, "quantization roundtrip bound on 1e4 rows, qmatvec == dequant oracle, GPT2 sizes within 5%")
def test_criterion_9_quantization():
    for bits in (8, 4):
        w = seeded_random(10_000, 33, seed=bits, dist="uniform", lo=-4.0, hi=4.0)
        q = quantize_rows(w, bits)
        err = np.abs(w.astype(np.float64) - dequantize_rows(q, np.float64))
        bound = q.scale.astype(np.float64)[:, None] / 2 + 1e-6
        assert (err <= bound).all()

    for bits in (8, 4):
        q = quantize_rows(seeded_random(37, 53, seed=10 + bits), bits)
        x = seeded_random(53, 1, seed=99)[:, 0]
        want = dequantize_rows(q, np.float64) @ x.astype(np.float64)
        got = qmatvec(q, x)
        denom = np.maximum(np.abs(want), 1e-6)
        assert (np.abs(got - want) / denom < 1e-5).all()

    preset = get_preset("gpt2-1.5b")
    dense = cm.model_size_bytes(preset.config, None, "int8", "gpt2")
    assert abs(dense / 1e9 - 1.56) / 1.56 < 0.05
    specs = {k: LayerSpec(kind="lowrank", r=384) for k in ("wq", "wk", "wv", "wo", "wu", "wd")}
    low = cm.model_size_bytes(preset.config, specs, "int8", "gpt2")
    assert abs(low / 1e9 - 0.59) / 0.59 < 0.05


# --------------------------------------------------------------------------
# 10. Training properties
# --------------------------------------------------------------------------

TOY_TRAIN = tfm.ModelConfig(vocab=trainer.BYTE_VOCAB, dim=128, heads=4, layers=4,
                            ffn_dim=256, max_seq=128)
SMALL = tfm.ModelConfig(vocab=trainer.BYTE_VOCAB, dim=64, heads=4, layers=2,
                        ffn_dim=128, max_seq=64)


def _corpus(n_bytes=65536):
    pattern = b"the quick brown fox jumps over the lazy dog; 0123456789. "
    return trainer.byte_tokenize((pattern * (n_bytes // len(pattern) + 1))[:n_bytes])


@criterion(10, "training: gradchecks, loss beats unigram entropy in 500 steps, warm start, merge, freeze, determinism")
def test_criterion_10_training_properties():
    gcfg = tfm.ModelConfig(vocab=11, dim=8, heads=2, layers=2, ffn_dim=12, max_seq=8)
    rng = np.random.default_rng(0)
    batch = (rng.integers(0, 11, (2, 5)), rng.integers(0, 11, (2, 5)))

    # (a) gradient checks at 1e-3 for all four layer families
    dense_model = tfm.build_model(gcfg, seed=1)
    assert trainer.grad_check(dense_model, batch, tol=1e-3).passed

    lr_specs = {k: LayerSpec(kind="lowrank", r=3) for k in ("wq", "wk", "wv", "wo", "wu", "wg", "wd")}
    low_model = tfm.build_model(gcfg, specs=lr_specs, seed=2)
    assert trainer.grad_check(low_model, batch, tol=1e-3).passed

    lora_model = lowrank.attach_adapters(tfm.build_model(gcfg, seed=3), r=2, targets=("wq", "wv"), seed=3)
    trainer.configure_trainable(lora_model, "lora_finetune")
    assert trainer.grad_check(lora_model, batch, tol=1e-3).passed

    blend = lowrank.blend_model(tfm.build_model(gcfg, seed=4), r=2, start_alpha=0.8, end_step=4, seed=4)
    trainer.configure_trainable(blend, "method3")
    assert trainer.grad_check(blend, batch, tol=1e-3, step=1).passed

    # (b) toy pretraining beats the unigram-entropy baseline within 500 steps
    corpus = _corpus()
    entropy = trainer.unigram_entropy(corpus)
    start = time.perf_counter()
    dense = tfm.build_model(TOY_TRAIN, seed=5)
    dense_run = trainer.train(
        dense, corpus, TrainConfig(lr=1e-3, steps=500, batch=4, seq=64, seed=10), stop_below=entropy
    )
    assert len(dense_run.losses) <= 500 and dense_run.losses[-1] < entropy

    lr32 = {k: LayerSpec(kind="lowrank", r=32) for k in ("wq", "wk", "wv", "wo", "wu", "wg", "wd")}
    low = tfm.build_model(TOY_TRAIN, specs=lr32, seed=5)
    low_run = trainer.train(
        low, corpus,
        TrainConfig(lr=1e-3, steps=500, batch=4, seq=64, method="method1", seed=10),
        stop_below=entropy,
    )
    assert len(low_run.losses) <= 500 and low_run.losses[-1] < entropy
    elapsed = time.perf_counter() - start
    assert elapsed < 300, f"toy pretraining took {elapsed:.0f}s"

    # (c) decompose-then-finetune warm start beats random init at step 0
    donor = tfm.build_model(SMALL, seed=6)
    small_corpus = _corpus(16384)
    trainer.train(donor, small_corpus, TrainConfig(lr=2e-3, steps=80, batch=4, seq=32, seed=11))
    warm = lowrank.decompose_model(donor, 16)
    cold_specs = {k: LayerSpec(kind="lowrank", r=16)
                  for k in ("wq", "wk", "wv", "wo", "wu", "wg", "wd", "we", "wh")}
    cold = tfm.build_model(SMALL, specs=cold_specs, seed=7)
    batches = trainer.sample_batches(small_corpus, 8, 32, seed=12)
    inputs, targets = next(batches)
    warm_loss = tfm.cross_entropy_loss(tfm.model_forward(warm, inputs)[0], targets)
    cold_loss = tfm.cross_entropy_loss(tfm.model_forward(cold, inputs)[0], targets)
    assert warm_loss <= cold_loss

    # (d) LoRA merge equivalence within 1e-5
    adapter_model = lowrank.attach_adapters(tfm.build_model(SMALL, seed=8), r=4, targets=("wq", "wv"), seed=8)
    for layer in adapter_model.layers:
        layer.wq.up.data[:] = seeded_random(*layer.wq.up.data.shape, seed=31, std=0.05)
        layer.wv.up.data[:] = seeded_random(*layer.wv.up.data.shape, seed=32, std=0.05)
    tokens = small_corpus[:24]
    before, _ = tfm.model_forward(adapter_model, tokens)
    merged = lowrank.merge_model(adapter_model)
    after, _ = tfm.model_forward(merged, tokens)
    assert np.max(np.abs(before - after)) <= 1e-5 * max(1.0, float(np.max(np.abs(before))))

    # (e) frozen weights bit-unchanged over LoRA finetuning
    ft = lowrank.attach_adapters(tfm.build_model(SMALL, seed=9), r=4, targets=("wq", "wv"), seed=9)
    trainer.configure_trainable(ft, "lora_finetune")
    frozen = {n: p.data.tobytes() for n, p in ft.named_parameters().items() if not p.trainable}
    trainer.train(ft, small_corpus, TrainConfig(lr=1e-2, steps=10, batch=2, seq=32,
                                                method="lora_finetune", seed=13))
    for name, blob in frozen.items():
        assert ft.named_parameters()[name].data.tobytes() == blob, name

    # (f) fixed seed -> bit-identical metrics logs
    logs = []
    for _ in range(2):
        m = tfm.build_model(SMALL, seed=10)
        logs.append(trainer.train(m, small_corpus,
                                  TrainConfig(lr=1e-3, steps=5, batch=2, seq=32, seed=14)).metrics_csv())
    assert logs[0] == logs[1]
