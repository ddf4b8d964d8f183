import json

import numpy as np
import pytest

from headmaps.safetensors_io import save_tensors


def rand(rng, *shape, scale=0.2):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def write_gpt2(path, rng, n_layers=2, n_heads=4, d=16, vocab=40, ff=32, tied=True, prefix=""):
    t = {f"{prefix}wte.weight": rand(rng, vocab, d, scale=1.0)}
    for l in range(n_layers):
        p = f"{prefix}h.{l}."
        t[p + "attn.c_attn.weight"] = rand(rng, d, 3 * d)
        t[p + "attn.c_proj.weight"] = rand(rng, d, d)
        t[p + "ln_2.weight"] = 1 + rand(rng, d, scale=0.05)
        t[p + "ln_2.bias"] = rand(rng, d, scale=0.05)
        t[p + "mlp.c_fc.weight"] = rand(rng, d, ff)
        t[p + "mlp.c_fc.bias"] = rand(rng, ff)
        t[p + "mlp.c_proj.weight"] = rand(rng, ff, d)
        t[p + "mlp.c_proj.bias"] = rand(rng, d)
    t[f"{prefix}ln_f.weight"] = np.ones(d, np.float32)
    t[f"{prefix}ln_f.bias"] = np.zeros(d, np.float32)
    if not tied:
        t["lm_head.weight"] = rand(rng, vocab, d, scale=1.0)
    save_tensors(path, t)
    (path.parent / "config.json").write_text(json.dumps({"n_head": n_heads, "tie_word_embeddings": tied}))
    return t


def write_neox(path, rng, n_layers=2, n_heads=4, d=16, vocab=40, ff=32):
    t = {"gpt_neox.embed_in.weight": rand(rng, vocab, d, scale=1.0), "embed_out.weight": rand(rng, vocab, d)}
    for l in range(n_layers):
        p = f"gpt_neox.layers.{l}."
        t[p + "attention.query_key_value.weight"] = rand(rng, 3 * d, d)
        t[p + "attention.dense.weight"] = rand(rng, d, d)
        t[p + "post_attention_layernorm.weight"] = 1 + rand(rng, d, scale=0.05)
        t[p + "post_attention_layernorm.bias"] = rand(rng, d, scale=0.05)
        t[p + "mlp.dense_h_to_4h.weight"] = rand(rng, ff, d)
        t[p + "mlp.dense_h_to_4h.bias"] = rand(rng, ff)
        t[p + "mlp.dense_4h_to_h.weight"] = rand(rng, d, ff)
        t[p + "mlp.dense_4h_to_h.bias"] = rand(rng, d)
    t["gpt_neox.final_layer_norm.weight"] = np.ones(d, np.float32)
    t["gpt_neox.final_layer_norm.bias"] = np.zeros(d, np.float32)
    save_tensors(path, t)
    (path.parent / "config.json").write_text(json.dumps({"num_attention_heads": n_heads, "hidden_act": "gelu"}))
    return t


def write_llama(path, rng, n_layers=2, n_heads=8, n_kv=2, d=32, vocab=40, ff=48):
    dh = d // n_heads
    t = {"model.embed_tokens.weight": rand(rng, vocab, d, scale=1.0), "lm_head.weight": rand(rng, vocab, d)}
    for l in range(n_layers):
        p = f"model.layers.{l}."
        t[p + "self_attn.v_proj.weight"] = rand(rng, n_kv * dh, d)
        t[p + "self_attn.o_proj.weight"] = rand(rng, d, n_heads * dh)
        t[p + "post_attention_layernorm.weight"] = 1 + rand(rng, d, scale=0.05)
        t[p + "mlp.up_proj.weight"] = rand(rng, ff, d)
        t[p + "mlp.gate_proj.weight"] = rand(rng, ff, d)
        t[p + "mlp.down_proj.weight"] = rand(rng, d, ff)
    t["model.norm.weight"] = np.ones(d, np.float32)
    save_tensors(path, t)
    (path.parent / "config.json").write_text(json.dumps(
        {"num_attention_heads": n_heads, "num_key_value_heads": n_kv, "tie_word_embeddings": False}
    ))
    return t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gpt2_file(tmp_path, rng):
    path = tmp_path / "model.safetensors"
    tensors = write_gpt2(path, rng)
    return path, tensors


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
