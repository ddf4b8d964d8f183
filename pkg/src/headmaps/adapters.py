"""Per-architecture tensor-name schemas and slicing rules.

Every adapter turns a flat ``name -> array`` mapping into a
:class:`~headmaps.model_io.WeightStore` in row-vector convention:
``w_v[layer]`` is (n_kv_heads, d_model, d_head), ``w_o[layer]`` is
(n_heads, d_head, d_model), the embedding is (vocab, d_model) and the
unembedding (d_model, vocab).

Storage conventions handled here:

* GPT-2 ``Conv1D`` weights are already (in, out); the fused ``c_attn`` holds
  Q | K | V blocks side by side along the output axis.
* GPT-NeoX ``Linear`` weights are (out, in) and the fused
  ``query_key_value`` output axis is interleaved per head as (head, qkv, d_head).
* Llama stores separate (out, in) ``v_proj`` / ``o_proj`` with fewer KV heads.
"""

from __future__ import annotations

import re

import numpy as np

from .errors import AdapterError
from .model_io import MLP, ModelGeometry, Norm, WeightStore


def _f32(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float32)
    out.setflags(write=False)
    return out


class _Tensors:
    def __init__(self, tensors: dict, prefix: str = ""):
        self.tensors = tensors
        self.prefix = prefix

    def has(self, name: str) -> bool:
        return self.prefix + name in self.tensors

    def get(self, name: str, shape: tuple | None = None) -> np.ndarray:
        full = self.prefix + name
        if full not in self.tensors:
            raise AdapterError(f"missing tensor {full!r}")
        arr = self.tensors[full]
        if shape is not None and tuple(arr.shape) != tuple(shape):
            raise AdapterError(f"tensor {full!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
        return arr

    def opt(self, name: str, shape: tuple | None = None):
        return self.get(name, shape) if self.has(name) else None

    def count_layers(self, pattern: str) -> int:
        rx = re.compile(re.escape(self.prefix) + pattern)
        layers = {int(m.group(1)) for k in self.tensors if (m := rx.fullmatch(k))}
        if not layers:
            raise AdapterError(f"no tensors match layer pattern {self.prefix + pattern!r}")
        n = max(layers) + 1
        missing = sorted(set(range(n)) - layers)
        if missing:
            raise AdapterError(f"layers {missing} missing for pattern {self.prefix + pattern!r}")
        return n


def _pick(overrides: dict, config: dict, keys: tuple, default=None, what: str = ""):
    for source in (overrides, config):
        for k in keys:
            if source.get(k) is not None:
                return source[k]
    if default is None:
        raise AdapterError(f"cannot determine {what or keys[0]}: set it in config.json or the geometry config")
    return default


def _geometry(overrides: dict, **fields) -> ModelGeometry:
    for k in ModelGeometry.__dataclass_fields__:
        if k in overrides:
            fields[k] = overrides[k]
    return ModelGeometry(**fields)


def _unembedding(t: _Tensors, embedding: np.ndarray, tied: bool, name: str):
    if tied:
        return embedding.T
    return _f32(t.get(name, embedding.shape)).T


class Adapter:
    name = ""
    marker = ""

    def matches(self, names) -> bool:
        return any(self.marker in n for n in names)

    def build(self, tensors: dict, config: dict, overrides: dict) -> WeightStore:
        raise NotImplementedError


class GPT2Adapter(Adapter):
    name = "gpt2"
    marker = "attn.c_attn.weight"

    def build(self, tensors, config, overrides):
        prefix = "transformer." if "transformer.wte.weight" in tensors else ""
        t = _Tensors(tensors, prefix)
        wte = t.get("wte.weight")
        vocab, d = wte.shape
        n_layers = t.count_layers(r"h\.(\d+)\.attn\.c_attn\.weight")
        n_heads = int(_pick(overrides, config, ("n_heads", "n_head", "num_attention_heads"), what="n_heads"))
        if d % n_heads:
            raise AdapterError(f"d_model={d} not divisible by n_heads={n_heads}")
        dh = d // n_heads
        tied_default = not ("lm_head.weight" in tensors) and config.get("tie_word_embeddings", True)
        geometry = _geometry(
            overrides, n_layers=n_layers, n_heads=n_heads, n_kv_heads=n_heads, d_model=d, d_head=dh,
            vocab_size=vocab, weights_tied=bool(tied_default), norm_kind="layernorm",
            mlp_kind="standard", activation="gelu-tanh",
        )
        embedding = _f32(wte)
        unembedding = _unembedding(_Tensors(tensors), embedding, geometry.weights_tied, "lm_head.weight")
        w_v, w_o = [], []
        for l in range(n_layers):
            c_attn = t.get(f"h.{l}.attn.c_attn.weight", (d, 3 * d))
            c_proj = t.get(f"h.{l}.attn.c_proj.weight", (d, d))
            w_v.append(c_attn[:, 2 * d :].reshape(d, n_heads, dh).transpose(1, 0, 2))
            w_o.append(c_proj.reshape(n_heads, dh, d))
        eps = float(_pick(overrides, config, ("norm_eps", "layer_norm_epsilon"), 1e-5))
        norm0 = mlp0 = None
        if t.has("h.0.ln_2.weight") and t.has("h.0.mlp.c_fc.weight"):
            norm0 = Norm("layernorm", _f32(t.get("h.0.ln_2.weight", (d,))), _f32(t.get("h.0.ln_2.bias", (d,))), eps)
            c_fc = t.get("h.0.mlp.c_fc.weight")
            ff = c_fc.shape[1]
            mlp0 = MLP(
                "standard", geometry.activation,
                w_in=_f32(t.get("h.0.mlp.c_fc.weight", (d, ff))),
                b_in=_f32(t.get("h.0.mlp.c_fc.bias", (ff,))),
                w_out=_f32(t.get("h.0.mlp.c_proj.weight", (ff, d))),
                b_out=_f32(t.get("h.0.mlp.c_proj.bias", (d,))),
            )
        final = None
        if t.has("ln_f.weight"):
            final = Norm("layernorm", _f32(t.get("ln_f.weight", (d,))), _f32(t.opt("ln_f.bias", (d,))), eps)
        return WeightStore(
            geometry, embedding, unembedding, w_v, w_o, norm0, mlp0, final,
            default_policy=overrides.get("default_policy", "first-mlp" if mlp0 else "raw"),
        )


class GPTNeoXAdapter(Adapter):
    name = "gpt_neox"
    marker = "attention.query_key_value.weight"

    def build(self, tensors, config, overrides):
        t = _Tensors(tensors, "gpt_neox.")
        emb = t.get("embed_in.weight")
        vocab, d = emb.shape
        n_layers = t.count_layers(r"layers\.(\d+)\.attention\.query_key_value\.weight")
        n_heads = int(_pick(overrides, config, ("n_heads", "num_attention_heads"), what="n_heads"))
        if d % n_heads:
            raise AdapterError(f"d_model={d} not divisible by n_heads={n_heads}")
        dh = d // n_heads
        act = {"gelu": "gelu-erf", "gelu_new": "gelu-tanh", "gelu_fast": "gelu-tanh"}.get(
            config.get("hidden_act", "gelu"), "gelu-erf"
        )
        geometry = _geometry(
            overrides, n_layers=n_layers, n_heads=n_heads, n_kv_heads=n_heads, d_model=d, d_head=dh,
            vocab_size=vocab, weights_tied=bool(config.get("tie_word_embeddings", False)),
            norm_kind="layernorm", mlp_kind="standard", activation=act,
        )
        embedding = _f32(emb)
        unembedding = _unembedding(_Tensors(tensors), embedding, geometry.weights_tied, "embed_out.weight")
        w_v, w_o = [], []
        for l in range(n_layers):
            qkv = t.get(f"layers.{l}.attention.query_key_value.weight", (3 * d, d))
            dense = t.get(f"layers.{l}.attention.dense.weight", (d, d))
            w_v.append(qkv.reshape(n_heads, 3, dh, d)[:, 2].transpose(0, 2, 1))
            w_o.append(dense.reshape(d, n_heads, dh).transpose(1, 2, 0))
        eps = float(_pick(overrides, config, ("norm_eps", "layer_norm_eps"), 1e-5))
        norm0 = mlp0 = None
        # parallel residual: the MLP reads post_attention_layernorm(x), not the attention output
        if t.has("layers.0.post_attention_layernorm.weight") and t.has("layers.0.mlp.dense_h_to_4h.weight"):
            p = "layers.0."
            norm0 = Norm(
                "layernorm", _f32(t.get(p + "post_attention_layernorm.weight", (d,))),
                _f32(t.get(p + "post_attention_layernorm.bias", (d,))), eps,
            )
            ff = t.get(p + "mlp.dense_h_to_4h.weight").shape[0]
            mlp0 = MLP(
                "standard", geometry.activation,
                w_in=_f32(t.get(p + "mlp.dense_h_to_4h.weight", (ff, d)).T),
                b_in=_f32(t.get(p + "mlp.dense_h_to_4h.bias", (ff,))),
                w_out=_f32(t.get(p + "mlp.dense_4h_to_h.weight", (d, ff)).T),
                b_out=_f32(t.get(p + "mlp.dense_4h_to_h.bias", (d,))),
            )
        final = None
        if t.has("final_layer_norm.weight"):
            final = Norm(
                "layernorm", _f32(t.get("final_layer_norm.weight", (d,))),
                _f32(t.opt("final_layer_norm.bias", (d,))), eps,
            )
        return WeightStore(
            geometry, embedding, unembedding, w_v, w_o, norm0, mlp0, final,
            default_policy=overrides.get("default_policy", "first-mlp" if mlp0 else "raw"),
        )


class LlamaAdapter(Adapter):
    name = "llama"
    marker = "self_attn.v_proj.weight"

    def build(self, tensors, config, overrides):
        t = _Tensors(tensors, "model.")
        emb = t.get("embed_tokens.weight")
        vocab, d = emb.shape
        n_layers = t.count_layers(r"layers\.(\d+)\.self_attn\.v_proj\.weight")
        n_heads = int(_pick(overrides, config, ("n_heads", "num_attention_heads"), what="n_heads"))
        dh = int(_pick(overrides, config, ("d_head", "head_dim"), d // n_heads))
        v0 = t.get("layers.0.self_attn.v_proj.weight")
        if v0.shape[0] % dh:
            raise AdapterError(f"tensor 'model.layers.0.self_attn.v_proj.weight' rows {v0.shape[0]} not a multiple of d_head={dh}")
        n_kv = int(_pick(overrides, config, ("n_kv_heads", "num_key_value_heads"), v0.shape[0] // dh))
        tied = bool(config.get("tie_word_embeddings", "lm_head.weight" not in tensors))
        geometry = _geometry(
            overrides, n_layers=n_layers, n_heads=n_heads, n_kv_heads=n_kv, d_model=d, d_head=dh,
            vocab_size=vocab, weights_tied=tied, norm_kind="rmsnorm", mlp_kind="gated", activation="silu",
        )
        embedding = _f32(emb)
        unembedding = _unembedding(_Tensors(tensors), embedding, geometry.weights_tied, "lm_head.weight")
        w_v, w_o = [], []
        for l in range(n_layers):
            v = t.get(f"layers.{l}.self_attn.v_proj.weight", (n_kv * dh, d))
            o = t.get(f"layers.{l}.self_attn.o_proj.weight", (d, n_heads * dh))
            w_v.append(v.reshape(n_kv, dh, d).transpose(0, 2, 1))
            w_o.append(o.reshape(d, n_heads, dh).transpose(1, 2, 0))
        eps = float(_pick(overrides, config, ("norm_eps", "rms_norm_eps"), 1e-5))
        norm0 = mlp0 = None
        p = "layers.0."
        if t.has(p + "post_attention_layernorm.weight") and t.has(p + "mlp.up_proj.weight"):
            norm0 = Norm("rmsnorm", _f32(t.get(p + "post_attention_layernorm.weight", (d,))), None, eps)
            ff = t.get(p + "mlp.up_proj.weight").shape[0]
            mlp0 = MLP(
                "gated", "silu",
                w_in=_f32(t.get(p + "mlp.up_proj.weight", (ff, d)).T),
                w_gate=_f32(t.get(p + "mlp.gate_proj.weight", (ff, d)).T),
                w_out=_f32(t.get(p + "mlp.down_proj.weight", (d, ff)).T),
            )
        final = None
        if t.has("norm.weight"):
            final = Norm("rmsnorm", _f32(t.get("norm.weight", (d,))), None, eps)
        # 70B-scale geometry (80 layers x 64 heads) reads the raw embeddings by default
        large = n_layers == 80 and n_heads == 64
        policy = "raw" if (mlp0 is None or large) else "first-mlp"
        return WeightStore(
            geometry, embedding, unembedding, w_v, w_o, norm0, mlp0, final,
            default_policy=overrides.get("default_policy", policy),
        )


class GenericAdapter(Adapter):
    """Native schema used by toy exports.

    ``embed`` (V, d); ``unembed`` (d, V), optional when ``weights_tied``;
    ``blocks.{l}.attn.w_v`` (n_kv, d, d_head); ``blocks.{l}.attn.w_o``
    (n_heads, d_head, d); optional ``blocks.0.norm.{scale,bias}``,
    ``blocks.0.mlp.{w_in,b_in,w_out,b_out,w_gate}``, ``final_norm.{scale,bias}``.
    """

    name = "generic"
    marker = "attn.w_v"

    def build(self, tensors, config, overrides):
        t = _Tensors(tensors)
        emb = t.get("embed")
        vocab, d = emb.shape
        n_layers = t.count_layers(r"blocks\.(\d+)\.attn\.w_v")
        v0 = t.get("blocks.0.attn.w_v")
        o0 = t.get("blocks.0.attn.w_o")
        if v0.ndim != 3 or o0.ndim != 3:
            raise AdapterError("tensors 'blocks.0.attn.w_v' and 'blocks.0.attn.w_o' must be 3-d")
        n_kv, _, dh = v0.shape
        n_heads = o0.shape[0]
        tied = bool(overrides.get("weights_tied", config.get("weights_tied", False)))
        fields = dict(
            n_layers=n_layers, n_heads=n_heads, n_kv_heads=n_kv, d_model=d, d_head=dh, vocab_size=vocab,
            weights_tied=tied,
            norm_kind=config.get("norm_kind", "layernorm"),
            mlp_kind=config.get("mlp_kind", "standard"),
            activation=config.get("activation", "gelu-tanh"),
        )
        geometry = _geometry(overrides, **fields)
        embedding = _f32(emb)
        if geometry.weights_tied:
            unembedding = embedding.T
        else:
            unembedding = _f32(t.get("unembed", (d, vocab)))
        w_v = [t.get(f"blocks.{l}.attn.w_v", (n_kv, d, dh)) for l in range(n_layers)]
        w_o = [t.get(f"blocks.{l}.attn.w_o", (n_heads, dh, d)) for l in range(n_layers)]
        eps = float(_pick(overrides, config, ("norm_eps",), 1e-5))
        norm0 = mlp0 = final = None
        if t.has("blocks.0.norm.scale"):
            norm0 = Norm(geometry.norm_kind, _f32(t.get("blocks.0.norm.scale", (d,))),
                         None if not t.has("blocks.0.norm.bias") else _f32(t.get("blocks.0.norm.bias", (d,))), eps)
        if t.has("blocks.0.mlp.w_in"):
            w_in = t.get("blocks.0.mlp.w_in")
            ff = w_in.shape[1]
            mlp0 = MLP(
                geometry.mlp_kind, geometry.activation,
                w_in=_f32(t.get("blocks.0.mlp.w_in", (d, ff))),
                w_out=_f32(t.get("blocks.0.mlp.w_out", (ff, d))),
                b_in=None if not t.has("blocks.0.mlp.b_in") else _f32(t.get("blocks.0.mlp.b_in", (ff,))),
                b_out=None if not t.has("blocks.0.mlp.b_out") else _f32(t.get("blocks.0.mlp.b_out", (d,))),
                w_gate=None if not t.has("blocks.0.mlp.w_gate") else _f32(t.get("blocks.0.mlp.w_gate", (d, ff))),
            )
        if t.has("final_norm.scale"):
            final = Norm(geometry.norm_kind, _f32(t.get("final_norm.scale", (d,))),
                         None if not t.has("final_norm.bias") else _f32(t.get("final_norm.bias", (d,))), eps)
        policy = "first-mlp" if (mlp0 is not None and norm0 is not None) else "raw"
        return WeightStore(
            geometry, embedding, unembedding, w_v, w_o, norm0, mlp0, final,
            default_policy=overrides.get("default_policy", policy),
        )


ADAPTERS = {a.name: a for a in (GPT2Adapter(), GPTNeoXAdapter(), LlamaAdapter(), GenericAdapter())}


def get(name: str) -> Adapter:
    try:
        return ADAPTERS[name]
    except KeyError:
        raise AdapterError(f"unknown adapter {name!r}; known: {sorted(ADAPTERS)}") from None


def detect(tensors: dict) -> str:
    names = list(tensors)
    hits = [a.name for a in ADAPTERS.values() if a.matches(names)]
    if len(hits) != 1:
        raise AdapterError(
            f"cannot auto-detect adapter (candidates: {hits or 'none'}); pass one of {sorted(ADAPTERS)}"
        )
    return hits[0]
