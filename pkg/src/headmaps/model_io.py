"""Model geometry, the read-only weight store, and per-head OV matrices."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from scipy.special import erf

from ._linalg import matmul_rows
from .errors import ModelLoadError

NormKind = Literal["layernorm", "rmsnorm"]
MlpKind = Literal["standard", "gated"]
Activation = Literal["gelu-tanh", "gelu-erf", "silu"]
Policy = Literal["raw", "first-mlp"]

POLICIES = ("raw", "first-mlp")


@dataclass(frozen=True)
class ModelGeometry:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    weights_tied: bool = False
    norm_kind: NormKind = "layernorm"
    mlp_kind: MlpKind = "standard"
    activation: Activation = "gelu-tanh"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "n_kv_heads", "d_model", "d_head", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ModelLoadError(f"geometry: {name} must be positive, got {getattr(self, name)}")
        if self.n_heads % self.n_kv_heads:
            raise ModelLoadError(
                f"geometry: n_kv_heads={self.n_kv_heads} does not divide n_heads={self.n_heads}"
            )
        if self.norm_kind not in ("layernorm", "rmsnorm"):
            raise ModelLoadError(f"geometry: unknown norm_kind {self.norm_kind!r}")
        if self.mlp_kind not in ("standard", "gated"):
            raise ModelLoadError(f"geometry: unknown mlp_kind {self.mlp_kind!r}")
        if self.activation not in ("gelu-tanh", "gelu-erf", "silu"):
            raise ModelLoadError(f"geometry: unknown activation {self.activation!r}")

    def heads(self) -> list["HeadRef"]:
        return [HeadRef(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]

    def check_head(self, head: "HeadRef") -> None:
        if not (0 <= head.layer < self.n_layers and 0 <= head.head < self.n_heads):
            raise IndexError(f"head {head} outside {self.n_layers} layers x {self.n_heads} heads")


@dataclass(frozen=True, order=True)
class HeadRef:
    layer: int
    head: int

    def __str__(self):
        return f"{self.layer}.{self.head}"

    @classmethod
    def parse(cls, text: str) -> "HeadRef":
        """Parse the ``"layer.head"`` notation, e.g. ``"16.11"``."""
        try:
            layer, head = text.split(".")
            return cls(int(layer), int(head))
        except ValueError:
            raise ValueError(f"expected a head as LAYER.HEAD, got {text!r}") from None


def kv_group(geometry: ModelGeometry, head: int) -> int:
    """Index of the key/value head shared by query head ``head``."""
    if not 0 <= head < geometry.n_heads:
        raise IndexError(f"head {head} outside [0, {geometry.n_heads})")
    return head // (geometry.n_heads // geometry.n_kv_heads)


@dataclass(frozen=True)
class Norm:
    kind: NormKind
    scale: np.ndarray
    bias: np.ndarray | None = None
    eps: float = 1e-5

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if self.kind == "layernorm":
            mu = x.mean(axis=-1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
            y = (x - mu) / np.sqrt(var + np.float32(self.eps))
        else:
            y = x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + np.float32(self.eps))
        y = y * self.scale
        if self.bias is not None:
            y = y + self.bias
        return y.astype(np.float32, copy=False)


def activate(x: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == "gelu-tanh":
        c = np.float32(np.sqrt(2.0 / np.pi))
        return 0.5 * x * (1.0 + np.tanh(c * (x + np.float32(0.044715) * x**3)))
    if activation == "gelu-erf":
        return (0.5 * x * (1.0 + erf(x / np.float32(np.sqrt(2.0))))).astype(np.float32)
    if activation == "silu":
        return x / (1.0 + np.exp(-x))
    raise ValueError(f"unknown activation {activation!r}")


@dataclass(frozen=True)
class MLP:
    """First-layer MLP in row-vector convention (``x @ w_in``).

    ``w_gate`` is set only for gated MLPs: ``(act(x @ w_gate) * (x @ w_in)) @ w_out``.
    """

    kind: MlpKind
    activation: Activation
    w_in: np.ndarray
    w_out: np.ndarray
    b_in: np.ndarray | None = None
    b_out: np.ndarray | None = None
    w_gate: np.ndarray | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        h = matmul_rows(x, self.w_in)
        if self.b_in is not None:
            h = h + self.b_in
        if self.kind == "gated":
            if self.w_gate is None:
                raise ModelLoadError("gated MLP without a gate projection")
            h = activate(matmul_rows(x, self.w_gate), self.activation) * h
        else:
            h = activate(h, self.activation)
        y = matmul_rows(h, self.w_out)
        if self.b_out is not None:
            y = y + self.b_out
        return y.astype(np.float32, copy=False)


@dataclass(frozen=True)
class WeightStore:
    """Read-only view over one model's weights.

    ``w_v[layer]`` has shape (n_kv_heads, d_model, d_head) and ``w_o[layer]``
    has shape (n_heads, d_head, d_model); both may be lazy views over a memory
    map in the file's storage dtype and are upcast per head on access.
    """

    geometry: ModelGeometry
    embedding: np.ndarray
    unembedding: np.ndarray
    w_v: list
    w_o: list
    norm0: Norm | None = None
    mlp0: MLP | None = None
    final_norm: Norm | None = None
    default_policy: Policy = "raw"
    residual_first_mlp: bool = True
    source: str = ""
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    @property
    def vocab_size(self) -> int:
        return self.geometry.vocab_size

    def value_matrix(self, layer: int, kv_head: int) -> np.ndarray:
        return np.asarray(self.w_v[layer][kv_head], dtype=np.float32)

    def output_matrix(self, layer: int, head: int) -> np.ndarray:
        return np.asarray(self.w_o[layer][head], dtype=np.float32)

    def circuit(self, head: HeadRef, policy: Policy | None = None, final_norm: bool = False):
        """Bundle this head's E', W_VO and U for the projector."""
        from .projector import OVCircuit

        return OVCircuit(
            embed=effective_embeddings(self, head.layer, policy),
            w_vo=head_vo(self, head),
            unembed=self.unembedding,
            head=head,
            final_norm=self.final_norm if final_norm else None,
        )


def head_vo(store: WeightStore, head: HeadRef) -> np.ndarray:
    """W_VO = W_V(kv_group(head)) @ W_O(head), a d_model x d_model matrix. Biases are excluded."""
    g = store.geometry
    g.check_head(head)
    w_v = store.value_matrix(head.layer, kv_group(g, head.head))
    w_o = store.output_matrix(head.layer, head.head)
    return matmul_rows(w_v, w_o)


def layer_vo(store: WeightStore, layer: int) -> np.ndarray:
    """All heads' W_VO for one layer, shape (n_heads, d, d)."""
    return np.stack([head_vo(store, HeadRef(layer, h)) for h in range(store.geometry.n_heads)])


def effective_embeddings(
    store: WeightStore,
    layer: int,
    policy: Policy | None = None,
    block_rows: int = 4096,
) -> np.ndarray:
    """Token embeddings as seen by heads in ``layer``.

    ``raw`` (or layer 0, whose attention precedes the first MLP) returns the
    embedding matrix itself. ``first-mlp`` returns ``E + MLP0(Norm0(E))``, or
    just ``MLP0(Norm0(E))`` when the store has ``residual_first_mlp=False``.
    """
    policy = policy or store.default_policy
    if policy not in POLICIES:
        raise ValueError(f"unknown embedding policy {policy!r}; expected one of {POLICIES}")
    if not 0 <= layer < store.geometry.n_layers:
        raise IndexError(f"layer {layer} outside [0, {store.geometry.n_layers})")
    if policy == "raw" or layer == 0:
        return store.embedding
    if store.mlp0 is None or store.norm0 is None:
        raise ModelLoadError("first-mlp embeddings need the layer-0 MLP and the norm preceding it")
    key = ("first-mlp", store.residual_first_mlp)
    with store._lock:
        if key not in store._cache:
            e = store.embedding
            out = np.empty_like(e)
            for lo in range(0, e.shape[0], block_rows):
                x = e[lo : lo + block_rows]
                y = store.mlp0(store.norm0(x))
                out[lo : lo + block_rows] = x + y if store.residual_first_mlp else y
            out.setflags(write=False)
            store._cache[key] = out
        return store._cache[key]


def load_geometry_overrides(path) -> dict:
    """Read a YAML or JSON file of geometry fields (plus optional ``default_policy``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelLoadError(f"{path}: cannot read geometry config ({exc.strerror})") from None
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ModelLoadError(f"{path}: geometry config must be a mapping")
    allowed = set(ModelGeometry.__dataclass_fields__) | {"default_policy", "norm_eps"}
    unknown = set(data) - allowed
    if unknown:
        raise ModelLoadError(f"{path}: unknown geometry fields {sorted(unknown)}")
    return data


def load_model(
    path,
    adapter: str | None = None,
    overrides: dict | None = None,
    check_finite: bool = True,
) -> tuple[ModelGeometry, WeightStore]:
    """Load a safetensors file (or a directory of shards) through an adapter.

    ``adapter=None`` auto-detects from tensor names. A ``config.json`` next
    to the weights (or a ``headmaps`` entry in the file metadata) supplies
    hyperparameters the tensors cannot reveal, such as head counts and norm
    epsilon; ``overrides`` wins over both.
    """
    from . import adapters
    from .safetensors_io import load_container, read_metadata

    path = Path(path)
    tensors = load_container(path)
    config_dir = path if path.is_dir() else path.parent
    hf_config = {}
    if (config_dir / "config.json").exists():
        try:
            hf_config.update(json.loads((config_dir / "config.json").read_text()))
        except json.JSONDecodeError as exc:
            raise ModelLoadError(f"{config_dir / 'config.json'}: invalid JSON ({exc})") from None
    if path.is_file() and "headmaps" in (meta := read_metadata(path)):
        hf_config.update(json.loads(meta["headmaps"]))
    name = adapter or adapters.detect(tensors)
    store = adapters.get(name).build(tensors, hf_config, dict(overrides or {}))
    store = replace(store, source=str(path))
    if check_finite:
        _check_finite(store)
    return store.geometry, store


def _check_finite(store: WeightStore, chunk: int = 1 << 22) -> None:
    def scan(name, arr):
        if arr is None:
            return
        flat = np.asarray(arr).reshape(-1)
        for lo in range(0, flat.size, chunk):
            if not np.isfinite(flat[lo : lo + chunk]).all():
                raise ModelLoadError(f"tensor {name} contains NaN or Inf")

    scan("embedding", store.embedding)
    if not store.geometry.weights_tied:
        scan("unembedding", store.unembedding)
    for layer, (v, o) in enumerate(zip(store.w_v, store.w_o)):
        scan(f"layer {layer} value projection", v)
        scan(f"layer {layer} output projection", o)
    for label, mod in (("norm0", store.norm0), ("final norm", store.final_norm)):
        if mod is not None:
            scan(f"{label} scale", mod.scale)
            scan(f"{label} bias", mod.bias)
    if store.mlp0 is not None:
        for attr in ("w_in", "w_out", "b_in", "b_out", "w_gate"):
            scan(f"mlp0 {attr}", getattr(store.mlp0, attr))
