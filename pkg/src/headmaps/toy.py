"""Synthetic models with planted relation heads.

A toy is one attention layer without positional encodings, norms or biases.
Attention weights are supplied explicitly rather than computed from W_QK, so
only the OV pathway is exercised. A planted head maps each planted source
token onto its target:

    W_VO = gain * sum_pairs outer(e_s / ||e_s||^2, u_t / ||u_t||)

and the build checks by brute force that ``argmax(e_s W_VO U) == t`` for
every pair.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._linalg import matmul_rows
from .errors import DataError, PlantError
from .model_io import HeadRef, ModelGeometry, WeightStore
from .projector import DEFAULT_TAU, OVCircuit, relation_score, topk_hits
from .vocab import RelationSpec, TokenizedRelation, Vocabulary


@dataclass(frozen=True)
class ToyModelSpec:
    d_model: int = 128
    vocab_size: int = 256
    n_heads: int = 8
    seed: int = 0
    tie_embeddings: bool = True
    embedding_scale: float | None = None
    unplanted_scale: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 8 or self.d_model < 8:
            raise DataError("toy models need vocab_size >= 8 and d_model >= 8")
        if self.n_heads < 1:
            raise DataError("toy models need at least one head")

    @property
    def scale(self) -> float:
        # default keeps embedding rows near unit norm
        return self.embedding_scale if self.embedding_scale is not None else 1 / np.sqrt(self.d_model)


@dataclass(frozen=True)
class PlantSpec:
    head: int
    pairs: tuple[tuple[int, int], ...]
    gain: float = 4.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((int(s), int(t)) for s, t in self.pairs))
        if self.gain < 0:
            raise DataError("plant gain must be non-negative")
        sources = [s for s, _ in self.pairs]
        if len(set(sources)) != len(sources):
            raise DataError(f"plant on head {self.head} repeats a source token")

    @property
    def relation_name(self) -> str:
        return self.name or f"plant_h{self.head}"


@dataclass(frozen=True, eq=False)
class ToyModel:
    spec: ToyModelSpec
    embed: np.ndarray
    unembed: np.ndarray
    w_vo: np.ndarray
    plants: tuple[PlantSpec, ...] = ()
    gains: tuple[float, ...] | None = None

    @property
    def n_heads(self) -> int:
        return self.w_vo.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def circuit(self, head: int) -> OVCircuit:
        return OVCircuit(self.embed, self.w_vo[head], self.unembed, HeadRef(0, head))

    def relation(self, plant: PlantSpec, category: str = "custom") -> TokenizedRelation:
        return TokenizedRelation(RelationSpec(plant.relation_name, category), plant.pairs)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_mapping({f"Ġt{i}": i for i in range(self.vocab_size)})

    def to_store(self) -> WeightStore:
        """A one-layer weight store with W_V = W_VO and W_O = identity."""
        h, d = self.n_heads, self.embed.shape[1]
        geometry = ModelGeometry(
            n_layers=1, n_heads=h, n_kv_heads=h, d_model=d, d_head=d,
            vocab_size=self.vocab_size, weights_tied=self.spec.tie_embeddings,
        )
        eye = np.broadcast_to(np.eye(d, dtype=np.float32), (h, d, d))
        return WeightStore(geometry, self.embed, self.unembed, [self.w_vo], [eye], source="toy")

    def save(self, path) -> Path:
        """Write the toy in the generic safetensors schema."""
        from .safetensors_io import save_tensors

        d = self.embed.shape[1]
        tensors = {
            "embed": self.embed,
            "blocks.0.attn.w_v": self.w_vo,
            "blocks.0.attn.w_o": np.broadcast_to(np.eye(d, dtype=np.float32), self.w_vo.shape).copy(),
        }
        if not self.spec.tie_embeddings:
            tensors["unembed"] = self.unembed
        meta = {
            "headmaps": json.dumps({"weights_tied": self.spec.tie_embeddings}),
            "toy_spec": json.dumps(asdict(self.spec)),
            "plants": json.dumps([asdict(p) for p in self.plants]),
        }
        save_tensors(path, tensors, meta)
        return Path(path)


def _embeddings(spec: ToyModelSpec, rng: np.random.Generator):
    e = rng.standard_normal((spec.vocab_size, spec.d_model)) * spec.scale
    if spec.tie_embeddings:
        u = e.T
    else:
        u = rng.standard_normal((spec.d_model, spec.vocab_size)) * spec.scale
    return e, u


def plant_matrix(embed: np.ndarray, unembed: np.ndarray, pairs, gain: float) -> np.ndarray:
    """``gain * sum outer(e_s / ||e_s||^2, u_t / ||u_t||)`` in float64."""
    e = np.asarray(embed, dtype=np.float64)
    u = np.asarray(unembed, dtype=np.float64)
    w = np.zeros((e.shape[1], e.shape[1]))
    for s, t in pairs:
        w += np.outer(e[s] / (e[s] @ e[s]), u[:, t] / np.linalg.norm(u[:, t]))
    return gain * w


def _check_plant(model: ToyModel, plant: PlantSpec) -> None:
    pairs = np.asarray(plant.pairs, dtype=np.intp)
    rows = model.circuit(plant.head).rows(pairs[:, 0])
    got = rows.argmax(axis=1)
    bad = [(int(s), int(t), int(g)) for (s, t), g in zip(pairs, got) if g != t]
    if bad:
        s, t, g = bad[0]
        raise PlantError(
            f"plant on head {plant.head}: {len(bad)}/{len(pairs)} pairs violate the plant property "
            f"(e.g. source {s} maps to {g}, not {t}); increase d_model or the gain, or plant fewer pairs"
        )


def build_toy(spec: ToyModelSpec, plants=()) -> ToyModel:
    """Build a toy model and verify every plant by brute force.

    Unplanted heads are zero, or Gaussian with entry std
    ``unplanted_scale / sqrt(d_model)`` when ``unplanted_scale > 0``. A plant
    with gain 0 leaves a zero head and claims nothing.
    """
    plants = tuple(plants)
    rng = np.random.default_rng(spec.seed)
    e, u = _embeddings(spec, rng)
    d = spec.d_model
    w = np.zeros((spec.n_heads, d, d))
    if spec.unplanted_scale > 0:
        w = rng.standard_normal((spec.n_heads, d, d)) * (spec.unplanted_scale / np.sqrt(d))
    seen_heads = set()
    for p in plants:
        if not 0 <= p.head < spec.n_heads:
            raise DataError(f"plant references head {p.head} outside [0, {spec.n_heads})")
        if p.head in seen_heads:
            raise DataError(f"head {p.head} carries more than one plant")
        seen_heads.add(p.head)
        for s, t in p.pairs:
            if not (0 <= s < spec.vocab_size and 0 <= t < spec.vocab_size):
                raise DataError(f"plant pair ({s}, {t}) outside the toy vocabulary")
        w[p.head] = plant_matrix(e, u, p.pairs, p.gain)
    e32 = e.astype(np.float32)
    model = ToyModel(
        spec,
        e32,
        e32.T if spec.tie_embeddings else u.astype(np.float32),
        w.astype(np.float32),
        plants,
    )
    for p in plants:
        if p.gain > 0:
            _check_plant(model, p)
    return model


def random_pairs(vocab_size: int, n: int, rng: np.random.Generator, exclude=()) -> tuple[tuple[int, int], ...]:
    """``n`` pairs with distinct sources outside ``exclude`` and targets different from their source."""
    pool = np.setdiff1d(np.arange(vocab_size), np.asarray(list(exclude), dtype=int))
    if len(pool) < n:
        raise DataError(f"cannot draw {n} distinct sources from {len(pool)} free tokens")
    sources = rng.choice(pool, size=n, replace=False)
    targets = []
    for s in sources:
        t = int(rng.integers(vocab_size - 1))
        targets.append(t + (t >= s))
    return tuple((int(s), int(t)) for s, t in zip(sources, targets))


def make_plants(spec: ToyModelSpec, heads, n_pairs: int, gain: float, seed: int | None = None) -> list[PlantSpec]:
    """Plants on ``heads`` with disjoint source sets."""
    rng = np.random.default_rng(spec.seed + 10_000 if seed is None else seed)
    used: set[int] = set()
    plants = []
    for h in heads:
        pairs = random_pairs(spec.vocab_size, n_pairs, rng, used)
        used.update(s for s, _ in pairs)
        plants.append(PlantSpec(h, pairs, gain))
    return plants


def graded_family(
    spec: ToyModelSpec, pairs, gains, noise_scale: float, seed: int | None = None
) -> ToyModel:
    """Heads ``gain_i * P + N_i``: one plant direction P, independent Gaussian noise N_i.

    These heads are not plants (low gains lose to the noise by design), so
    no plant property is checked; ``model.gains`` records the grading.
    """
    rng = np.random.default_rng(spec.seed)
    e, u = _embeddings(spec, rng)
    d = spec.d_model
    base = plant_matrix(e, u, pairs, 1.0)
    noise_rng = np.random.default_rng(spec.seed + 1 if seed is None else seed)
    heads = np.stack([
        g * base + noise_rng.standard_normal((d, d)) * (noise_scale / np.sqrt(d)) for g in gains
    ])
    e32 = e.astype(np.float32)
    spec = ToyModelSpec(**{**asdict(spec), "n_heads": len(gains)})
    return ToyModel(
        spec, e32, e32.T if spec.tie_embeddings else u.astype(np.float32),
        heads.astype(np.float32), (), tuple(float(g) for g in gains),
    )


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[int, ...]
    query_position: int
    attention: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "attention", tuple(float(a) for a in self.attention))
        if len(self.tokens) == 0 or len(self.tokens) != len(self.attention):
            raise DataError("prompt needs one attention weight per token")
        if not 0 <= self.query_position < len(self.tokens):
            raise DataError("query position outside the prompt")
        if min(self.attention) < 0 or abs(sum(self.attention) - 1.0) > 1e-6:
            raise DataError("attention weights must be non-negative and sum to 1")


PromptTemplate = Callable[[int], PromptSpec]


def self_attention_prompt(source: int, fillers=(0, 1)) -> PromptSpec:
    """Fillers then the source, attending only to the source (the self-attention baseline)."""
    n = len(fillers) + 1
    return PromptSpec(tuple(fillers) + (source,), n - 1, (0.0,) * (n - 1) + (1.0,))


def uniform_last_two_prompt(source: int, fillers=(0, 1)) -> PromptSpec:
    """Fillers then the source, attention split evenly between the last filler and the source."""
    n = len(fillers) + 1
    return PromptSpec(tuple(fillers) + (source,), n - 1, (0.0,) * (n - 2) + (0.5, 0.5))


def _contextualized(model: ToyModel, prompt: PromptSpec) -> np.ndarray:
    a = np.asarray(prompt.attention, dtype=np.float32)[:, None]
    return (a * model.embed[list(prompt.tokens)]).sum(axis=0, dtype=np.float32)


def toy_head_output(model: ToyModel, head: int, prompt: PromptSpec) -> np.ndarray:
    """Head output at the query position: ``(sum_p a_p e_{token_p}) @ W_VO``."""
    x = _contextualized(model, prompt)
    return matmul_rows(x[None, :], model.w_vo[head])[0]


def dynamic_relation_score(
    model: ToyModel,
    head: int,
    tokrel: TokenizedRelation,
    k: int = 1,
    template: PromptTemplate = self_attention_prompt,
) -> float:
    """Fraction of pairs whose target is in the top-k of the head's actual output logits."""
    if not tokrel.pairs:
        raise DataError(f"relation {tokrel.name!r} has no pairs")
    pairs = np.asarray(tokrel.pairs, dtype=np.intp)
    outputs = np.stack([toy_head_output(model, head, template(int(s))) for s in pairs[:, 0]])
    logits = matmul_rows(outputs, model.unembed)
    return float(topk_hits(logits, pairs[:, 1], k).mean())


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("pearson needs two 1-d vectors of equal length >= 3")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise ValueError("pearson correlation undefined for a constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def ablate_and_predict(model: ToyModel, prompt: PromptSpec, ablated_heads=()) -> int:
    """Greedy next token from the query token's residual plus the surviving heads' outputs."""
    ablated = set(ablated_heads)
    residual = model.embed[prompt.tokens[prompt.query_position]].astype(np.float32).copy()
    for h in range(model.n_heads):
        if h not in ablated:
            residual += toy_head_output(model, h, prompt)
    logits = matmul_rows(residual[None, :], model.unembed)[0]
    return int(np.argmax(logits))


def task_accuracy(
    model: ToyModel, pairs, ablated_heads=(), template: PromptTemplate = self_attention_prompt
) -> float:
    hits = [ablate_and_predict(model, template(s), ablated_heads) == t for s, t in pairs]
    return float(np.mean(hits))


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class BatteryReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [asdict(c) for c in self.checks]}


@dataclass(frozen=True)
class BatteryConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    d_model: int = 128
    vocab_size: int = 256
    n_heads: int = 8
    planted_heads: tuple[int, ...] = (0, 1)
    n_pairs: int = 20
    gain: float = 8.0
    unplanted_scale: float = 0.3
    tau: float = DEFAULT_TAU

    @classmethod
    def from_dict(cls, data: dict) -> "BatteryConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown toy config fields {sorted(unknown)}")
        data = dict(data)
        for key in ("seeds", "planted_heads"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def run_battery(cfg: BatteryConfig) -> BatteryReport:
    """Static, static/dynamic agreement and causal checks over the configured seeds."""
    report = BatteryReport()
    for seed in cfg.seeds:
        spec = ToyModelSpec(cfg.d_model, cfg.vocab_size, cfg.n_heads, seed, unplanted_scale=cfg.unplanted_scale)
        model = build_toy(spec, make_plants(spec, cfg.planted_heads, cfg.n_pairs, cfg.gain))
        relations = [model.relation(p) for p in model.plants]
        for p, rel in zip(model.plants, relations):
            for h in range(model.n_heads):
                static = relation_score(model.circuit(h), rel, k=1, tau=cfg.tau)
                dynamic = dynamic_relation_score(model, h, rel, k=1)
                if h == p.head:
                    report.add(f"seed {seed}: planted head {h} scores 1.0", static.score == 1.0, f"score={static.score}")
                elif h not in cfg.planted_heads:
                    report.add(
                        f"seed {seed}: unplanted head {h} below tau on {rel.name}",
                        static.score < cfg.tau, f"score={static.score}",
                    )
                report.add(
                    f"seed {seed}: head {h} static == dynamic on {rel.name}",
                    static.score == dynamic, f"static={static.score} dynamic={dynamic}",
                )
            rng = np.random.default_rng(seed)
            others = [h for h in range(model.n_heads) if h not in cfg.planted_heads]
            random_ablation = tuple(rng.choice(others, size=1, replace=False).tolist()) if others else ()
            full = task_accuracy(model, p.pairs)
            knocked = task_accuracy(model, p.pairs, (p.head,))
            control = task_accuracy(model, p.pairs, random_ablation)
            report.add(f"seed {seed}: {rel.name} unablated accuracy 1.0", full == 1.0, f"acc={full}")
            report.add(f"seed {seed}: {rel.name} planted-head ablation <= 0.1", knocked <= 0.1, f"acc={knocked}")
            report.add(f"seed {seed}: {rel.name} control ablation >= 0.9", control >= 0.9, f"acc={control}")
    return report
