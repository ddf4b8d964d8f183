"""Head x relation sweeps over a whole model and their aggregate statistics."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from .errors import DataError
from .model_io import HeadRef, WeightStore, load_geometry_overrides, load_model
from .projector import DEFAULT_TAU, DIRECTIONS, RelationScore, classify, relation_score
from .vocab import TokenizedRelation, default_k, load_relations, load_vocab

log = logging.getLogger(__name__)

HIST_BIN_WIDTH = 0.02
_UNHASHED = ("workers", "checkpoint_dir")


@dataclass(frozen=True)
class SweepConfig:
    model_path: str = ""
    adapter: str | None = None
    vocab_path: str = ""
    manifest_path: str = ""
    geometry_path: str | None = None
    tau: float = DEFAULT_TAU
    k_overrides: dict = field(default_factory=dict)
    directions: str = "both"
    policy: str | None = None
    heads: tuple | None = None
    seed: int = 0
    workers: int = 1
    block_rows: int = 256
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.directions not in ("promote", "suppress", "both"):
            raise ValueError(f"directions must be promote, suppress or both, got {self.directions!r}")
        if self.workers < 1 or self.block_rows < 1:
            raise ValueError("workers and block_rows must be >= 1")
        if self.heads is not None:
            object.__setattr__(self, "heads", tuple(str(h) for h in self.heads))

    @classmethod
    def from_file(cls, path, **overrides) -> "SweepConfig":
        path = Path(path)
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise DataError(f"{path}: sweep config must be a mapping")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"{path}: unknown sweep config fields {sorted(unknown)}")
        # relative paths in the file are relative to the file
        for key in ("model_path", "vocab_path", "manifest_path", "geometry_path", "checkpoint_dir"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str(path.parent / data[key])
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["heads"] = list(self.heads) if self.heads is not None else None
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects scores (worker count and checkpoint location excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def direction_list(self) -> tuple[str, ...]:
        return DIRECTIONS if self.directions == "both" else (self.directions,)


@dataclass(frozen=True)
class RelationInfo:
    name: str
    category: str
    n_pairs: int
    k: int
    directions: tuple[str, ...]


@dataclass(frozen=True)
class SweepResult:
    n_layers: int
    n_heads: int
    heads: tuple[HeadRef, ...]
    relations: tuple[RelationInfo, ...]
    scores: tuple[RelationScore, ...]
    tau: float = DEFAULT_TAU
    metadata: dict = field(default_factory=dict)

    def relation(self, name: str) -> RelationInfo:
        for r in self.relations:
            if r.name == name:
                return r
        raise KeyError(f"relation {name!r} not in sweep result")

    def get(self, head: HeadRef, relation: str, direction: str = "promote") -> RelationScore:
        for s in self.scores:
            if s.head == head and s.relation == relation and s.direction == direction:
                return s
        raise KeyError((head, relation, direction))


def parse_heads(specs, n_layers: int, n_heads: int) -> list[HeadRef]:
    """Expand ``"L.H"`` and whole-layer ``"L"`` selectors into sorted head refs."""
    out = set()
    for spec in specs:
        spec = str(spec)
        if "." in spec:
            ref = HeadRef.parse(spec)
            heads = [ref]
        else:
            heads = [HeadRef(int(spec), h) for h in range(n_heads)]
        for ref in heads:
            if not (0 <= ref.layer < n_layers and 0 <= ref.head < n_heads):
                raise DataError(f"head {ref} outside {n_layers} layers x {n_heads} heads")
            out.add(ref)
    return sorted(out)


def _score_to_dict(s: RelationScore) -> dict:
    d = dataclasses.asdict(s)
    d["head"] = str(s.head) if s.head is not None else None
    return d


def _score_from_dict(d: dict) -> RelationScore:
    d = dict(d)
    d["head"] = HeadRef.parse(d["head"]) if d.get("head") is not None else None
    return RelationScore(**d)


def sweep(
    store: WeightStore,
    relations: list[TokenizedRelation],
    heads: list[HeadRef] | None = None,
    directions=DIRECTIONS,
    tau: float = DEFAULT_TAU,
    k_overrides: dict | None = None,
    policy: str | None = None,
    workers: int = 1,
    block_rows: int = 256,
    metadata: dict | None = None,
    checkpoint_dir=None,
) -> SweepResult:
    """Score every (head, relation, direction) cell.

    Relations flagged ``suppressive`` are scored in the suppress direction
    only. A head's relation cells run concurrently when ``workers > 1`` and
    are reduced in canonical (layer, head, relation, direction) order, so the
    result does not depend on the worker count. With ``checkpoint_dir`` set,
    each finished layer is saved and reused on restart.
    """
    g = store.geometry
    heads = sorted(heads) if heads is not None else g.heads()
    k_overrides = dict(k_overrides or {})
    names = [r.name for r in relations]
    if len(set(names)) != len(names):
        raise DataError("relation names must be unique within a sweep")
    usable = []
    infos = []
    for r in relations:
        if not r.pairs:
            raise DataError(f"relation {r.name!r} has no single-token pairs after filtering")
        k = int(k_overrides.get(r.name, default_k(r.spec, g.vocab_size)))
        dirs = ("suppress",) if r.spec.suppressive else tuple(directions)
        infos.append(RelationInfo(r.name, r.spec.category, len(r.pairs), k, dirs))
        usable.append(r)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    by_layer: dict[int, list[HeadRef]] = {}
    for h in heads:
        by_layer.setdefault(h.layer, []).append(h)

    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    scores: list[RelationScore] = []
    try:
        for layer in sorted(by_layer):
            layer_heads = by_layer[layer]
            path = ckpt / f"layer_{layer:04d}.json" if ckpt else None
            if path is not None and path.exists():
                saved = json.loads(path.read_text())
                if saved.get("heads") == [str(h) for h in layer_heads]:
                    log.info("layer %d restored from checkpoint", layer)
                    scores.extend(_score_from_dict(d) for d in saved["scores"])
                    continue
            cells = [(rel, info.k, d) for rel, info in zip(usable, infos) for d in info.directions]
            layer_scores = []
            for h in layer_heads:
                # one W_VO in memory at a time; a fresh view per cell keeps row counters thread-local
                base = store.circuit(h, policy)

                def run(cell, base=base, h=h):
                    rel, k, d = cell
                    return relation_score(base.with_vo(base.w_vo, h), rel, k, d, tau, block_rows)

                layer_scores.extend(pool.map(run, cells) if pool else map(run, cells))
            scores.extend(layer_scores)
            if path is not None:
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps(
                    {"heads": [str(h) for h in layer_heads], "scores": [_score_to_dict(s) for s in layer_scores]},
                    sort_keys=True,
                ))
                tmp.replace(path)
            log.info("layer %d: %d cells scored", layer, len(layer_scores))
    finally:
        if pool is not None:
            pool.shutdown()

    meta = dict(metadata or {})
    meta.setdefault("started", started)
    meta.setdefault("finished", datetime.now(timezone.utc).isoformat(timespec="seconds"))
    return SweepResult(g.n_layers, g.n_heads, tuple(heads), tuple(infos), tuple(scores), tau, meta)


def run_sweep(config: SweepConfig) -> SweepResult:
    """Load the model, vocabulary and relation manifest named by ``config`` and sweep."""
    overrides = load_geometry_overrides(config.geometry_path) if config.geometry_path else None
    geometry, store = load_model(config.model_path, config.adapter, overrides)
    vocab = load_vocab(config.vocab_path)
    relations = load_relations(config.manifest_path, vocab)
    for r in relations:
        bad = [p for p in r.pairs if max(p) >= geometry.vocab_size]
        if bad:
            raise DataError(f"relation {r.name!r}: token ids {bad[0]} exceed the model vocabulary")
    heads = parse_heads(config.heads, geometry.n_layers, geometry.n_heads) if config.heads is not None else None
    digest = config.config_hash()
    ckpt = Path(config.checkpoint_dir) / digest if config.checkpoint_dir else None
    return sweep(
        store, relations, heads, config.direction_list, config.tau, config.k_overrides, config.policy,
        config.workers, config.block_rows,
        metadata={"model": str(config.model_path), "config_hash": digest, "config": config.to_dict()},
        checkpoint_dir=ckpt,
    )


def _tau(result: SweepResult, tau):
    return result.tau if tau is None else tau


def count_by_relation(result: SweepResult, tau: float | None = None, direction: str = "promote") -> dict[str, int]:
    """Number of heads classified as implementing each relation in one direction."""
    tau = _tau(result, tau)
    counts = {r.name: 0 for r in result.relations if direction in r.directions}
    for s in result.scores:
        if s.direction == direction and s.relation in counts and classify(s, tau):
            counts[s.relation] += 1
    return counts


@dataclass(frozen=True)
class CategoryGrid:
    n_layers: int
    n_heads: int
    cells: dict

    def categories(self, layer: int, head: int) -> frozenset:
        return self.cells.get(HeadRef(layer, head), frozenset())


def category_grid(result: SweepResult, tau: float | None = None) -> CategoryGrid:
    """Categories each head implements through at least one relation, in either direction."""
    tau = _tau(result, tau)
    category = {r.name: r.category for r in result.relations}
    cells: dict[HeadRef, set] = {}
    for s in result.scores:
        if classify(s, tau):
            cells.setdefault(s.head, set()).add(category[s.relation])
    return CategoryGrid(result.n_layers, result.n_heads, {h: frozenset(c) for h, c in sorted(cells.items())})


@dataclass(frozen=True)
class SummaryStats:
    n_classified: int
    multi_category_fraction: float | None
    suppression_fraction: float | None
    per_layer_classified_counts: tuple[int, ...]


def summary_stats(result: SweepResult, tau: float | None = None) -> SummaryStats:
    """Fractions are over classified heads; they are None when no head is classified."""
    tau = _tau(result, tau)
    grid = category_grid(result, tau)
    suppressors = {s.head for s in result.scores if s.suppressive and classify(s, tau)}
    per_layer = [0] * result.n_layers
    for h in grid.cells:
        per_layer[h.layer] += 1
    n = len(grid.cells)
    if n == 0:
        return SummaryStats(0, None, None, tuple(per_layer))
    multi = sum(1 for c in grid.cells.values() if len(c) >= 2)
    return SummaryStats(n, multi / n, len(suppressors & set(grid.cells)) / n, tuple(per_layer))


@dataclass(frozen=True, eq=False)
class ScoreDistribution:
    relation: str
    direction: str
    edges: np.ndarray
    counts: np.ndarray
    max_score: float


def score_distribution(result: SweepResult, relation: str, direction: str = "promote") -> ScoreDistribution:
    """Histogram of one relation's scores over heads, in fixed 0.02-wide bins on [0, 1]."""
    result.relation(relation)
    values = np.array([s.score for s in result.scores if s.relation == relation and s.direction == direction])
    if values.size == 0:
        raise KeyError(f"no {direction} scores for relation {relation!r}")
    n_bins = round(1 / HIST_BIN_WIDTH)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # bin by integer index so 0.02-multiples land in the bin they start
    idx = np.minimum(np.floor(values * n_bins + 1e-9).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return ScoreDistribution(relation, direction, edges, counts, float(values.max()))
