"""Vocabulary-space projection of a head's OV circuit.

The mapping matrix ``M = E' @ W_VO @ U`` is |V| x |V| and never materialized:
rows are produced on demand, and whole-vocabulary scans stream over row
blocks, holding at most ``block_rows x |V|`` scores at a time.

Top-k ties are broken towards the lower token id everywhere.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from ._linalg import matmul_rows
from .errors import DataError
from .model_io import HeadRef, Norm, WeightStore, layer_vo
from .vocab import TokenizedRelation, Vocabulary, default_k

Direction = Literal["promote", "suppress"]
DIRECTIONS = ("promote", "suppress")
DEFAULT_TAU = 0.15
DEFAULT_BLOCK_ROWS = 1024


@dataclass(eq=False)
class OVCircuit:
    """One head's OV pathway in vocabulary space: ``E'`` (V, d), ``W_VO`` (d, d), ``U`` (d, V).

    ``rows_evaluated`` counts mapping rows computed through this object.
    """

    embed: np.ndarray
    w_vo: np.ndarray
    unembed: np.ndarray
    head: HeadRef | None = None
    final_norm: Norm | None = None
    rows_evaluated: int = field(default=0, repr=False)

    def __post_init__(self):
        v, d = self.embed.shape
        if self.w_vo.shape != (d, d):
            raise DataError(f"W_VO has shape {self.w_vo.shape}, expected {(d, d)}")
        if self.unembed.shape != (d, v):
            raise DataError(f"unembedding has shape {self.unembed.shape}, expected {(d, v)}")

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def with_vo(self, w_vo: np.ndarray, head: HeadRef | None = None) -> "OVCircuit":
        return replace(self, w_vo=np.asarray(w_vo, dtype=np.float32), head=head, rows_evaluated=0)

    def head_outputs(self, ids) -> np.ndarray:
        """``e'_s @ W_VO`` for each id (final norm applied when configured)."""
        y = matmul_rows(self.embed[np.asarray(ids, dtype=np.intp)], self.w_vo)
        return self.final_norm(y) if self.final_norm is not None else y

    def rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp).reshape(-1)
        self.rows_evaluated += len(ids)
        return matmul_rows(self.head_outputs(ids), self.unembed)


def circuit_from_arrays(embed, w_vo, unembed, head=None) -> OVCircuit:
    return OVCircuit(
        np.asarray(embed, dtype=np.float32),
        np.asarray(w_vo, dtype=np.float32),
        np.asarray(unembed, dtype=np.float32),
        head,
    )


@dataclass(frozen=True, eq=False)
class MappingRow:
    source_id: int
    scores: np.ndarray


def mapping_row(circuit: OVCircuit, source_id: int) -> MappingRow:
    if not 0 <= source_id < circuit.vocab_size:
        raise IndexError(f"source id {source_id} outside [0, {circuit.vocab_size})")
    return MappingRow(int(source_id), circuit.rows([source_id])[0])


def mapping_rows(circuit: OVCircuit, source_ids) -> np.ndarray:
    return circuit.rows(source_ids)


def _oriented(scores: np.ndarray, direction: Direction) -> np.ndarray:
    if direction == "promote":
        return scores
    if direction == "suppress":
        return -scores
    raise ValueError(f"direction must be 'promote' or 'suppress', got {direction!r}")


def top_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, descending, ties to the lower index."""
    values = np.asarray(values)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    kth = np.partition(values, n - k)[n - k]
    above = np.flatnonzero(values > kth)
    above = above[np.lexsort((above, -values[above]))]
    ties = np.flatnonzero(values == kth)[: k - len(above)]
    return np.concatenate([above, ties])


def topk_targets(row, k: int, direction: Direction = "promote") -> list[int]:
    scores = row.scores if isinstance(row, MappingRow) else np.asarray(row)
    return top_indices(_oriented(scores, direction), k).tolist()


def topk_hits(rows: np.ndarray, targets, k: int, direction: Direction = "promote") -> np.ndarray:
    """Whether ``targets[i]`` is in the top-k of ``rows[i]``, without sorting.

    A target's rank is the number of entries above it plus the number of
    equal entries with a lower id; it is a hit when that rank is below ``k``.
    """
    v = _oriented(rows, direction)
    targets = np.asarray(targets, dtype=np.intp)
    val = v[np.arange(len(targets)), targets][:, None]
    lower_id = np.arange(v.shape[1])[None, :] < targets[:, None]
    rank = (v > val).sum(axis=1) + ((v == val) & lower_id).sum(axis=1)
    return rank < k


@dataclass(frozen=True)
class RelationScore:
    head: HeadRef | None
    relation: str
    score: float
    k: int
    suppressive: bool
    classified: bool
    hits: int = 0
    n_pairs: int = 0
    tau: float = DEFAULT_TAU

    @property
    def direction(self) -> Direction:
        return "suppress" if self.suppressive else "promote"


def classify(score, tau: float = DEFAULT_TAU) -> bool:
    """Inclusive threshold: a head implements a relation when its score is at least ``tau``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    value = score.score if isinstance(score, RelationScore) else float(score)
    return value >= tau


def relation_score(
    circuit: OVCircuit,
    tokrel: TokenizedRelation,
    k: int | None = None,
    direction: Direction = "promote",
    tau: float = DEFAULT_TAU,
    block_rows: int = 256,
) -> RelationScore:
    """Fraction of pairs (s, t) whose target is among the top-k of row s.

    Only the dataset's source rows are evaluated, one per pair.
    """
    pairs = np.asarray(tokrel.pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise DataError(f"relation {tokrel.name!r} has no pairs; its score is undefined")
    if pairs.max() >= circuit.vocab_size or pairs.min() < 0:
        raise DataError(f"relation {tokrel.name!r} references ids outside the vocabulary")
    if k is None:
        k = default_k(tokrel.spec, circuit.vocab_size)
    if not 1 <= k <= circuit.vocab_size:
        raise ValueError(f"k={k} outside [1, {circuit.vocab_size}]")
    hits = 0
    for lo in range(0, len(pairs), block_rows):
        chunk = pairs[lo : lo + block_rows]
        rows = circuit.rows(chunk[:, 0])
        hits += int(topk_hits(rows, chunk[:, 1], k, direction).sum())
    score = hits / len(pairs)
    return RelationScore(
        head=circuit.head,
        relation=tokrel.name,
        score=score,
        k=k,
        suppressive=direction == "suppress",
        classified=classify(score, tau),
        hits=hits,
        n_pairs=len(pairs),
        tau=tau,
    )


@dataclass(eq=False)
class SaliencyProfile:
    head: HeadRef | None
    sigma: np.ndarray
    skewness: float | None
    zero_norm_tokens: tuple[int, ...] = ()


def saliency(circuit: OVCircuit, block_rows: int = 4096) -> SaliencyProfile:
    """Per-token norm amplification ``||e'_t W_VO|| / ||e'_t||``.

    Zero-norm embedding rows get sigma 0 and are reported with a warning.
    """
    e = circuit.embed
    sigma = np.empty(e.shape[0], dtype=np.float32)
    for lo in range(0, e.shape[0], block_rows):
        x = e[lo : lo + block_rows]
        num = np.linalg.norm(matmul_rows(x, circuit.w_vo), axis=1)
        den = np.linalg.norm(x, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma[lo : lo + block_rows] = np.where(den > 0, num / np.where(den > 0, den, 1), 0)
    zero = tuple(int(i) for i in np.flatnonzero(np.linalg.norm(e, axis=1) == 0))
    if zero:
        warnings.warn(f"{len(zero)} zero-norm embedding rows; their saliency is set to 0", stacklevel=2)
    skew = input_skewness(sigma) if len(sigma) >= 3 and np.ptp(sigma) > 0 else None
    return SaliencyProfile(circuit.head, sigma, skew, zero)


def input_skewness(sigma) -> float:
    """Population skewness ``m3 / m2**1.5`` (no small-sample correction)."""
    x = np.asarray(sigma, dtype=np.float64)
    if x.size < 3:
        raise ValueError("skewness needs at least 3 values")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0 or np.ptp(x) == 0:
        raise ValueError("skewness undefined for a constant vector")
    return float(np.mean(d**3) / m2**1.5)


@dataclass(frozen=True)
class SalientEntry:
    source_id: int
    source: str
    sigma: float
    targets: tuple[tuple[int, str, float], ...]

    @property
    def target_strings(self) -> list[str]:
        return [t[1] for t in self.targets]


@dataclass(frozen=True)
class SalientMappingSet:
    head: HeadRef | None
    entries: tuple[SalientEntry, ...]

    def pairs(self) -> list[tuple[int, int]]:
        return [(e.source_id, t[0]) for e in self.entries for t in e.targets]


def _label(vocab: Vocabulary | None, idx: int) -> str:
    return vocab[idx] if vocab is not None else str(idx)


def salient_mappings(
    circuit: OVCircuit,
    k_tokens: int = 30,
    n_targets: int = 5,
    vocab: Vocabulary | None = None,
    profile: SaliencyProfile | None = None,
) -> SalientMappingSet:
    """The ``k_tokens`` most salient sources, each with its top ``n_targets`` targets."""
    v = circuit.vocab_size
    if not 1 <= k_tokens <= v:
        raise ValueError(f"k_tokens={k_tokens} outside [1, {v}]")
    if not 1 <= n_targets <= v:
        raise ValueError(f"n_targets={n_targets} outside [1, {v}]")
    if not np.any(circuit.w_vo):
        raise DataError("W_VO is all zeros; saliency is degenerate")
    profile = profile or saliency(circuit)
    sources = top_indices(profile.sigma, k_tokens)
    rows = circuit.rows(sources)
    entries = []
    for s, row in zip(sources.tolist(), rows):
        tops = top_indices(row, n_targets).tolist()
        entries.append(
            SalientEntry(
                s, _label(vocab, s), float(profile.sigma[s]),
                tuple((t, _label(vocab, t), float(row[t])) for t in tops),
            )
        )
    return SalientMappingSet(circuit.head, tuple(entries))


def global_top_mappings(circuit: OVCircuit, n: int, block_rows: int = DEFAULT_BLOCK_ROWS) -> list[tuple[int, int]]:
    """The ``n`` highest entries of M as (source, target), by streaming over row blocks.

    Ordering is by score, then source id, then target id, so the result does
    not depend on ``block_rows``.
    """
    v = circuit.vocab_size
    if not 1 <= n <= v * v:
        raise ValueError(f"n={n} outside [1, {v * v}]")
    best_idx = np.zeros(0, dtype=np.int64)
    best_val = np.zeros(0, dtype=np.float32)
    for lo in range(0, v, block_rows):
        ids = np.arange(lo, min(v, lo + block_rows))
        flat = circuit.rows(ids).reshape(-1)
        take = top_indices(flat, min(n, flat.size))
        cand_idx = np.concatenate([best_idx, take + lo * v])
        cand_val = np.concatenate([best_val, flat[take]])
        order = np.lexsort((cand_idx, -cand_val))[:n]
        best_idx, best_val = cand_idx[order], cand_val[order]
    return [(int(i // v), int(i % v)) for i in best_idx]


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def jaccard_top_vs_salient(
    circuit: OVCircuit, set_size: int, n_targets: int = 5, block_rows: int = DEFAULT_BLOCK_ROWS
) -> float:
    """Jaccard similarity between the top ``set_size`` entries of M and an equally sized salient-mapping set."""
    if set_size < 1:
        raise ValueError("set_size must be >= 1")
    k_tokens = min(circuit.vocab_size, math.ceil(set_size / n_targets))
    salient = salient_mappings(circuit, k_tokens, n_targets).pairs()[:set_size]
    top = global_top_mappings(circuit, len(salient), block_rows)
    return jaccard(top, salient)


def random_like(w_vos: np.ndarray, seed: int, n: int | None = None) -> np.ndarray:
    """``n`` Gaussian matrices matching the entry mean and std of ``w_vos`` (H, d, d)."""
    w_vos = np.asarray(w_vos)
    n = w_vos.shape[0] if n is None else n
    mean = float(np.mean(w_vos, dtype=np.float64))
    std = float(np.std(w_vos, dtype=np.float64))
    rng = np.random.default_rng(seed)
    return rng.normal(mean, std, size=(n,) + w_vos.shape[1:]).astype(np.float32)


def random_baseline_heads(store: WeightStore, layer: int, seed: int, n: int | None = None) -> np.ndarray:
    """Random W_VO matrices drawn with the layer's empirical mean and std."""
    if not 0 <= layer < store.geometry.n_layers:
        raise IndexError(f"layer {layer} outside [0, {store.geometry.n_layers})")
    return random_like(layer_vo(store, layer), seed, n)


@dataclass
class ScanStats:
    """Filled by full-vocabulary scans: peak simultaneous score entries and rows computed."""

    peak_buffer_entries: int = 0
    rows: int = 0


def _normalized_columns(u: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(u, axis=0, keepdims=True)
    return (u / np.where(norms > 0, norms, 1)).astype(np.float32)


def output_targets(
    circuit: OVCircuit,
    block_rows: int = DEFAULT_BLOCK_ROWS,
    workers: int = 1,
    stats: ScanStats | None = None,
) -> np.ndarray:
    """Argmax target of every source row of ``E' W_VO Û`` (unit-norm unembedding columns)."""
    v = circuit.vocab_size
    if block_rows < 1 or workers < 1:
        raise ValueError("block_rows and workers must be >= 1")
    u_hat = _normalized_columns(circuit.unembed)
    out = np.empty(v, dtype=np.int64)
    stats = stats if stats is not None else ScanStats()
    sub = max(1, -(-block_rows // workers))

    def run(lo, hi):
        scores = matmul_rows(circuit.head_outputs(np.arange(lo, hi)), u_hat)
        out[lo:hi] = np.argmax(scores, axis=1)
        return scores.size

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for lo in range(0, v, block_rows):
            hi = min(v, lo + block_rows)
            spans = [(a, min(hi, a + sub)) for a in range(lo, hi, sub)]
            if pool is None:
                sizes = [run(a, b) for a, b in spans]
            else:
                sizes = list(pool.map(lambda ab: run(*ab), spans))
            stats.peak_buffer_entries = max(stats.peak_buffer_entries, sum(sizes))
            stats.rows += hi - lo
    finally:
        if pool is not None:
            pool.shutdown()
    circuit.rows_evaluated += v
    return out


def output_space_size(
    circuit: OVCircuit,
    block_rows: int = DEFAULT_BLOCK_ROWS,
    workers: int = 1,
    stats: ScanStats | None = None,
) -> float:
    """Fraction of the vocabulary that appears as some source's argmax target."""
    targets = output_targets(circuit, block_rows, workers, stats)
    return len(np.unique(targets)) / circuit.vocab_size


def capitalized_space_fraction(vocab: Vocabulary) -> float:
    """Fraction of tokens that are a space marker followed by an uppercase letter."""
    m = vocab.space_marker
    n = sum(
        1 for tok in vocab.id_to_string
        if tok.startswith(m) and len(tok) > len(m) and tok[len(m)].isupper()
    )
    return n / len(vocab) if len(vocab) else 0.0
