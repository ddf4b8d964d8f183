"""Vocabularies, relation datasets and the per-relation k policy."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Literal

import yaml

from .errors import VocabError

Category = Literal["algorithmic", "knowledge", "linguistic", "translation", "custom"]
CATEGORIES = ("algorithmic", "knowledge", "linguistic", "translation", "custom")
COPYING_RELATIONS = frozenset({"copying", "name_copying"})
LARGE_VOCAB = 100_000

Encoder = Callable[[str], list]


@dataclass(frozen=True)
class Vocabulary:
    id_to_string: tuple[str, ...]
    string_to_id: dict = field(repr=False, compare=False)
    space_marker: str = "Ġ"

    @classmethod
    def from_mapping(cls, mapping: dict[str, int], space_marker: str = "Ġ") -> "Vocabulary":
        by_id: dict[int, str] = {}
        for token, idx in mapping.items():
            idx = int(idx)
            if idx in by_id:
                raise VocabError(f"duplicate id {idx} for tokens {by_id[idx]!r} and {token!r}")
            by_id[idx] = token
        n = len(by_id)
        if n and (min(by_id) != 0 or max(by_id) != n - 1):
            missing = sorted(set(range(max(by_id) + 1)) - set(by_id))[:5]
            raise VocabError(f"token ids are not dense in [0, {n}); first missing ids: {missing}")
        strings = tuple(by_id[i] for i in range(n))
        return cls(strings, {s: i for i, s in enumerate(strings)}, space_marker)

    def __len__(self):
        return len(self.id_to_string)

    def __getitem__(self, idx: int) -> str:
        return self.id_to_string[idx]


def load_vocab(path, space_marker: str = "Ġ") -> Vocabulary:
    """Read a token -> id map: a flat ``vocab.json`` or a ``tokenizer.json``.

    For ``tokenizer.json`` the model vocabulary is merged with ``added_tokens``.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise VocabError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(data, dict) and isinstance(data.get("model"), dict):
        mapping = dict(data["model"].get("vocab") or {})
        if not mapping:
            raise VocabError(f"{path}: tokenizer file has no model.vocab map")
        for tok in data.get("added_tokens") or []:
            existing = mapping.get(tok["content"])
            if existing is not None and existing != tok["id"]:
                raise VocabError(f"{path}: added token {tok['content']!r} conflicts with id {existing}")
            mapping[tok["content"]] = tok["id"]
    elif isinstance(data, dict):
        mapping = data
    else:
        raise VocabError(f"{path}: expected a JSON object mapping tokens to ids")
    try:
        return Vocabulary.from_mapping(mapping, space_marker)
    except VocabError as exc:
        raise VocabError(f"{path}: {exc}") from None


def lookup_single_token(
    vocab: Vocabulary, word: str, leading_space: bool = True, encoder: Encoder | None = None
) -> int | None:
    """Id of ``word`` as one token, or None when it needs more than one.

    Byte-level BPE encodes " word" to a single token exactly when
    ``space_marker + word`` is a vocabulary entry, so membership is enough.
    Tokenizers without that property can pass an ``encoder`` instead.
    """
    if not word:
        raise ValueError("word must be non-empty")
    if encoder is not None:
        ids = list(encoder((" " if leading_space else "") + word))
        return int(ids[0]) if len(ids) == 1 else None
    key = vocab.space_marker + word if leading_space else word
    return vocab.string_to_id.get(key)


@dataclass(frozen=True)
class RelationSpec:
    name: str
    category: Category = "custom"
    suppressive: bool = False
    k_override: int | None = None
    copying: bool = False
    target_leading_space: bool = True

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise VocabError(f"relation {self.name!r}: unknown category {self.category!r}")
        if self.k_override is not None and self.k_override < 1:
            raise VocabError(f"relation {self.name!r}: k_override must be >= 1")

    @property
    def is_copying(self) -> bool:
        return self.copying or self.name in COPYING_RELATIONS


@dataclass(frozen=True)
class TokenizedRelation:
    spec: RelationSpec
    pairs: tuple[tuple[int, int], ...]
    dropped: tuple[tuple[str, str, str], ...] = ()
    warning: str | None = None

    @property
    def name(self) -> str:
        return self.spec.name


def tokenize_relation(
    vocab: Vocabulary,
    spec: RelationSpec,
    raw_pairs,
    encoder: Encoder | None = None,
) -> TokenizedRelation:
    """Keep the pairs whose source and target are both single tokens."""
    raw_pairs = list(raw_pairs)
    if not raw_pairs:
        raise VocabError(f"relation {spec.name!r}: no raw pairs given")
    kept, dropped = [], []
    for src, tgt in raw_pairs:
        s = lookup_single_token(vocab, src, True, encoder)
        t = lookup_single_token(vocab, tgt, spec.target_leading_space, encoder)
        if s is None and t is None:
            dropped.append((src, tgt, "source and target not single tokens"))
        elif s is None:
            dropped.append((src, tgt, "source not a single token"))
        elif t is None:
            dropped.append((src, tgt, "target not a single token"))
        else:
            kept.append((s, t))
    warning = None
    if not kept:
        warning = f"relation {spec.name!r}: all {len(raw_pairs)} pairs dropped by single-token filtering"
        warnings.warn(warning, stacklevel=2)
    return TokenizedRelation(spec, tuple(kept), tuple(dropped), warning)


def default_k(spec: RelationSpec, vocab_size: int) -> int:
    if spec.k_override is not None:
        return spec.k_override
    if vocab_size < LARGE_VOCAB:
        return 1 if spec.is_copying else 10
    return 3 if spec.is_copying else 25


def read_pairs(path) -> list[tuple[str, str]]:
    """Parse a two-column UTF-8 TSV of ``source<TAB>target`` lines; ``#`` starts a comment line."""
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise VocabError(f"{path}:{lineno}: expected 'source<TAB>target', got {line!r}")
            pairs.append((cols[0], cols[1]))
    return pairs


@dataclass(frozen=True)
class ManifestEntry:
    spec: RelationSpec
    path: Path


def load_manifest(path) -> list[ManifestEntry]:
    """Read a YAML/JSON relation manifest; dataset paths resolve relative to it."""
    path = Path(path)
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data.get("relations")
    if not isinstance(data, list) or not data:
        raise VocabError(f"{path}: manifest must hold a non-empty 'relations' list")
    entries, seen = [], set()
    for i, item in enumerate(data):
        if not isinstance(item, dict) or "name" not in item or "file" not in item:
            raise VocabError(f"{path}: relation #{i} needs at least 'name' and 'file'")
        item = dict(item)
        file = Path(item.pop("file"))
        if item["name"] in seen:
            raise VocabError(f"{path}: relation name {item['name']!r} appears twice")
        seen.add(item["name"])
        try:
            spec = RelationSpec(**item)
        except TypeError as exc:
            raise VocabError(f"{path}: relation {item['name']!r}: {exc}") from None
        entries.append(ManifestEntry(spec, file if file.is_absolute() else path.parent / file))
    return entries


def load_relations(manifest_path, vocab: Vocabulary, encoder: Encoder | None = None) -> list[TokenizedRelation]:
    return [
        tokenize_relation(vocab, e.spec, read_pairs(e.path), encoder)
        for e in load_manifest(manifest_path)
    ]


@lru_cache(maxsize=1)
def _byte_decoder() -> dict[str, int]:
    # GPT-2 byte-level alphabet: printable bytes map to themselves, the rest to U+0100 onwards
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAC + 1)) + list(range(0xAE, 0xFF + 1))
    chars = keep[:]
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    return {chr(c): b for b, c in zip(keep, chars)}


def token_text(token: str) -> str:
    """Render a byte-level token string as text.

    Undecodable bytes (partial UTF-8 sequences) and control characters
    become ``<0xNN>`` placeholders; tokens using characters outside the byte
    alphabet are returned unchanged apart from control-character escaping.
    """
    decoder = _byte_decoder()
    if not all(ch in decoder for ch in token):
        return _escape_controls(token)
    data = bytes(decoder[ch] for ch in token)
    out = []
    i = 0
    while i < len(data):
        for j in range(min(len(data), i + 4), i, -1):
            try:
                out.append(_escape_controls(data[i:j].decode("utf-8")))
                i = j
                break
            except UnicodeDecodeError:
                continue
        else:
            out.append(f"<0x{data[i]:02X}>")
            i += 1
    return "".join(out)


def _escape_controls(text: str) -> str:
    return "".join(ch if ch == " " or ch.isprintable() else f"<0x{ord(ch):02X}>" for ch in text)
