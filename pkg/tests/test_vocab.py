import json

import pytest

from headmaps.errors import VocabError
from headmaps.vocab import (
    RelationSpec,
    Vocabulary,
    default_k,
    load_manifest,
    load_relations,
    load_vocab,
    lookup_single_token,
    read_pairs,
    token_text,
    tokenize_relation,
)

TOKENS = ["Paris", "ĠParis", "ĠFrance", "ĠItaly", "ĠRome", "ĠGermany", "ĠBer", "lin", "ĠMonday", "ĠTuesday", "Ġa"]


@pytest.fixture
def vocab():
    return Vocabulary.from_mapping({t: i for i, t in enumerate(TOKENS)})


def test_lookup_respects_leading_space(vocab):
    assert lookup_single_token(vocab, "Paris") == 1
    assert lookup_single_token(vocab, "Paris", leading_space=False) == 0
    assert lookup_single_token(vocab, "Berlin") is None


def test_lookup_with_encoder(vocab):
    enc = {" Berlin": [6, 7], " Rome": [4]}.__getitem__
    assert lookup_single_token(vocab, "Berlin", encoder=enc) is None
    assert lookup_single_token(vocab, "Rome", encoder=enc) == 4


def test_tokenize_drops_multi_token_pairs(vocab):
    spec = RelationSpec("country_capital", "knowledge")
    rel = tokenize_relation(vocab, spec, [("France", "Paris"), ("Italy", "Rome"), ("Germany", "Berlin")])
    assert rel.pairs == ((2, 1), (3, 4))
    assert rel.dropped == (("Germany", "Berlin", "target not a single token"),)
    assert rel.warning is None


def test_all_dropped_warns(vocab):
    with pytest.warns(UserWarning, match="all 1 pairs dropped"):
        rel = tokenize_relation(vocab, RelationSpec("r"), [("Germany", "Berlin")])
    assert rel.pairs == () and rel.warning


def test_default_k_policy():
    assert default_k(RelationSpec("copying"), 50_257) == 1
    assert default_k(RelationSpec("name_copying"), 50_257) == 1
    assert default_k(RelationSpec("country_capital"), 50_257) == 10
    assert default_k(RelationSpec("copying"), 128_256) == 3
    assert default_k(RelationSpec("country_capital"), 128_256) == 25
    assert default_k(RelationSpec("x", k_override=7), 50_257) == 7
    assert default_k(RelationSpec("x", copying=True), 100_000) == 3


def test_relation_spec_validation():
    with pytest.raises(VocabError):
        RelationSpec("x", category="astrology")
    with pytest.raises(VocabError):
        RelationSpec("x", k_override=0)


def test_vocab_from_mapping_rejects_gaps_and_duplicates():
    with pytest.raises(VocabError, match="not dense"):
        Vocabulary.from_mapping({"a": 0, "b": 2})
    with pytest.raises(VocabError, match="duplicate"):
        Vocabulary.from_mapping({"a": 0, "b": 0})


def test_load_vocab_tokenizer_json(tmp_path):
    p = tmp_path / "tokenizer.json"
    p.write_text(json.dumps({"model": {"vocab": {"a": 0, "b": 1}}, "added_tokens": [{"id": 2, "content": "<eos>"}]}))
    v = load_vocab(p)
    assert len(v) == 3 and v[2] == "<eos>"
    p2 = tmp_path / "vocab.json"
    p2.write_text(json.dumps({"x": 1, "y": 0}))
    assert load_vocab(p2).id_to_string == ("y", "x")


def test_manifest_and_pairs(tmp_path, vocab):
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "cap.tsv").write_text("# country\tcapital\nFrance\tParis\n\nItaly\tRome\n")
    (tmp_path / "data" / "days.tsv").write_text("Monday\tTuesday\n")
    (tmp_path / "m.yaml").write_text(
        "relations:\n"
        "  - {name: country_capital, category: knowledge, file: data/cap.tsv}\n"
        "  - {name: next_day, category: algorithmic, file: data/days.tsv, k_override: 2}\n"
    )
    entries = load_manifest(tmp_path / "m.yaml")
    assert [e.spec.name for e in entries] == ["country_capital", "next_day"]
    rels = load_relations(tmp_path / "m.yaml", vocab)
    assert rels[0].pairs == ((2, 1), (3, 4))
    assert rels[1].pairs == ((8, 9),) and rels[1].spec.k_override == 2


def test_read_pairs_rejects_bad_line(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("a\tb\nno tab here\n")
    with pytest.raises(VocabError, match=":2:"):
        read_pairs(p)


def test_manifest_duplicate_name(tmp_path):
    (tmp_path / "m.yaml").write_text("relations:\n  - {name: a, file: x}\n  - {name: a, file: y}\n")
    with pytest.raises(VocabError, match="twice"):
        load_manifest(tmp_path / "m.yaml")


def test_token_text_decoding():
    assert token_text("Ġmonths") == " months"
    assert token_text("Ċ") == "<0x0A>"
    # a lone UTF-8 lead byte cannot be decoded
    assert token_text("Ã") == "<0xC3>"
    assert token_text("Ã©") == "é"
