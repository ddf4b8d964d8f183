import json
from pathlib import Path

import numpy as np
import pytest

from headmaps.describe import (
    CannedTransport,
    DescribeResponse,
    EndpointConfig,
    HTTPTransport,
    build_payload,
    completion,
    describe_head,
    describe_heads,
    format_prompt,
    identification_rate,
    parse_response,
    query,
    request_hash,
)
from headmaps.errors import EndpointError, ResponseParseError, RetriesExhausted
from headmaps.model_io import HeadRef
from headmaps.projector import SalientEntry, SalientMappingSet
from headmaps.toy import ToyModelSpec, build_toy, make_plants

GOLDEN = Path(__file__).parent / "fixtures" / "prompt_golden.txt"

# the two example rows for head 16.11 of the 6.9B model
MONTHS = SalientEntry(0, "Ġmonths", 2.0, tuple((i, t, 0.0) for i, t in enumerate(["Ġyear", "year", "ĠYear", "Year", "Ġyearly"], 1)))
WEEK = SalientEntry(9, "Ġweek", 1.5, tuple((i, t, 0.0) for i, t in enumerate(["Ġmonth", "Ġmonths", "month", "months", "Ġseason"], 10)))

PYTHIA_16_11 = json.dumps({
    "Reasoning": "Inputs are time units; each maps to longer units.",
    "Input strings": "The input strings are related to time periods such as weeks, months, and years.",
    "Observed pattern": "Mappings are connecting input strings to related or hierarchical time concepts, "
                        "often extending them into longer periods like months to years and weeks to months.",
})
UNCLEAR = json.dumps({"Reasoning": "no idea", "Input strings": "Unclear", "Observed pattern": "Unclear"})


def test_golden_prompt_byte_equal():
    got = format_prompt(SalientMappingSet(HeadRef(16, 11), (MONTHS, WEEK)))
    assert got.encode("utf-8") == GOLDEN.read_bytes()


def test_prompt_preconditions():
    with pytest.raises(ValueError, match="empty"):
        format_prompt(SalientMappingSet(None, ()))
    short = SalientEntry(0, "a", 1.0, tuple((i, "b", 0.0) for i in range(4)))
    with pytest.raises(ValueError, match="4 targets"):
        format_prompt(SalientMappingSet(None, (short,)))


def test_prompt_injective_and_deterministic():
    a = format_prompt(SalientMappingSet(None, (MONTHS, WEEK)))
    b = format_prompt(SalientMappingSet(None, (WEEK, MONTHS)))
    assert a != b
    assert a == format_prompt(SalientMappingSet(None, (MONTHS, WEEK)))


def test_prompt_escapes_unreadable_bytes():
    bad = SalientEntry(0, "Ã", 1.0, tuple((i, "Ċ", 0.0) for i in range(5)))
    p = format_prompt(SalientMappingSet(None, (bad,)))
    assert "<0xC3>: <0x0A>,<0x0A>" in p


@pytest.mark.parametrize("pattern,detected", [
    ("Unclear", False),
    ("maps words to their first letters", True),
    ("a clear mapping from day to month", False),
    ("The pattern is UNCLEAR overall", False),
])
def test_clear_substring_rule(pattern, detected):
    raw = json.dumps({"Reasoning": "...", "Input strings": "...", "Observed pattern": pattern})
    assert parse_response(raw).pattern_detected is detected


def test_strict_mode():
    raw = json.dumps({"Reasoning": "", "Input strings": "", "Observed pattern": "a clear mapping from day to month"})
    assert parse_response(raw, strict=True).pattern_detected is True
    assert parse_response(UNCLEAR, strict=True).pattern_detected is False


def test_parse_tolerates_prose_and_fences():
    raw = "Sure! Here you go:\n```json\n" + PYTHIA_16_11 + "\n```\nHope this helps."
    r = parse_response(raw)
    assert "time periods" in r.input_strings and r.pattern_detected and r.raw == raw
    r2 = parse_response("Answer: " + UNCLEAR + " (end)")
    assert r2.observed_pattern == "Unclear"


def test_parse_roundtrip_identity():
    for fields in [("a", "b", "c"), ("with \"quotes\"", "line\nbreak", "ünïcode"), ("", "", "")]:
        raw = json.dumps(dict(zip(("Reasoning", "Input strings", "Observed pattern"), fields)))
        r = parse_response(raw)
        assert (r.reasoning, r.input_strings, r.observed_pattern) == fields


def test_parse_errors_carry_raw():
    with pytest.raises(ResponseParseError) as ei:
        parse_response("no json here {")
    assert ei.value.raw == "no json here {"


def _toy_circuit():
    spec = ToyModelSpec(d_model=16, vocab_size=40, n_heads=2, seed=0)
    model = build_toy(spec, make_plants(spec, (0,), 5, 4.0))
    return model, model.circuit(0)


def test_describe_head_canned():
    model, c = _toy_circuit()
    t = CannedTransport([PYTHIA_16_11])
    r = describe_head(c, EndpointConfig(), t, model.vocabulary())
    assert "time periods" in r.input_strings and r.pattern_detected
    assert len(t.requests) == 1
    payload = t.requests[0]
    assert payload["seed"] == 0 and payload["temperature"] == 0.0
    assert payload["messages"][0]["content"].count("\n Ġ") == 0  # tokens decoded
    assert payload["messages"][0]["content"].startswith("Below you are given a list")


def test_describe_unclear_propagates():
    model, c = _toy_circuit()
    r = describe_head(c, EndpointConfig(), CannedTransport([UNCLEAR]), model.vocabulary())
    assert r.pattern_detected is False


def test_retry_exhaustion_and_seed_increment():
    t = CannedTransport(["garbage", "still garbage", "nope"])
    with pytest.raises(RetriesExhausted) as ei:
        query("p", EndpointConfig(max_retries=2), t)
    assert ei.value.attempts == 3
    assert [r["seed"] for r in t.requests] == [0, 1, 2]


def test_truncated_then_ok():
    t = CannedTransport([completion(PYTHIA_16_11[:40], "length"), PYTHIA_16_11])
    r = query("p", EndpointConfig(seed=5), t)
    assert r.pattern_detected and [x["seed"] for x in t.requests] == [5, 6]


def test_canned_directory_by_hash(tmp_path):
    payload = build_payload("hello", EndpointConfig(), 0)
    (tmp_path / f"{request_hash(payload)}.txt").write_text(UNCLEAR)
    t = CannedTransport(tmp_path)
    assert query("hello", EndpointConfig(max_retries=0), t).observed_pattern == "Unclear"
    with pytest.raises(EndpointError):
        query("other prompt", EndpointConfig(max_retries=0), t)


def test_describe_heads_canonical_order():
    model, _ = _toy_circuit()
    seen = []

    def transport(payload):
        seen.append(payload)
        return completion(UNCLEAR)

    heads = [HeadRef(0, 1), HeadRef(0, 0)]
    out = describe_heads(lambda h: model.circuit(h.head) if h.head == 0 else model.circuit(0).with_vo(
        np.eye(16, dtype=np.float32), h), heads, EndpointConfig(max_concurrent=2), transport, model.vocabulary())
    assert list(out) == [HeadRef(0, 0), HeadRef(0, 1)]


def test_identification_rate():
    def resp(flag):
        return DescribeResponse("", "", "", flag, "")

    rs = {HeadRef(3, i): resp(f) for i, f in enumerate([True, True, False, False])}
    rs.update({HeadRef(5, i): resp(False) for i in range(3)})
    assert identification_rate(rs) == {3: 0.5, 5: 0.0}


def test_http_transport_missing_token(monkeypatch):
    monkeypatch.delenv("HEADMAPS_TEST_TOKEN", raising=False)
    t = HTTPTransport(EndpointConfig(token_env="HEADMAPS_TEST_TOKEN"))
    with pytest.raises(EndpointError, match="HEADMAPS_TEST_TOKEN"):
        t({"model": "x"})


def test_http_transport_status_and_auth(monkeypatch):
    import httpx

    calls = []

    def handler(request):
        calls.append(request)
        if request.headers["authorization"] != "Bearer s3cret":
            return httpx.Response(401, text="bad token")
        body = json.loads(request.content)
        assert body["messages"][0]["role"] == "user"
        return httpx.Response(200, json=completion(UNCLEAR))

    monkeypatch.setenv("HEADMAPS_TEST_TOKEN", "s3cret")
    cfg = EndpointConfig(base_url="https://example.invalid/v1", token_env="HEADMAPS_TEST_TOKEN")
    t = HTTPTransport(cfg, client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert query("p", cfg, t).pattern_detected is False
    assert str(calls[0].url) == "https://example.invalid/v1/chat/completions"
    monkeypatch.setenv("HEADMAPS_TEST_TOKEN", "wrong")
    with pytest.raises(EndpointError) as ei:
        query("p", cfg, t)
    assert ei.value.status == 401 and "wrong" not in str(ei.value)


def test_endpoint_config_validation():
    with pytest.raises(ValueError):
        EndpointConfig(max_retries=-1)
    with pytest.raises(ValueError):
        EndpointConfig(max_concurrent=0)
