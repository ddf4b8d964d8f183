"""Natural-language descriptions of salient mappings via a chat-completion endpoint.

Network I/O happens only inside a transport. :class:`HTTPTransport` speaks
the standard chat-completion JSON wire format; :class:`CannedTransport`
replays stored responses so the pipeline runs offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .errors import EndpointError, ResponseParseError, RetriesExhausted
from .model_io import HeadRef
from .projector import OVCircuit, SalientMappingSet, salient_mappings
from .vocab import Vocabulary, token_text

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Below you are given a list of input strings, and a list of mappings: each mapping is between an input string "
    "and a list of 5 strings. \n"
    'Mappings are provided in the format "s: t1, t2, t3, t4, t5" where each of s, t1, t2, t3, t4, t5 is a short '
    "string, typically corresponding to a single word or a sub-word.\n"
    "Your goal is to describe shortly and simply the inputs and the function that produces these mappings. "
    "To perform the task, look for semantic and textual patterns. \n"
    "For example, input tokens 'water','ice','freeze' are water-related, and a mapping ('fire':'f') is from a "
    "word to its first letter.\n"
    "As a final response, suggest the most clear patterns observed or indicate that no clear pattern is visible "
    '(write only the word "Unclear").\n'
    "Your response should be a vaild json, with the following keys: \n"
    '"Reasoning": your reasoning.\n'
    '"Input strings": One sentence describing the input strings (or "Unclear").\n'
    '"Observed pattern": One sentence describing the most clear patterns observed (or "Unclear").\n'
    "\n"
    "The input strings are:\n"
    "<input strings>\n"
    "\n"
    "The mappings are:\n"
    "<mapping strings>"
)

KEYS = ("Reasoning", "Input strings", "Observed pattern")


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    token_env: str = "OPENAI_API_KEY"
    seed: int = 0
    temperature: float = 0.0
    max_retries: int = 2
    timeout: float = 60.0
    max_concurrent: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")


@dataclass(frozen=True)
class DescribeResponse:
    reasoning: str
    input_strings: str
    observed_pattern: str
    pattern_detected: bool
    raw: str

    def to_record(self) -> dict:
        return {
            "Reasoning": self.reasoning,
            "Input strings": self.input_strings,
            "Observed pattern": self.observed_pattern,
            "pattern_detected": self.pattern_detected,
        }


def _render(token: str, decode: bool) -> str:
    return token_text(token) if decode else token


def format_prompt(mappings: SalientMappingSet, n_targets: int = 5, decode_tokens: bool = True) -> str:
    """Fill the description prompt with the salient sources and their mappings.

    Tokens are decoded to text (leading spaces kept, unprintable bytes as
    ``<0xNN>``) and joined with bare commas, as in the published example
    mappings (`` months:  year,year, Year,Year, yearly``). Entries keep the
    saliency-descending order of the set.
    """
    if not mappings.entries:
        raise ValueError("cannot build a prompt from an empty mapping set")
    for e in mappings.entries:
        if len(e.targets) != n_targets:
            raise ValueError(f"entry {e.source!r} has {len(e.targets)} targets, expected {n_targets}")
    sources = [_render(e.source, decode_tokens) for e in mappings.entries]
    lines = [
        f"{src}: " + ",".join(_render(t, decode_tokens) for t in e.target_strings)
        for src, e in zip(sources, mappings.entries)
    ]
    template = PROMPT_TEMPLATE
    if n_targets != 5:
        names = ", ".join(f"t{i}" for i in range(1, n_targets + 1))
        template = (
            template.replace("a list of 5 strings", f"a list of {n_targets} strings")
            .replace("s: t1, t2, t3, t4, t5", f"s: {names}")
            .replace("s, t1, t2, t3, t4, t5", f"s, {names}")
        )
    return template.replace("<input strings>", ",".join(sources)).replace("<mapping strings>", "\n".join(lines))


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _json_objects(text: str) -> Iterable[dict]:
    decoder = json.JSONDecoder()
    for m in _FENCE.finditer(text):
        try:
            obj = json.loads(m.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            yield obj
    for i, ch in enumerate(text):
        if ch == "{":
            try:
                obj, _ = decoder.raw_decode(text, i)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                yield obj


def parse_response(raw: str, strict: bool = False) -> DescribeResponse:
    """Extract the three answer keys from a model reply.

    By default a reply counts as "no pattern" when its observed pattern
    contains "clear" in any case, which also catches "Unclear" and wordier
    refusals (and, knowingly, sentences like "a clear mapping"). ``strict``
    only accepts the exact word "Unclear".
    """
    for obj in _json_objects(raw):
        if "Observed pattern" in obj:
            fields = {k: obj.get(k, "") for k in KEYS}
            fields = {k: v if isinstance(v, str) else json.dumps(v) for k, v in fields.items()}
            pattern = fields["Observed pattern"]
            if strict:
                detected = pattern.strip().strip(".").strip().lower() != "unclear"
            else:
                detected = "clear" not in pattern.lower()
            return DescribeResponse(
                fields["Reasoning"], fields["Input strings"], pattern, detected, raw
            )
    raise ResponseParseError("no JSON object with an 'Observed pattern' key in the response", raw)


class Transport(Protocol):
    def __call__(self, payload: dict) -> dict: ...


def request_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def completion(content: str, finish_reason: str = "stop") -> dict:
    """Wrap assistant text in a minimal chat-completion response body."""
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": finish_reason}]}


class CannedTransport:
    """Replay stored responses without network access.

    ``source`` is a directory of ``<request-hash>.json`` / ``.txt`` files,
    a dict from request hash to reply, or a list of replies served in order.
    ``.json`` files hold a full completion body; anything else is the
    assistant text.
    """

    def __init__(self, source):
        self.source = source
        self.requests: list[dict] = []

    def __call__(self, payload: dict) -> dict:
        self.requests.append(payload)
        key = request_hash(payload)
        if isinstance(self.source, list):
            if not self.source:
                raise EndpointError("canned transport has no responses left")
            reply = self.source.pop(0)
        elif isinstance(self.source, dict):
            if key not in self.source:
                raise EndpointError(f"no canned response for request {key[:12]}")
            reply = self.source[key]
        else:
            root = Path(self.source)
            for suffix in (".json", ".txt"):
                f = root / f"{key}{suffix}"
                if f.exists():
                    text = f.read_text(encoding="utf-8")
                    reply = json.loads(text) if suffix == ".json" else text
                    break
            else:
                raise EndpointError(f"no canned response file for request {key[:12]} in {root}")
        return reply if isinstance(reply, dict) else completion(str(reply))


class HTTPTransport:
    """POST to ``{base_url}/chat/completions`` with a bearer token read from the environment."""

    def __init__(self, config: EndpointConfig, client=None):
        import httpx

        self.config = config
        self.client = client or httpx.Client(timeout=config.timeout)

    def __call__(self, payload: dict) -> dict:
        import httpx

        token = os.environ.get(self.config.token_env, "")
        if not token:
            raise EndpointError(f"environment variable {self.config.token_env} is not set")
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self.client.post(url, json=payload, headers={"Authorization": f"Bearer {token}"})
        except httpx.HTTPError as exc:
            raise EndpointError(f"request to {url} failed: {type(exc).__name__}") from None
        if resp.status_code != 200:
            raise EndpointError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
        try:
            return resp.json()
        except ValueError:
            raise EndpointError(f"{url} returned a non-JSON body", resp.status_code) from None


def build_payload(prompt: str, endpoint: EndpointConfig, seed: int) -> dict:
    return {
        "model": endpoint.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.temperature,
        "seed": seed,
    }


def query(prompt: str, endpoint: EndpointConfig, transport: Transport) -> DescribeResponse:
    """Send one prompt, retrying truncated or unparseable replies with the next seed."""
    last = None
    attempts = endpoint.max_retries + 1
    for attempt in range(attempts):
        body = transport(build_payload(prompt, endpoint, endpoint.seed + attempt))
        try:
            choice = body["choices"][0]
            content = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            last = ResponseParseError("completion body has no choices[0].message.content", json.dumps(body))
            continue
        if choice.get("finish_reason") == "length":
            last = ResponseParseError("response truncated", content)
            log.info("attempt %d truncated; retrying with a new seed", attempt)
            continue
        try:
            return parse_response(content)
        except ResponseParseError as exc:
            last = exc
            log.info("attempt %d unparseable; retrying with a new seed", attempt)
    raise RetriesExhausted(f"no usable response after {attempts} attempts", attempts, last)


def describe_head(
    circuit: OVCircuit,
    endpoint: EndpointConfig,
    transport: Transport | None = None,
    vocab: Vocabulary | None = None,
    k_tokens: int = 30,
    n_targets: int = 5,
) -> DescribeResponse:
    """Salient mappings -> prompt -> one (possibly retried) chat completion."""
    transport = transport or HTTPTransport(endpoint)
    mappings = salient_mappings(circuit, k_tokens, n_targets, vocab)
    return query(format_prompt(mappings, n_targets), endpoint, transport)


def describe_heads(
    circuits: Callable[[HeadRef], OVCircuit],
    heads: list[HeadRef],
    endpoint: EndpointConfig,
    transport: Transport | None = None,
    vocab: Vocabulary | None = None,
) -> dict[HeadRef, DescribeResponse]:
    """Describe several heads with at most ``endpoint.max_concurrent`` requests in flight."""
    transport = transport or HTTPTransport(endpoint)

    def one(h):
        return describe_head(circuits(h), endpoint, transport, vocab)

    with ThreadPoolExecutor(endpoint.max_concurrent) as pool:
        results = list(pool.map(one, sorted(heads)))
    return dict(zip(sorted(heads), results))


def identification_rate(responses: dict[HeadRef, DescribeResponse]) -> dict[int, float]:
    """Per layer, the fraction of heads whose description reports a pattern."""
    by_layer: dict[int, list[bool]] = {}
    for head, resp in responses.items():
        by_layer.setdefault(head.layer, []).append(resp.pattern_detected)
    return {layer: sum(v) / len(v) for layer, v in sorted(by_layer.items())}
