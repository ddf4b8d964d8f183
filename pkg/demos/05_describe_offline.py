"""Build the description prompt for a head and parse a model's answer.

No network here: a canned transport stands in for the chat endpoint. Swap
in ``HTTPTransport(EndpointConfig(...))`` with a token in OPENAI_API_KEY
to ask a real model.
"""

import json

from headmaps.describe import CannedTransport, EndpointConfig, describe_head, format_prompt
from headmaps.projector import salient_mappings
from headmaps.toy import ToyModelSpec, build_toy, make_plants

spec = ToyModelSpec(d_model=32, vocab_size=64, n_heads=2, seed=0)
model = build_toy(spec, make_plants(spec, (1,), 8, 8.0))
circuit = model.circuit(1)

prompt = format_prompt(salient_mappings(circuit, 30, 5, model.vocabulary()))
print(prompt[-400:])

answers = [
    "```json\n" + json.dumps({"Reasoning": "each token maps to one partner",
                              "Input strings": "synthetic tokens",
                              "Observed pattern": "maps every input to a fixed partner token"}) + "\n```",
]
resp = describe_head(circuit, EndpointConfig(), CannedTransport(answers), model.vocabulary())
print("\npattern detected:", resp.pattern_detected, "|", resp.observed_pattern)
