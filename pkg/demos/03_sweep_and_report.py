"""Sweep a saved model over a relation manifest and render the report.

The toy is written to disk as a safetensors file with a vocab.json and a
TSV per relation, so this walks the same path a real checkpoint would.
"""

import json
import tempfile
from pathlib import Path

from headmaps.model_io import load_model
from headmaps.vocab import load_relations, load_vocab
from headmaps.report import grid_svg, write_result
from headmaps.sweep import category_grid, count_by_relation, summary_stats, sweep
from headmaps.toy import ToyModelSpec, build_toy, make_plants

out = Path(tempfile.mkdtemp(prefix="headmaps-demo-"))
spec = ToyModelSpec(d_model=64, vocab_size=128, n_heads=4, seed=0, unplanted_scale=0.3)
toy = build_toy(spec, make_plants(spec, (1, 3), 10, 8.0))
toy.save(out / "toy.safetensors")
(out / "vocab.json").write_text(json.dumps({t: i for i, t in enumerate(toy.vocabulary().id_to_string)}))
lines = []
for p, cat in zip(toy.plants, ("knowledge", "linguistic")):
    (out / f"{p.relation_name}.tsv").write_text("".join(f"t{s}\tt{t}\n" for s, t in p.pairs))
    lines.append(f"  - {{name: {p.relation_name}, category: {cat}, file: {p.relation_name}.tsv, k_override: 1}}")
(out / "manifest.yaml").write_text("relations:\n" + "\n".join(lines) + "\n")

geometry, store = load_model(out / "toy.safetensors")
relations = load_relations(out / "manifest.yaml", load_vocab(out / "vocab.json"))
result = sweep(store, relations, workers=2)

print("classified heads per relation:", count_by_relation(result))
print(summary_stats(result))
grid = category_grid(result)
write_result(result, out / "report.json")
grid_svg(grid, out / "grid.svg")
print("report and grid written to", out)
