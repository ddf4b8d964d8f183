import json

import pytest

from headmaps.cli import main
from headmaps.describe import build_payload, EndpointConfig, format_prompt, request_hash
from headmaps.projector import salient_mappings
from headmaps.toy import ToyModelSpec, build_toy, make_plants


@pytest.fixture(scope="module")
def toydir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    spec = ToyModelSpec(d_model=32, vocab_size=64, n_heads=4, seed=0, unplanted_scale=0.3)
    model = build_toy(spec, make_plants(spec, (1, 3), 8, 8.0))
    model.save(d / "toy.safetensors")
    vocab = model.vocabulary()
    (d / "vocab.json").write_text(json.dumps({t: i for i, t in enumerate(vocab.id_to_string)}))
    lines = []
    for p, cat in zip(model.plants, ("knowledge", "linguistic")):
        (d / f"{p.relation_name}.tsv").write_text("".join(f"t{s}\tt{t}\n" for s, t in p.pairs))
        lines.append(f"  - {{name: {p.relation_name}, category: {cat}, file: {p.relation_name}.tsv, k_override: 1}}")
    (d / "manifest.yaml").write_text("relations:\n" + "\n".join(lines) + "\n")
    return d, model


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_inspect(capsys, toydir):
    d, _ = toydir
    code, out, _ = run(capsys, "inspect", d / "toy.safetensors")
    assert code == 0
    g = json.loads(out)
    assert g["n_heads"] == 4 and g["vocab_size"] == 64 and g["weights_tied"] is True


def test_score(capsys, toydir):
    d, _ = toydir
    code, out, _ = run(capsys, "score", d / "toy.safetensors", "--head", "0.1", "--manifest", d / "manifest.yaml")
    assert code == 0
    rows = {r["relation"]: r for r in json.loads(out)}
    assert rows["plant_h1"]["score"] == 1.0 and rows["plant_h1"]["classified"]
    assert rows["plant_h3"]["score"] < 0.15


def test_sweep_classify_export(capsys, toydir, tmp_path):
    d, _ = toydir
    rep = tmp_path / "r.json"
    code, out, _ = run(capsys, "sweep", d / "toy.safetensors", "--vocab", d / "vocab.json",
                       "--manifest", d / "manifest.yaml", "--workers", 2, "-o", rep)
    assert code == 0 and '"plant_h1": 1' in out
    code, _, _ = run(capsys, "classify", rep, "--out-dir", tmp_path / "cls")
    assert code == 0
    assert (tmp_path / "cls" / "counts_promote.csv").read_text() == "relation,heads\nplant_h1,1\nplant_h3,1\n"
    assert (tmp_path / "cls" / "grid.svg").read_text().count('class="cell"') == 4
    assert json.loads((tmp_path / "cls" / "stats.json").read_text())["n_classified"] == 2
    for fmt, name in [("svg", "g.svg"), ("csv", "s.csv"), ("stats", "st.json"), ("counts", "c.csv")]:
        assert run(capsys, "export", rep, "--format", fmt, "-o", tmp_path / name)[0] == 0
    code, _, err = run(capsys, "export", rep, "--format", "distribution", "-o", tmp_path / "x.csv")
    assert code == 1 and "--relation" in err
    assert run(capsys, "export", rep, "--format", "distribution", "--relation", "plant_h1",
               "-o", tmp_path / "x.csv")[0] == 0


def test_sweep_config_file(capsys, toydir, tmp_path):
    d, _ = toydir
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(f"model_path: {d / 'toy.safetensors'}\nvocab_path: {d / 'vocab.json'}\n"
                   f"manifest_path: {d / 'manifest.yaml'}\nheads: ['0.3']\n")
    code, _, _ = run(capsys, "sweep", "--config", cfg, "--directions", "promote", "-o", tmp_path / "r.json")
    assert code == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["heads"] == ["0.3"] and len(doc["scores"]) == 2


def test_saliency_skewness_output_space(capsys, toydir):
    d, _ = toydir
    code, out, _ = run(capsys, "saliency", d / "toy.safetensors", "--head", "0.1", "--top", 3)
    assert code == 0 and len(json.loads(out)["top"]) == 3
    code, out, _ = run(capsys, "skewness", d / "toy.safetensors", "--heads", "0")
    assert code == 0 and set(json.loads(out)) == {"0.0", "0.1", "0.2", "0.3"}
    code, out, _ = run(capsys, "output-space", d / "toy.safetensors", "--heads", "0.1", "--block-rows", 7)
    assert code == 0 and 0 < json.loads(out)["0.1"] <= 1


def test_salient_maps_and_prompt(capsys, toydir):
    d, _ = toydir
    code, out, _ = run(capsys, "salient-maps", d / "toy.safetensors", "--head", "0.1", "--k-tokens", 4)
    assert code == 0
    ents = json.loads(out)["entries"]
    assert len(ents) == 4 and all(len(e["targets"]) == 5 for e in ents)
    code, out, _ = run(capsys, "salient-maps", d / "toy.safetensors", "--head", "0.1", "--prompt")
    assert code == 0 and out.startswith("Below you are given a list")


def test_describe_canned_appends_to_report(capsys, toydir, tmp_path):
    d, model = toydir
    canned = tmp_path / "canned"
    canned.mkdir()
    prompt = format_prompt(salient_mappings(model.circuit(1), 30, 5, model.vocabulary()))
    key = request_hash(build_payload(prompt, EndpointConfig(), 0))
    (canned / f"{key}.txt").write_text(json.dumps(
        {"Reasoning": "r", "Input strings": "tokens", "Observed pattern": "maps each token to a fixed partner"}))
    rep = tmp_path / "r.json"
    run(capsys, "sweep", d / "toy.safetensors", "--vocab", d / "vocab.json", "--manifest", d / "manifest.yaml", "-o", rep)
    code, out, _ = run(capsys, "describe", d / "toy.safetensors", "--heads", "0.1", "--canned", canned, "--report", rep)
    assert code == 0
    res = json.loads(out)
    assert res["descriptions"]["0.1"]["pattern_detected"] is True
    assert res["identification_rate"] == {"0": 1.0}
    assert json.loads(rep.read_text())["descriptions"]["0.1"]["Observed pattern"].startswith("maps")
    # a head without a canned answer is an endpoint (I/O) failure
    code, _, err = run(capsys, "describe", d / "toy.safetensors", "--heads", "0.2", "--canned", canned)
    assert code == 3 and "canned" in err


def test_baselines(capsys, toydir):
    d, _ = toydir
    code, out, _ = run(capsys, "baselines", d / "toy.safetensors", "--layer", 0, "--manifest", d / "manifest.yaml",
                       "--n", 20, "--seed", 3)
    assert code == 0
    res = json.loads(out)
    assert res["n"] == 20 and res["classified_fraction"] <= 0.05
    assert run(capsys, "baselines", d / "toy.safetensors", "--layer", 0, "--n", 20, "--seed", 3)[1] != out


def test_toy_battery_cli(capsys, tmp_path):
    cfg = tmp_path / "toy.yaml"
    cfg.write_text("seeds: [0]\nd_model: 64\nvocab_size: 128\nn_heads: 4\nn_pairs: 10\n")
    code, out, err = run(capsys, "toy", "--toy-config", cfg)
    assert code == 0 and json.loads(out)["passed"] is True and "checks passed" in err


def test_exit_codes(capsys, toydir, tmp_path):
    d, _ = toydir
    assert run(capsys, "nosuchcommand")[0] == 1
    assert run(capsys, "score", d / "toy.safetensors")[0] == 1  # --head missing
    assert run(capsys, "inspect", tmp_path / "missing.safetensors")[0] == 3
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")
    assert run(capsys, "inspect", bad)[0] == 2
    assert run(capsys, "score", d / "toy.safetensors", "--head", "9.9", "--manifest", d / "manifest.yaml")[0] == 2
    notreport = tmp_path / "x.json"
    notreport.write_text("{}")
    assert run(capsys, "classify", notreport, "--out-dir", tmp_path / "o")[0] == 2
