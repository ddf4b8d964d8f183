import numpy as np
import pytest

from headmaps.errors import DataError, PlantError
from headmaps.model_io import HeadRef, load_model
from headmaps.projector import relation_score
from headmaps.toy import (
    BatteryConfig,
    PlantSpec,
    PromptSpec,
    ToyModelSpec,
    ablate_and_predict,
    build_toy,
    dynamic_relation_score,
    graded_family,
    make_plants,
    pearson,
    run_battery,
    self_attention_prompt,
    task_accuracy,
    toy_head_output,
    uniform_last_two_prompt,
)


def test_spec_validation():
    with pytest.raises(DataError):
        ToyModelSpec(d_model=4)
    with pytest.raises(DataError):
        ToyModelSpec(vocab_size=4)
    with pytest.raises(DataError):
        PlantSpec(0, ((1, 2), (1, 3)))
    with pytest.raises(DataError):
        PlantSpec(0, ((1, 2),), gain=-1)


def test_planted_head_brute_force():
    spec = ToyModelSpec(seed=7)
    plants = make_plants(spec, (0, 3), 20, 4.0)
    model = build_toy(spec, plants)
    for p in plants:
        rel = model.relation(p)
        assert relation_score(model.circuit(p.head), rel, k=1).score == 1.0
    # disjoint sources across plants
    s0 = {s for s, _ in plants[0].pairs}
    s1 = {s for s, _ in plants[1].pairs}
    assert not s0 & s1


def test_infeasible_plant_rejected():
    # 40 pairs into a 16-dim space cannot all be separated at low gain
    spec = ToyModelSpec(d_model=8, vocab_size=64, n_heads=2, seed=0)
    with pytest.raises(PlantError, match="gain|d_model"):
        build_toy(spec, make_plants(spec, (0,), 40, 0.5))


def test_prompt_validation():
    with pytest.raises(DataError):
        PromptSpec((1, 2), 0, (0.5, 0.6))
    with pytest.raises(DataError):
        PromptSpec((1, 2), 2, (0.5, 0.5))
    p = uniform_last_two_prompt(9)
    assert p.tokens == (0, 1, 9) and p.attention == (0.0, 0.5, 0.5) and p.query_position == 2


def test_self_attention_output_equals_static_row():
    spec = ToyModelSpec(seed=2)
    model = build_toy(spec, make_plants(spec, (1,), 10, 4.0))
    out = toy_head_output(model, 1, self_attention_prompt(42))
    np.testing.assert_array_equal(out, model.circuit(1).head_outputs([42])[0])


def test_dynamic_equals_static_under_self_attention():
    spec = ToyModelSpec(seed=4, unplanted_scale=0.3)
    model = build_toy(spec, make_plants(spec, (0,), 20, 8.0))
    rel = model.relation(model.plants[0])
    for h in range(model.n_heads):
        assert dynamic_relation_score(model, h, rel) == relation_score(model.circuit(h), rel, k=1).score


def test_ablation_knocks_out_task():
    spec = ToyModelSpec(seed=1, unplanted_scale=0.3)
    model = build_toy(spec, make_plants(spec, (0, 1), 20, 8.0))
    p = model.plants[0]
    assert task_accuracy(model, p.pairs) == 1.0
    assert task_accuracy(model, p.pairs, (0,)) <= 0.1
    assert task_accuracy(model, p.pairs, (5,)) >= 0.9
    s, t = p.pairs[0]
    assert ablate_and_predict(model, self_attention_prompt(s)) == t


def test_pearson_hand_value():
    # r([1,2,3], [1,2,4]) = 3 / sqrt(2 * 4.6667) = 0.981980506...
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619657, abs=1e-12)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])


def test_graded_family_monotone_trend():
    spec = ToyModelSpec(seed=0)
    rng = np.random.default_rng(0)
    pairs = tuple((int(s), int(s) + 1) for s in rng.choice(np.arange(2, 200), 20, replace=False))
    model = graded_family(spec, pairs, np.linspace(0, 4, 8), noise_scale=8.0)
    assert model.n_heads == 8 and model.gains[0] == 0.0
    rel = model.relation(PlantSpec(0, pairs))
    scores = [relation_score(model.circuit(h), rel, k=1).score for h in range(8)]
    assert scores[0] < 0.15 and scores[-1] == 1.0


def test_save_and_reload_as_generic(tmp_path):
    spec = ToyModelSpec(d_model=16, vocab_size=32, n_heads=3, seed=0)
    model = build_toy(spec, make_plants(spec, (2,), 5, 4.0))
    model.save(tmp_path / "toy.safetensors")
    g, store = load_model(tmp_path / "toy.safetensors")
    assert (g.n_layers, g.n_heads, g.d_model, g.vocab_size, g.weights_tied) == (1, 3, 16, 32, True)
    c = store.circuit(HeadRef(0, 2))
    rel = model.relation(model.plants[0])
    assert relation_score(c, rel, k=1).score == 1.0


def test_battery_small():
    rep = run_battery(BatteryConfig(seeds=(0,), d_model=64, vocab_size=128, n_heads=4, n_pairs=10))
    assert rep.passed, [c for c in rep.checks if not c.passed]
    assert rep.to_dict()["passed"] is True
    with pytest.raises(DataError):
        BatteryConfig.from_dict({"nope": 1})
