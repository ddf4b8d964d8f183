"""Does the static score predict what the head does in context?

32 heads share one relation at gains 0..4 plus noise. The static score comes
from the weights; the dynamic score runs the toy forward pass with the head
attending either to the source alone or half to a filler token.
Then knock out the planted head and watch task accuracy collapse.
"""

import numpy as np

from headmaps import relation_score
from headmaps.toy import (
    PlantSpec, ToyModelSpec, build_toy, dynamic_relation_score, graded_family, make_plants,
    pearson, random_pairs, self_attention_prompt, task_accuracy, uniform_last_two_prompt,
)

spec = ToyModelSpec(d_model=128, vocab_size=256, seed=1)
pairs = random_pairs(spec.vocab_size, 20, np.random.default_rng(1), exclude=(0, 1))
family = graded_family(spec, pairs, np.linspace(0, 4, 32), noise_scale=8.0)
rel = family.relation(PlantSpec(0, pairs))

static = [relation_score(family.circuit(h), rel, k=1).score for h in range(32)]
one_hot = [dynamic_relation_score(family, h, rel, 1, self_attention_prompt) for h in range(32)]
two = [dynamic_relation_score(family, h, rel, 1, uniform_last_two_prompt) for h in range(32)]
print(f"Pearson static vs one-hot attention:   {pearson(static, one_hot):.3f}")
print(f"Pearson static vs uniform-over-two:    {pearson(static, two):.3f}")

spec = ToyModelSpec(d_model=128, vocab_size=256, n_heads=8, seed=3, unplanted_scale=0.3)
model = build_toy(spec, make_plants(spec, (0, 1), 20, 8.0))
p = model.plants[0]
print("accuracy intact:", task_accuracy(model, p.pairs))
print("planted head 0 zeroed:", task_accuracy(model, p.pairs, (0,)))
print("unplanted head 6 zeroed:", task_accuracy(model, p.pairs, (6,)))
