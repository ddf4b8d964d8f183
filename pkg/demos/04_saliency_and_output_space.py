"""Which inputs does a head amplify, and how much of the vocabulary can it reach?

Saliency is the norm ratio ||e W|| / ||e|| per token; a heavily skewed profile
means the head cares about a few inputs. The output space is the share of the
vocabulary that wins the argmax for at least one input.
"""

import numpy as np

from headmaps import input_skewness, output_space_size, saliency, salient_mappings
from headmaps.toy import ToyModelSpec, build_toy, make_plants

spec = ToyModelSpec(d_model=64, vocab_size=512, n_heads=2, seed=0, unplanted_scale=0.3)
model = build_toy(spec, make_plants(spec, (0,), 16, 8.0))
vocab = model.vocabulary()

for h in range(model.n_heads):
    c = model.circuit(h)
    prof = saliency(c)
    print(f"head {h}: skewness {input_skewness(prof.sigma):+.2f}, output space {output_space_size(c):.3f}")

planted = {s for s, _ in model.plants[0].pairs}
top = salient_mappings(model.circuit(0), k_tokens=16, n_targets=3, vocab=vocab)
found = sum(e.source_id in planted for e in top.entries)
print(f"{found}/16 of the most salient inputs of head 0 are planted sources")
for e in top.entries[:4]:
    print(f"  {e.source}: {[t[1] for t in e.targets]}")

eye = model.circuit(0).with_vo(np.eye(64, dtype=np.float32))
print("identity head saliency range:", saliency(eye).sigma.min(), saliency(eye).sigma.max())
