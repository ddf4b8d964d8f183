"""Plant a relation into a toy head and find it again from the weights alone.

A toy model gets two heads whose OV matrices map 20 source tokens onto 20
target tokens; the other heads are random. Scoring every head on both
relations should light up exactly the planted cells.
"""

from headmaps import relation_score
from headmaps.toy import ToyModelSpec, build_toy, make_plants

spec = ToyModelSpec(d_model=128, vocab_size=256, n_heads=8, seed=0, unplanted_scale=0.3)
model = build_toy(spec, make_plants(spec, heads=(2, 5), n_pairs=20, gain=8.0))

print("head  " + "  ".join(p.relation_name for p in model.plants))
for h in range(model.n_heads):
    cells = []
    for p in model.plants:
        s = relation_score(model.circuit(h), model.relation(p), k=1)
        cells.append(f"{s.score:8.2f}{'*' if s.classified else ' '}")
    print(f"{h:4d}  " + "  ".join(cells))

# the same relation read in the suppress direction is the promote score of -W_VO
c = model.circuit(2)
rel = model.relation(model.plants[0])
print("suppress(W) =", relation_score(c, rel, 1, "suppress").score,
      " promote(-W) =", relation_score(c.with_vo(-c.w_vo), rel, 1, "promote").score)
