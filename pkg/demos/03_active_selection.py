"""
Which entities are worth a query?
=================================

Entities are ranked by their own alignment uncertainty plus that of their
neighbours. With nothing aligned yet, hubs come first.
"""
import numpy as np

from kgalign.reasoning import AlignmentState
from kgalign.selection import score_entities, select_entities
from kgalign.synth import SynthSpec, synth_pair

pair = synth_pair(SynthSpec(entity_count=200, seed=1))
state = AlignmentState()

scores = score_entities(pair, state)
order = np.argsort(scores.u)[::-1][:5]
print("entity  degree   u_r     u_n     u")
for i in order:
    e = scores.entities[i]
    print(f"{e:6d}  {pair.source.degree(e):6d}  {scores.u_r[i]:6.2f}  {scores.u_n[i]:6.2f}  {scores.u[i]:.3f}")

# the same budget spent by each strategy
for strategy in ("combined", "degree", "funcsum", "random"):
    picked = select_entities(pair, state, [], 8, strategy, rng=np.random.default_rng(0))
    print(f"{strategy:9s}", picked, "mean degree", np.mean([pair.source.degree(e) for e in picked]))
