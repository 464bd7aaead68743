"""
Cleaning up a noisy label set
=============================

Half of the 50 pseudo-labels below are wrong. Probabilistic reasoning over the
two graphs finds which ones contradict the rest and drops them.
"""
from kgalign.pipeline import RunConfig
from kgalign.refiner import label_tpr, refine, trace_against_truth
from kgalign.synth import synth_noisy_labels, synth_pair

pair = synth_pair(RunConfig(seed=0).synth_spec())
truth = pair.ground_truth
print(pair.source, pair.target, sep="\n")

labels = synth_noisy_labels(pair, 50, 0.5, seed=0)
print("input labels:", len(labels), "correct fraction:", label_tpr(labels, truth))

result = refine(labels, pair)

# TPR and recall of the kept labels after each refinement round
for it, (tpr, recall) in enumerate(trace_against_truth(result.trace, labels, truth)):
    print(f"round {it}: kept {result.trace.sizes[it]:3d}  tpr={tpr}  recall={recall}")

# pairs the reasoning is confident about are added as inferred labels
print("refined set:", len(result.labels), "labels, correct fraction:", round(label_tpr(result.pairs, truth), 3))
