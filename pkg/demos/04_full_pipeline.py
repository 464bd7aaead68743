"""
The whole loop
==============

Select, annotate with a noisy oracle, refine, train the matcher, repeat. The
budget is 10% of the source entities split over three rounds.
"""
from kgalign.pipeline import RunConfig, run

cfg = RunConfig(seed=0, p_true=0.6)
report = run(cfg)

print(report.to_csv(), end="")
print("queries spent:", report.spent_queries, "of", report.budget)
final = report.final
print(f"final Hit@1={final.hit1:.3f}  Hit@10={final.hit10:.3f}  MRR={final.mrr:.3f}")
