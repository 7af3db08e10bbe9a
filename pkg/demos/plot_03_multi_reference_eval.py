"""
Evaluating against several human references
===========================================

Each composition has several human performances.  A rendition is compared
with all of them, and per feature the closest reference by MSE and the most
correlated reference are kept separately.
"""

import numpy as np

from eprkit import gem_report, human_surrogate_eval
from eprkit.synthetic import make_performance, make_score

rng = np.random.default_rng(3)
references, renditions, flat = {}, {}, {}
for k in range(4):
    score = make_score(60, rng)
    references[f"piece{k}"] = [make_performance(score, rng) for _ in range(3)]
    # a plausible rendition and a mechanical one that just plays the score
    renditions[f"piece{k}"] = make_performance(score, rng)
    flat[f"piece{k}"] = score

print(gem_report(renditions, references).table("Rendition"))
print()
print(gem_report(flat, references).table("Score"))
print()

# human performances scored against each other give a ceiling
print(human_surrogate_eval(references).table("Human"))
