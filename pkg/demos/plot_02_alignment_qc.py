"""
Aligning a performance to its score
===================================

A synthetic performance with a few deleted notes and one wrong pitch is
aligned to its score, then passed through quality control.
"""

import numpy as np

from eprkit import align, quality_check, scale_score_to_performance
from eprkit.alignment import format_alignment
from eprkit.synthetic import make_performance, make_score

rng = np.random.default_rng(0)
score = make_score(80, rng)
perf = make_performance(score, rng, tempo_scale=1.2, start=0.4, drop=3,
                        wrong_pitch=1)

# stretch the score to the performance's length before aligning
scaled = scale_score_to_performance(score, perf)
al = align(scaled, perf)
print(f"{al.n_pairs} pairs, unmatched score notes {al.unmatched_a}, "
      f"pitch mismatches {al.pitch_mismatch_count}")

# the verdict is keep/discard plus the two fractions it was based on
print(quality_check(al, len(scaled), len(perf)).summary())

# one more deletion pushes the unmatched fraction over the limit
worse = make_performance(score, rng, drop=6)
scaled = scale_score_to_performance(score, worse)
print(quality_check(align(scaled, worse), len(scaled), len(worse)).summary())

# the text sidecar lists matched indices and pitches
print("\n".join(format_alignment(al, scaled, perf).splitlines()[:5]))
