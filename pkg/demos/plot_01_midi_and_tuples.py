"""
From MIDI bytes to note tuples
==============================

Write a small score to MIDI, read it back, and look at the four-feature
encoding before and after standardization.
"""

import numpy as np

from eprkit import NoteSequence, apply_scaler, decode, encode, fit_scaler
from eprkit.midi_io import parse_midi, write_midi

# a C major arpeggio with a two-note chord at the end
score = NoteSequence.from_arrays(
    onsets=[0.0, 0.5, 1.0, 1.5, 1.5],
    offsets=[0.5, 1.0, 1.5, 2.5, 2.5],
    pitches=[60, 64, 67, 72, 48],
    velocities=[80, 64, 80, 64, 64],
)

# one fixed tempo, so every time lands on an exact tick
data = write_midi(score, tpqn=480)
back = parse_midi(data)
print(f"{len(data)} bytes, {len(back)} notes, identical: {back == score}")

# each note becomes (ioi, duration, pitch, velocity)
tuples = encode(back)
print(tuples.values)

# the chord shows up as a zero inter-onset interval
print("ioi:", tuples.column("ioi"))

# standardize with statistics from this one piece
stats = fit_scaler([tuples])
scaled = apply_scaler(tuples, stats)
print("scaled means:", np.round(scaled.values.mean(axis=0), 12))

# decoding rebuilds absolute times from any start
print(decode(tuples, start=10.0).onsets)
