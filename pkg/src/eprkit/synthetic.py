"""
Synthetic score and performance MIDI for tests and demos.

Scores sit on a metric grid with flat, alternating velocities.  Performances
warp the grid with a smooth tempo curve, jitter onsets, vary articulation and
shape velocity with a phrase arc.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .midi_io import NoteSequence, save_midi


def make_score(n_notes: int, rng: np.random.Generator,
               beat: float = 0.25, chord_prob: float = 0.2,
               source_name: str = "score") -> NoteSequence:
    """Quantized score with occasional two-note chords."""
    onsets, offsets, pitches, vels = [], [], [], []
    t = 0.0
    pitch = int(rng.integers(55, 72))
    while len(onsets) < n_notes:
        length = beat * int(rng.choice([1, 1, 1, 2, 4]))
        pitch = int(np.clip(pitch + rng.integers(-4, 5), 36, 96))
        chord = [pitch]
        if rng.random() < chord_prob and len(onsets) + 1 < n_notes:
            chord.append(int(np.clip(pitch - rng.choice([3, 4, 7, 12]),
                                     21, 108)))
        for p in chord:
            onsets.append(t)
            offsets.append(t + length)
            pitches.append(p)
            vels.append(64 if len(vels) % 2 else 80)
        t += length
    return NoteSequence.from_arrays(onsets, offsets, pitches, vels,
                                    source_name)


def make_performance(score: NoteSequence, rng: np.random.Generator,
                     tempo_scale: float = 1.0, start: float = 0.0,
                     timing_jitter: float = 0.01, drop: int = 0,
                     insert: int = 0, wrong_pitch: int = 0,
                     source_name: str = "perf") -> NoteSequence:
    """
    Expressive rendition of a score.

    `drop`, `insert` and `wrong_pitch` inject that many deleted notes, extra
    notes and pitch errors, for exercising alignment quality control.
    """
    onsets = score.onsets
    end = max(onsets.max(), 1e-9)
    # smooth tempo curve: local speed factor as a low-order sine mix
    phase = rng.uniform(0, 2 * np.pi, size=2)
    grid = np.linspace(0, end, 512)
    speed = 1 + 0.15 * np.sin(2 * np.pi * grid / end + phase[0]) \
        + 0.05 * np.sin(6 * np.pi * grid / end + phase[1])
    warped = np.concatenate([[0.0], np.cumsum(np.diff(grid) * speed[1:])])
    warp = lambda t: np.interp(t, grid, warped) * tempo_scale + start
    # one jitter draw per score onset so chord notes stay together
    uniq, group = np.unique(onsets, return_inverse=True)
    new_on = warp(onsets) + rng.normal(0, timing_jitter, len(uniq))[group]
    new_on = np.maximum(new_on, start)
    articulation = rng.uniform(0.6, 1.0, len(onsets))
    dur = (warp(score.offsets) - warp(onsets)) * articulation
    dur = np.maximum(dur, 0.01)
    arc = np.sin(np.pi * (onsets - onsets.min()) / end)
    vel = 50 + 40 * arc + rng.normal(0, 6, len(onsets))
    vel = np.clip(np.rint(vel), 1, 127).astype(int)
    pitches = score.pitches.copy()
    keep = np.ones(len(onsets), dtype=bool)
    n = len(onsets)
    if drop + wrong_pitch > n - 2:
        raise ValueError("too many injected errors for this score")
    idx = rng.choice(np.arange(1, n - 1), size=drop + wrong_pitch,
                     replace=False)
    keep[idx[:drop]] = False
    for i in idx[drop:]:
        pitches[i] = pitches[i] + (1 if pitches[i] < 127 else -1)
    on_list = list(new_on[keep])
    off_list = list((new_on + dur)[keep])
    p_list = list(pitches[keep])
    v_list = list(vel[keep])
    lo, hi = new_on.min(), new_on.max()
    for _ in range(insert):
        t = rng.uniform(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo))
        on_list.append(t)
        off_list.append(t + 0.1)
        p_list.append(int(rng.integers(100, 108)))
        v_list.append(int(rng.integers(20, 60)))
    return NoteSequence.from_arrays(on_list, off_list, p_list, v_list,
                                    source_name)


def write_corpus(root, n_compositions: int = 10, n_performances=(1, 3),
                 n_notes=(40, 80), seed: int = 0, n_composers: int = 4,
                 bad_performances: int = 0) -> list[str]:
    """
    Write ``<root>/<composer>_<k>/score.mid`` plus ``perf_*.mid`` files.

    `bad_performances` extra performances with 10% deleted notes are spread
    over the first compositions; they should fail quality control.
    Returns the composition ids.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    ids = []
    for k in range(n_compositions):
        comp_id = f"composer{k % n_composers}_piece{k:02d}"
        ids.append(comp_id)
        d = root / comp_id
        d.mkdir(parents=True, exist_ok=True)
        score = make_score(int(rng.integers(*n_notes, endpoint=True)), rng)
        save_midi(score, d / "score.mid")
        count = int(rng.integers(n_performances[0], n_performances[1],
                                 endpoint=True))
        for j in range(count):
            perf = make_performance(score, rng,
                                    tempo_scale=rng.uniform(0.8, 1.3),
                                    start=rng.uniform(0.0, 1.0))
            save_midi(perf, d / f"perf_{j:02d}.mid")
        if k < bad_performances:
            perf = make_performance(score, rng, drop=max(2, len(score) // 10))
            save_midi(perf, d / "perf_bad.mid")
    return ids
