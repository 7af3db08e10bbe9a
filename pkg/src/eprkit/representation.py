"""
Four-feature note-tuple encoding and z-score standardization.

Each note becomes ``(ioi, duration, pitch, velocity)`` where ``ioi`` is the
onset distance to the previous note (0 for the first note) and ``duration``
is offset minus onset, both in seconds.

"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .midi_io import NoteSequence

FEATURES = ("ioi", "duration", "pitch", "velocity")
IOI, DURATION, PITCH, VELOCITY = range(4)


@dataclass(frozen=True)
class NoteTupleSeq:
    """
    Encoded notes.

    Attributes
    ----------
    values : numpy array, shape (n, 4)
        Columns ordered as :data:`FEATURES`.
    scaled : bool
        Whether `values` are in z-units.
    raw_pitch : numpy array, shape (n,)
        Integer MIDI pitch, kept for pass-through when `values` are scaled.

    """

    values: np.ndarray
    scaled: bool = False
    raw_pitch: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != 4:
            raise ValueError(f"expected (n, 4) tuples, got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        raw = self.raw_pitch
        if raw is None:
            if self.scaled:
                raise ValueError("scaled tuples need raw_pitch")
            raw = np.rint(values[:, PITCH])
        raw = np.asarray(raw, dtype=int).copy()
        raw.setflags(write=False)
        object.__setattr__(self, "raw_pitch", raw)

    def __len__(self):
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, FEATURES.index(name)]

    def window(self, start: int, stop: int) -> "NoteTupleSeq":
        return NoteTupleSeq(self.values[start:stop], self.scaled,
                            self.raw_pitch[start:stop])


def encode(seq: NoteSequence) -> NoteTupleSeq:
    """Encode a sorted note sequence into unscaled tuples."""
    if len(seq) == 0:
        raise ValueError("cannot encode an empty note sequence")
    onsets = seq.onsets
    ioi = np.diff(onsets, prepend=onsets[0])
    values = np.column_stack([ioi, seq.offsets - onsets, seq.pitches,
                              seq.velocities])
    return NoteTupleSeq(values, scaled=False, raw_pitch=seq.pitches)


def decode(tuples: NoteTupleSeq, start: float = 0.0,
           source_name: str = "") -> NoteSequence:
    """
    Rebuild absolute note times from unscaled tuples.

    Onsets are the running sum of IOIs shifted by `start`.  Pitch and
    velocity are rounded and clamped to the MIDI range.  Negative IOIs or
    durations are rejected; clamp model output before decoding.

    """
    if tuples.scaled:
        raise ValueError("decode needs unscaled tuples; invert the scaler "
                         "first")
    values = tuples.values
    if (values[:, IOI] < 0).any() or (values[:, DURATION] < 0).any():
        raise ValueError("negative IOI or duration; clamp model output "
                         "before decoding")
    onsets = start + np.cumsum(values[:, IOI])
    offsets = onsets + values[:, DURATION]
    pitches = np.clip(np.rint(values[:, PITCH]), 0, 127).astype(int)
    velocities = np.clip(np.rint(values[:, VELOCITY]), 0, 127).astype(int)
    return NoteSequence.from_arrays(onsets, offsets, pitches, velocities,
                                    source_name)


@dataclass(frozen=True)
class ScalerStats:
    """Per-feature mean and standard deviation, ordered as FEATURES."""

    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    def __post_init__(self):
        mean = tuple(float(m) for m in self.mean)
        std = tuple(float(s) for s in self.std)
        if len(mean) != 4 or len(std) != 4:
            raise ValueError("ScalerStats needs four means and four stds")
        if any(not s > 0 for s in std):
            raise ValueError(f"std must be positive: {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {name: {"mean": m, "std": s}
                for name, m, s in zip(FEATURES, self.mean, self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerStats":
        return cls(tuple(d[name]["mean"] for name in FEATURES),
                   tuple(d[name]["std"] for name in FEATURES))

    @classmethod
    def identity(cls) -> "ScalerStats":
        return cls((0.0,) * 4, (1.0,) * 4)


def fit_scaler(corpus) -> ScalerStats:
    """
    Fit pooled z-score statistics over every note of an unscaled corpus.

    The population standard deviation is used.  A feature with zero spread
    gets a std of 1 (with a warning) so the transform stays defined.

    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if any(t.scaled for t in corpus):
        raise ValueError("fit_scaler needs unscaled tuples")
    pooled = np.concatenate([t.values for t in corpus], axis=0)
    if len(pooled) < 2:
        raise ValueError("need at least two notes to fit a scaler")
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    for k, name in enumerate(FEATURES):
        if std[k] <= 1e-12 * max(1.0, abs(mean[k])):
            warnings.warn(f"feature {name!r} is constant; using std 1",
                          stacklevel=2)
            std[k] = 1.0
    return ScalerStats(tuple(mean), tuple(std))


def apply_scaler(tuples: NoteTupleSeq, stats: ScalerStats) -> NoteTupleSeq:
    if tuples.scaled:
        raise ValueError("tuples are already scaled")
    values = (tuples.values - np.array(stats.mean)) / np.array(stats.std)
    return NoteTupleSeq(values, scaled=True, raw_pitch=tuples.raw_pitch)


def invert_scaler(tuples: NoteTupleSeq, stats: ScalerStats) -> NoteTupleSeq:
    if not tuples.scaled:
        raise ValueError("tuples are not scaled")
    values = tuples.values * np.array(stats.std) + np.array(stats.mean)
    return NoteTupleSeq(values, scaled=False, raw_pitch=tuples.raw_pitch)
