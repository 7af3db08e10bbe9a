"""
Note-to-note alignment between two note sequences, plus quality control.

The aligner is a global, monotonic dynamic program over the sorted note
order.  Matching note ``i`` of `a` with note ``j`` of `b` costs::

    alpha * |t_a(i) - t_b(j)| + beta * [pitch_a(i) != pitch_b(j)]

where ``t`` is the onset rescaled to [0, 1] over each sequence's first to
last onset.  Leaving a note unmatched costs ``gap``.  The rescaling makes
the cost blind to uniform tempo changes.

"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .midi_io import NoteSequence

UNMATCHED_MAX = 0.06
PITCH_MISMATCH_MAX = 0.03

_DIAG, _UP, _LEFT = 0, 1, 2


@dataclass(frozen=True)
class AlignParams:
    alpha: float = 1.0
    beta: float = 1.1
    gap: float = 0.6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gap < 0:
            raise ValueError("alignment weights must be non-negative")


@dataclass(frozen=True)
class Alignment:
    """
    Partial monotonic matching between two sequences.

    ``pairs`` is an integer array of shape (k, 2) holding (index_a, index_b),
    strictly increasing in both columns.
    """

    pairs: np.ndarray
    unmatched_a: tuple[int, ...]
    unmatched_b: tuple[int, ...]
    pitch_mismatch_count: int = 0

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "unmatched_a",
                           tuple(int(i) for i in self.unmatched_a))
        object.__setattr__(self, "unmatched_b",
                           tuple(int(i) for i in self.unmatched_b))

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_a(self) -> int:
        return self.n_pairs + len(self.unmatched_a)

    @property
    def n_b(self) -> int:
        return self.n_pairs + len(self.unmatched_b)

    def check(self, n_a: int, n_b: int) -> None:
        """Raise ValueError unless this is a valid alignment of n_a x n_b."""
        for col, n, unmatched in ((0, n_a, self.unmatched_a),
                                  (1, n_b, self.unmatched_b)):
            idx = self.pairs[:, col]
            if len(idx) > 1 and (np.diff(idx) <= 0).any():
                raise ValueError("pairs are not strictly increasing")
            covered = np.sort(np.concatenate([idx, unmatched]))
            if not np.array_equal(covered, np.arange(n)):
                raise ValueError("pairs and unmatched sets do not partition "
                                 "the sequence")


@dataclass(frozen=True)
class QcVerdict:
    keep: bool
    unmatched_fraction: float
    pitch_mismatch_fraction: float

    def to_dict(self) -> dict:
        return {"keep": self.keep,
                "unmatched_fraction": self.unmatched_fraction,
                "pitch_mismatch_fraction": self.pitch_mismatch_fraction}

    def summary(self) -> str:
        return (f"keep={str(self.keep).lower()} "
                f"unmatched={self.unmatched_fraction:.3f} "
                f"pitch_mismatch={self.pitch_mismatch_fraction:.3f}")


def normalized_onsets(seq: NoteSequence) -> np.ndarray:
    onsets = seq.onsets
    extent = onsets.max() - onsets.min()
    if extent <= 0:
        extent = 1.0
    return (onsets - onsets.min()) / extent


def match_costs(a: NoteSequence, b: NoteSequence,
                params: AlignParams = AlignParams()) -> np.ndarray:
    """Full (len(a), len(b)) matrix of pairwise match costs."""
    ta = normalized_onsets(a)
    tb = normalized_onsets(b)
    cost = params.alpha * np.abs(ta[:, None] - tb[None, :])
    cost += params.beta * (a.pitches[:, None] != b.pitches[None, :])
    return cost


def align(a: NoteSequence, b: NoteSequence,
          params: AlignParams = AlignParams()) -> Alignment:
    """
    Align two note sequences.

    Parameters
    ----------
    a, b : NoteSequence
        Sequences to align (e.g. score and performance).
    params : AlignParams, optional
        Onset weight, pitch-mismatch weight and per-note gap penalty.

    Returns
    -------
    Alignment
        Minimum-cost monotonic matching.  Ties prefer a match, then skipping
        a note of `a`.

    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot align an empty sequence")
    n, m = len(a), len(b)
    cost = match_costs(a, b, params)
    g = params.gap
    steps = np.arange(m + 1) * g
    prev = steps.copy()
    trace = np.empty((n + 1, m + 1), dtype=np.int8)
    trace[0, :] = _LEFT
    trace[:, 0] = _UP
    for i in range(1, n + 1):
        diag = prev[:-1] + cost[i - 1]
        up = prev[1:] + g
        best = np.minimum(diag, up)
        choice = np.where(diag <= up, _DIAG, _UP).astype(np.int8)
        row = np.empty(m + 1)
        row[0] = i * g
        row[1:] = best
        # left moves: row[j] = min_k<=j (row[k] + (j - k) g), one prefix-min
        shifted = row - steps
        running = np.minimum.accumulate(shifted)
        from_left = running < shifted
        from_left[0] = False
        row = np.where(from_left, running + steps, row)
        choice = np.where(from_left[1:], _LEFT, choice)
        trace[i, 1:] = choice
        prev = row
    pairs = []
    unmatched_a = []
    unmatched_b = []
    i, j = n, m
    while i > 0 or j > 0:
        move = trace[i, j]
        if i > 0 and j > 0 and move == _DIAG:
            pairs.append((i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and (move == _UP or j == 0):
            unmatched_a.append(i - 1)
            i -= 1
        else:
            unmatched_b.append(j - 1)
            j -= 1
    pairs = np.array(pairs[::-1], dtype=int).reshape(-1, 2)
    mismatch = int((a.pitches[pairs[:, 0]] != b.pitches[pairs[:, 1]]).sum())
    return Alignment(pairs, sorted(unmatched_a), sorted(unmatched_b),
                     mismatch)


def alignment_cost(al: Alignment, a: NoteSequence, b: NoteSequence,
                   params: AlignParams = AlignParams()) -> float:
    """Objective value of an alignment under `params`."""
    cost = match_costs(a, b, params)
    matched = cost[al.pairs[:, 0], al.pairs[:, 1]].sum()
    gaps = len(al.unmatched_a) + len(al.unmatched_b)
    return float(matched + params.gap * gaps)


def quality_check(al: Alignment, n_a: int, n_b: int,
                  unmatched_max: float = UNMATCHED_MAX,
                  pitch_mismatch_max: float = PITCH_MISMATCH_MAX
                  ) -> QcVerdict:
    """
    Decide whether an aligned pair is clean enough to keep.

    A pair is discarded when more than `unmatched_max` of the notes on either
    side are unmatched, or more than `pitch_mismatch_max` of the matched
    pairs disagree in pitch.  Both limits are inclusive.
    """
    if al.n_a != n_a or al.n_b != n_b:
        raise ValueError(f"alignment covers {al.n_a}x{al.n_b} notes, "
                         f"expected {n_a}x{n_b}")
    if al.n_pairs == 0:
        return QcVerdict(False, 1.0, 1.0)
    unmatched = max(len(al.unmatched_a) / n_a, len(al.unmatched_b) / n_b)
    mismatch = al.pitch_mismatch_count / al.n_pairs
    # tolerance absorbs representation error in e.g. 6/100 vs 0.06
    keep = (unmatched <= unmatched_max + 1e-12
            and mismatch <= pitch_mismatch_max + 1e-12)
    return QcVerdict(bool(keep), float(unmatched), float(mismatch))


def match_percent(al: Alignment, n_rendition: int) -> float:
    if n_rendition <= 0:
        raise ValueError("rendition has no notes")
    return 100.0 * al.n_pairs / n_rendition


# sidecar text format ---------------------------------------------------------

def format_alignment(al: Alignment, a: NoteSequence, b: NoteSequence) -> str:
    """
    Render an alignment as text: one ``idx_a idx_b pitch_a pitch_b`` line per
    pair, then ``# unmatched_a:`` and ``# unmatched_b:`` footer lines.
    """
    pa, pb = a.pitches, b.pitches
    lines = [f"{i} {j} {pa[i]} {pb[j]}" for i, j in al.pairs]
    lines.append("# unmatched_a: " + " ".join(map(str, al.unmatched_a)))
    lines.append("# unmatched_b: " + " ".join(map(str, al.unmatched_b)))
    return "\n".join(lines) + "\n"


def parse_alignment(text: str) -> Alignment:
    pairs = []
    mismatches = 0
    unmatched = {"a": (), "b": ()}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, rest = line[1:].partition(":")
            side = key.strip().removeprefix("unmatched_")
            if side not in unmatched:
                raise ValueError(f"unknown footer line: {line!r}")
            unmatched[side] = tuple(int(x) for x in rest.split())
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ValueError(f"malformed alignment line: {line!r}")
        i, j, p, q = map(int, fields)
        pairs.append((i, j))
        mismatches += p != q
    return Alignment(np.array(pairs, dtype=int).reshape(-1, 2),
                     unmatched["a"], unmatched["b"], mismatches)
