"""
Standard MIDI File reading and writing.

Files are flattened into a :class:`NoteSequence`: every track and channel is
merged, controller events (including the sustain pedal) are dropped, and tick
times are converted to seconds with the full tempo map.

"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_TEMPO = 500000  # microseconds per quarter note, i.e. 120 BPM


class MidiError(ValueError):
    """Raised for SMF content that cannot be parsed."""


@dataclass(frozen=True, order=False)
class NoteEvent:
    """A single note with absolute onset and offset times in seconds."""

    onset: float
    offset: float
    pitch: int
    velocity: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch out of range: {self.pitch}")
        if not 0 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")
        if self.offset < self.onset:
            raise ValueError(
                f"offset {self.offset} precedes onset {self.onset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


def _sort_key(note: NoteEvent):
    return (note.onset, note.pitch, -note.velocity, note.offset)


@dataclass(frozen=True)
class NoteSequence:
    """
    Flat, sorted list of notes.

    Notes are kept sorted by onset, then pitch, then descending velocity
    (offset breaks any remaining tie), regardless of the order they are
    passed in.

    """

    notes: tuple[NoteEvent, ...] = ()
    source_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "notes",
                           tuple(sorted(self.notes, key=_sort_key)))

    def __len__(self):
        return len(self.notes)

    def __iter__(self):
        return iter(self.notes)

    def __getitem__(self, idx):
        return self.notes[idx]

    @classmethod
    def from_arrays(cls, onsets, offsets, pitches, velocities,
                    source_name: str = "") -> "NoteSequence":
        notes = [NoteEvent(float(o), float(f), int(p), int(v))
                 for o, f, p, v in zip(onsets, offsets, pitches, velocities)]
        return cls(tuple(notes), source_name)

    @property
    def onsets(self) -> np.ndarray:
        return np.array([n.onset for n in self.notes], dtype=float)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([n.offset for n in self.notes], dtype=float)

    @property
    def pitches(self) -> np.ndarray:
        return np.array([n.pitch for n in self.notes], dtype=int)

    @property
    def velocities(self) -> np.ndarray:
        return np.array([n.velocity for n in self.notes], dtype=int)

    def span(self) -> float:
        """Time from the first onset to the last offset."""
        if not self.notes:
            return 0.0
        return float(self.offsets.max() - self.onsets.min())

    def subset(self, indices) -> "NoteSequence":
        return NoteSequence(tuple(self.notes[i] for i in indices),
                            self.source_name)


# reading ---------------------------------------------------------------------

class _Reader:
    """Bounds-checked cursor over a bytes object."""

    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def remaining(self) -> int:
        return self.end - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise MidiError(f"truncated data at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        if self.pos >= self.end:
            raise MidiError(f"truncated data at byte {self.pos}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def peek(self) -> int:
        if self.pos >= self.end:
            raise MidiError(f"truncated data at byte {self.pos}")
        return self.data[self.pos]

    def varlen(self) -> int:
        value = 0
        for _ in range(4):
            b = self.byte()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise MidiError(f"variable-length quantity too long at byte {self.pos}")


def _parse_header(reader: _Reader):
    if reader.remaining() < 14 or reader.take(4) != b"MThd":
        raise MidiError("missing MThd header chunk")
    length = struct.unpack(">I", reader.take(4))[0]
    if length < 6:
        raise MidiError(f"header chunk too short ({length} bytes)")
    fmt, ntracks, division = struct.unpack(">HHH", reader.take(6))
    reader.take(length - 6)
    if fmt not in (0, 1, 2):
        raise MidiError(f"unsupported SMF format {fmt}")
    if division == 0:
        raise MidiError("division of zero ticks per quarter note")
    return fmt, ntracks, division


def _parse_track(reader: _Reader, track_idx: int):
    """
    Parse one MTrk body.

    Returns
    -------
    notes : list of tuple
        (onset_tick, offset_tick, pitch, velocity) for every resolved note.
    tempi : list of tuple
        (tick, microseconds_per_quarter) for every Set Tempo event.

    """
    tick = 0
    status = None
    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    notes = []
    tempi = []
    ended = False
    while reader.remaining() > 0:
        tick += reader.varlen()
        first = reader.peek()
        if first & 0x80:
            reader.byte()
            if first < 0xF0:
                status = first
            elif first == 0xFF:
                meta_type = reader.byte()
                data = reader.take(reader.varlen())
                if meta_type == 0x51:
                    if len(data) != 3:
                        raise MidiError("malformed Set Tempo event")
                    tempo = int.from_bytes(data, "big")
                    if tempo == 0:
                        raise MidiError("Set Tempo event of zero")
                    tempi.append((tick, tempo))
                elif meta_type == 0x2F:
                    ended = True
                    break
                continue
            elif first in (0xF0, 0xF7):
                reader.take(reader.varlen())
                status = None
                continue
            else:
                raise MidiError(
                    f"unexpected system message 0x{first:02X} in track "
                    f"{track_idx}")
        if status is None:
            raise MidiError(
                f"running status without a preceding status byte in track "
                f"{track_idx}")
        kind = status & 0xF0
        channel = status & 0x0F
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        data = reader.take(n_data)
        if any(b & 0x80 for b in data):
            raise MidiError(f"status byte inside event data in track "
                            f"{track_idx}")
        if kind == 0x90 and data[1] > 0:
            open_notes.setdefault((channel, data[0]), []).append(
                (tick, data[1]))
        elif kind == 0x80 or kind == 0x90:
            stack = open_notes.get((channel, data[0]))
            if stack:
                start, velocity = stack.pop(0)
                notes.append((start, tick, data[0], velocity))
    dangling = [(key, item) for key, stack in open_notes.items()
                for item in stack]
    if dangling:
        warnings.warn(f"track {track_idx}: {len(dangling)} note(s) without "
                      f"note-off closed at tick {tick}", stacklevel=3)
        for (_, pitch), (start, velocity) in dangling:
            notes.append((start, tick, pitch, velocity))
    if not ended:
        warnings.warn(f"track {track_idx}: missing end-of-track event",
                      stacklevel=3)
    return notes, tempi


def ticks_to_seconds(ticks, tempi, division: int) -> np.ndarray:
    """
    Convert absolute ticks to seconds over a tempo map.

    Parameters
    ----------
    ticks : array_like
        Absolute tick positions.
    tempi : list of (tick, microseconds_per_quarter)
        Tempo changes; 120 BPM applies before the first one.  When several
        changes share a tick, the last one wins.
    division : int
        Raw header division field (ticks per quarter note, or SMPTE).

    """
    ticks = np.asarray(ticks, dtype=float)
    if division & 0x8000:
        fps = 256 - (division >> 8)
        tpf = division & 0xFF
        if fps == 29:
            fps = 29.97
        if fps <= 0 or tpf == 0:
            raise MidiError("invalid SMPTE division")
        return ticks / (fps * tpf)
    change_ticks = [0]
    change_tempi = [DEFAULT_TEMPO]
    for t, tempo in sorted(tempi, key=lambda x: x[0]):
        if t == change_ticks[-1]:
            change_tempi[-1] = tempo
        else:
            change_ticks.append(t)
            change_tempi.append(tempo)
    change_ticks = np.array(change_ticks, dtype=float)
    sec_per_tick = np.array(change_tempi, dtype=float) * 1e-6 / division
    # seconds elapsed at each tempo change
    start_secs = np.concatenate(
        [[0.0], np.cumsum(np.diff(change_ticks) * sec_per_tick[:-1])])
    idx = np.searchsorted(change_ticks, ticks, side="right") - 1
    return start_secs[idx] + (ticks - change_ticks[idx]) * sec_per_tick[idx]


def parse_midi(data: bytes, source_name: str = "") -> NoteSequence:
    """
    Parse Standard MIDI File content into a :class:`NoteSequence`.

    Parameters
    ----------
    data : bytes
        Raw SMF content (type 0 or 1).
    source_name : str, optional
        Label stored on the returned sequence.

    Returns
    -------
    NoteSequence
        All notes from all tracks and channels.

    Raises
    ------
    MidiError
        If the header is malformed or a track is truncated.

    """
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise TypeError("parse_midi expects bytes")
    data = bytes(data)
    reader = _Reader(data)
    _, ntracks, division = _parse_header(reader)
    all_notes = []
    all_tempi = []
    found = 0
    while reader.remaining() >= 8 and found < ntracks:
        chunk_type = reader.take(4)
        length = struct.unpack(">I", reader.take(4))[0]
        if chunk_type != b"MTrk":
            reader.take(min(length, reader.remaining()))
            continue
        if length > reader.remaining():
            raise MidiError(f"track {found} truncated: declares {length} "
                            f"bytes, {reader.remaining()} available")
        track = _Reader(data, reader.pos, reader.pos + length)
        notes, tempi = _parse_track(track, found)
        all_notes.extend(notes)
        all_tempi.extend(tempi)
        reader.pos += length
        found += 1
    if found < ntracks:
        raise MidiError(f"header declares {ntracks} tracks, found {found}")
    if not all_notes:
        return NoteSequence((), source_name)
    arr = np.array(all_notes, dtype=float)
    onsets = ticks_to_seconds(arr[:, 0], all_tempi, division)
    offsets = ticks_to_seconds(arr[:, 1], all_tempi, division)
    return NoteSequence.from_arrays(onsets, offsets, arr[:, 2].astype(int),
                                    arr[:, 3].astype(int), source_name)


def read_midi(path) -> NoteSequence:
    path = Path(path)
    return parse_midi(path.read_bytes(), source_name=path.name)


# writing ---------------------------------------------------------------------

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def _assign_channels(starts, ends, pitches):
    """
    Spread notes over channels so that same-pitch notes never overlap on one
    channel; FIFO note-off matching then restores every note exactly.
    """
    channels = np.zeros(len(starts), dtype=int)
    # per pitch: last (start, end) tick on each channel
    busy: dict[int, list[tuple[int, int] | None]] = {}
    for i in np.lexsort((ends, starts)):
        slots = busy.setdefault(int(pitches[i]), [None] * 16)
        chosen = None
        for ch, last in enumerate(slots):
            if last is None or last[1] < starts[i] or (
                    last[1] == starts[i] and last[0] < last[1]):
                chosen = ch
                break
        if chosen is None:
            # 16 concurrent unisons: fall back to the least recently ended
            chosen = min(range(16), key=lambda ch: slots[ch][1])
        slots[chosen] = (int(starts[i]), int(ends[i]))
        channels[i] = chosen
    return channels


def write_midi(seq: NoteSequence, tpqn: int = 480) -> bytes:
    """
    Serialize a :class:`NoteSequence` as a type-0 SMF at a fixed 120 BPM.

    Times are rounded to the nearest tick, so a roundtrip through
    :func:`parse_midi` is exact up to half a tick.  Velocity 0 cannot be
    expressed as a note-on and is written as 1.

    """
    if tpqn < 24 or tpqn > 0x7FFF:
        raise ValueError(f"tpqn must be in [24, 32767], got {tpqn}")
    sec_per_tick = DEFAULT_TEMPO * 1e-6 / tpqn
    track = bytearray()
    if len(seq):
        starts = np.rint(seq.onsets / sec_per_tick).astype(np.int64)
        ends = np.rint(seq.offsets / sec_per_tick).astype(np.int64)
        if starts.min() < 0:
            raise ValueError("negative onset time")
        pitches = seq.pitches
        velocities = seq.velocities
        if (velocities == 0).any():
            warnings.warn("velocity 0 notes written with velocity 1",
                          stacklevel=2)
            velocities = np.maximum(velocities, 1)
        channels = _assign_channels(starts, ends, pitches)
        events = []
        for i in range(len(seq)):
            # off events sort before ons at the same tick, except the off of
            # a zero-length note, which must follow its own on
            off_rank = 2 if ends[i] == starts[i] else 0
            events.append((int(starts[i]), 1, i,
                           bytes([0x90 | channels[i], pitches[i],
                                  velocities[i]])))
            events.append((int(ends[i]), off_rank, i,
                           bytes([0x80 | channels[i], pitches[i], 0])))
        events.sort(key=lambda e: e[:3])
        track += b"\x00\xFF\x51\x03" + DEFAULT_TEMPO.to_bytes(3, "big")
        last = 0
        for tick, _, _, msg in events:
            track += _varlen(tick - last) + msg
            last = tick
    track += b"\x00\xFF\x2F\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, tpqn)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def save_midi(seq: NoteSequence, path, tpqn: int = 480) -> None:
    Path(path).write_bytes(write_midi(seq, tpqn))
