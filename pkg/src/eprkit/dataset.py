"""
Paired score/performance dataset construction.

Input layout::

    <root>/<composition_id>/score.mid
    <root>/<composition_id>/perf_*.mid

Composition ids may be nested paths (``Bach/Fugue/bwv_846``); the composer is
the first path component, or the text before the first underscore for flat
ids.  Every performance is aligned to its score and kept only if it passes
quality control.  Compositions are split into train/val/test, and a z-score
scaler is fitted on the training pairs.

"""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import (PITCH_MISMATCH_MAX, UNMATCHED_MAX, AlignParams,
                        Alignment, align, format_alignment, parse_alignment,
                        quality_check)
from .midi_io import MidiError, NoteSequence, read_midi
from .representation import NoteTupleSeq, ScalerStats, encode, fit_scaler

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


def scale_score_to_performance(score: NoteSequence,
                               perf: NoteSequence) -> NoteSequence:
    """
    Stretch the score uniformly so its span equals the performance's.

    All onsets and offsets are multiplied by ``span(perf) / span(score)``,
    where span runs from the first onset to the last offset.
    """
    if len(score) == 0 or len(perf) == 0:
        raise ValueError("empty sequence")
    s_span = score.span()
    if s_span <= 0:
        raise ValueError("score has zero span")
    return stretch(score, perf.span() / s_span)


def stretch(seq: NoteSequence, factor: float) -> NoteSequence:
    return NoteSequence.from_arrays(seq.onsets * factor, seq.offsets * factor,
                                    seq.pitches, seq.velocities,
                                    seq.source_name)


def composer_of(composition_id: str) -> str:
    parts = composition_id.split("/")
    if len(parts) > 1:
        return parts[0]
    return composition_id.split("_")[0]


def discover(root) -> list[tuple[str, Path, list[Path]]]:
    """Find ``(composition_id, score_path, perf_paths)`` under `root`."""
    root = Path(root)
    found = []
    for score in sorted(root.rglob("score.mid")):
        comp_id = score.parent.relative_to(root).as_posix()
        perfs = sorted(score.parent.glob("perf_*.mid"))
        found.append((comp_id, score, perfs))
    return found


def split_compositions(ids, ratios, seed: int) -> dict[str, str]:
    """
    Assign composition ids to splits.

    Ids are sorted, shuffled with `seed`, and cut so that val and test get
    ``floor(ratio * n)`` compositions each; the remainder goes to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or \
            abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers "
                         f"summing to 1, got {ratios}")
    ids = sorted(ids)
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    n_train = n - n_val - n_test
    out = {}
    for rank, k in enumerate(order):
        if rank < n_train:
            out[ids[k]] = "train"
        elif rank < n_train + n_val:
            out[ids[k]] = "val"
        else:
            out[ids[k]] = "test"
    return out


def parse_ratios(text: str) -> tuple[float, float, float]:
    """Parse ``"8:1:1"`` (or ``"0.8,0.1,0.1"``) into normalized ratios."""
    parts = [float(x) for x in text.replace(",", ":").split(":")]
    if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ValueError(f"bad ratios {text!r}")
    total = sum(parts)
    return tuple(p / total for p in parts)


@dataclass
class PerformanceEntry:
    performer_id: str
    path: str
    alignment_path: str | None
    scale: float
    qc: dict
    n_notes: int
    duration: float
    alignment: Alignment | None = field(default=None, repr=False,
                                        compare=False)

    def to_dict(self) -> dict:
        return {"performer_id": self.performer_id, "path": self.path,
                "alignment": self.alignment_path, "scale": self.scale,
                "qc": self.qc, "n_notes": self.n_notes,
                "duration": self.duration}


@dataclass
class CompositionGroup:
    composition_id: str
    composer: str
    score_path: str
    n_score_notes: int
    split: str
    performances: list[PerformanceEntry]

    def to_dict(self) -> dict:
        return {"id": self.composition_id, "composer": self.composer,
                "score": self.score_path, "n_score_notes": self.n_score_notes,
                "split": self.split,
                "performances": [p.to_dict() for p in self.performances]}


@dataclass
class DatasetManifest:
    root: str
    groups: list[CompositionGroup]
    scaler: ScalerStats
    counts: dict
    settings: dict
    discarded: list[dict] = field(default_factory=list)
    unreadable: list[dict] = field(default_factory=list)
    base_dir: Path | None = field(default=None, repr=False, compare=False)

    @property
    def splits(self) -> dict[str, str]:
        return {g.composition_id: g.split for g in self.groups}

    def groups_in(self, split: str) -> list[CompositionGroup]:
        return [g for g in self.groups if g.split == split]

    def root_path(self) -> Path:
        root = Path(self.root)
        if not root.is_absolute() and self.base_dir is not None:
            root = self.base_dir / root
        return root

    def resolve(self, rel: str) -> Path:
        """Path of a file stored relative to the corpus root."""
        return self.root_path() / rel

    def resolve_sidecar(self, rel: str) -> Path:
        base = self.base_dir if self.base_dir is not None else Path(".")
        return base / rel

    def to_dict(self) -> dict:
        return {"version": MANIFEST_VERSION, "root": self.root,
                "settings": self.settings,
                "compositions": [g.to_dict() for g in self.groups],
                "splits": self.splits,
                "scaler": self.scaler.to_dict(), "counts": self.counts,
                "discarded": self.discarded, "unreadable": self.unreadable}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text(encoding="utf-8"))
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version "
                             f"{d.get('version')}")
        groups = []
        for g in d["compositions"]:
            perfs = [PerformanceEntry(p["performer_id"], p["path"],
                                      p["alignment"], p["scale"], p["qc"],
                                      p["n_notes"], p["duration"])
                     for p in g["performances"]]
            groups.append(CompositionGroup(g["id"], g["composer"], g["score"],
                                           g["n_score_notes"], g["split"],
                                           perfs))
        return cls(d["root"], groups, ScalerStats.from_dict(d["scaler"]),
                   d["counts"], d["settings"], d["discarded"],
                   d["unreadable"], base_dir=path.parent)

    def validate(self) -> None:
        """Check split integrity and that stored counts match a recount."""
        for g in self.groups:
            if g.split not in SPLITS:
                raise ValueError(f"{g.composition_id}: bad split {g.split!r}")
            if not g.performances:
                raise ValueError(f"{g.composition_id}: no performances")
            if not all(p.qc["keep"] for p in g.performances):
                raise ValueError(f"{g.composition_id}: discarded performance "
                                 "retained")
        ids = [g.composition_id for g in self.groups]
        if len(ids) != len(set(ids)):
            raise ValueError("composition listed twice")
        if compute_counts(self.groups) != self.counts:
            raise ValueError("stored counts do not match the groups")

    def load_alignment(self, perf: PerformanceEntry) -> Alignment:
        if perf.alignment is not None:
            return perf.alignment
        if perf.alignment_path is None:
            raise ValueError(f"{perf.path}: no alignment stored")
        text = self.resolve_sidecar(perf.alignment_path).read_text()
        return parse_alignment(text)


def compute_counts(groups) -> dict:
    counts = {}
    for split in SPLITS + ("total",):
        sel = [g for g in groups if split == "total" or g.split == split]
        counts[split] = {
            "composers": len({g.composer for g in sel}),
            "compositions": len(sel),
            "score_notes": sum(g.n_score_notes for g in sel),
            "performance_hours": sum(p.duration for g in sel
                                     for p in g.performances) / 3600.0,
        }
    return counts


def dataset_stats(manifest: DatasetManifest) -> list[dict]:
    """Rows of per-split statistics followed by a Total row."""
    counts = compute_counts(manifest.groups)
    rows = []
    for split in SPLITS + ("total",):
        row = {"split": split.capitalize()}
        row.update(counts[split])
        rows.append(row)
    return rows


def format_stats(rows) -> str:
    header = ["Split", "Composers", "Compositions", "Score Notes",
              "Performance Duration"]
    lines = [header]
    for r in rows:
        lines.append([r["split"], str(r["composers"]),
                      str(r["compositions"]), str(r["score_notes"]),
                      f"{r['performance_hours']:.4f}h"])
    widths = [max(len(line[k]) for line in lines) for k in range(5)]
    return "\n".join("  ".join(c.ljust(w) if k == 0 else c.rjust(w)
                               for k, (c, w) in enumerate(zip(line, widths)))
                     for line in lines)


def _process_performance(score: NoteSequence, perf_path: Path,
                         params: AlignParams, unmatched_max: float,
                         pitch_mismatch_max: float):
    try:
        perf = read_midi(perf_path)
    except (OSError, MidiError) as exc:
        return None, None, None, str(exc)
    if len(perf) == 0:
        return perf, None, None, "no notes"
    scale = perf.span() / score.span()
    scaled = stretch(score, scale)
    al = align(scaled, perf, params)
    verdict = quality_check(al, len(scaled), len(perf), unmatched_max,
                            pitch_mismatch_max)
    return perf, al, (verdict, scale), None


def build_dataset(pairs, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                  root=None, out_dir=None,
                  unmatched_max: float = UNMATCHED_MAX,
                  pitch_mismatch_max: float = PITCH_MISMATCH_MAX,
                  params: AlignParams = AlignParams(),
                  threads: int | None = None) -> DatasetManifest:
    """
    Align, filter and split a paired corpus.

    Parameters
    ----------
    pairs : list of (score_path, list of performance paths)
    ratios : (train, val, test)
        Target split proportions by composition count.
    seed : int
        Split shuffle seed.
    root : path, optional
        Corpus root; composition ids are score directories relative to it.
        Defaults to the common parent of all score directories.
    out_dir : path, optional
        Where alignment sidecars (``alignments/<id>/<perf>.align.txt``) are
        written and relative to which the manifest stores the root.  Without
        it, alignments stay in memory only.
    unmatched_max, pitch_mismatch_max : float
        Quality-control limits (inclusive).
    params : AlignParams
    threads : int, optional
        Worker threads for the per-performance alignments.

    Returns
    -------
    DatasetManifest

    Raises
    ------
    ValueError
        If no composition keeps a performance.

    """
    split_compositions([], ratios, seed)  # validates ratios
    pairs = [(Path(s), [Path(p) for p in perfs]) for s, perfs in pairs]
    if root is None:
        parents = [str(s.parent.resolve()) for s, _ in pairs]
        root = Path(os.path.commonpath(parents)) if parents else Path(".")
        if len(pairs) == 1:
            root = root.parent
    root = Path(root).resolve()
    out_dir = Path(out_dir) if out_dir is not None else None

    def rel(p: Path) -> str:
        return p.resolve().relative_to(root).as_posix()

    unreadable = []
    discarded = []
    scores = {}
    jobs = []
    for score_path, perf_paths in pairs:
        comp_id = score_path.resolve().parent.relative_to(root).as_posix()
        try:
            score = read_midi(score_path)
        except (OSError, MidiError) as exc:
            warnings.warn(f"unreadable score {score_path}: {exc}",
                          stacklevel=2)
            unreadable.append({"path": rel(score_path), "error": str(exc)})
            continue
        if len(score) == 0 or score.span() <= 0:
            warnings.warn(f"score {score_path} has no notes", stacklevel=2)
            unreadable.append({"path": rel(score_path), "error": "no notes"})
            continue
        scores[comp_id] = (score_path, score)
        for p in sorted(perf_paths):
            jobs.append((comp_id, p))

    def run(job):
        comp_id, p = job
        return _process_performance(scores[comp_id][1], p, params,
                                    unmatched_max, pitch_mismatch_max)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(run, jobs))

    kept: dict[str, list[PerformanceEntry]] = {c: [] for c in scores}
    for (comp_id, p), (perf, al, qc, error) in zip(jobs, results):
        if error is not None:
            warnings.warn(f"skipping {p}: {error}", stacklevel=2)
            unreadable.append({"path": rel(p), "error": error})
            continue
        verdict, scale = qc
        if not verdict.keep:
            logger.info("discarding %s (%s)", p, verdict.summary())
            discarded.append({"composition": comp_id, "path": rel(p),
                              "qc": verdict.to_dict()})
            continue
        align_rel = None
        if out_dir is not None:
            align_rel = f"alignments/{comp_id}/{p.stem}.align.txt"
            side = out_dir / align_rel
            side.parent.mkdir(parents=True, exist_ok=True)
            side.write_text(format_alignment(
                al, stretch(scores[comp_id][1], scale), perf))
        kept[comp_id].append(PerformanceEntry(
            p.stem, rel(p), align_rel, float(scale), verdict.to_dict(),
            len(perf), perf.span(), alignment=al))

    survivors = sorted(c for c, perfs in kept.items() if perfs)
    if not survivors:
        raise ValueError("no composition has a performance that passes "
                         "quality control")
    splits = split_compositions(survivors, ratios, seed)
    groups = [CompositionGroup(c, composer_of(c), rel(scores[c][0]),
                               len(scores[c][1]), splits[c], kept[c])
              for c in survivors]
    settings = {"ratios": list(ratios), "seed": seed,
                "unmatched_max": unmatched_max,
                "pitch_mismatch_max": pitch_mismatch_max,
                "align": {"alpha": params.alpha, "beta": params.beta,
                          "gap": params.gap}}
    if out_dir is not None:
        stored_root = Path(os.path.relpath(root, out_dir.resolve())).as_posix()
    else:
        stored_root = root.as_posix()
    manifest = DatasetManifest(stored_root, groups, ScalerStats.identity(),
                               compute_counts(groups), settings, discarded,
                               unreadable, base_dir=out_dir)
    train_tuples = []
    for pair in load_pairs(manifest, "train"):
        train_tuples.extend([pair.score, pair.performance])
    if train_tuples:
        manifest.scaler = fit_scaler(train_tuples)
    else:
        warnings.warn("empty training split; scaler left at identity",
                      stacklevel=2)
    return manifest


def build_from_root(root, out_dir=None, **kwargs) -> DatasetManifest:
    pairs = [(score, perfs) for _, score, perfs in discover(root)]
    return build_dataset(pairs, root=root, out_dir=out_dir, **kwargs)


@dataclass(frozen=True)
class TrainingPair:
    """Note-aligned score and performance tuples (unscaled)."""

    composition_id: str
    performer_id: str
    score: NoteTupleSeq
    performance: NoteTupleSeq
    c: int


def load_pairs(manifest: DatasetManifest, split: str) -> list[TrainingPair]:
    """
    Matched score/performance tuples for every retained performance.

    The score is stretched to the performance's span; unmatched notes are
    dropped and IOIs recomputed over the matched notes on both sides.
    """
    out = []
    for g in manifest.groups_in(split):
        score = read_midi(manifest.resolve(g.score_path))
        for perf_entry in g.performances:
            perf = read_midi(manifest.resolve(perf_entry.path))
            al = manifest.load_alignment(perf_entry)
            scaled = stretch(score, perf_entry.scale)
            out.append(TrainingPair(
                g.composition_id, perf_entry.performer_id,
                encode(scaled.subset(al.pairs[:, 0])),
                encode(perf.subset(al.pairs[:, 1])),
                len(g.performances)))
    return out
