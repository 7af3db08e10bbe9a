"""
Multi-reference evaluation of rendered performances.

A rendition is aligned to every human reference of its composition; matched
notes are re-encoded as unscaled note tuples and compared feature by
feature.  Per composition the lowest MSE and the highest Pearson correlation
over references are kept (independently), then MSEs are averaged weighted by
the matched note count of the MSE-best reference and correlations are
averaged over compositions.

"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignParams, align, match_percent
from .midi_io import NoteSequence
from .representation import NoteTupleSeq, encode

GEM_FEATURES = ("ioi", "duration", "velocity")
_SHORT = {"ioi": "ioi", "duration": "dur", "velocity": "vel"}


@dataclass(frozen=True)
class EvalPair:
    """Matched notes of one rendition/reference pair, in original units."""

    rendition: NoteTupleSeq | None
    reference: NoteTupleSeq | None
    n_matched: int
    match_percent: float

    @property
    def empty(self) -> bool:
        return self.n_matched == 0

    @classmethod
    def from_tuples(cls, rendition, reference) -> "EvalPair":
        """Pair already note-aligned tuples (no alignment step)."""
        if not isinstance(rendition, NoteTupleSeq):
            rendition = NoteTupleSeq(np.asarray(rendition, dtype=float))
        if not isinstance(reference, NoteTupleSeq):
            reference = NoteTupleSeq(np.asarray(reference, dtype=float))
        if len(rendition) != len(reference):
            raise ValueError("rendition and reference lengths differ")
        if rendition.scaled or reference.scaled:
            raise ValueError("evaluation uses unscaled tuples")
        return cls(rendition, reference, len(rendition), 100.0)


def mse(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.mean((x - y) ** 2))


def pearson(x, y) -> float:
    """Pearson correlation; 0 when either side is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    r = float(dx @ dy) / (sx * sy)
    return min(1.0, max(-1.0, r))


def gem_preprocess(rendition: NoteSequence, references,
                   params: AlignParams = AlignParams()) -> list[EvalPair]:
    """
    Align a rendition to each reference and keep matched notes only.

    IOIs are recomputed over the matched subsequence on both sides, so each
    IOI spans the same pair of matched notes in rendition and reference.
    """
    references = list(references)
    if not references:
        raise ValueError("no references given")
    if len(rendition) == 0:
        raise ValueError("empty rendition")
    out = []
    for k, ref in enumerate(references):
        if len(ref) == 0:
            warnings.warn(f"reference {k} is empty", stacklevel=2)
            out.append(EvalPair(None, None, 0, 0.0))
            continue
        al = align(rendition, ref, params)
        if al.n_pairs == 0:
            warnings.warn(f"reference {k}: no notes matched", stacklevel=2)
            out.append(EvalPair(None, None, 0, 0.0))
            continue
        r = encode(rendition.subset(al.pairs[:, 0]))
        h = encode(ref.subset(al.pairs[:, 1]))
        out.append(EvalPair(r, h, al.n_pairs,
                            match_percent(al, len(rendition))))
    return out


@dataclass(frozen=True)
class CompositionResult:
    """Best-of-references values of one composition for one feature."""

    l_best: float
    n_best: int
    p_best: float
    l_index: int
    p_index: int


def best_of_references(pairs, feature: str) -> CompositionResult:
    l_best, n_best, p_best = math.inf, 0, -1.0
    l_index = p_index = -1
    for k, pair in enumerate(pairs):
        if pair.empty:
            continue
        e = pair.rendition.column(feature)
        h = pair.reference.column(feature)
        loss = mse(e, h)
        if loss < l_best:
            l_best, n_best, l_index = loss, len(h), k
        r = pearson(e, h)
        if r > p_best:
            p_best, p_index = r, k
    if l_index < 0:
        raise ValueError("composition has no non-empty reference pair")
    if p_index < 0:
        # every correlation was exactly -1
        p_index = l_index
    return CompositionResult(l_best, n_best, p_best, l_index, p_index)


def feature_metric(comps_e, feature: str) -> tuple[float, float]:
    """
    Note-weighted best MSE and mean best Pearson for one feature.

    Parameters
    ----------
    comps_e : list of list of EvalPair
        One inner list per composition, one EvalPair per reference.
    feature : {'ioi', 'duration', 'velocity'}

    Returns
    -------
    l : float
        Sum of best MSE times its note count, over the summed counts.
    p : float
        Mean over compositions of the best Pearson correlation.

    """
    if feature not in GEM_FEATURES + ("pitch",):
        raise ValueError(f"unknown feature {feature!r}")
    comps_e = list(comps_e)
    if not comps_e:
        raise ValueError("no compositions")
    l_sum = 0.0
    n_notes = 0
    p_sum = 0.0
    for pairs in comps_e:
        res = best_of_references(pairs, feature)
        l_sum += res.l_best * res.n_best
        n_notes += res.n_best
        p_sum += res.p_best
    return l_sum / n_notes, p_sum / len(comps_e)


@dataclass
class GemReport:
    l: dict[str, float]
    p: dict[str, float]
    match_percent: float
    n_compositions: int
    compositions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"l": dict(self.l), "p": dict(self.p),
                "match_percent": self.match_percent,
                "n_compositions": self.n_compositions,
                "compositions": self.compositions}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "Model") -> str:
        """Aligned text table with one row, columns l_*, p_*, Match %."""
        header = ["Model"] + [f"l_{_SHORT[f]}" for f in GEM_FEATURES] + \
            [f"p_{_SHORT[f]}" for f in GEM_FEATURES] + ["Match %"]
        row = [label] + [f"{self.l[f]:.4f}" for f in GEM_FEATURES] + \
            [f"{self.p[f]:.4f}" for f in GEM_FEATURES] + \
            [f"{self.match_percent:.2f}"]
        widths = [max(len(h), len(c)) for h, c in zip(header, row)]
        fmt = lambda cells: "  ".join(
            c.ljust(w) if k == 0 else c.rjust(w)
            for k, (c, w) in enumerate(zip(cells, widths)))
        return fmt(header) + "\n" + fmt(row)


def report_from_pairs(comps: dict) -> GemReport:
    """Build a report from {composition: [EvalPair, ...]}."""
    keep = {}
    for name, pairs in comps.items():
        if all(p.empty for p in pairs):
            warnings.warn(f"{name}: no reference matched any note; "
                          "composition skipped", stacklevel=2)
            continue
        keep[name] = pairs
    if not keep:
        raise ValueError("no composition could be evaluated")
    names = sorted(keep)
    l, p = {}, {}
    details = {name: {} for name in names}
    for feature in GEM_FEATURES:
        l[feature], p[feature] = feature_metric([keep[n] for n in names],
                                                feature)
        for name in names:
            res = best_of_references(keep[name], feature)
            details[name][feature] = {
                "l_best": res.l_best, "n_best": res.n_best,
                "p_best": res.p_best, "l_reference": res.l_index,
                "p_reference": res.p_index}
    matches = []
    for name in names:
        per_feature = [keep[name][details[name][f]["l_reference"]]
                       .match_percent for f in GEM_FEATURES]
        details[name]["match_percent"] = float(np.mean(per_feature))
        matches.append(details[name]["match_percent"])
    return GemReport(l, p, float(np.mean(matches)), len(names), details)


def gem_report(renditions: dict, references: dict,
               params: AlignParams = AlignParams(),
               threads: int | None = None) -> GemReport:
    """
    Evaluate renditions against per-composition human references.

    Parameters
    ----------
    renditions : dict
        composition id -> NoteSequence.
    references : dict
        composition id -> list of NoteSequence.
    params : AlignParams, optional
    threads : int, optional
        Worker threads for the per-composition alignments.

    """
    missing = set(renditions) - set(references)
    if missing:
        warnings.warn(f"renditions without references skipped: "
                      f"{sorted(missing)}", stacklevel=2)
    names = sorted(set(renditions) & set(references))
    if not names:
        raise ValueError("no composition has both a rendition and "
                         "references")
    jobs = [(renditions[n], references[n]) for n in names]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda job: gem_preprocess(*job, params),
                                jobs))
    return report_from_pairs(dict(zip(names, results)))


def human_surrogate_eval(references: dict,
                         params: AlignParams = AlignParams(),
                         threads: int | None = None) -> GemReport:
    """
    Score human performances against each other: the first performance of
    each composition plays the rendition, the others are the references.
    Compositions with fewer than two performances are left out.
    """
    renditions, refs = {}, {}
    for name, perfs in references.items():
        perfs = list(perfs)
        if len(perfs) < 2:
            continue
        renditions[name] = perfs[0]
        refs[name] = perfs[1:]
    if not renditions:
        raise ValueError("no composition has at least two performances")
    return gem_report(renditions, refs, params, threads)
