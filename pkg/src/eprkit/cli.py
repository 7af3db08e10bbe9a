"""
Command-line entry point.

Subcommands: ``convert``, ``align``, ``dataset build``, ``gem eval``,
``train``, ``render`` and ``velocity-curve``.  Every run echoes its resolved
configuration to stderr before doing any work.

Exit codes: 0 success, 1 domain rejection (QC discard, validation failure),
2 usage error, 3 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from pathlib import Path

from . import __version__
from .alignment import (PITCH_MISMATCH_MAX, UNMATCHED_MAX, AlignParams,
                        align, format_alignment, quality_check)
from .midi_io import MidiError, NoteSequence, read_midi, save_midi
from .representation import FEATURES, NoteTupleSeq, decode, encode

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("eprkit")


class UsageError(Exception):
    pass


# convert ---------------------------------------------------------------------

def write_tuple_csv(tuples: NoteTupleSeq, fh) -> None:
    writer = csv.writer(fh, lineterminator="\r\n")
    writer.writerow(FEATURES)
    for ioi, dur, pitch, vel in tuples.values:
        writer.writerow([repr(float(ioi)), repr(float(dur)), int(round(pitch)),
                         int(round(vel))])


def read_tuple_csv(fh) -> NoteTupleSeq:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != list(FEATURES):
        raise ValueError(f"CSV header must be {','.join(FEATURES)}")
    rows = [[float(x) for x in row] for row in reader if row]
    if not rows:
        raise ValueError("CSV holds no notes")
    return NoteTupleSeq(rows)


def cmd_convert(args) -> int:
    src, dst = Path(args.input), Path(args.output)
    if src.suffix.lower() in (".mid", ".midi"):
        tuples = encode(read_midi(src))
        with open(dst, "w", newline="", encoding="utf-8") as fh:
            write_tuple_csv(tuples, fh)
    elif src.suffix.lower() == ".csv":
        with open(src, newline="", encoding="utf-8") as fh:
            tuples = read_tuple_csv(fh)
        save_midi(decode(tuples, 0.0, src.stem), dst, args.tpqn)
    else:
        raise UsageError(f"cannot infer conversion direction from {src}")
    return EXIT_OK


# align -----------------------------------------------------------------------

def _align_params(args) -> AlignParams:
    return AlignParams(args.alpha, args.beta, args.gap)


def cmd_align(args) -> int:
    a, b = read_midi(args.a), read_midi(args.b)
    al = align(a, b, _align_params(args))
    text = format_alignment(al, a, b)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    verdict = quality_check(al, len(a), len(b), args.unmatched_max,
                            args.pitch_mismatch_max)
    print(verdict.summary())
    return EXIT_OK if verdict.keep else EXIT_REJECT


# dataset ---------------------------------------------------------------------

def cmd_dataset_build(args) -> int:
    from .dataset import build_from_root, dataset_stats, format_stats, \
        parse_ratios

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_from_root(
        args.root, out_dir=out, ratios=parse_ratios(args.ratios),
        seed=args.seed, unmatched_max=args.unmatched_max,
        pitch_mismatch_max=args.pitch_mismatch_max,
        params=_align_params(args), threads=args.threads)
    manifest.save(out / "manifest.json")
    print(format_stats(dataset_stats(manifest)))
    print(f"retained {sum(len(g.performances) for g in manifest.groups)} "
          f"performances, discarded {len(manifest.discarded)}, "
          f"unreadable {len(manifest.unreadable)}")
    return EXIT_OK


# gem -------------------------------------------------------------------------

def load_reference_dir(root) -> dict[str, list[NoteSequence]]:
    """Composition id (directory relative to `root`) -> performances.

    ``perf_*.mid`` files are used when present, otherwise every ``.mid``
    except ``score.mid``; files are taken in name order.
    """
    root = Path(root)
    out = {}
    dirs = sorted({p.parent for p in root.rglob("*.mid")})
    for d in dirs:
        files = sorted(d.glob("perf_*.mid")) or sorted(
            p for p in d.glob("*.mid") if p.name != "score.mid")
        if files:
            out[d.relative_to(root).as_posix()] = [read_midi(f)
                                                   for f in files]
    return out


def load_rendition_dir(root) -> dict[str, NoteSequence]:
    """``<id>.mid`` or ``<id>/rendition.mid`` under `root` -> rendition."""
    root = Path(root)
    out = {}
    for path in sorted(root.rglob("*.mid")):
        rel = path.relative_to(root)
        if path.name == "rendition.mid":
            key = rel.parent.as_posix()
        else:
            key = rel.with_suffix("").as_posix()
        out[key] = read_midi(path)
    return out


def cmd_gem_eval(args) -> int:
    from .gem import gem_report, human_surrogate_eval

    references = load_reference_dir(args.references)
    params = _align_params(args)
    if args.surrogate_human:
        report = human_surrogate_eval(references, params, args.threads)
        label = args.label or "Human"
    else:
        if not args.renditions:
            raise UsageError("--renditions is required unless "
                             "--surrogate-human is given")
        report = gem_report(load_rendition_dir(args.renditions), references,
                            params, args.threads)
        label = args.label or "Model"
    print(report.table(label))
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


# train / render --------------------------------------------------------------

def load_run_config(path):
    from .model import ModelConfig
    from .training import TrainConfig

    cfg = {}
    if path:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return ModelConfig(**cfg.get("model", {})), \
        TrainConfig(**cfg.get("train", {}))


def cmd_train(args) -> int:
    from dataclasses import replace

    from .dataset import DatasetManifest
    from .training import save_training_outputs, train

    model_config, train_config = load_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    train_config = replace(train_config, **overrides)
    _echo({"model": model_config.to_dict(), "train": train_config.to_dict()},
          "resolved training config")
    manifest = DatasetManifest.load(args.manifest)
    state, ensemble = train(manifest, model_config, train_config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_training_outputs(out, state, ensemble, manifest.scaler,
                          model_config, train_config)
    print(f"trained {state.epoch} epochs; best epochs {state.best_epoch}; "
          f"discriminator updated on {state.disc_update_epochs} epochs")
    return EXIT_OK


def cmd_render(args) -> int:
    from .representation import ScalerStats
    from .training import EnsembleModel, render

    model_dir = Path(args.model)
    ensemble = EnsembleModel.load(model_dir)
    scaler = ScalerStats.from_dict(json.loads(
        (model_dir / "scaler.json").read_text(encoding="utf-8")))
    scores = [Path(p) for p in args.score]
    out = Path(args.out)
    if len(scores) > 1 or out.suffix.lower() not in (".mid", ".midi"):
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{s.parent.name}.mid" if s.name == "score.mid"
                   else out / s.name for s in scores]
    else:
        targets = [out]
    for src, dst in zip(scores, targets):
        save_midi(render(ensemble, scaler, read_midi(src)), dst, args.tpqn)
        print(f"rendered {src} -> {dst}")
    return EXIT_OK


# velocity curve --------------------------------------------------------------

def velocity_curve_rows(seqs, names, n_notes: int) -> list[list]:
    if n_notes < 1:
        raise ValueError("n_notes must be at least 1")
    rows = [["note"] + list(names)]
    for name, seq in zip(names, seqs):
        if len(seq) < n_notes:
            warnings.warn(f"{name} has only {len(seq)} notes; padding",
                          stacklevel=2)
    vels = [seq.velocities for seq in seqs]
    for k in range(n_notes):
        rows.append([k + 1] + [int(v[k]) if k < len(v) else ""
                               for v in vels])
    return rows


def cmd_velocity_curve(args) -> int:
    paths = [Path(p) for p in args.midis]
    names = [p.stem for p in paths]
    if len(set(names)) != len(names):
        names = [p.as_posix() for p in paths]
    rows = velocity_curve_rows([read_midi(p) for p in paths], names,
                               args.n_notes)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerows(rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8",
                                  newline="")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# parser ----------------------------------------------------------------------

def _add_align_flags(p):
    p.add_argument("--alpha", type=float, default=AlignParams.alpha,
                   help="onset-distance weight")
    p.add_argument("--beta", type=float, default=AlignParams.beta,
                   help="pitch-mismatch weight")
    p.add_argument("--gap", type=float, default=AlignParams.gap,
                   help="cost per unmatched note")


def _add_qc_flags(p):
    p.add_argument("--unmatched-max", type=float, default=UNMATCHED_MAX)
    p.add_argument("--pitch-mismatch-max", type=float,
                   default=PITCH_MISMATCH_MAX)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for per-composition jobs")

    parser = argparse.ArgumentParser(prog="eprkit")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", parents=[common],
                       help="MIDI <-> note-tuple CSV")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--tpqn", type=int, default=480)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("align", parents=[common],
                       help="align two MIDI files and report QC")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="alignment sidecar path")
    _add_align_flags(p)
    _add_qc_flags(p)
    p.set_defaults(func=cmd_align)

    ds = sub.add_parser("dataset", help="dataset tools")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    p = ds_sub.add_parser("build", parents=[common],
                          help="align, filter and split a corpus")
    p.add_argument("--root", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--ratios", default="8:1:1")
    _add_align_flags(p)
    _add_qc_flags(p)
    p.set_defaults(func=cmd_dataset_build)

    gem = sub.add_parser("gem", help="evaluation tools")
    gem_sub = gem.add_subparsers(dest="action", required=True)
    p = gem_sub.add_parser("eval", parents=[common],
                           help="multi-reference evaluation")
    p.add_argument("--renditions")
    p.add_argument("--references", required=True)
    p.add_argument("--surrogate-human", action="store_true")
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--label")
    _add_align_flags(p)
    p.set_defaults(func=cmd_gem_eval)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common],
                       help="render scores with a trained ensemble")
    p.add_argument("--model", required=True, help="training output dir")
    p.add_argument("--score", required=True, nargs="+")
    p.add_argument("--out", required=True,
                   help="MIDI path, or directory for several scores")
    p.add_argument("--tpqn", type=int, default=480)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("velocity-curve", parents=[common],
                       help="first N velocities of each file as CSV")
    p.add_argument("midis", nargs="+")
    p.add_argument("--n-notes", type=int, default=60)
    p.add_argument("--out")
    p.set_defaults(func=cmd_velocity_curve)
    return parser


def _echo(config: dict, title: str = "resolved config") -> None:
    print(f"# {title}: " + json.dumps(config, sort_keys=True, default=str),
          file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else
                        logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "dataset" and args.seed is None:
        args.seed = 0
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    _echo(resolved)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MidiError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REJECT


if __name__ == "__main__":
    sys.exit(main())
