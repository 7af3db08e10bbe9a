"""Expressive performance rendering toolkit."""

from .alignment import (AlignParams, Alignment, QcVerdict, align,
                        match_percent, quality_check)
from .dataset import (DatasetManifest, build_dataset, dataset_stats,
                      scale_score_to_performance)
from .gem import (EvalPair, GemReport, feature_metric, gem_preprocess,
                  gem_report, human_surrogate_eval)
from .midi_io import MidiError, NoteEvent, NoteSequence, parse_midi, \
    read_midi, save_midi, write_midi
from .model import ModelConfig
from .representation import (NoteTupleSeq, ScalerStats, apply_scaler, decode,
                             encode, fit_scaler, invert_scaler)
from .training import EnsembleModel, TrainConfig, render, train

__version__ = "0.1.0"

__all__ = [
    "AlignParams", "Alignment", "QcVerdict", "align", "match_percent",
    "quality_check", "DatasetManifest", "build_dataset", "dataset_stats",
    "scale_score_to_performance", "EvalPair", "GemReport", "feature_metric",
    "gem_preprocess", "gem_report", "human_surrogate_eval", "MidiError",
    "NoteEvent", "NoteSequence", "parse_midi", "read_midi", "save_midi",
    "write_midi", "ModelConfig", "NoteTupleSeq", "ScalerStats",
    "apply_scaler", "decode", "encode", "fit_scaler", "invert_scaler",
    "EnsembleModel", "TrainConfig", "render", "train",
]
