"""
Training a small model and rendering a score
============================================

Build a paired dataset from a synthetic corpus, train a tiny model for a few
epochs and render an unseen score.  Real corpora need far more epochs and
the full-size model.
"""

import tempfile
from pathlib import Path

import numpy as np

from eprkit import ModelConfig, TrainConfig, render, train
from eprkit.dataset import build_from_root, dataset_stats, format_stats
from eprkit.midi_io import read_midi
from eprkit.synthetic import write_corpus

work = Path(tempfile.mkdtemp())
write_corpus(work / "corpus", n_compositions=10, n_performances=(2, 3),
             seed=1)
manifest = build_from_root(work / "corpus", work / "data", seed=0)
print(format_stats(dataset_stats(manifest)))

model_config = ModelConfig(d_model=16, d_ff=32, n_heads=2, n_blocks=2,
                           dropout=0.1, max_seq_len=32)
train_config = TrainConfig(learning_rate=1e-3, max_epochs=10,
                           disc_every_epochs=5)
state, ensemble = train(manifest, model_config, train_config)
for row in state.history:
    print(f"epoch {row['epoch']:2d}  gen {row['gen_loss']:.4f}  "
          f"val ioi {row['val_mse_ioi']:.4f}  "
          f"disc updated {bool(row['disc_updated'])}")
print("best epochs:", state.best_epoch)

# render the held-out score
test = manifest.groups_in("test")[0]
score = read_midi(manifest.resolve(test.score_path))
out = render(ensemble, manifest.scaler, score)
print(f"{test.composition_id}: {len(out)} notes, "
      f"{out.span():.2f} s, velocities {np.unique(out.velocities)[:8]} ...")
