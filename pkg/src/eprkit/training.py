"""
Adversarial training of the performance model, per-feature early stopping
and ensemble rendering.

The performance model is trained every epoch on a weighted sum of an
adversarial BCE term and per-feature MSE against the human performance.  The
discriminator is trained only every ``disc_every_epochs`` epochs.  Every
per-sample loss is divided by the number of human performances of its
composition.

"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .midi_io import NoteSequence
from .model import (ModelConfig, NonFiniteError, discriminator_backward,
                    discriminator_forward, init_discriminator_params,
                    init_performance_params, load_checkpoint,
                    performance_backward, performance_forward,
                    save_checkpoint)
from .representation import (DURATION, IOI, PITCH, VELOCITY, NoteTupleSeq,
                             ScalerStats, apply_scaler, decode, encode,
                             invert_scaler)

logger = logging.getLogger(__name__)

PRED_FEATURES = ("ioi", "duration", "velocity")
PRED_COLUMNS = [IOI, DURATION, VELOCITY]


class TrainingDiverged(RuntimeError):
    pass


# losses ----------------------------------------------------------------------

def bce_with_logits(logits, target: float):
    """Mean binary cross-entropy of sigmoid(logits) against a constant
    target, and its gradient with respect to the logits."""
    x = np.asarray(logits, dtype=float)
    loss = np.maximum(x, 0) - x * target + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(loss.mean()), (sig - target) / x.size


def performance_loss(disc_logits, rendition, human, c: float, lambdas):
    """
    Generator loss for one sample.

    ``[l0 * BCE(sigmoid(logits), 1) + l1 * MSE(ioi) + l2 * MSE(dur)
    + l3 * MSE(vel)] / c`` with BCE averaged over notes and MSE over the
    z-scored features.

    Parameters
    ----------
    disc_logits : array_like, shape (n,) or None
        Discriminator logits on the rendition; None skips the BCE term.
    rendition, human : array_like, shape (n, 3)
        (ioi, duration, velocity) columns.
    c : float
        Number of human performances of the composition.
    lambdas : sequence of 4 floats

    Returns
    -------
    loss : float
    d_logits : numpy array or None
    d_rendition : numpy array, shape (n, 3)

    """
    if c <= 0:
        raise ValueError("performance count c must be positive")
    l0, l1, l2, l3 = lambdas
    r = np.asarray(rendition, dtype=float)
    h = np.asarray(human, dtype=float)
    if r.shape != h.shape or r.ndim != 2 or r.shape[1] != 3:
        raise ValueError(f"shape mismatch {r.shape} vs {h.shape}")
    n = len(r)
    diff = r - h
    weights = np.array([l1, l2, l3], dtype=float)
    loss = float((weights * (diff ** 2).mean(axis=0)).sum())
    d_rend = 2.0 * diff * weights / n / c
    d_logits = None
    if disc_logits is not None:
        bce, d_bce = bce_with_logits(disc_logits, 1.0)
        loss += l0 * bce
        d_logits = l0 * d_bce / c
    return loss / c, d_logits, d_rend


def discriminator_loss(logits_human, logits_rendition, c: float,
                       l4: float, l5: float):
    """
    ``[l4 * BCE(sigmoid(logits_human), 1)
    + l5 * BCE(sigmoid(logits_rendition), 0)] / c``.

    Returns the loss and the gradients for both logit vectors.
    """
    if c <= 0:
        raise ValueError("performance count c must be positive")
    real, d_real = bce_with_logits(logits_human, 1.0)
    fake, d_fake = bce_with_logits(logits_rendition, 0.0)
    loss = (l4 * real + l5 * fake) / c
    return loss, l4 * d_real / c, l5 * d_fake / c


# optimizer -------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / corr1) / (
                np.sqrt(self.v[k] / corr2) + self.eps)


# configuration and state -----------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    lambdas: tuple = (1.0, 3.0, 0.1, 0.1, 1.0, 1.0)
    disc_every_epochs: int = 5
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    balance_by_count: bool = True
    disc_score_aware: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lambdas",
                           tuple(float(x) for x in self.lambdas))
        if len(self.lambdas) != 6 or any(x < 0 for x in self.lambdas):
            raise ValueError("need six non-negative lambdas")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.disc_every_epochs < 1:
            raise ValueError("batch_size and disc_every_epochs must be >= 1")

    @property
    def uses_discriminator(self) -> bool:
        l0, _, _, _, l4, l5 = self.lambdas
        return l0 > 0 or l4 > 0 or l5 > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        return d


@dataclass
class Sample:
    composition_id: str
    score: np.ndarray
    human: np.ndarray
    c: float


@dataclass
class TrainState:
    epoch: int
    gen_params: dict
    gen_opt: Adam
    disc_params: dict
    disc_opt: Adam
    best_val: dict
    best_epoch: dict
    best_params: dict
    disc_update_epochs: int = 0
    disc_steps: int = 0
    history: list = field(default_factory=list)
    rng_state: dict | None = None


@dataclass
class EnsembleModel:
    """Three early-stopped performance models, one per predicted feature."""

    config: ModelConfig
    members: dict

    def __post_init__(self):
        if set(self.members) != set(PRED_FEATURES):
            raise ValueError(f"ensemble needs members {PRED_FEATURES}")

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for feature, params in self.members.items():
            save_checkpoint(out_dir / f"{feature}.ckpt", params, self.config,
                            "performance", {"feature": feature})

    @classmethod
    def load(cls, out_dir) -> "EnsembleModel":
        members = {}
        configs = set()
        for feature in PRED_FEATURES:
            params, config, kind, _ = load_checkpoint(
                Path(out_dir) / f"{feature}.ckpt")
            if kind != "performance":
                raise ValueError(f"{feature} checkpoint is a {kind} model")
            members[feature] = params
            configs.add(config)
        if len(configs) != 1:
            raise ValueError("ensemble members disagree on ModelConfig")
        return cls(configs.pop(), members)


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# data ------------------------------------------------------------------------

def window_starts(n: int, size: int, overlap: bool) -> list[int]:
    """Window start indices covering ``range(n)``."""
    if n <= size:
        return [0]
    stride = max(size // 2, 1) if overlap else size
    starts = list(range(0, n - size + 1, stride))
    if overlap and starts[-1] + size < n:
        starts.append(n - size)
    if not overlap:
        starts = list(range(0, n, size))
    return starts


def make_samples(pairs, scaler: ScalerStats, max_len: int,
                 balance_by_count: bool = True) -> list[Sample]:
    """Scale training pairs and cut them into half-overlapping windows."""
    samples = []
    for pair in pairs:
        xs = apply_scaler(pair.score, scaler).values
        xh = apply_scaler(pair.performance, scaler).values
        c = float(pair.c) if balance_by_count else 1.0
        for s in window_starts(len(xs), max_len, overlap=True):
            samples.append(Sample(pair.composition_id, xs[s:s + max_len],
                                  xh[s:s + max_len], c))
    return samples


def predict_scaled(params, config: ModelConfig, xs: np.ndarray) -> np.ndarray:
    """Model output over a full scaled score, in disjoint windows."""
    out = []
    for s in window_starts(len(xs), config.max_seq_len, overlap=False):
        pred, _ = performance_forward(params, config,
                                      xs[s:s + config.max_seq_len])
        out.append(pred)
    return np.concatenate(out, axis=0)


def validation_mse(params, config: ModelConfig, pairs,
                   scaler: ScalerStats) -> dict:
    """Per-feature MSE in z-space over all validation notes."""
    sq = np.zeros(3)
    count = 0
    for pair in pairs:
        xs = apply_scaler(pair.score, scaler).values
        xh = apply_scaler(pair.performance, scaler).values
        pred = predict_scaled(params, config, xs)
        sq += ((pred - xh[:, PRED_COLUMNS]) ** 2).sum(axis=0)
        count += len(xs)
    return dict(zip(PRED_FEATURES, (sq / count).tolist()))


def _rendition_input(xs, out):
    rend = xs.copy()
    rend[:, PRED_COLUMNS] = out
    return rend


def _add(acc: dict, grads: dict, scale: float = 1.0) -> None:
    for k, g in grads.items():
        acc[k] += scale * g


# training loop ---------------------------------------------------------------

def init_state(model_config: ModelConfig, train_config: TrainConfig):
    seeds = np.random.SeedSequence(train_config.seed).spawn(4)
    gen = init_performance_params(model_config, np.random.default_rng(seeds[0]))
    disc = init_discriminator_params(model_config,
                                     np.random.default_rng(seeds[1]),
                                     score_aware=train_config.disc_score_aware)
    tc = train_config
    state = TrainState(
        epoch=0, gen_params=gen,
        gen_opt=Adam(gen, tc.learning_rate, tc.beta1, tc.beta2, tc.eps),
        disc_params=disc,
        disc_opt=Adam(disc, tc.learning_rate, tc.beta1, tc.beta2, tc.eps),
        best_val={f: math.inf for f in PRED_FEATURES},
        best_epoch={f: 0 for f in PRED_FEATURES},
        best_params={})
    shuffle_rng = np.random.default_rng(seeds[2])
    dropout_rng = np.random.default_rng(seeds[3])
    return state, shuffle_rng, dropout_rng


def _generator_step(state, config, tc, batch, dropout_rng, use_disc):
    gen, disc = state.gen_params, state.disc_params
    acc = {k: np.zeros_like(v) for k, v in gen.items()}
    total = 0.0
    mse_total = 0.0
    lam = tc.lambdas[:4]
    for sample in batch:
        xs, xh = sample.score, sample.human
        out, g_cache = performance_forward(gen, config, xs, dropout_rng)
        human = xh[:, PRED_COLUMNS]
        logits = d_cache = None
        if use_disc:
            logits, d_cache = discriminator_forward(
                disc, config, xs, _rendition_input(xs, out), dropout_rng)
        loss, d_logits, d_out = performance_loss(logits, out, human,
                                                 sample.c, lam)
        if use_disc:
            _, _, d_perf = discriminator_backward(disc, config, d_cache,
                                                  d_logits)
            d_out = d_out + d_perf[:, PRED_COLUMNS]
        grads, _ = performance_backward(gen, config, g_cache, d_out)
        _add(acc, grads, 1.0 / len(batch))
        total += loss
        mse_total += float(((out - human) ** 2).mean())
    if not math.isfinite(total):
        raise FloatingPointError("non-finite generator loss")
    state.gen_opt.step(gen, acc)
    return total / len(batch), mse_total / len(batch)


def _discriminator_step(state, config, tc, batch, dropout_rng):
    gen, disc = state.gen_params, state.disc_params
    acc = {k: np.zeros_like(v) for k, v in disc.items()}
    total = 0.0
    for sample in batch:
        xs, xh = sample.score, sample.human
        out, _ = performance_forward(gen, config, xs, dropout_rng)
        log_h, cache_h = discriminator_forward(disc, config, xs, xh,
                                               dropout_rng)
        log_r, cache_r = discriminator_forward(
            disc, config, xs, _rendition_input(xs, out), dropout_rng)
        loss, d_h, d_r = discriminator_loss(log_h, log_r, sample.c,
                                            tc.lambdas[4], tc.lambdas[5])
        _add(acc, discriminator_backward(disc, config, cache_h, d_h)[0],
             1.0 / len(batch))
        _add(acc, discriminator_backward(disc, config, cache_r, d_r)[0],
             1.0 / len(batch))
        total += loss
    if not math.isfinite(total):
        raise FloatingPointError("non-finite discriminator loss")
    state.disc_opt.step(disc, acc)
    state.disc_steps += 1
    return total / len(batch)


def train_pairs(train, val, scaler: ScalerStats, model_config: ModelConfig,
                train_config: TrainConfig, log_path=None,
                on_epoch=None):
    """
    Train on in-memory :class:`~eprkit.dataset.TrainingPair` lists.

    Parameters
    ----------
    train, val : list of TrainingPair
    scaler : ScalerStats
    model_config : ModelConfig
    train_config : TrainConfig
    log_path : path, optional
        CSV training log destination.
    on_epoch : callable, optional
        Called as ``on_epoch(state, row)`` after every epoch.

    Returns
    -------
    state : TrainState
    ensemble : EnsembleModel

    """
    if not train or not val:
        raise ValueError("training needs non-empty train and val splits")
    tc = train_config
    state, shuffle_rng, dropout_rng = init_state(model_config, tc)
    if model_config.dropout == 0:
        dropout_rng = None
    samples = make_samples(train, scaler, model_config.max_seq_len,
                           tc.balance_by_count)
    use_disc = tc.uses_discriminator
    gen_uses_disc = use_disc and tc.lambdas[0] > 0
    stale = 0
    for epoch in range(1, tc.max_epochs + 1):
        state.epoch = epoch
        disc_epoch = use_disc and epoch % tc.disc_every_epochs == 0
        order = shuffle_rng.permutation(len(samples))
        gen_losses, disc_losses, mses = [], [], []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            batch = [samples[k] for k in order[start:start + tc.batch_size]]
            try:
                if disc_epoch:
                    disc_losses.append(_discriminator_step(
                        state, model_config, tc, batch, dropout_rng))
                loss, mse_value = _generator_step(
                    state, model_config, tc, batch, dropout_rng,
                    gen_uses_disc)
            except (FloatingPointError, NonFiniteError) as exc:
                raise TrainingDiverged(
                    f"diverged at epoch {epoch}, batch {b}: {exc}") from exc
            gen_losses.append(loss)
            mses.append(mse_value)
        if disc_epoch:
            state.disc_update_epochs += 1
        val_mse = validation_mse(state.gen_params, model_config, val, scaler)
        improved = False
        for f in PRED_FEATURES:
            if val_mse[f] < state.best_val[f]:
                state.best_val[f] = val_mse[f]
                state.best_epoch[f] = epoch
                state.best_params[f] = {k: v.copy() for k, v in
                                        state.gen_params.items()}
                improved = True
        stale = 0 if improved else stale + 1
        row = {"epoch": epoch,
               "gen_loss": float(np.mean(gen_losses)),
               "disc_loss": float(np.mean(disc_losses)) if disc_losses
               else float("nan"),
               "train_mse": float(np.mean(mses)),
               **{f"val_mse_{f}": val_mse[f] for f in PRED_FEATURES},
               **{f"best_val_{f}": state.best_val[f] for f in PRED_FEATURES},
               "disc_updated": int(disc_epoch)}
        state.history.append(row)
        logger.info("epoch %d gen %.5f val %s", epoch, row["gen_loss"],
                    val_mse)
        if on_epoch is not None:
            on_epoch(state, row)
        if stale >= tc.patience:
            logger.info("early stop after %d stale epochs", stale)
            break
    state.rng_state = {"shuffle": shuffle_rng.bit_generator.state}
    if log_path is not None:
        write_log(state.history, log_path)
    ensemble = EnsembleModel(model_config, {f: state.best_params[f]
                                            for f in PRED_FEATURES})
    return state, ensemble


LOG_COLUMNS = ["epoch", "gen_loss", "disc_loss", "train_mse",
               "val_mse_ioi", "val_mse_duration", "val_mse_velocity",
               "disc_updated"]


def write_log(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(history)


def train(manifest, model_config: ModelConfig, train_config: TrainConfig,
          log_path=None, on_epoch=None):
    """Train from a dataset manifest (train and val splits)."""
    from .dataset import load_pairs

    train_set = load_pairs(manifest, "train")
    val_set = load_pairs(manifest, "val")
    return train_pairs(train_set, val_set, manifest.scaler, model_config,
                       train_config, log_path, on_epoch)


# rendering -------------------------------------------------------------------

def render_tuples(ensemble: EnsembleModel, scaler: ScalerStats,
                  score: NoteSequence) -> NoteTupleSeq:
    """
    Merged ensemble prediction as unscaled tuples, in score note order.

    IOI comes from the ioi member, duration from the duration member and
    velocity from the velocity member.  IOI and duration are clamped at 0,
    velocity rounded into [1, 127]; pitch is copied from the score.  The
    first IOI is set to 0 as in :func:`~eprkit.representation.encode`.
    """
    enc = encode(score)
    xs = apply_scaler(enc, scaler).values
    merged = xs.copy()
    for col, feature in zip(PRED_COLUMNS, PRED_FEATURES):
        pred = predict_scaled(ensemble.members[feature], ensemble.config, xs)
        merged[:, col] = pred[:, PRED_FEATURES.index(feature)]
    values = invert_scaler(NoteTupleSeq(merged, True, enc.raw_pitch),
                           scaler).values.copy()
    values[:, IOI] = np.maximum(values[:, IOI], 0.0)
    # the first note has no predecessor, so the rendition starts at 0
    values[0, IOI] = 0.0
    values[:, DURATION] = np.maximum(values[:, DURATION], 0.0)
    values[:, VELOCITY] = np.clip(np.rint(values[:, VELOCITY]), 1, 127)
    values[:, PITCH] = enc.raw_pitch
    return NoteTupleSeq(values, False, enc.raw_pitch)


def render(ensemble: EnsembleModel, scaler: ScalerStats,
           score: NoteSequence) -> NoteSequence:
    """Render a score into an expressive NoteSequence starting at 0 s."""
    return decode(render_tuples(ensemble, scaler, score), start=0.0,
                  source_name="rendition")


def save_training_outputs(out_dir, state: TrainState,
                          ensemble: EnsembleModel, scaler: ScalerStats,
                          model_config: ModelConfig,
                          train_config: TrainConfig) -> None:
    """Ensemble checkpoints, final model states, scaler, config and log."""
    out_dir = Path(out_dir)
    ensemble.save(out_dir)
    save_checkpoint(out_dir / "final_performance.ckpt", state.gen_params,
                    model_config, "performance", {"epoch": state.epoch})
    save_checkpoint(out_dir / "final_discriminator.ckpt", state.disc_params,
                    model_config, "discriminator", {"epoch": state.epoch})
    (out_dir / "scaler.json").write_text(
        json.dumps(scaler.to_dict(), indent=2, sort_keys=True) + "\n")
    (out_dir / "config.json").write_text(json.dumps(
        {"model": model_config.to_dict(), "train": train_config.to_dict(),
         "best_epoch": state.best_epoch,
         "disc_update_epochs": state.disc_update_epochs},
        indent=2, sort_keys=True) + "\n")
    write_log(state.history, out_dir / "train_log.csv")
