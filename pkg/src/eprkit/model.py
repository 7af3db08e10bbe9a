"""
Transformer-encoder performance model and score-aware discriminator in numpy.

Both networks embed note tuples with an affine map, add sinusoidal
positions, run a stack of post-layer-norm encoder blocks (bidirectional
multi-head self-attention and a ReLU feed-forward layer) and finish with an
affine head.  The performance model predicts ``(ioi, duration, velocity)``
per note; the discriminator adds a second embedding for the performance and
emits one logit per note.

Parameters are plain ``dict[str, np.ndarray]``.  Forward functions return a
cache consumed by the matching backward function, which returns exact
gradients for every parameter and for the inputs.

"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .representation import NoteTupleSeq

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"EPRCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    d_ff: int = 1024
    n_heads: int = 4
    n_blocks: int = 6
    dropout: float = 0.1
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("d_model", "d_ff", "n_heads", "n_blocks", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Prediction:
    """Per-note (ioi, duration, velocity) in z-units plus copied pitch."""

    values: np.ndarray
    pitch: np.ndarray

    def __len__(self):
        return len(self.values)


class NonFiniteError(FloatingPointError):
    """A forward or backward intermediate contains inf or NaN."""


def _check(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """
    Sinusoidal position table of shape (n, d).

    Even columns hold ``sin(pos / 10000**(2i/d))`` and odd columns the
    matching cosine.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if d % 2:
        raise ValueError("d must be even")
    pos = np.arange(n, dtype=float)[:, None]
    rates = 10000.0 ** (np.arange(0, d, 2, dtype=float) / d)
    pe = np.empty((n, d))
    pe[:, 0::2] = np.sin(pos / rates)
    pe[:, 1::2] = np.cos(pos / rates)
    return pe


# initialization --------------------------------------------------------------

def _affine(rng, fan_in, fan_out):
    bound = np.sqrt(1.0 / fan_in)
    return (rng.uniform(-bound, bound, size=(fan_in, fan_out)),
            rng.uniform(-bound, bound, size=fan_out))


def _init_blocks(params, config, rng):
    d, f = config.d_model, config.d_ff
    for l in range(config.n_blocks):
        p = f"blocks.{l}."
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.W{name}"], params[p + f"attn.b{name}"] = \
                _affine(rng, d, d)
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        params[p + "ff.W1"], params[p + "ff.b1"] = _affine(rng, d, f)
        params[p + "ff.W2"], params[p + "ff.b2"] = _affine(rng, f, d)
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)


def init_performance_params(config: ModelConfig, rng) -> dict:
    rng = np.random.default_rng(rng)
    params = {}
    params["score_embed.W"], params["score_embed.b"] = \
        _affine(rng, 4, config.d_model)
    _init_blocks(params, config, rng)
    params["head.W"], params["head.b"] = _affine(rng, config.d_model, 3)
    return params


def init_discriminator_params(config: ModelConfig, rng,
                              score_aware: bool = True) -> dict:
    rng = np.random.default_rng(rng)
    params = {}
    if score_aware:
        params["score_embed.W"], params["score_embed.b"] = \
            _affine(rng, 4, config.d_model)
    params["perf_embed.W"], params["perf_embed.b"] = \
        _affine(rng, 4, config.d_model)
    _init_blocks(params, config, rng)
    params["head.W"], params["head.b"] = _affine(rng, config.d_model, 1)
    return params


def zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# layers ----------------------------------------------------------------------

def _dropout(x, rate, rng):
    if rng is None or rate == 0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _block_forward(params, prefix, config, h, rng):
    n, d = h.shape
    heads = config.n_heads
    dk = d // heads
    P = lambda name: params[prefix + name]
    q = h @ P("attn.Wq") + P("attn.bq")
    k = h @ P("attn.Wk") + P("attn.bk")
    v = h @ P("attn.Wv") + P("attn.bv")
    split = lambda x: x.reshape(n, heads, dk).transpose(1, 0, 2)
    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dk)
    attn = _softmax(scores)
    ctx = (attn @ vh).transpose(1, 0, 2).reshape(n, d)
    a = ctx @ P("attn.Wo") + P("attn.bo")
    a, mask_a = _dropout(a, config.dropout, rng)
    h1, ln1 = _layer_norm(h + a, P("ln1.g"), P("ln1.b"))
    _check(prefix + "attn", h1)
    z = h1 @ P("ff.W1") + P("ff.b1")
    r = np.maximum(z, 0.0)
    f = r @ P("ff.W2") + P("ff.b2")
    f, mask_f = _dropout(f, config.dropout, rng)
    out, ln2 = _layer_norm(h1 + f, P("ln2.g"), P("ln2.b"))
    _check(prefix + "ff", out)
    cache = (h, qh, kh, vh, attn, ctx, mask_a, ln1, h1, z, r, mask_f, ln2)
    return out, cache


def _block_backward(params, prefix, config, dout, cache, grads):
    h, qh, kh, vh, attn, ctx, mask_a, ln1, h1, z, r, mask_f, ln2 = cache
    n, d = h.shape
    heads = config.n_heads
    dk = d // heads
    P = lambda name: params[prefix + name]

    du2, grads[prefix + "ln2.g"], grads[prefix + "ln2.b"] = \
        _layer_norm_backward(dout, ln2)
    dh1 = du2.copy()
    df = du2 if mask_f is None else du2 * mask_f
    grads[prefix + "ff.W2"] = r.T @ df
    grads[prefix + "ff.b2"] = df.sum(axis=0)
    dz = (df @ P("ff.W2").T) * (z > 0)
    grads[prefix + "ff.W1"] = h1.T @ dz
    grads[prefix + "ff.b1"] = dz.sum(axis=0)
    dh1 += dz @ P("ff.W1").T
    _check(prefix + "ff (backward)", dh1)

    du1, grads[prefix + "ln1.g"], grads[prefix + "ln1.b"] = \
        _layer_norm_backward(dh1, ln1)
    dh = du1.copy()
    da = du1 if mask_a is None else du1 * mask_a
    grads[prefix + "attn.Wo"] = ctx.T @ da
    grads[prefix + "attn.bo"] = da.sum(axis=0)
    dctx = (da @ P("attn.Wo").T).reshape(n, heads, dk).transpose(1, 0, 2)
    dattn = dctx @ vh.transpose(0, 2, 1)
    dvh = attn.transpose(0, 2, 1) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dk)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh
    merge = lambda x: x.transpose(1, 0, 2).reshape(n, d)
    for name, dx in (("q", merge(dqh)), ("k", merge(dkh)), ("v", merge(dvh))):
        grads[prefix + f"attn.W{name}"] = h.T @ dx
        grads[prefix + f"attn.b{name}"] = dx.sum(axis=0)
        dh += dx @ P(f"attn.W{name}").T
    _check(prefix + "attn (backward)", dh)
    return dh


def _encoder_forward(params, config, h, rng):
    caches = []
    for l in range(config.n_blocks):
        h, cache = _block_forward(params, f"blocks.{l}.", config, h, rng)
        caches.append(cache)
    return h, caches


def _encoder_backward(params, config, dh, caches, grads):
    for l in reversed(range(config.n_blocks)):
        dh = _block_backward(params, f"blocks.{l}.", config, dh, caches[l],
                             grads)
    return dh


def _as_array(x, name):
    if isinstance(x, NoteTupleSeq):
        if not x.scaled:
            raise ValueError(f"{name} must be z-scored")
        x = x.values
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 4:
        raise ValueError(f"{name} must have shape (n, 4), got {x.shape}")
    return x


# performance model -----------------------------------------------------------

def performance_forward(params, config: ModelConfig, score, rng=None):
    """
    Run the performance model on one scaled score window.

    Parameters
    ----------
    params : dict
    config : ModelConfig
    score : array_like, shape (n, 4)
        Scaled (ioi, duration, pitch, velocity).
    rng : numpy Generator, optional
        Enables dropout when given.

    Returns
    -------
    out : numpy array, shape (n, 3)
    cache : tuple
        For :func:`performance_backward`.

    """
    x = _check("score input", _as_array(score, "score"))
    n = len(x)
    if n > config.max_seq_len:
        raise ValueError(f"sequence of {n} notes exceeds max_seq_len "
                         f"{config.max_seq_len}; window it first")
    h = x @ params["score_embed.W"] + params["score_embed.b"]
    h = h + sinusoidal_positions(n, config.d_model)
    h, mask0 = _dropout(h, config.dropout, rng)
    h = _check("score_embed", h)
    h, caches = _encoder_forward(params, config, h, rng)
    out = _check("head", h @ params["head.W"] + params["head.b"])
    assert out.shape == (n, 3)
    return out, ("performance", x, mask0, caches, h)


def performance_backward(params, config: ModelConfig, cache, d_out):
    """Gradients of the performance model given dL/d(output)."""
    kind, x, mask0, caches, h = cache
    if kind != "performance":
        raise ValueError("cache does not come from performance_forward")
    d_out = _check("upstream gradient", np.asarray(d_out, dtype=float))
    grads = {}
    grads["head.W"] = h.T @ d_out
    grads["head.b"] = d_out.sum(axis=0)
    dh = d_out @ params["head.W"].T
    dh = _encoder_backward(params, config, dh, caches, grads)
    if mask0 is not None:
        dh = dh * mask0
    grads["score_embed.W"] = x.T @ dh
    grads["score_embed.b"] = dh.sum(axis=0)
    d_score = _check("score_embed (backward)", dh @ params["score_embed.W"].T)
    return grads, d_score


def forward_performance(params, config: ModelConfig,
                        score: NoteTupleSeq) -> Prediction:
    """Deterministic prediction for a scaled score (pitch copied through)."""
    if not score.scaled:
        raise ValueError("score must be z-scored")
    out, _ = performance_forward(params, config, score.values)
    return Prediction(out, score.raw_pitch.copy())


# discriminator ---------------------------------------------------------------

def discriminator_forward(params, config: ModelConfig, score, perf, rng=None):
    """
    Per-note logits for a (score, performance) window pair.

    Without score-embedding parameters the discriminator is unconditional
    and `score` is ignored.
    """
    xp = _check("performance input", _as_array(perf, "perf"))
    n = len(xp)
    if n > config.max_seq_len:
        raise ValueError(f"sequence of {n} notes exceeds max_seq_len "
                         f"{config.max_seq_len}; window it first")
    h = xp @ params["perf_embed.W"] + params["perf_embed.b"]
    xs = None
    if "score_embed.W" in params:
        xs = _check("score input", _as_array(score, "score"))
        if len(xs) != n:
            raise ValueError(f"score has {len(xs)} notes, performance {n}")
        h = h + xs @ params["score_embed.W"] + params["score_embed.b"]
    h = h + sinusoidal_positions(n, config.d_model)
    h, mask0 = _dropout(h, config.dropout, rng)
    h = _check("embeddings", h)
    h, caches = _encoder_forward(params, config, h, rng)
    logits = _check("head", h @ params["head.W"] + params["head.b"])
    assert logits.shape == (n, 1)
    return logits[:, 0], ("discriminator", xs, xp, mask0, caches, h)


def discriminator_backward(params, config: ModelConfig, cache, d_logits):
    """
    Gradients of the discriminator given dL/d(logits).

    Returns
    -------
    grads : dict
    d_score, d_perf : numpy arrays, shape (n, 4)
        Input gradients; `d_score` is None for an unconditional model.

    """
    kind, xs, xp, mask0, caches, h = cache
    if kind != "discriminator":
        raise ValueError("cache does not come from discriminator_forward")
    d_out = _check("upstream gradient",
                   np.asarray(d_logits, dtype=float).reshape(-1, 1))
    grads = {}
    grads["head.W"] = h.T @ d_out
    grads["head.b"] = d_out.sum(axis=0)
    dh = d_out @ params["head.W"].T
    dh = _encoder_backward(params, config, dh, caches, grads)
    if mask0 is not None:
        dh = dh * mask0
    grads["perf_embed.W"] = xp.T @ dh
    grads["perf_embed.b"] = dh.sum(axis=0)
    d_perf = dh @ params["perf_embed.W"].T
    d_score = None
    if xs is not None:
        grads["score_embed.W"] = xs.T @ dh
        grads["score_embed.b"] = dh.sum(axis=0)
        d_score = dh @ params["score_embed.W"].T
    return grads, d_score, _check("perf_embed (backward)", d_perf)


def forward_discriminator(params, config: ModelConfig, score: NoteTupleSeq,
                          perf: NoteTupleSeq) -> np.ndarray:
    if not (score.scaled and perf.scaled):
        raise ValueError("inputs must be z-scored")
    logits, _ = discriminator_forward(params, config, score.values,
                                      perf.values)
    return logits


def backward(params, config: ModelConfig, cache, upstream):
    """Dispatch to the backward pass matching `cache`."""
    if cache[0] == "performance":
        return performance_backward(params, config, cache, upstream)
    return discriminator_backward(params, config, cache, upstream)


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: dict, config: ModelConfig, kind: str,
                    meta: dict | None = None) -> None:
    """
    Write parameters to a portable binary checkpoint.

    Layout: 8-byte magic ``EPRCKPT1``, little-endian uint32 header length,
    UTF-8 JSON header, then every tensor as little-endian float64 in
    row-major order.  The header holds ``version``, ``kind``, ``config``,
    ``meta`` and ``tensors``: a list of ``{name, shape, offset}`` with byte
    offsets relative to the start of the data section.
    """
    Path(path).write_bytes(checkpoint_bytes(params, config, kind, meta))


def checkpoint_bytes(params: dict, config: ModelConfig, kind: str,
                     meta: dict | None = None) -> bytes:
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape),
                        "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"version": CHECKPOINT_VERSION, "kind": kind,
                         "config": config.to_dict(), "meta": meta or {},
                         "tensors": tensors}, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + \
        b"".join(blobs)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(params, config, kind, meta)``."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {header['version']}")
    base = 12 + hlen
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count,
                            offset=base + t["offset"])
        params[t["name"]] = arr.reshape(t["shape"]).astype(float)
    return params, ModelConfig(**header["config"]), header["kind"], \
        header["meta"]
