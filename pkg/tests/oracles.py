"""Independent reference implementations used to check the package."""

import itertools
import math

import numpy as np
from scipy import stats


# alignment -------------------------------------------------------------------

def _norm(onsets):
    onsets = np.asarray(onsets, dtype=float)
    lo, hi = onsets.min(), onsets.max()
    extent = hi - lo if hi > lo else 1.0
    return [(t - lo) / extent for t in onsets]


def pair_cost(a, b, alpha, beta):
    ta, tb = _norm(a.onsets), _norm(b.onsets)
    pa, pb = list(a.pitches), list(b.pitches)
    return lambda i, j: alpha * abs(ta[i] - tb[j]) + beta * (pa[i] != pb[j])


def dp_min_cost(a, b, alpha=1.0, beta=1.1, gap=0.6):
    """Textbook cell-by-cell DP; returns the optimal objective value."""
    cost = pair_cost(a, b, alpha, beta)
    n, m = len(a), len(b)
    D = [[0.0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        D[i][0] = i * gap
    for j in range(1, m + 1):
        D[0][j] = j * gap
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = min(D[i - 1][j - 1] + cost(i - 1, j - 1),
                          D[i - 1][j] + gap, D[i][j - 1] + gap)
    return D[n][m]


def enumerate_min_cost(a, b, alpha=1.0, beta=1.1, gap=0.6):
    """Exhaustive search over all monotone matchings (tiny inputs only)."""
    cost = pair_cost(a, b, alpha, beta)
    n, m = len(a), len(b)
    best = math.inf
    for k in range(min(n, m) + 1):
        for ia in itertools.combinations(range(n), k):
            for ib in itertools.combinations(range(m), k):
                c = sum(cost(i, j) for i, j in zip(ia, ib))
                c += gap * (n + m - 2 * k)
                best = min(best, c)
    return best


# GEM -------------------------------------------------------------------------

def _pearson(x, y):
    if np.ptp(x) == 0 or np.ptp(y) == 0 or len(x) < 2:
        return 0.0
    return float(stats.pearsonr(x, y)[0])


def gem_bruteforce(comps, feature):
    """
    comps: list (compositions) of list (references) of (e, h) arrays of one
    feature.  Returns (l, p) computed with vectorized min/max selection.
    """
    weighted, counts, best_p = [], [], []
    for refs in comps:
        losses = np.array([np.mean((np.asarray(e) - np.asarray(h)) ** 2)
                           for e, h in refs])
        k = int(np.argmin(losses))
        weighted.append(losses[k] * len(refs[k][1]))
        counts.append(len(refs[k][1]))
        best_p.append(max(_pearson(e, h) for e, h in refs))
    return float(np.sum(weighted) / np.sum(counts)), float(np.mean(best_p))


# gradients -------------------------------------------------------------------

def central_difference(f, x: np.ndarray, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


# transformer -----------------------------------------------------------------

def _ln_row(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * gi + bi
            for v, gi, bi in zip(x, g, b)]


def _affine_row(x, W, b):
    return [sum(x[i] * W[i][j] for i in range(len(x))) + b[j]
            for j in range(len(b))]


def encoder_naive(params, n_heads, n_blocks, h):
    """Post-LN encoder stack evaluated token by token with Python loops."""
    h = [list(map(float, row)) for row in h]
    n, d = len(h), len(h[0])
    dk = d // n_heads
    for l in range(n_blocks):
        P = lambda name: params[f"blocks.{l}.{name}"].tolist()
        q = [_affine_row(x, P("attn.Wq"), P("attn.bq")) for x in h]
        k = [_affine_row(x, P("attn.Wk"), P("attn.bk")) for x in h]
        v = [_affine_row(x, P("attn.Wv"), P("attn.bv")) for x in h]
        ctx = [[0.0] * d for _ in range(n)]
        for head in range(n_heads):
            cols = range(head * dk, (head + 1) * dk)
            for i in range(n):
                s = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dk)
                     for j in range(n)]
                top = max(s)
                w = [math.exp(x - top) for x in s]
                z = sum(w)
                for c in cols:
                    ctx[i][c] = sum(w[j] / z * v[j][c] for j in range(n))
        a = [_affine_row(x, P("attn.Wo"), P("attn.bo")) for x in ctx]
        h1 = [_ln_row([x + y for x, y in zip(hi, ai)], P("ln1.g"), P("ln1.b"))
              for hi, ai in zip(h, a)]
        f = [_affine_row([max(0.0, t) for t in
                          _affine_row(x, P("ff.W1"), P("ff.b1"))],
                         P("ff.W2"), P("ff.b2")) for x in h1]
        h = [_ln_row([x + y for x, y in zip(hi, fi)], P("ln2.g"), P("ln2.b"))
             for hi, fi in zip(h1, f)]
    return h


def positions_naive(n, d):
    return [[math.sin(p / 10000 ** (i / d)) if i % 2 == 0
             else math.cos(p / 10000 ** ((i - 1) / d)) for i in range(d)]
            for p in range(n)]


def performance_naive(params, config, x):
    d = config.d_model
    pe = positions_naive(len(x), d)
    h = [[e + p for e, p in zip(_affine_row(list(row),
                                            params["score_embed.W"].tolist(),
                                            params["score_embed.b"].tolist()),
                                pe_row)]
         for row, pe_row in zip(x, pe)]
    h = encoder_naive(params, config.n_heads, config.n_blocks, h)
    return np.array([_affine_row(r, params["head.W"].tolist(),
                                 params["head.b"].tolist()) for r in h])
