"""End-to-end acceptance checks, one test per criterion."""

import json
import math
import time

import numpy as np

from eprkit.alignment import align, alignment_cost, quality_check
from eprkit.cli import main
from eprkit.dataset import TrainingPair, stretch
from eprkit.gem import (EvalPair, best_of_references, feature_metric,
                        gem_report)
from eprkit.midi_io import NoteSequence, parse_midi, write_midi
from eprkit.model import (ModelConfig, discriminator_backward,
                          discriminator_forward, init_discriminator_params,
                          init_performance_params, performance_backward,
                          performance_forward)
from eprkit.representation import (apply_scaler, decode, encode,
                                   fit_scaler, invert_scaler)
from eprkit.synthetic import make_performance, make_score, write_corpus
from eprkit.training import (PRED_FEATURES, EnsembleModel, TrainConfig,
                             discriminator_loss, params_digest,
                             performance_loss, predict_scaled, render,
                             render_tuples, train_pairs)

import oracles
from conftest import random_seq


def velocity_pair(e, h):
    n = len(e)
    base = np.column_stack([np.zeros(n), np.full(n, 0.5), np.full(n, 60.0)])
    return EvalPair.from_tuples(np.column_stack([base, e]),
                                np.column_stack([base, h]))


def test_criterion_01_gem_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    split_bests = 0
    for _ in range(1000):
        comps, raw = [], []
        for _ in range(int(rng.integers(1, 4))):
            pairs, arrays = [], []
            for _ in range(int(rng.integers(1, 4))):
                n = int(rng.integers(1, 31))
                e = rng.normal(64, 10, n)
                h = e * rng.uniform(-1, 1) + rng.normal(0, rng.uniform(0.1, 20), n)
                pairs.append(velocity_pair(e, h))
                arrays.append((e, h))
            comps.append(pairs)
            raw.append(arrays)
        split_bests += any(best_of_references(p, "velocity").l_index
                           != best_of_references(p, "velocity").p_index
                           for p in comps)
        l, p = feature_metric(comps, "velocity")
        l_ref, p_ref = oracles.gem_bruteforce(raw, "velocity")
        assert abs(l - l_ref) <= 1e-12 * max(1.0, abs(l_ref))
        assert abs(p - p_ref) <= 1e-12
    assert split_bests > 0
    assert time.perf_counter() - start < 30


def test_criterion_02_gem_self_evaluation():
    rng = np.random.default_rng(7)
    refs = {}
    for k in range(3):
        score = make_score(50, rng)
        refs[f"c{k}"] = [make_performance(score, rng) for _ in range(2)]
    for k in range(2):
        report = gem_report({c: r[k] for c, r in refs.items()},
                            {c: [r[k]] for c, r in refs.items()})
        for f in PRED_FEATURES:
            assert report.l[f] == 0.0
            assert abs(report.p[f] - 1.0) <= 1e-12
        assert report.match_percent == 100.0


def qc_verdict(drop=0, wrong_pitch=0, seed=0):
    rng = np.random.default_rng(seed)
    score = make_score(100, rng, chord_prob=0.0)
    perf = make_performance(score, rng, tempo_scale=1.1, drop=drop,
                            wrong_pitch=wrong_pitch)
    scaled = stretch(score, perf.span() / score.span())
    al = align(scaled, perf)
    return quality_check(al, len(scaled), len(perf)), al


def test_criterion_03_qc_thresholds():
    for seed in range(3):
        v, al = qc_verdict(drop=7, seed=seed)
        assert len(al.unmatched_a) == 7 and not v.keep
        v, al = qc_verdict(drop=6, seed=seed)
        assert len(al.unmatched_a) == 6 and v.keep
        v, al = qc_verdict(wrong_pitch=4, seed=seed)
        assert al.n_pairs == 100 and al.pitch_mismatch_count == 4
        assert not v.keep
        v, al = qc_verdict(wrong_pitch=3, seed=seed)
        assert al.pitch_mismatch_count == 3 and v.keep


def test_criterion_04_representation_roundtrips():
    rng = np.random.default_rng(11)
    corpus = []
    for _ in range(20):
        s = random_seq(rng, int(rng.integers(2, 80)))
        t = encode(s)
        back = decode(t, start=s.onsets[0])
        assert np.max(np.abs(back.onsets - s.onsets)) <= 1e-12
        assert np.max(np.abs(back.offsets - s.offsets)) <= 1e-12
        corpus.append(t)
    stats = fit_scaler(corpus)
    for t in corpus:
        back = invert_scaler(apply_scaler(t, stats), stats)
        assert np.max(np.abs(back.values - t.values)) <= 1e-12
    pooled = np.vstack([apply_scaler(t, stats).values for t in corpus])
    assert np.abs(pooled.mean(axis=0)).max() <= 1e-9
    assert np.abs(pooled.std(axis=0) - 1).max() <= 1e-9
    for tpqn in (96, 480, 960):
        s = random_seq(rng, 60)
        back = parse_midi(write_midi(s, tpqn))
        tick = 0.5 / tpqn
        key = lambda n: (n.pitch, n.velocity, n.onset)
        for a, b in zip(sorted(s, key=key), sorted(back, key=key)):
            assert a.pitch == b.pitch
            assert abs(a.onset - b.onset) <= tick
            assert abs(a.offset - b.offset) <= tick


def _probe_gradients(params, grads, loss, rng, count):
    names = sorted(params)
    sizes = np.array([params[k].size for k in names], dtype=float)
    picks = names + list(rng.choice(names, count - len(names),
                                    p=sizes / sizes.sum()))
    worst = 0.0
    for name in picks:
        idx = tuple(rng.integers(0, s) for s in params[name].shape)
        fd = oracles.central_difference(loss, params[name], idx, h=1e-5)
        worst = max(worst, oracles.rel_error(grads[name][idx], fd))
    return worst


def test_criterion_05_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    config = ModelConfig(d_model=8, d_ff=16, n_heads=2, n_blocks=2,
                         dropout=0.0, max_seq_len=16)
    xs, xh = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    human = xh[:, [0, 1, 3]]
    lam = (1.0, 3.0, 0.1, 0.1)
    gen = init_performance_params(config, rng)
    disc = init_discriminator_params(config, rng)

    def rendition(out):
        r = xs.copy()
        r[:, [0, 1, 3]] = out
        return r

    # performance network under the full generator loss, through the
    # discriminator into the rendition
    def gen_loss():
        out, _ = performance_forward(gen, config, xs)
        logits, _ = discriminator_forward(disc, config, xs, rendition(out))
        return performance_loss(logits, out, human, 2, lam)[0]

    out, g_cache = performance_forward(gen, config, xs)
    logits, d_cache = discriminator_forward(disc, config, xs, rendition(out))
    _, d_logits, d_out = performance_loss(logits, out, human, 2, lam)
    _, _, d_perf = discriminator_backward(disc, config, d_cache, d_logits)
    grads, _ = performance_backward(gen, config, g_cache,
                                    d_out + d_perf[:, [0, 1, 3]])
    worst_gen = _probe_gradients(gen, grads, gen_loss, rng, 200)

    # discriminator network under the discriminator loss
    fake = rendition(out)

    def disc_loss():
        lh, _ = discriminator_forward(disc, config, xs, xh)
        lr, _ = discriminator_forward(disc, config, xs, fake)
        return discriminator_loss(lh, lr, 2, 1.0, 1.0)[0]

    lh, ch = discriminator_forward(disc, config, xs, xh)
    lr, cr = discriminator_forward(disc, config, xs, fake)
    _, d_h, d_r = discriminator_loss(lh, lr, 2, 1.0, 1.0)
    gh = discriminator_backward(disc, config, ch, d_h)[0]
    gr = discriminator_backward(disc, config, cr, d_r)[0]
    dgrads = {k: gh[k] + gr[k] for k in gh}
    worst_disc = _probe_gradients(disc, dgrads, disc_loss, rng, 200)
    assert max(worst_gen, worst_disc) <= 1e-4
    assert time.perf_counter() - start < 120


def test_criterion_06_loss_constants():
    for c in (1, 2, 3):
        lam = (0.7, 3.0, 0.1, 0.1)
        h = np.random.default_rng(c).normal(size=(8, 3))
        loss = performance_loss(np.zeros(8), h, h, c, lam)[0]
        assert abs(loss - 0.7 * math.log(2) / c) <= 1e-12
        loss2 = performance_loss(np.zeros(8), h, h, 2 * c, lam)[0]
        assert loss2 == loss / 2
        d = discriminator_loss(np.zeros(8), np.zeros(8), c, 1.0, 0.5)[0]
        assert abs(d - 1.5 * math.log(2) / c) <= 1e-12
        d2 = discriminator_loss(np.zeros(8), np.zeros(8), 2 * c, 1.0, 0.5)[0]
        assert d2 == d / 2


def toy_pairs(rng, n_comps, n_notes):
    pairs = []
    for k in range(n_comps):
        score = make_score(n_notes, rng)
        perf = make_performance(score, rng, tempo_scale=1.1)
        pairs.append(TrainingPair(f"c{k}", "p0", encode(score), encode(perf),
                                  1))
    return pairs


def test_criterion_07_training_mechanics():
    rng = np.random.default_rng(3)
    train, val = toy_pairs(rng, 2, 30), toy_pairs(rng, 1, 30)
    scaler = fit_scaler([t for p in train for t in (p.score, p.performance)])
    config = ModelConfig(d_model=8, d_ff=16, n_heads=2, n_blocks=1,
                         dropout=0.1, max_seq_len=16)
    tc = TrainConfig(learning_rate=1e-3, max_epochs=20, patience=100,
                     disc_every_epochs=5)
    state, ens = train_pairs(train, val, scaler, config, tc)
    assert len(state.history) == 20
    assert state.disc_update_epochs == 4
    for f in PRED_FEATURES:
        bests = [r[f"best_val_{f}"] for r in state.history]
        assert all(b <= a for a, b in zip(bests, bests[1:]))
    again, ens2 = train_pairs(train, val, scaler, config, tc)
    assert params_digest(state.gen_params) == params_digest(again.gen_params)
    assert params_digest(state.disc_params) == params_digest(again.disc_params)
    for f in PRED_FEATURES:
        assert params_digest(ens.members[f]) == params_digest(ens2.members[f])


def test_criterion_08_overfit_smoke():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    train = toy_pairs(rng, 2, 90)
    assert sum(len(p.score) for p in train) <= 200
    scaler = fit_scaler([t for p in train for t in (p.score, p.performance)])
    config = ModelConfig(d_model=32, d_ff=64, n_heads=4, n_blocks=2,
                         dropout=0.0, max_seq_len=64)
    tc = TrainConfig(learning_rate=1e-3, lambdas=(0, 3, 0.1, 0.1, 0, 0),
                     max_epochs=500, patience=10 ** 6)
    state, _ = train_pairs(train, train, scaler, config, tc)
    first = state.history[0]["train_mse"]
    best = min(r["train_mse"] for r in state.history)
    assert best < 0.1 * first
    assert time.perf_counter() - start < 600


def test_criterion_09_render_contract():
    rng = np.random.default_rng(9)
    config = ModelConfig(d_model=8, d_ff=16, n_heads=2, n_blocks=1,
                         dropout=0.0, max_seq_len=16)
    members = {f: init_performance_params(config, 100 + k)
               for k, f in enumerate(PRED_FEATURES)}
    ens = EnsembleModel(config, members)
    score = make_score(50, rng)
    scaler = fit_scaler([encode(score), encode(make_performance(score, rng))])
    out = render(ens, scaler, score)
    assert len(out) == len(score)
    assert sorted(out.pitches) == sorted(score.pitches)
    assert (out.offsets >= out.onsets).all()
    assert ((out.velocities >= 1) & (out.velocities <= 127)).all()
    tuples = render_tuples(ens, scaler, score)
    assert (tuples.column("ioi") >= 0).all()
    assert (tuples.column("duration") >= 0).all()
    xs = apply_scaler(encode(score), scaler).values
    mean, std = np.array(scaler.mean), np.array(scaler.std)
    for k, (f, col) in enumerate(zip(PRED_FEATURES, (0, 1, 3))):
        raw = predict_scaled(members[f], config, xs)[:, k] * std[col] + mean[col]
        if f == "velocity":
            expected = np.clip(np.rint(raw), 1, 127)
        else:
            expected = np.maximum(raw, 0.0)
            if f == "ioi":
                expected[0] = 0.0
        assert np.max(np.abs(tuples.values[:, col] - expected)) <= 1e-9
        # and it is not what the other members would have produced
        for other in PRED_FEATURES:
            if other != f:
                alt = predict_scaled(members[other], config, xs)[:, k]
                assert not np.allclose(alt * std[col] + mean[col], raw)


def insert_notes(s, rng, k):
    lo, hi = s.onsets.min(), s.onsets.max()
    on = rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), k)
    extra = NoteSequence.from_arrays(on, on + 0.1, rng.integers(110, 128, k),
                                     [40] * k)
    return NoteSequence(s.notes + extra.notes)


def test_criterion_10_alignment_properties():
    rng = np.random.default_rng(10)
    for _ in range(50):
        n = int(rng.integers(5, 21))
        a = random_seq(rng, n)
        ident = align(a, a)
        assert ident.n_pairs == n and not ident.unmatched_b
        k = int(rng.integers(1, 26 - n)) if n < 25 else 0
        b = insert_notes(a, rng, k)
        al = align(a, b)
        assert len(al.unmatched_b) == k and not al.unmatched_a
        assert abs(alignment_cost(al, a, b) - oracles.dp_min_cost(a, b)) \
            <= 1e-9
        factor = rng.uniform(0.5, 2.0)
        assert align(a, stretch(a, factor)).n_pairs == n


def test_criterion_11_end_to_end(tmp_path, capsys):
    start = time.perf_counter()
    corpus = tmp_path / "corpus"
    write_corpus(corpus, n_compositions=10, n_performances=(2, 3),
                 n_notes=(40, 60), seed=11, bad_performances=1)
    data = tmp_path / "data"
    args = ["dataset", "build", "--root", str(corpus), "--out", str(data),
            "--ratios", "8:1:1", "--seed", "0"]
    assert main(args) == 0
    first = (data / "manifest.json").read_bytes()
    assert main(args) == 0
    assert (data / "manifest.json").read_bytes() == first

    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "model": {"d_model": 16, "d_ff": 32, "n_heads": 2, "n_blocks": 2,
                  "dropout": 0.1, "max_seq_len": 32},
        "train": {"learning_rate": 1e-3, "disc_every_epochs": 5}}))
    model = tmp_path / "model"
    assert main(["train", "--manifest", str(data / "manifest.json"),
                 "--config", str(config), "--out", str(model),
                 "--epochs", "5", "--seed", "0"]) == 0

    manifest = json.loads(first)
    test_ids = [c["id"] for c in manifest["compositions"]
                if c["split"] == "test"]
    rend = tmp_path / "renditions"
    scores = [str(corpus / cid / "score.mid") for cid in test_ids]
    assert main(["render", "--model", str(model), "--score", *scores,
                 "--out", str(rend)]) == 0

    refs = tmp_path / "refs"
    for cid in test_ids:
        (refs / cid).mkdir(parents=True)
        for perf in sorted((corpus / cid).glob("perf_0*.mid")):
            (refs / cid / perf.name).write_bytes(perf.read_bytes())
    report_path = tmp_path / "report.json"
    capsys.readouterr()
    assert main(["gem", "eval", "--renditions", str(rend), "--references",
                 str(refs), "--json", str(report_path)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[0] == "Model" and len(table) == 2
    report = json.loads(report_path.read_text())
    assert report["n_compositions"] == len(test_ids) >= 1
    for f in PRED_FEATURES:
        assert math.isfinite(report["l"][f]) and report["l"][f] >= 0
        assert -1 <= report["p"][f] <= 1
    assert 0 <= report["match_percent"] <= 100
    assert time.perf_counter() - start < 300
