import itertools
import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsvae.evaluation import (
    SWEEP_HEADER, SweepRow, Trial, UtteranceEmbedding, compute_eer, cosine, embed_frames, extract_embeddings,
    generate_trials, read_embeddings_csv, read_sweep_tsv, read_trials, score_trials, sweep_beta_alpha,
    sv_eer, write_embeddings_csv, write_trials,
)
from dsvae.model import DSVAE, ModelConfig


def brute_force_eer(scores, labels):
    """Exhaustive threshold sweep with explicit loops; interpolate at the first sign change."""
    scores = [float(s) for s in scores]
    labels = [bool(x) for x in labels]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    thresholds = [-np.inf] + sorted(set(scores)) + [np.inf]
    pts = []
    for th in thresholds:
        fr = sum(1 for s, y in zip(scores, labels) if y and s < th) / n_t
        fa = sum(1 for s, y in zip(scores, labels) if not y and s >= th) / n_n
        pts.append((fr, fa))
    for i, (fr, fa) in enumerate(pts):
        if fr == fa:
            return fa
        if fr > fa:
            fr0, fa0 = pts[i - 1]
            # crossing of the segment (fa0, fr0)-(fa, fr) with the diagonal
            d0, d1 = fr0 - fa0, fr - fa
            w = -d0 / (d1 - d0)
            return fa0 + w * (fa - fa0)
    raise AssertionError("no crossing")


# -- EER --------------------------------------------------------------------------------

def test_eer_worked_example_is_one_third():
    r = compute_eer([0.9, 0.7, 0.6, 0.8, 0.4, 0.3], [1, 1, 1, 0, 0, 0])
    assert r.eer == 1 / 3
    assert (r.n_target, r.n_nontarget) == (3, 3)


def test_eer_separated_and_reversed():
    assert compute_eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]).eer == 0.0
    assert compute_eer([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]).eer == 1.0


def test_eer_single_class_raises():
    with pytest.raises(ValueError):
        compute_eer([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        compute_eer([0.1, 0.2], [0, 0])


def test_eer_matches_brute_force_on_500_random_sets():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for i in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 1, 0
        if i % 3 == 0:
            scores = rng.integers(0, 6, n) / 5.0  # heavy ties
        else:
            scores = rng.normal(size=n) + 0.8 * labels * rng.uniform(0, 2)
        got = compute_eer(scores, labels).eer
        assert abs(got - brute_force_eer(scores, labels)) <= 1e-9, i
    assert time.perf_counter() - t0 < 10


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-80, 80), min_size=4, max_size=40), st.integers(0, 2 ** 31))
def test_eer_invariant_to_increasing_transform(ticks, seed):
    # grid scores so the transforms stay strictly increasing in floating point
    scores = np.array(ticks) / 16.0
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[0], labels[1] = 1, 0
    a = compute_eer(scores, labels).eer
    b = compute_eer(np.exp(scores) * 3 + 1, labels).eer
    c = compute_eer(np.arctan(scores), labels).eer
    assert a == pytest.approx(b, abs=1e-12) and a == pytest.approx(c, abs=1e-12)


def test_eer_in_unit_interval_and_threshold_finite_when_possible():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = rng.normal(size=30)
        y = rng.integers(0, 2, 30)
        y[:2] = [0, 1]
        r = compute_eer(s, y)
        assert 0 <= r.eer <= 1


# -- scoring and trials -------------------------------------------------------------------

def emb(uid, spk, s, c=None):
    s = np.asarray(s, dtype=float)
    return UtteranceEmbedding(uid, spk, s, np.asarray(c if c is not None else s, dtype=float))


def test_cosine_examples():
    assert cosine(np.array([1.0, 0]), np.array([2.0, 0])) == 1.0
    assert cosine(np.array([1.0, 0]), np.array([-3.0, 0])) == -1.0
    assert cosine(np.array([1.0, 0]), np.array([0, 5.0])) == 0.0


def test_score_trials_missing_id_listed():
    es = [emb("a", "x", [1, 0]), emb("b", "y", [0, 1])]
    with pytest.raises(KeyError, match="ghost"):
        score_trials(es, [Trial(1, "a", "ghost")])


def test_score_trials_selects_embedding():
    es = [emb("a", "x", [1, 0], [1, 0]), emb("b", "y", [1, 0], [0, 1])]
    t = [Trial(0, "a", "b")]
    assert score_trials(es, t, "speaker")[0] == 1.0
    assert score_trials(es, t, "content")[0] == 0.0


def test_trial_rejects_self_pair():
    with pytest.raises(ValueError):
        Trial(1, "a", "a")


def test_all_pairs_counts():
    es = [emb(f"s{s}_u{u}", f"s{s}", [s + 1, u]) for s in range(3) for u in range(4)]
    trials = generate_trials(es)
    assert len(trials) == 12 * 11 // 2
    assert sum(t.label for t in trials) == 3 * (4 * 3 // 2)
    assert len({(t.utt_a, t.utt_b) for t in trials}) == len(trials)


def test_balanced_counts_and_errors():
    es = [emb(f"s{s}_u{u}", f"s{s}", [s + 1, u]) for s in range(3) for u in range(4)]
    tr = generate_trials(es, "balanced", 7, np.random.default_rng(0))
    assert sum(t.label for t in tr) == 7 and len(tr) == 14
    with pytest.raises(ValueError):
        generate_trials(es[:1])
    with pytest.raises(ValueError):
        generate_trials(es[:4])  # one speaker


def test_sv_eer_on_clustered_embeddings_is_zero():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 16)) * 5
    es = [emb(f"{s}_{u}", str(s), centers[s] + 0.1 * rng.normal(size=16)) for s in range(4) for u in range(5)]
    assert sv_eer(es).eer == 0.0


# -- pooling --------------------------------------------------------------------------------

SMALL = ModelConfig(feature_dim=5, seg_len=4, shared_dim=6, enc_hidden=6, head_hidden=6, dec_hidden=6,
                    prior_hidden=6, speaker_dim=3, content_dim=3, alpha=1.0, beta=10.0)


class Utt:
    def __init__(self, uid, spk, frames):
        self.utt_id, self.speaker_id, self.frames = uid, spk, frames


def test_single_segment_speaker_mean_is_its_posterior_mean():
    m = DSVAE(SMALL, seed=0)
    x = np.random.default_rng(1).normal(size=(4, 5))
    mu_s, mu_c, padded, k = embed_frames(m, x)
    ms, mc = m.posterior_means(x[None])
    assert k == 1 and not padded
    np.testing.assert_array_equal(mu_s, ms[0])
    np.testing.assert_allclose(mu_c, mc[0].mean(axis=0), rtol=0, atol=1e-15)
    assert mu_s.shape == (3,) and mu_c.shape == (3,)


def test_two_segments_average():
    m = DSVAE(SMALL, seed=0)
    x = np.random.default_rng(2).normal(size=(8, 5))
    mu_s, _, _, k = embed_frames(m, x)
    v = m.posterior_means(x[None, :4])[0][0]
    w = m.posterior_means(x[None, 4:])[0][0]
    assert k == 2
    np.testing.assert_allclose(mu_s, (v + w) / 2, rtol=1e-13, atol=1e-15)


def test_pooling_invariant_to_segment_order_and_duplication():
    m = DSVAE(SMALL, seed=0)
    x = np.random.default_rng(3).normal(size=(12, 5))
    base = embed_frames(m, x)
    swapped = np.concatenate([x[8:], x[:4], x[4:8]])
    doubled = np.concatenate([x[:4], x[:4], x[4:8], x[4:8], x[8:], x[8:]])
    for other in (embed_frames(m, swapped), embed_frames(m, doubled)):
        np.testing.assert_allclose(other[0], base[0], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(other[1], base[1], rtol=1e-12, atol=1e-15)


def test_short_utterance_padded_and_flagged():
    m = DSVAE(SMALL, seed=0)
    es = extract_embeddings([Utt("u", "s", np.zeros((2, 5)))], m)
    assert es[0].padded and es[0].n_segments == 1 and np.all(np.isfinite(es[0].mu_s))


# -- file formats ----------------------------------------------------------------------------

def test_trials_round_trip(tmp_path):
    trials = [Trial(1, "a_1", "a_2"), Trial(0, "a_1", "b_7")]
    write_trials(tmp_path / "t.txt", trials)
    assert (tmp_path / "t.txt").read_text() == "1 a_1 a_2\n0 a_1 b_7\n"
    assert read_trials(tmp_path / "t.txt") == trials


def test_trials_bad_line(tmp_path):
    (tmp_path / "t.txt").write_text("2 a b\n")
    with pytest.raises(ValueError, match=":1:"):
        read_trials(tmp_path / "t.txt")


def test_embedding_csv_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    es = [UtteranceEmbedding(f"u{i}", f"s{i % 2}", rng.normal(size=64), rng.normal(size=64) * 1e-7)
          for i in range(5)]
    for which in ("speaker", "content"):
        p = tmp_path / f"{which}.csv"
        write_embeddings_csv(p, es, which)
        header = p.read_text().splitlines()[0]
        assert header == "utt_id,speaker_id," + ",".join(f"e{i}" for i in range(64))
        back = read_embeddings_csv(p, which)
        for a, b in zip(es, back):
            assert (a.utt_id, a.speaker_id) == (b.utt_id, b.speaker_id)
            want = a.mu_s if which == "speaker" else a.mu_c
            got = b.mu_s if which == "speaker" else b.mu_c
            assert np.array_equal(want, got)


def test_sweep_tsv_round_trip_and_sum_column(tmp_path):
    class Fake:
        pass

    calls = []

    def fake_train(ds, cfg):
        calls.append(cfg.model.beta)
        return "model"

    import dsvae.evaluation as ev

    def fake_eval(model, ds, seed):
        b = calls[-1]
        rep = Fake()
        rep.kl_speaker, rep.kl_content, rep.recon_nll = 0.1 * b, 1.0 / (3 * b), 2.0 + b / 7
        return rep, 0.01 * b, 0.5 - 0.001 * b

    from dsvae.config import load_config
    cfg = load_config("timit_desk")
    orig = ev.evaluate_model
    ev.evaluate_model = fake_eval
    try:
        rows = sweep_beta_alpha([1, 10, 100], None, cfg, tmp_path / "s.tsv", train_fn=fake_train)
    finally:
        ev.evaluate_model = orig
    assert calls == [1.0 * cfg.model.alpha, 10.0 * cfg.model.alpha, 100.0 * cfg.model.alpha]
    back = read_sweep_tsv(tmp_path / "s.tsv")
    assert back == rows
    assert (tmp_path / "s.tsv").read_text().splitlines()[0].split("\t") == list(SWEEP_HEADER)
    for r in back:
        assert abs(r.kl_sum - (r.kl_speaker + r.kl_content)) <= 1e-12


def test_sweep_records_failed_ratio(tmp_path):
    from dsvae.config import load_config
    from dsvae.training import TrainingDiverged

    def boom(ds, cfg):
        raise TrainingDiverged("nan", None)

    rows = sweep_beta_alpha([5], None, load_config("timit_desk"), tmp_path / "s.tsv", train_fn=boom)
    assert rows[0].status == "failed"
    assert read_sweep_tsv(tmp_path / "s.tsv")[0].status == "failed"


# -- synthetic corpus ------------------------------------------------------------------------

def test_synth_corpus_deterministic(tmp_path):
    from dsvae.synth import SynthCorpusSpec, synth_corpus

    spec = SynthCorpusSpec(n_speakers=2, utts_per_speaker=2, duration_s=0.3)
    a = synth_corpus(tmp_path / "a", spec, seed=3)
    b = synth_corpus(tmp_path / "b", spec, seed=3)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert len([n for n in names if n.endswith(".wav")]) == 4
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert {u["speaker_id"] for u in manifest["utterances"]} == {"spk0", "spk1"}


def test_synth_spec_validation():
    from dsvae.synth import SynthCorpusSpec

    with pytest.raises(ValueError):
        SynthCorpusSpec(n_speakers=1)


def test_synth_speaker_envelopes_distinct():
    from dsvae.synth import SynthCorpusSpec, speaker_envelopes

    spec = SynthCorpusSpec()
    envs = speaker_envelopes(np.random.default_rng(0), spec)
    grid = np.geomspace(100, 7500, 200)
    curves = [e.log_gain(grid) for e in envs]
    for a, b in itertools.combinations(curves, 2):
        assert np.corrcoef(a, b)[0, 1] <= spec.max_envelope_corr


def test_synth_speaker_identity_in_long_term_spectrum():
    """Long-term average log spectra cluster by speaker: the timbre factor is really per-speaker."""
    from dsvae.dsp import FeatureConfig, log_features
    from dsvae.synth import SynthCorpusSpec, render_utterance, speaker_envelopes

    spec = SynthCorpusSpec(n_speakers=4)
    envs = speaker_envelopes(np.random.default_rng(1), spec)
    cfg = FeatureConfig()
    from dsvae.dsp import Waveform
    ltas = {}
    for i, env in enumerate(envs):
        for j in range(4):
            x, _ = render_utterance(env, np.random.default_rng([1, i, j]), spec)
            ltas[(i, j)] = log_features(Waveform(x, spec.sample_rate), cfg).mean(axis=0)
    same = [np.corrcoef(ltas[(i, a)], ltas[(i, b)])[0, 1]
            for i in range(4) for a, b in itertools.combinations(range(4), 2)]
    diff = [np.corrcoef(ltas[(i, 0)], ltas[(k, 0)])[0, 1] for i, k in itertools.combinations(range(4), 2)]
    assert np.mean(same) > 0.95
    assert max(diff) < 0.9
    assert np.mean(same) > max(diff)
