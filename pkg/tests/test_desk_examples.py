"""Worked examples that need the trained desk model (shared with the acceptance tests)."""
import numpy as np

from conftest import desk_model
from dsvae.conversion import Converter
from dsvae.evaluation import held_out_segments
from dsvae.model import DSVAE


def recon_mse(model, segs):
    ms, mc = model.posterior_means(segs)
    return float(np.mean((model.decode_means(ms, mc) - segs) ** 2))


def test_training_reduces_recon_mse_tenfold(desk_ds, desk_cfg, trained_models):
    model, _ = desk_model(trained_models, desk_ds, desk_cfg, 10)
    untrained = DSVAE(model.cfg, seed=desk_cfg.train.seed)
    before, after = recon_mse(untrained, desk_ds.segments), recon_mse(model, desk_ds.segments)
    print(f"\ntraining-segment recon MSE: untrained {before:.4f}, trained {after:.4f}, ratio {before / after:.2f}")
    assert after * 10 <= before


def test_trained_reconstruction_tenfold_better_than_untrained(desk_ds, desk_cfg, trained_models):
    model, _ = desk_model(trained_models, desk_ds, desk_cfg, 10)
    untrained = DSVAE(model.cfg, seed=desk_cfg.train.seed)
    segs = held_out_segments(desk_ds)
    before, after = recon_mse(untrained, segs), recon_mse(model, segs)
    conv = Converter(model, desk_ds.feature_cfg)
    u = desk_ds.test[0]
    res = conv.reconstruct(u.frames, vocode=False)
    assert res.spectrogram.frames.shape == u.frames.shape
    print(f"\nheld-out recon MSE: untrained {before:.4f}, trained {after:.4f}, ratio {before / after:.2f}")
    assert after * 10 <= before


def test_same_speaker_targets_change_mu_s_little(desk_ds, desk_cfg, trained_models):
    model, _ = desk_model(trained_models, desk_ds, desk_cfg, 10)
    conv = Converter(model, desk_ds.feature_cfg)
    spk = {}
    for u in desk_ds.test:
        spk.setdefault(u.speaker_id, []).append(conv.speaker_embedding(u.frames))
    within = np.mean([np.linalg.norm(v[0] - v[1]) for v in spk.values()])
    between = np.mean([np.linalg.norm(a[0] - b[0]) for a in spk.values() for b in spk.values() if a is not b])
    assert within < 0.5 * between
    src = desk_ds.test[0].frames
    a = conv.convert(src, desk_ds.test[9].frames, vocode=False)
    b = conv.convert(src, desk_ds.test[8].frames, vocode=False)
    assert a.spectrogram.frames.shape == b.spectrogram.frames.shape == src.shape
