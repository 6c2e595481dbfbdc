import numpy as np
import pytest

from dsvae.autodiff.checkpoint import parse_config_text
from dsvae.config import ModelConfig, RunConfig, TrainConfig
from dsvae.conversion import ConversionRequest, Converter, convert, double_sided, file_sha256, reconstruct
from dsvae.dsp import FeatureConfig, load_features, read_wav, save_features
from dsvae.model import DSVAE, save_model
from dsvae.training import build_dataset

SEG = 10
FEAT = FeatureConfig()
MC = ModelConfig(feature_dim=FEAT.feature_dim, seg_len=SEG, shared_dim=8, enc_hidden=8, head_hidden=8,
                 dec_hidden=8, prior_hidden=8, speaker_dim=4, content_dim=4)


@pytest.fixture(scope="module")
def setup(tiny_corpus, tmp_path_factory):
    corpus, _ = tiny_corpus
    ds = build_dataset(corpus, FEAT, SEG)
    ckpt = tmp_path_factory.mktemp("conv") / "m.ckpt"
    save_model(ckpt, DSVAE(MC, seed=0), RunConfig(FEAT, MC, TrainConfig()), ds.feature_cfg)
    return corpus, ckpt, ds


def test_identity_conversion_equals_reconstruction(setup, tmp_path):
    corpus, ckpt, _ = setup
    src = corpus / "spk0_utt1.wav"
    a = convert(ConversionRequest(src, src, ckpt, tmp_path / "c.wav", iters=5))
    b = reconstruct(ConversionRequest(src, None, ckpt, tmp_path / "r.wav", iters=5))
    assert np.array_equal(a.spectrogram.frames, b.spectrogram.frames)
    assert np.array_equal(a.waveform.samples, b.waveform.samples)
    assert (tmp_path / "c.wav").read_bytes() == (tmp_path / "r.wav").read_bytes()


def test_frame_count_follows_source(setup):
    corpus, ckpt, _ = setup
    conv = Converter.from_checkpoint(ckpt)
    src = conv.frames(corpus / "spk0_utt1.wav")
    for tgt in ("spk1_utt2.wav", "spk2_utt0.wav"):
        res = conv.convert(corpus / "spk0_utt1.wav", corpus / tgt, vocode=False)
        assert res.spectrogram.frames.shape == src.shape
        assert res.n_segments == -(-src.shape[0] // SEG)


def test_padding_trimmed(setup):
    _, ckpt, _ = setup
    conv = Converter.from_checkpoint(ckpt)
    x = np.random.default_rng(0).normal(size=(SEG * 2 + 3, FEAT.feature_dim))
    out, k, padded = conv.convert_frames(x, x)
    assert out.shape == x.shape and k == 3 and not padded
    with pytest.warns(UserWarning, match="shorter than one segment"):
        out, k, padded = conv.convert_frames(x[:4], x)
    assert out.shape == (4, FEAT.feature_dim) and k == 1 and padded


def test_same_speaker_targets_move_mu_s_little(setup):
    corpus, ckpt, ds = setup
    conv = Converter.from_checkpoint(ckpt)
    e = {u: conv.speaker_embedding(conv.frames(corpus / f"{u}.wav"))
         for u in ("spk1_utt0", "spk1_utt1", "spk2_utt0")}
    assert np.all(np.isfinite(e["spk1_utt0"]))
    r1 = conv.convert(corpus / "spk0_utt0.wav", corpus / "spk1_utt0.wav", vocode=False)
    r2 = conv.convert(corpus / "spk0_utt0.wav", corpus / "spk1_utt1.wav", vocode=False)
    assert r1.spectrogram.frames.shape == r2.spectrogram.frames.shape


def test_metadata_sidecar(setup, tmp_path):
    corpus, ckpt, _ = setup
    out = tmp_path / "o.wav"
    res = convert(ConversionRequest(corpus / "spk0_utt1.wav", corpus / "spk1_utt1.wav", ckpt, out, iters=3,
                                    feature_output=tmp_path / "o.feat"))
    meta = parse_config_text((tmp_path / "o.wav.meta").read_text())
    assert float(meta["mse"]) == res.mse
    assert int(meta["segments"]) == res.n_segments
    assert meta["checkpoint_sha256"] == file_sha256(ckpt)
    assert np.array_equal(load_features(tmp_path / "o.feat"), res.spectrogram.frames)
    w = read_wav(out)
    assert w.sample_rate == FEAT.sample_rate
    assert len(w) == res.spectrogram.n_frames * FEAT.hop_length


def test_reconstruction_mse_matches_manual(setup):
    corpus, ckpt, _ = setup
    conv = Converter.from_checkpoint(ckpt)
    x = conv.frames(corpus / "spk2_utt3.wav")
    res = conv.reconstruct(corpus / "spk2_utt3.wav", vocode=False)
    assert res.mse == float(np.mean((res.spectrogram.frames - x) ** 2))


def test_feature_file_input_equals_wav_input(setup, tmp_path):
    corpus, ckpt, _ = setup
    conv = Converter.from_checkpoint(ckpt)
    x = conv.frames(corpus / "spk0_utt2.wav")
    save_features(tmp_path / "u.feat", x)
    a = conv.convert(corpus / "spk0_utt2.wav", corpus / "spk1_utt0.wav", vocode=False)
    b = conv.convert(tmp_path / "u.feat", corpus / "spk1_utt0.wav", vocode=False)
    assert np.array_equal(a.spectrogram.frames, b.spectrogram.frames)


def test_output_must_differ_from_source(setup):
    corpus, ckpt, _ = setup
    src = corpus / "spk0_utt1.wav"
    with pytest.raises(ValueError, match="differ"):
        ConversionRequest(src, src, ckpt, src)


def test_incompatible_dims_fail_before_audio_work(setup, tmp_path):
    corpus, ckpt, _ = setup
    conv = Converter.from_checkpoint(ckpt)
    save_features(tmp_path / "bad.feat", np.zeros((30, 7)))
    with pytest.raises(ValueError, match="feature_dim"):
        conv.convert(tmp_path / "bad.feat", corpus / "spk1_utt0.wav")
    with pytest.raises(ValueError, match="feature_dim"):
        Converter(conv.model, FeatureConfig(64, 16, 1024, 80, "mel", 16000))


def test_sample_rate_mismatch(setup, tmp_path):
    from dsvae.dsp import Waveform, write_wav
    _, ckpt, _ = setup
    write_wav(tmp_path / "w.wav", Waveform(np.zeros(8000), 8000))
    with pytest.raises(ValueError, match="sample rate"):
        Converter.from_checkpoint(ckpt).frames(tmp_path / "w.wav")


def test_conversion_deterministic(setup, tmp_path):
    corpus, ckpt, _ = setup
    req = lambda o: ConversionRequest(corpus / "spk0_utt1.wav", corpus / "spk2_utt1.wav", ckpt, o, iters=4)  # noqa
    convert(req(tmp_path / "a.wav"))
    convert(req(tmp_path / "b.wav"))
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_double_sided_harness(setup, tmp_path):
    corpus, ckpt, _ = setup
    conv = Converter.from_checkpoint(ckpt)
    paths = double_sided(conv, corpus / "spk0_utt1.wav", corpus / "spk1_utt1.wav", tmp_path, iters=2)
    assert set(paths) == {"recon_a", "recon_b", "a_content_b_speaker", "b_content_a_speaker"}
    na = conv.frames(corpus / "spk0_utt1.wav").shape
    assert load_features(paths["a_content_b_speaker"]).shape == na
    assert np.array_equal(load_features(paths["recon_a"]),
                          conv.reconstruct(corpus / "spk0_utt1.wav", vocode=False).spectrogram.frames)
