"""Synthetic speech-like corpus with known speaker and content factors.

Each speaker owns a fixed log-spectral envelope (a few random resonances plus
a tilt). Each utterance is a harmonic source with its own f0 contour and two
moving "formant" bumps, shaped by the speaker envelope. The speaker factor is
therefore time-invariant and the content factor time-varying, which is the
structure the model is meant to separate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import Waveform, write_wav

NOISE_CATEGORIES = ("noise", "music", "babble")


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_speakers: int = 8
    utts_per_speaker: int = 50
    duration_s: float = 1.0
    sample_rate: int = 16000
    n_resonances: int = 5
    noise_floor: float = 1e-3
    content_depth_db: float = 8.0
    max_envelope_corr: float = 0.75

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.utts_per_speaker < 1 or self.duration_s <= 0:
            raise ValueError("utts_per_speaker and duration_s must be positive")


@dataclass
class SpeakerEnvelope:
    centers_hz: list
    widths_oct: list
    gains_db: list
    tilt_db_per_oct: float

    def log_gain(self, freq: np.ndarray) -> np.ndarray:
        """Natural-log amplitude gain at ``freq`` Hz."""
        octv = np.log2(np.maximum(freq, 50.0) / 1000.0)
        db = self.tilt_db_per_oct * octv
        for c, w, g in zip(self.centers_hz, self.widths_oct, self.gains_db):
            db = db + g * np.exp(-0.5 * ((octv - np.log2(c / 1000.0)) / w) ** 2)
        return db * np.log(10) / 20


def random_envelope(rng: np.random.Generator, n_res: int) -> SpeakerEnvelope:
    # resonances spread over log frequency so envelopes differ in shape, not just level
    centers = np.sort(np.exp(rng.uniform(np.log(250), np.log(6500), n_res)))
    return SpeakerEnvelope(
        centers_hz=[float(c) for c in centers],
        widths_oct=[float(w) for w in rng.uniform(0.15, 0.45, n_res)],
        gains_db=[float(g) for g in rng.uniform(8, 22, n_res) * rng.choice([-1, 1], n_res, p=[0.3, 0.7])],
        tilt_db_per_oct=float(rng.uniform(-9, -3)),
    )


def speaker_envelopes(rng: np.random.Generator, spec: SynthCorpusSpec) -> list[SpeakerEnvelope]:
    """Rejection-sample envelopes that have real shape and are mutually distinct."""
    grid = np.geomspace(100, 7500, 200)
    envs, curves = [], []
    while len(envs) < spec.n_speakers:
        env = random_envelope(rng, spec.n_resonances)
        curve = env.log_gain(grid) * 20 / np.log(10)
        if np.std(curve) < 10.0:
            continue
        if any(np.corrcoef(curve, c)[0, 1] > spec.max_envelope_corr for c in curves):
            continue
        envs.append(env)
        curves.append(curve)
    return envs


def _smooth_path(rng, n_samples, n_knots, lo, hi):
    knots = rng.uniform(lo, hi, n_knots)
    return np.interp(np.arange(n_samples), np.linspace(0, n_samples - 1, n_knots), knots)


def render_utterance(env: SpeakerEnvelope, rng: np.random.Generator, spec: SynthCorpusSpec):
    """Returns ``(samples, content_factors)``."""
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    knots = max(3, int(spec.duration_s * 12))
    f0 = _smooth_path(rng, n, knots, 90, 260)
    formants = np.stack([_smooth_path(rng, n, 2 * knots, 300, 1000), _smooth_path(rng, n, 2 * knots, 900, 3000)])
    am = 0.35 + 0.65 * np.abs(np.sin(np.pi * np.cumsum(_smooth_path(rng, n, knots, 2, 6)) / sr))

    # harmonic amplitudes at a 200 Hz control rate, interpolated to audio rate
    ctl = np.arange(0, n, sr // 200)
    n_harm = int((sr / 2 - 500) // 90)
    fk = np.arange(1, n_harm + 1)[:, None] * f0[ctl]
    bumps = np.exp(-0.5 * ((fk[None] - formants[:, None, ctl])
                           / (0.12 * formants[:, None, ctl] + 60)) ** 2).sum(axis=0)
    log_amp = env.log_gain(fk) + spec.content_depth_db * np.log(10) / 20 * bumps
    amp_ctl = np.exp(log_amp) * (fk < sr / 2 - 500)
    idx = np.arange(n)
    phase = np.cumsum(2 * np.pi * f0 / sr)
    out = np.zeros(n)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    for k in range(n_harm):
        out += np.interp(idx, ctl, amp_ctl[k]) * np.sin((k + 1) * phase + offsets[k])
    out *= am
    out += spec.noise_floor * np.std(out) * rng.standard_normal(n)
    out *= 0.5 / np.max(np.abs(out))
    factors = {
        "f0_mean_hz": float(f0.mean()),
        "formant1_mean_hz": float(formants[0].mean()),
        "formant2_mean_hz": float(formants[1].mean()),
    }
    return out, factors


def synth_corpus(out_dir, spec: SynthCorpusSpec = SynthCorpusSpec(), seed: int = 0) -> Path:
    """Write ``spk<i>_utt<j>.wav`` files plus ``manifest.json`` with the ground-truth factors."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng(seed)
    speakers = speaker_envelopes(root, spec)
    manifest = {"spec": asdict(spec), "seed": seed, "speakers": {}, "utterances": []}
    for i, env in enumerate(speakers):
        sid = f"spk{i}"
        manifest["speakers"][sid] = asdict(env)
        for j in range(spec.utts_per_speaker):
            rng = np.random.default_rng([seed, i, j])
            samples, factors = render_utterance(env, rng, spec)
            name = f"{sid}_utt{j}.wav"
            write_wav(out / name, Waveform(samples, spec.sample_rate))
            manifest["utterances"].append({"utt_id": f"{sid}_utt{j}", "speaker_id": sid,
                                           "file": name, **factors})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out


def synth_noise(out_dir, n_per_category: int = 6, duration_s: float = 2.0, sample_rate: int = 16000,
                seed: int = 0) -> Path:
    """Noise bank with one subdirectory per category: noise, music, babble."""
    out = Path(out_dir)
    n = int(duration_s * sample_rate)
    t = np.arange(n) / sample_rate
    babble_spec = SynthCorpusSpec(n_speakers=2, utts_per_speaker=1, duration_s=duration_s,
                                  sample_rate=sample_rate)
    for cat in NOISE_CATEGORIES:
        (out / cat).mkdir(parents=True, exist_ok=True)
        for j in range(n_per_category):
            rng = np.random.default_rng([seed, NOISE_CATEGORIES.index(cat), j])
            if cat == "noise":
                white = rng.standard_normal(n)
                # random spectral colour between white and pink
                spec = np.fft.rfft(white)
                f = np.fft.rfftfreq(n, 1 / sample_rate)
                spec /= np.maximum(f, 20.0) ** rng.uniform(0, 0.5)
                x = np.fft.irfft(spec, n)
            elif cat == "music":
                x = np.zeros(n)
                note_len = int(rng.uniform(0.15, 0.4) * sample_rate)
                for start in range(0, n, note_len):
                    seg = slice(start, min(n, start + note_len))
                    for _ in range(3):
                        f = 110 * 2 ** (rng.integers(0, 36) / 12)
                        decay = np.exp(-np.arange(seg.stop - seg.start) / (0.3 * sample_rate))
                        for h in range(1, 5):
                            x[seg] += decay * np.sin(2 * np.pi * h * f * t[seg]) / h
            else:
                x = np.zeros(n)
                for _ in range(5):
                    env = random_envelope(rng, 4)
                    x += render_utterance(env, rng, babble_spec)[0]
            x = 0.3 * x / np.max(np.abs(x))
            write_wav(out / cat / f"{cat}{j}.wav", Waveform(x, sample_rate))
    return out
