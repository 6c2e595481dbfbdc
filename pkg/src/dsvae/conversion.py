"""Zero-shot conversion: source content latents decoded with a target speaker embedding."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import format_config
from .dsp import (
    FeatureConfig, MelFilterbank, Spectrogram, Waveform, invert_features, load_features, log_features,
    mel_filterbank, normalize, read_wav, save_features, segment, write_wav,
)
from .evaluation import utterance_segments
from .model import DSVAE, load_model

FEATURE_SUFFIXES = (".feat", ".dsfeat")


@dataclass
class ConversionRequest:
    source: object  # path to .wav / DSFEAT1 file, Waveform, or normalized T x d frames
    target: object
    checkpoint: object
    output: object = None
    iters: int = 100
    feature_output: object = None

    def __post_init__(self):
        if self.output is not None and isinstance(self.source, (str, Path)):
            if Path(self.source).resolve() == Path(self.output).resolve():
                raise ValueError("output path must differ from the source utterance")


@dataclass
class ConversionResult:
    waveform: Waveform | None
    spectrogram: Spectrogram
    n_segments: int
    mse: float
    padded: bool = False


class Converter:
    """A trained model plus its feature pipeline; read-only, so safe to share across threads."""

    def __init__(self, model: DSVAE, feature_cfg: FeatureConfig, checkpoint_hash: str = ""):
        if model.cfg.feature_dim != feature_cfg.feature_dim:
            raise ValueError(f"checkpoint feature_dim {model.cfg.feature_dim} != features "
                             f"{feature_cfg.feature_dim}")
        self.model = model
        self.feature_cfg = feature_cfg
        self.checkpoint_hash = checkpoint_hash
        self.filterbank: MelFilterbank | None = (
            mel_filterbank(feature_cfg) if feature_cfg.feature_kind == "mel" else None)

    @classmethod
    def from_checkpoint(cls, path) -> "Converter":
        model, _, fcfg = load_model(path)
        return cls(model, fcfg, file_sha256(path))

    # -- inputs --------------------------------------------------------------------
    def frames(self, utt) -> np.ndarray:
        """Normalized model-space frames from a path, waveform or frame array."""
        cfg = self.feature_cfg
        if isinstance(utt, (str, Path)):
            p = Path(utt)
            if p.suffix.lower() in FEATURE_SUFFIXES:
                frames = load_features(p)
            else:
                utt = read_wav(p)
        if isinstance(utt, Waveform):
            if utt.sample_rate != cfg.sample_rate:
                raise ValueError(f"sample rate {utt.sample_rate} != checkpoint rate {cfg.sample_rate}")
            frames = normalize(log_features(utt, cfg, self.filterbank), cfg)
        elif not isinstance(utt, (str, Path)):
            frames = np.asarray(utt, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != cfg.feature_dim:
            raise ValueError(f"features of shape {frames.shape} do not match feature_dim {cfg.feature_dim}")
        return frames

    def speaker_embedding(self, frames: np.ndarray) -> np.ndarray:
        segs, _ = utterance_segments(frames, self.model.cfg.seg_len)
        return self.model.posterior_means(segs)[0].mean(axis=0)

    # -- conversion ------------------------------------------------------------------
    def convert_frames(self, src: np.ndarray, tgt: np.ndarray) -> tuple[np.ndarray, int, bool]:
        """Decode every source segment's content means with the target's pooled speaker mean."""
        mu_s = self.speaker_embedding(tgt)
        parts = segment(src, self.model.cfg.seg_len, mode="inference")
        _, z_c = self.model.posterior_means(parts.segments)
        z_s = np.broadcast_to(mu_s, (len(parts), mu_s.shape[0]))
        decoded = self.model.decode_means(np.ascontiguousarray(z_s), z_c)
        joined = decoded.reshape(-1, decoded.shape[-1])[:parts.true_length]
        return joined, len(parts), parts.padded

    def convert(self, source, target, iters: int = 100, vocode: bool = True) -> ConversionResult:
        src, tgt = self.frames(source), self.frames(target)
        out, k, padded = self.convert_frames(src, tgt)
        spec = Spectrogram(out, self.feature_cfg)
        wav = invert_features(spec, self.filterbank, iters) if vocode else None
        return ConversionResult(wav, spec, k, float(np.mean((out - src) ** 2)), padded)

    def reconstruct(self, utt, iters: int = 100, vocode: bool = True) -> ConversionResult:
        return self.convert(utt, utt, iters, vocode)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_outputs(result: ConversionResult, output, feature_output=None, meta: dict | None = None) -> None:
    """WAV (PCM16), optional DSFEAT1 dump, and a key=value sidecar ``<output>.meta``."""
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    gain = 1.0
    if result.waveform is not None:
        peak = float(np.max(np.abs(result.waveform.samples), initial=0.0))
        gain = 0.99 / peak if peak > 0.99 else 1.0
        write_wav(out, Waveform(result.waveform.samples * gain, result.waveform.sample_rate))
    if feature_output is not None:
        save_features(feature_output, result.spectrogram.frames)
    info = {"mse": repr(result.mse), "segments": str(result.n_segments),
            "frames": str(result.spectrogram.n_frames), "padded": str(result.padded).lower(),
            "output_gain": repr(gain)}
    info.update(meta or {})
    Path(str(out) + ".meta").write_text(format_config(info), encoding="utf-8")


def run_request(req: ConversionRequest, reconstruct_only: bool = False) -> ConversionResult:
    conv = Converter.from_checkpoint(req.checkpoint)
    # validate both inputs before any decoding or vocoder work
    conv.frames(req.source)
    target = req.source if reconstruct_only else req.target
    conv.frames(target)
    res = conv.convert(req.source, target, req.iters)
    if req.output is not None:
        write_outputs(res, req.output, req.feature_output, {
            "checkpoint_sha256": conv.checkpoint_hash,
            "source": str(req.source), "target": str(target), "griffin_lim_iters": str(req.iters),
            "mode": "reconstruct" if reconstruct_only else "convert",
        })
    return res


def convert(req: ConversionRequest) -> ConversionResult:
    return run_request(req)


def reconstruct(req: ConversionRequest) -> ConversionResult:
    return run_request(req, reconstruct_only=True)


def double_sided(conv: Converter, utt_a, utt_b, out_dir, iters: int = 100) -> dict[str, Path]:
    """Reconstructions and both cross-conversions of a pair, dumped as DSFEAT1 (plus WAV)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = {"recon_a": (utt_a, utt_a), "recon_b": (utt_b, utt_b),
            "a_content_b_speaker": (utt_a, utt_b), "b_content_a_speaker": (utt_b, utt_a)}
    paths = {}
    for name, (src, tgt) in jobs.items():
        res = conv.convert(src, tgt, iters)
        paths[name] = out / f"{name}.feat"
        write_outputs(res, out / f"{name}.wav", paths[name], {"checkpoint_sha256": conv.checkpoint_hash})
    return paths
