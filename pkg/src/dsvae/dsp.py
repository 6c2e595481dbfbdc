"""Audio I/O, STFT / mel features, Griffin-Lim inversion, segmentation and SNR mixing."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from scipy.io import wavfile

LOG_FLOOR = 1e-5
FEATURE_KINDS = ("stft_magnitude", "mel")
FEAT_MAGIC = b"DSFEAT1"


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FeatureConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    feature_dim: int = 200
    feature_kind: str = "stft_magnitude"
    sample_rate: int = 16000
    norm_mean: np.ndarray | None = field(default=None, compare=False, repr=False)
    norm_std: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValueError(f"feature_kind must be one of {FEATURE_KINDS}")
        if self.hop_ms > self.win_ms:
            raise ValueError("hop_ms must not exceed win_ms")
        if self.fft_size & (self.fft_size - 1) or self.fft_size < self.win_length:
            raise ValueError("fft_size must be a power of two >= window length in samples")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.feature_kind == "stft_magnitude" and self.feature_dim > self.n_bins:
            raise ValueError(f"feature_dim {self.feature_dim} exceeds {self.n_bins} STFT bins")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def normalized(self) -> bool:
        return self.norm_mean is not None

    def with_normalization(self, mean: np.ndarray, std: np.ndarray) -> "FeatureConfig":
        return replace(self, norm_mean=np.asarray(mean, dtype=np.float64),
                       norm_std=np.asarray(std, dtype=np.float64))


@dataclass(frozen=True)
class Spectrogram:
    frames: np.ndarray
    config: FeatureConfig

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", f)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"spectrogram must be T x d with T >= 1, got {f.shape}")
        if f.shape[1] != self.config.feature_dim:
            raise ValueError(f"frame dim {f.shape[1]} != feature_dim {self.config.feature_dim}")
        if not np.all(np.isfinite(f)):
            raise ValueError("spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    pseudo_inverse: np.ndarray

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class NoiseMixSpec:
    snr_db_min: float = 3.0
    snr_db_max: float = 10.0
    categories: tuple[str, ...] = ("noise", "music", "babble")

    def __post_init__(self):
        if self.snr_db_min > self.snr_db_max:
            raise ValueError("snr_db_min must not exceed snr_db_max")


# -- WAV I/O -----------------------------------------------------------------

def read_wav(path) -> Waveform:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: multi-channel audio is not supported")
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, sr)


def write_wav(path, w: Waveform, fmt: str = "pcm16") -> None:
    if fmt == "pcm16":
        data = np.round(np.clip(w.samples, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    elif fmt == "float32":
        data = w.samples.astype(np.float32)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    wavfile.write(str(path), w.sample_rate, data)


def decimate(w: Waveform, target_rate: int) -> Waveform:
    """Integer-factor downsampling only."""
    if target_rate == w.sample_rate:
        return w
    if w.sample_rate % target_rate:
        raise ValueError(f"cannot resample {w.sample_rate} Hz to {target_rate} Hz by an integer factor")
    q = w.sample_rate // target_rate
    return Waveform(signal.decimate(w.samples, q, zero_phase=True), target_rate)


# -- STFT ----------------------------------------------------------------------

def hann(n: int) -> np.ndarray:
    return signal.get_window("hann", n, fftbins=True)


def stft(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Complex STFT, T x n_bins, frames at multiples of the hop with no padding."""
    win, hop = cfg.win_length, cfg.hop_length
    if len(samples) < win:
        raise ValueError(f"input too short: {len(samples)} samples < window of {win}")
    frames = sliding_window_view(samples, win)[::hop]
    return np.fft.rfft(frames * hann(win), n=cfg.fft_size, axis=1)


def istft(spec: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    win, hop = cfg.win_length, cfg.hop_length
    T = spec.shape[0]
    w = hann(win)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :win] * w
    n = (T - 1) * hop + win
    out = np.zeros(n)
    norm = np.zeros(n)
    for t in range(T):
        out[t * hop:t * hop + win] += frames[t]
        norm[t * hop:t * hop + win] += w * w
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def n_frames_for(n_samples: int, cfg: FeatureConfig) -> int:
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def mel_filterbank(cfg: FeatureConfig, fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular filters on the HTK mel scale with area normalization."""
    fmax = cfg.sample_rate / 2 if fmax is None else fmax
    n_mels = cfg.feature_dim

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_bins)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1, None] - edges[:-2, None])
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:, None] - edges[1:-1, None])
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    if np.any(weights.sum(axis=1) <= 0):
        raise ValueError("mel filterbank has empty filters; increase fft_size or reduce n_mels")
    return MelFilterbank(weights, np.linalg.pinv(weights))


def mel_project(linear_mag: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Mel-project a T x n_bins magnitude matrix and take the floored log."""
    linear_mag = np.asarray(linear_mag, dtype=np.float64)
    if linear_mag.ndim != 2 or linear_mag.shape[1] != fb.weights.shape[1]:
        raise ValueError(f"magnitude shape {linear_mag.shape} does not match filterbank "
                         f"{fb.weights.shape}")
    return np.log(np.maximum(linear_mag @ fb.weights.T, LOG_FLOOR))


def log_features(w: Waveform, cfg: FeatureConfig, fb: MelFilterbank | None = None) -> np.ndarray:
    """Unnormalized log-magnitude features, T x feature_dim."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {w.sample_rate} != feature rate {cfg.sample_rate}")
    mag = np.abs(stft(w.samples, cfg))
    if cfg.feature_kind == "mel":
        return mel_project(mag, fb if fb is not None else mel_filterbank(cfg))
    return np.log(np.maximum(mag[:, :cfg.feature_dim], LOG_FLOOR))


def normalize(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    if not cfg.normalized:
        return frames
    return (frames - cfg.norm_mean) / cfg.norm_std


def denormalize(frames: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    if not cfg.normalized:
        return frames
    return frames * cfg.norm_std + cfg.norm_mean


def compute_features(w: Waveform, cfg: FeatureConfig, fb: MelFilterbank | None = None) -> Spectrogram:
    """Log-magnitude features, normalized with the config's dataset statistics when present."""
    return Spectrogram(normalize(log_features(w, cfg, fb), cfg), cfg)


# -- inversion -------------------------------------------------------------------

def spectral_distance(spec: np.ndarray, mag: np.ndarray) -> float:
    """Two-sided spectral norm of |spec| - mag, counting interior rfft bins twice.

    This is the norm under which Griffin-Lim's alternating projections are
    non-expansive, which makes the per-iteration distance monotone.
    """
    diff = np.abs(spec) - mag
    weights = np.full(mag.shape[1], 2.0)
    weights[0] = 1.0
    if mag.shape[1] % 2 == 1:
        weights[-1] = 1.0
    return float(np.sqrt(np.sum(weights * diff * diff)))


def griffin_lim(mag: np.ndarray, cfg: FeatureConfig, iters: int = 100,
                return_errors: bool = False):
    """Phase reconstruction from a T x n_bins magnitude, starting from zero phase."""
    mag = np.asarray(mag, dtype=np.float64)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if mag.ndim != 2 or mag.shape[1] != cfg.n_bins:
        raise ValueError(f"magnitude must be T x {cfg.n_bins}, got {mag.shape}")
    if not np.all(np.isfinite(mag)):
        raise ValueError("magnitude contains non-finite values")
    if np.any(mag < 0):
        raise ValueError("magnitudes must be nonnegative")

    rebuilt = stft(istft(mag.astype(np.complex128), cfg), cfg)
    errors = []
    for _ in range(iters):
        x = istft(mag * np.exp(1j * np.angle(rebuilt)), cfg)
        rebuilt = stft(x, cfg)
        errors.append(spectral_distance(rebuilt, mag))
    out = Waveform(x, cfg.sample_rate)
    return (out, np.array(errors)) if return_errors else out


def invert_features(s: Spectrogram, fb: MelFilterbank | None = None, iters: int = 100) -> Waveform:
    cfg = s.config
    mag_feat = np.exp(denormalize(s.frames, cfg))
    if cfg.feature_kind == "mel":
        if fb is None:
            raise ValueError("mel features need a filterbank to invert")
        mag = np.maximum(mag_feat @ fb.pseudo_inverse.T, 0.0)
    else:
        mag = np.zeros((s.n_frames, cfg.n_bins))
        mag[:, :cfg.feature_dim] = mag_feat
    x = griffin_lim(mag, cfg, iters).samples
    # drop the half-overlap margins, where only a window tail constrains the signal
    trim = (cfg.win_length - cfg.hop_length) // 2
    return Waveform(x[trim:trim + s.n_frames * cfg.hop_length], cfg.sample_rate)


# -- augmentation ----------------------------------------------------------------

def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def fit_length(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Tile then crop ``noise`` to ``n`` samples starting at ``offset``."""
    reps = -(-(n + offset) // len(noise))
    return np.tile(noise, reps)[offset:offset + n]


def noise_gain(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_clean, p_noise = signal_power(clean), signal_power(noise)
    if p_noise <= 0:
        raise ValueError("degenerate noise: zero power")
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, offset: int = 0) -> Waveform:
    """Add ``noise`` scaled so that the clean-to-noise power ratio equals ``snr_db``.

    ``snr_db=inf`` disables mixing and returns the clean signal unchanged.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    if np.isposinf(snr_db):
        return Waveform(clean.samples.copy(), clean.sample_rate)
    n = fit_length(noise.samples, len(clean), offset)
    g = noise_gain(clean.samples, n, snr_db)
    return Waveform(clean.samples + g * n, clean.sample_rate)


# -- segmentation ----------------------------------------------------------------

@dataclass
class Segments:
    segments: np.ndarray  # K x seg_len x d
    true_length: int
    padded: bool = False

    def __len__(self):
        return self.segments.shape[0]

    def join(self) -> np.ndarray:
        """Concatenate segments and trim the inference padding."""
        d = self.segments.shape[2]
        return self.segments.reshape(-1, d)[:self.true_length]


def segment(frames: np.ndarray, seg_len: int, mode: str = "train") -> Segments:
    """Split T x d frames into non-overlapping windows.

    Training drops a trailing remainder; inference zero-pads it and records
    the true length.
    """
    if seg_len < 1:
        raise ValueError("seg_len must be >= 1")
    frames = np.asarray(frames, dtype=np.float64)
    T, d = frames.shape
    if mode == "train":
        K = T // seg_len
        return Segments(frames[:K * seg_len].reshape(K, seg_len, d), K * seg_len)
    if mode != "inference":
        raise ValueError(f"unknown segmentation mode {mode!r}")
    K = max(1, -(-T // seg_len))
    padded = np.zeros((K * seg_len, d))
    padded[:T] = frames
    short = T < seg_len
    if short:
        warnings.warn(f"utterance of {T} frames is shorter than one segment ({seg_len}); zero-padded")
    return Segments(padded.reshape(K, seg_len, d), T, padded=short)


# -- feature cache ----------------------------------------------------------------

def save_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f8", order="C")
    T, d = frames.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<II", T, d) + frames.tobytes())


def load_features(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(FEAT_MAGIC):
        raise ValueError(f"{path}: not a DSFEAT1 file")
    T, d = struct.unpack_from("<II", blob, len(FEAT_MAGIC))
    start = len(FEAT_MAGIC) + 8
    if len(blob) != start + 8 * T * d:
        raise ValueError(f"{path}: payload size does not match header {T}x{d}")
    return np.frombuffer(blob, dtype="<f8", offset=start).reshape(T, d).astype(np.float64)
