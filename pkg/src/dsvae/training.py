"""Dataset construction, batching with on-the-fly noise augmentation, and the training loop."""
from __future__ import annotations

import logging
import re
import shutil
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.optim import AdamState, DivergedError, adam_step, step_decay_lr
from .config import RunConfig
from .dsp import (
    FeatureConfig, MelFilterbank, NoiseMixSpec, Waveform, log_features, mel_filterbank, mix_at_snr,
    normalize, read_wav,
)
from .model import DSVAE, LossBreakdown, save_model

log = logging.getLogger(__name__)

_SPK_RE = re.compile(r"^(?P<spk>.+?)_utt(?P<utt>.+)$")
NORM_STD_FLOOR = 1e-3


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    path: Path
    waveform: Waveform
    frames: np.ndarray | None = None  # normalized T x d


@dataclass
class Dataset:
    """Segment store over the training split, plus the held-out utterances.

    ``segments`` holds normalized clean features, one row per training
    segment; ``seg_source`` maps each row back to (utterance index, segment
    index) so augmentation can re-featurize the underlying waveform span.
    """
    feature_cfg: FeatureConfig
    seg_len: int
    train: list[Utterance]
    test: list[Utterance]
    segments: np.ndarray
    seg_source: np.ndarray
    labels: np.ndarray
    speakers: list[str]
    noise: dict[str, list[Waveform]] = field(default_factory=dict)
    skipped: int = 0
    filterbank: MelFilterbank | None = None

    def __len__(self):
        return self.segments.shape[0]

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def utterances(self, split: str = "test") -> list[Utterance]:
        return {"train": self.train, "test": self.test, "all": self.train + self.test}[split]


@dataclass
class Batch:
    clean: np.ndarray
    augmented: np.ndarray
    speaker_labels: np.ndarray
    snr_db: np.ndarray
    categories: list[str]
    indices: np.ndarray


def speaker_of(path: Path) -> tuple[str, str]:
    """``spk3_utt7.wav`` -> (``spk3``, ``spk3_utt7``); otherwise the parent directory names the speaker."""
    m = _SPK_RE.match(path.stem)
    if m:
        return m.group("spk"), path.stem
    return path.parent.name, f"{path.parent.name}_{path.stem}"


def _read_dir(root: Path, sample_rate: int, what: str) -> tuple[list[tuple[Path, Waveform]], int]:
    out, skipped = [], 0
    for p in sorted(root.rglob("*.wav")):
        try:
            w = read_wav(p)
            if w.sample_rate != sample_rate:
                raise ValueError(f"sample rate {w.sample_rate} != {sample_rate}")
        except (ValueError, OSError) as e:
            skipped += 1
            log.warning("skipping %s file %s: %s", what, p, e)
            continue
        out.append((p, w))
    return out, skipped


def load_noise_bank(noise_dir, sample_rate: int) -> dict[str, list[Waveform]]:
    """One category per subdirectory; loose files at the top level count as ``noise``."""
    root = Path(noise_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"noise directory not found: {noise_dir}")
    bank: dict[str, list[Waveform]] = {}
    files, _ = _read_dir(root, sample_rate, "noise")
    for p, w in files:
        cat = p.parent.name if p.parent != root else "noise"
        if np.any(w.samples):
            bank.setdefault(cat, []).append(w)
    if not bank:
        raise ValueError(f"no usable noise files in {noise_dir}")
    return dict(sorted(bank.items()))


def split_utterances(utts: list[Utterance], test_fraction: float) -> tuple[list[Utterance], list[Utterance]]:
    """Per speaker, hold out the last ``test_fraction`` of utterances (sorted by id)."""
    by_spk: dict[str, list[Utterance]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    train, test = [], []
    for spk in sorted(by_spk):
        group = sorted(by_spk[spk], key=lambda u: _natural_key(u.utt_id))
        n_test = int(round(len(group) * test_fraction))
        if test_fraction > 0 and len(group) > 1:
            n_test = max(1, n_test)
        n_test = min(n_test, len(group) - 1)
        train += group[:len(group) - n_test]
        test += group[len(group) - n_test:]
    return train, test


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]


def build_dataset(corpus_dir, cfg: FeatureConfig, seg_len: int, noise_dir=None,
                  test_fraction: float = 0.2) -> Dataset:
    """Read per-speaker WAVs, split, fit normalization on the training split, and cut segments."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    files, skipped = _read_dir(root, cfg.sample_rate, "corpus")
    if not files:
        raise ValueError(f"empty corpus: no readable WAV files in {corpus_dir}")
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable corpus file(s)")
    fb = mel_filterbank(cfg) if cfg.feature_kind == "mel" else None

    utts = []
    raw = {}
    for p, w in files:
        spk, uid = speaker_of(p)
        if len(w) < cfg.win_length:
            skipped += 1
            log.warning("skipping %s: shorter than one analysis window", p)
            continue
        utts.append(Utterance(uid, spk, p, w))
        raw[uid] = log_features(w, cfg, fb)
    train, test = split_utterances(utts, test_fraction)
    if not train:
        raise ValueError("empty corpus: no training utterances")

    stacked = np.concatenate([raw[u.utt_id] for u in train])
    cfg = cfg.with_normalization(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), NORM_STD_FLOOR))
    for u in utts:
        u.frames = normalize(raw[u.utt_id], cfg)

    speakers = sorted({u.speaker_id for u in utts})
    spk_index = {s: i for i, s in enumerate(speakers)}
    segs, src, labels = [], [], []
    for ui, u in enumerate(train):
        K = u.frames.shape[0] // seg_len
        for k in range(K):
            segs.append(u.frames[k * seg_len:(k + 1) * seg_len])
            src.append((ui, k))
            labels.append(spk_index[u.speaker_id])
    if not segs:
        raise ValueError(f"no training segments: every utterance is shorter than {seg_len} frames")
    noise = load_noise_bank(noise_dir, cfg.sample_rate) if noise_dir is not None else {}
    return Dataset(cfg, seg_len, train, test, np.stack(segs), np.array(src, dtype=np.int64),
                   np.array(labels, dtype=np.int64), speakers, noise, skipped, fb)


def segment_span(ds: Dataset, k: int) -> slice:
    """Sample range whose STFT frames are exactly segment ``k``'s frames."""
    cfg = ds.feature_cfg
    start = k * ds.seg_len * cfg.hop_length
    return slice(start, start + (ds.seg_len - 1) * cfg.hop_length + cfg.win_length)


def augment_waveform(clean: Waveform, ds: Dataset, spec: NoiseMixSpec, rng: np.random.Generator):
    """Mix a random noise category at SNR ~ U(min, max); returns ``(noisy, snr_db, category)``."""
    cats = [c for c in spec.categories if c in ds.noise] or sorted(ds.noise)
    cat = cats[rng.integers(len(cats))]
    bank = ds.noise[cat]
    noise = bank[rng.integers(len(bank))]
    snr = float(rng.uniform(spec.snr_db_min, spec.snr_db_max))
    offset = int(rng.integers(len(noise)))
    if not np.any(clean.samples):
        return clean, float("inf"), cat
    return mix_at_snr(clean, noise, snr, offset), snr, cat


def make_batch(ds: Dataset, indices: np.ndarray, spec: NoiseMixSpec | None,
               rng: np.random.Generator) -> Batch:
    clean = ds.segments[indices]
    if spec is None:
        return Batch(clean, clean, ds.labels[indices], np.full(len(indices), np.inf),
                     ["none"] * len(indices), indices)
    if not ds.noise:
        raise ValueError("augmentation enabled but the dataset has no noise bank")
    aug = np.empty_like(clean)
    snrs, cats = np.empty(len(indices)), []
    cfg = ds.feature_cfg
    for row, i in enumerate(indices):
        ui, k = ds.seg_source[i]
        u = ds.train[ui]
        span = Waveform(u.waveform.samples[segment_span(ds, k)], cfg.sample_rate)
        noisy, snrs[row], cat = augment_waveform(span, ds, spec, rng)
        cats.append(cat)
        aug[row] = normalize(log_features(noisy, cfg, ds.filterbank), cfg)[:ds.seg_len]
    return Batch(clean, aug, ds.labels[indices], snrs, cats, indices)


def next_batch(ds: Dataset, train_cfg, rng: np.random.Generator) -> Batch:
    """Uniformly sampled batch (without replacement within the batch when possible)."""
    n = len(ds)
    idx = rng.choice(n, size=train_cfg.batch_size, replace=train_cfg.batch_size > n)
    return make_batch(ds, idx, train_cfg.noise_spec, rng)


def epoch_batches(ds: Dataset, train_cfg, rng: np.random.Generator):
    """One pass over every training segment in a shuffled order."""
    order = rng.permutation(len(ds))
    for s in range(0, len(order), train_cfg.batch_size):
        yield order[s:s + train_cfg.batch_size]


@dataclass
class EpochLog:
    epoch: int
    total: float
    recon: float
    kl_speaker: float
    kl_content: float
    lr: float
    wall_seconds: float
    recon_mse: float = 0.0

    def tsv(self) -> str:
        return "\t".join([str(self.epoch)] + [repr(float(v)) for v in (
            self.total, self.recon, self.kl_speaker, self.kl_content, self.lr, self.wall_seconds)])


LOG_HEADER = "epoch\ttotal\trecon\tkl_speaker\tkl_content\tlr\twall_seconds"


@dataclass
class TrainResult:
    model: DSVAE
    history: list[EpochLog]
    best_epoch: int
    run_cfg: RunConfig
    feature_cfg: FeatureConfig
    out_dir: Path | None = None
    diverged: bool = False


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, result: TrainResult):
        super().__init__(msg)
        self.result = result


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators so that data order does not depend on the model or the latents."""
    data, aug, latent = np.random.SeedSequence(seed).spawn(3)
    return {"data": np.random.default_rng(data), "augment": np.random.default_rng(aug),
            "latent": np.random.default_rng(latent)}


def train_step(model: DSVAE, opt: AdamState, batch: Batch, rng) -> LossBreakdown:
    model.zero_grad()
    total, parts = model.loss(batch.augmented, rng, target=batch.clean)
    total.backward()
    adam_step(model.parameters(), opt)
    return parts


def train(ds: Dataset, run_cfg: RunConfig, out_dir=None, model: DSVAE | None = None,
          epochs: int | None = None, on_epoch=None) -> TrainResult:
    """Noise-invariant training: encode the augmented input, reconstruct the clean features.

    With ``out_dir`` set, writes ``train_log.tsv``, ``epoch_NNN.ckpt`` every epoch,
    ``last.ckpt`` and ``best.ckpt`` (lowest epoch-mean total loss). On divergence
    the last good checkpoints are left untouched and ``TrainingDiverged`` is raised.
    """
    tc, mc = run_cfg.train, run_cfg.model
    if mc.seg_len != ds.seg_len or mc.feature_dim != ds.feature_cfg.feature_dim:
        raise ValueError("model config does not match dataset segment shape")
    model = model if model is not None else DSVAE(mc, seed=tc.seed)
    streams = rng_streams(tc.seed)
    opt = AdamState(learning_rate=tc.lr_initial, weight_decay=tc.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.tsv").write_text(LOG_HEADER + "\n", encoding="utf-8")
    history: list[EpochLog] = []
    best_epoch, best_total = -1, np.inf
    result = TrainResult(model, history, best_epoch, run_cfg, ds.feature_cfg, out)
    t0 = time.perf_counter()
    for epoch in range(epochs if epochs is not None else tc.epochs):
        opt.learning_rate = step_decay_lr(epoch, tc.lr_initial, tc.lr_decay, tc.lr_decay_every)
        sums = np.zeros(5)
        n = 0
        try:
            for idx in epoch_batches(ds, tc, streams["data"]):
                batch = make_batch(ds, idx, tc.noise_spec, streams["augment"])
                p = train_step(model, opt, batch, streams["latent"])
                w = len(idx)
                sums += w * np.array([p.total, p.recon_nll, p.kl_speaker, p.kl_content, p.recon_mse])
                n += w
        except DivergedError as e:
            log.error("epoch %d: %s; keeping last good checkpoint", epoch, e)
            result.diverged = True
            raise TrainingDiverged(f"diverged at epoch {epoch}: {e}", result) from e
        m = sums / n
        entry = EpochLog(epoch, m[0], m[1], m[2], m[3], opt.learning_rate, time.perf_counter() - t0, m[4])
        history.append(entry)
        if out is not None:
            with open(out / "train_log.tsv", "a", encoding="utf-8") as fh:
                fh.write(entry.tsv() + "\n")
            ckpt = out / f"epoch_{epoch:03d}.ckpt"
            save_model(ckpt, model, run_cfg, ds.feature_cfg)
            shutil.copyfile(ckpt, out / "last.ckpt")
        if entry.total < best_total:
            best_total, best_epoch = entry.total, epoch
            result.best_epoch = epoch
            if out is not None:
                shutil.copyfile(out / f"epoch_{epoch:03d}.ckpt", out / "best.ckpt")
                (out / "best_epoch.txt").write_text(f"{epoch}\n", encoding="utf-8")
        log.info("epoch %d total %.4f recon %.4f kl_s %.4f kl_c %.4f lr %.2e", epoch, *m[:4], opt.learning_rate)
        if on_epoch is not None:
            on_epoch(entry)
    return result
