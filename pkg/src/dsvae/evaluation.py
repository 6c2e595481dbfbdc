"""Utterance embeddings, cosine trial scoring, EER, and the beta/alpha sweep."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dsp import segment
from .model import DSVAE, InfoFlowReport
from .synth import SynthCorpusSpec, synth_corpus  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


@dataclass
class UtteranceEmbedding:
    utt_id: str
    speaker_id: str
    mu_s: np.ndarray
    mu_c: np.ndarray
    padded: bool = False
    n_segments: int = 1


@dataclass(frozen=True)
class Trial:
    label: int  # 1 target, 0 nontarget
    utt_a: str
    utt_b: str

    def __post_init__(self):
        if self.utt_a == self.utt_b:
            raise ValueError(f"trial compares {self.utt_a} with itself")
        if self.label not in (0, 1):
            raise ValueError("trial label must be 0 or 1")


@dataclass
class EerResult:
    eer: float
    threshold: float
    n_target: int
    n_nontarget: int


def utterance_segments(frames: np.ndarray, seg_len: int):
    """Full segments of an utterance; a too-short utterance becomes one padded segment."""
    if frames.shape[0] >= seg_len:
        return segment(frames, seg_len, mode="train").segments, False
    return segment(frames, seg_len, mode="inference").segments, True


def embed_frames(model: DSVAE, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool, int]:
    segs, padded = utterance_segments(frames, model.cfg.seg_len)
    ms, mc = model.posterior_means(segs)
    return ms.mean(axis=0), mc.mean(axis=1).mean(axis=0), padded, len(segs)


def extract_embeddings(utterances, model: DSVAE) -> list[UtteranceEmbedding]:
    """Posterior-mean embeddings pooled over segments (and over time for content).

    ``utterances`` are objects with ``utt_id``, ``speaker_id`` and normalized
    ``frames`` (see ``training.Utterance``).
    """
    out = []
    for u in utterances:
        mu_s, mu_c, padded, k = embed_frames(model, u.frames)
        out.append(UtteranceEmbedding(u.utt_id, u.speaker_id, mu_s, mu_c, padded, k))
    return out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_trials(embeddings, trials, which: str = "speaker") -> np.ndarray:
    """Cosine similarity per trial of the speaker (``mu_s``) or content (``mu_c``) embeddings."""
    if which not in ("speaker", "content"):
        raise ValueError("which must be 'speaker' or 'content'")
    table = {e.utt_id: (e.mu_s if which == "speaker" else e.mu_c) for e in embeddings}
    missing = sorted({u for t in trials for u in (t.utt_a, t.utt_b) if u not in table})
    if missing:
        raise KeyError(f"unknown utterance id(s) in trials: {', '.join(missing)}")
    return np.array([cosine(table[t.utt_a], table[t.utt_b]) for t in trials])


def compute_eer(scores, labels) -> EerResult:
    """Equal error rate with linear interpolation between adjacent ROC operating points.

    A trial is accepted when its score is >= the threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_t, n_n = int(labels.sum()), int((~labels).sum())
    if n_t == 0 or n_n == 0:
        raise ValueError("EER needs at least one target and one nontarget trial")
    thr = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    tgt = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    frr = np.searchsorted(tgt, thr, side="left") / n_t
    far = (n_n - np.searchsorted(non, thr, side="left")) / n_n
    diff = frr - far  # nondecreasing in the threshold
    k = int(np.argmax(diff >= 0))
    if diff[k] == 0 or k == 0:
        return EerResult(float(far[k]), float(thr[k]), n_t, n_n)
    d1, d2 = diff[k - 1], diff[k]
    w = d1 / (d1 - d2)
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    lo, hi = thr[k - 1], thr[k]
    threshold = hi if not np.isfinite(lo) else lo if not np.isfinite(hi) else lo + w * (hi - lo)
    return EerResult(float(eer), float(threshold), n_t, n_n)


def generate_trials(embeddings, mode: str = "all_pairs", n: int | None = None,
                    rng: np.random.Generator | None = None) -> list[Trial]:
    """``all_pairs``: every unordered pair; ``balanced``: ``n`` sampled trials of each label."""
    items = [(e.utt_id, e.speaker_id) for e in embeddings]
    if len(items) < 2:
        raise ValueError("need at least 2 utterances to form trials")
    if len({s for _, s in items}) < 2:
        raise ValueError("need at least 2 speakers to form trials")
    pairs = [Trial(int(a[1] == b[1]), a[0], b[0]) for a, b in itertools.combinations(items, 2)]
    if mode == "all_pairs":
        return pairs
    if mode != "balanced":
        raise ValueError(f"unknown trial mode {mode!r}")
    if n is None or n < 1:
        raise ValueError("balanced mode needs n >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for label in (1, 0):
        pool = [t for t in pairs if t.label == label]
        if not pool:
            raise ValueError(f"no {'target' if label else 'nontarget'} pairs available")
        pick = rng.choice(len(pool), size=n, replace=n > len(pool))
        out += [pool[i] for i in pick]
    return out


def sv_eer(embeddings, trials=None, which: str = "speaker") -> EerResult:
    trials = trials if trials is not None else generate_trials(embeddings)
    return compute_eer(score_trials(embeddings, trials, which), [t.label for t in trials])


# -- file formats -------------------------------------------------------------------

def write_trials(path, trials) -> None:
    Path(path).write_text("".join(f"{t.label} {t.utt_a} {t.utt_b}\n" for t in trials), encoding="utf-8")


def read_trials(path) -> list[Trial]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected '<0|1> <utt_a> <utt_b>'")
        out.append(Trial(int(parts[0]), parts[1], parts[2]))
    return out


def write_embeddings_csv(path, embeddings, which: str = "speaker") -> None:
    vecs = [e.mu_s if which == "speaker" else e.mu_c for e in embeddings]
    dim = len(vecs[0]) if vecs else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utt_id", "speaker_id"] + [f"e{i}" for i in range(dim)])
        for e, v in zip(embeddings, vecs):
            w.writerow([e.utt_id, e.speaker_id] + [repr(float(x)) for x in v])


def read_embeddings_csv(path, which: str = "speaker") -> list[UtteranceEmbedding]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["utt_id", "speaker_id"]:
        raise ValueError(f"{path}: missing 'utt_id,speaker_id,e0..' header")
    out = []
    for r in rows[1:]:
        v = np.array([float(x) for x in r[2:]])
        empty = np.zeros(0)
        out.append(UtteranceEmbedding(r[0], r[1], v if which == "speaker" else empty,
                                      v if which == "content" else empty))
    return out


# -- beta / alpha sweep ----------------------------------------------------------------

SWEEP_HEADER = ("ratio", "eer_mu_s", "eer_mu_c", "kl_speaker", "kl_content", "kl_sum", "recon", "status")


@dataclass
class SweepRow:
    ratio: float
    eer_mu_s: float
    eer_mu_c: float
    kl_speaker: float
    kl_content: float
    kl_sum: float
    recon: float
    status: str = "ok"

    def tsv(self) -> str:
        vals = [repr(float(getattr(self, k))) for k in SWEEP_HEADER[:-1]]
        return "\t".join(vals + [self.status])


def held_out_segments(ds, split: str = "test") -> np.ndarray:
    segs = [segment(u.frames, ds.seg_len, mode="train").segments for u in ds.utterances(split)]
    segs = [s for s in segs if len(s)]
    return np.concatenate(segs) if segs else ds.segments


def evaluate_model(model: DSVAE, ds, seed: int = 0) -> tuple[InfoFlowReport, float, float]:
    """Info-flow report on held-out segments and all-pairs EERs on held-out utterances."""
    report = model.info_flow_report(held_out_segments(ds), np.random.default_rng(seed))
    emb = extract_embeddings(ds.utterances("test"), model)
    trials = generate_trials(emb)
    return report, sv_eer(emb, trials, "speaker").eer, sv_eer(emb, trials, "content").eer


def ratio_config(run_cfg: RunConfig, ratio: float) -> RunConfig:
    """beta = ratio * alpha, alpha kept at its configured value."""
    return run_cfg.replace(beta=float(ratio) * run_cfg.model.alpha)


def sweep_beta_alpha(ratios, ds, run_cfg: RunConfig, out_tsv=None, train_fn=None,
                     on_row=None) -> list[SweepRow]:
    """Train one model per ratio (shared seed and data order) and report EERs and KL terms."""
    from .training import TrainingDiverged, train

    ratios = list(ratios)
    if not ratios:
        raise ValueError("ratios must be non-empty")
    train_fn = train_fn or (lambda d, cfg: train(d, cfg).model)
    rows = []
    if out_tsv is not None:
        Path(out_tsv).write_text("\t".join(SWEEP_HEADER) + "\n", encoding="utf-8")
    for r in ratios:
        cfg = ratio_config(run_cfg, r)
        try:
            model = train_fn(ds, cfg)
            rep, eer_s, eer_c = evaluate_model(model, ds, cfg.train.seed)
            row = SweepRow(float(r), eer_s, eer_c, rep.kl_speaker, rep.kl_content,
                           rep.kl_speaker + rep.kl_content, rep.recon_nll)
        except TrainingDiverged as e:
            log.error("ratio %s failed: %s", r, e)
            nan = float("nan")
            row = SweepRow(float(r), nan, nan, nan, nan, nan, nan, "failed")
        rows.append(row)
        if out_tsv is not None:
            with open(out_tsv, "a", encoding="utf-8") as fh:
                fh.write(row.tsv() + "\n")
        if on_row is not None:
            on_row(row)
    return rows


def read_sweep_tsv(path) -> list[SweepRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(lines[0].split("\t")) != SWEEP_HEADER:
        raise ValueError(f"{path}: unexpected sweep header")
    out = []
    for line in lines[1:]:
        f = line.split("\t")
        out.append(SweepRow(*[float(x) for x in f[:-1]], status=f[-1]))
    return out
