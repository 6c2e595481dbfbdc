"""Command-line entry point: ``dsvae <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flag, config or input file),
2 runtime failure (divergence, I/O during the run).
"""
from __future__ import annotations

import os

# must happen before numpy loads its BLAS
if os.environ.get("DSVAE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DSVAE_THREADS"])

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import ConfigError, RunConfig, load_config  # noqa: E402

log = logging.getLogger("dsvae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _ratios(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ratios must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("--ratios must be non-empty and positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsvae", description="Disentangled sequential VAE: training, SV evaluation, conversion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic multi-speaker corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=8)
    s.add_argument("--utts", type=int, default=50)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--noise-out", help="also write a noise/music/babble bank here")
    s.add_argument("--seed", type=int, default=0)

    def run_flags(sp, data_required=True):
        sp.add_argument("--config", default="timit_desk", help="config file or shipped config name")
        sp.add_argument("--data", required=data_required, help="corpus directory of per-speaker WAVs")
        sp.add_argument("--noise-dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--augment", action="store_true", default=None)
        sp.add_argument("--set", type=_kv, action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")

    s = sub.add_parser("train", help="train a model")
    run_flags(s)
    s.add_argument("--out", required=True, help="run directory for checkpoints and the epoch log")

    s = sub.add_parser("extract", help="export utterance embeddings as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--out", required=True, help="output prefix: <out>_speaker.csv, <out>_content.csv")
    s.add_argument("--trials-out", help="also write all-pairs trials for the extracted utterances")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sv-eval", help="speaker-verification EER from embeddings or audio")
    s.add_argument("--embeddings", help="embedding CSV written by extract")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--which", choices=("speaker", "content"), default="speaker")
    s.add_argument("--trials", help="trials file; default all pairs")
    s.add_argument("--out", help="write the result as key=value lines")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sweep", help="train one model per beta/alpha ratio")
    run_flags(s)
    s.add_argument("--ratios", type=_ratios, default=[1.0, 10.0, 20.0, 100.0])
    s.add_argument("--out", required=True, help="sweep report TSV")

    for name in ("convert", "reconstruct"):
        s = sub.add_parser(name, help=f"{name} an utterance")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--source", required=True)
        if name == "convert":
            s.add_argument("--target", required=True)
        s.add_argument("--out", required=True, help="output WAV (metadata goes to <out>.meta)")
        s.add_argument("--features-out", help="also dump DSFEAT1 features")
        s.add_argument("--iters", type=int, default=100, help="Griffin-Lim iterations")
        s.add_argument("--seed", type=int, default=0)
    return p


def _need(path, flag: str, kind: str = "file") -> Path:
    p = Path(path)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise UsageError(f"{flag}: {kind} not found: {path}")
    return p


def resolve_config(args) -> RunConfig:
    overrides = dict(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.augment:
        overrides["augment"] = True
    cfg = load_config(args.config, overrides)
    if cfg.train.augment and not args.noise_dir:
        raise UsageError("--noise-dir is required when augmentation is enabled")
    log.info("resolved config:\n%s", cfg.to_text().rstrip())
    return cfg


def _dataset(args, cfg: RunConfig):
    from .training import build_dataset

    _need(args.data, "--data", "dir")
    if args.noise_dir:
        _need(args.noise_dir, "--noise-dir", "dir")
    return build_dataset(args.data, cfg.feature, cfg.model.seg_len, args.noise_dir, cfg.train.test_fraction)


def cmd_synth(args) -> int:
    from .synth import SynthCorpusSpec, synth_corpus, synth_noise

    spec = SynthCorpusSpec(n_speakers=args.speakers, utts_per_speaker=args.utts, duration_s=args.duration)
    synth_corpus(args.out, spec, args.seed)
    if args.noise_out:
        synth_noise(args.noise_out, seed=args.seed)
    print(f"wrote {spec.n_speakers * spec.utts_per_speaker} utterances to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = resolve_config(args)
    ds = _dataset(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    res = train(ds, cfg, out)
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs: total {last.total:.4f}, best epoch {res.best_epoch}; "
          f"checkpoints in {out}")
    return 0


def _embeddings_from_audio(checkpoint, data, split):
    from .evaluation import extract_embeddings
    from .model import load_model
    from .training import build_dataset

    model, run_cfg, fcfg = load_model(_need(checkpoint, "--checkpoint"))
    _need(data, "--data", "dir")
    ds = build_dataset(data, run_cfg.feature, run_cfg.model.seg_len, None, run_cfg.train.test_fraction)
    # normalization statistics come from the checkpoint, not from this corpus
    from .dsp import log_features, normalize
    for u in ds.utterances("all"):
        u.frames = normalize(log_features(u.waveform, fcfg, ds.filterbank), fcfg)
    return extract_embeddings(ds.utterances(split), model)


def cmd_extract(args) -> int:
    from .evaluation import generate_trials, write_embeddings_csv, write_trials

    emb = _embeddings_from_audio(args.checkpoint, args.data, args.split)
    write_embeddings_csv(f"{args.out}_speaker.csv", emb, "speaker")
    write_embeddings_csv(f"{args.out}_content.csv", emb, "content")
    if args.trials_out:
        write_trials(args.trials_out, generate_trials(emb))
    print(f"wrote {len(emb)} embeddings to {args.out}_speaker.csv and {args.out}_content.csv")
    return 0


def cmd_sv_eval(args) -> int:
    from .evaluation import generate_trials, read_embeddings_csv, read_trials, sv_eer

    if args.embeddings:
        emb = read_embeddings_csv(_need(args.embeddings, "--embeddings"), args.which)
    elif args.checkpoint and args.data:
        emb = _embeddings_from_audio(args.checkpoint, args.data, args.split)
    else:
        raise UsageError("sv-eval needs --embeddings, or --checkpoint with --data")
    trials = read_trials(_need(args.trials, "--trials")) if args.trials else generate_trials(emb)
    res = sv_eer(emb, trials, args.which)
    lines = (f"which={args.which}\neer={res.eer!r}\nthreshold={res.threshold!r}\n"
             f"n_target={res.n_target}\nn_nontarget={res.n_nontarget}\n")
    if args.out:
        Path(args.out).write_text(lines, encoding="utf-8")
    print(f"{args.which} EER {100 * res.eer:.2f}% ({res.n_target} target / {res.n_nontarget} nontarget trials)")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import sweep_beta_alpha

    cfg = resolve_config(args)
    ds = _dataset(args, cfg)
    rows = sweep_beta_alpha(args.ratios, ds, cfg, args.out)
    for r in rows:
        print(f"ratio {r.ratio:g}: EER mu_s {r.eer_mu_s:.3f} mu_c {r.eer_mu_c:.3f} "
              f"kl_s {r.kl_speaker:.3f} kl_c {r.kl_content:.3f} [{r.status}]")
    return 0


def cmd_convert(args, reconstruct: bool = False) -> int:
    from .conversion import ConversionRequest, convert, reconstruct as do_reconstruct

    _need(args.checkpoint, "--checkpoint")
    _need(args.source, "--source")
    if not reconstruct:
        _need(args.target, "--target")
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    req = ConversionRequest(args.source, None if reconstruct else args.target, args.checkpoint,
                            args.out, args.iters, args.features_out)
    res = do_reconstruct(req) if reconstruct else convert(req)
    print(f"wrote {args.out}: {res.spectrogram.n_frames} frames, {res.n_segments} segments, "
          f"feature MSE vs source {res.mse:.4f}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth, "train": cmd_train, "extract": cmd_extract, "sv-eval": cmd_sv_eval,
    "sweep": cmd_sweep, "convert": cmd_convert,
    "reconstruct": lambda a: cmd_convert(a, reconstruct=True),
}


def run(argv=None) -> int:
    from .autodiff.checkpoint import CheckpointError
    from .training import TrainingDiverged

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "sweep")
                        else logging.WARNING, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
