"""``hnusfgan`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs), 3 numeric failure (NaN/Inf during training or
synthesis).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, dsp
from .evaluation import evaluate
from .features import FeatureFileError, extract_features, read_features, write_features
from .nn import CheckpointError, NonFiniteError
from .training import (VARIANTS, SyntheticCorpusSpec, TrainingConfig, TrainingDiverged,
                       load_config, load_corpus, load_generator, make_synthetic_corpus,
                       save_corpus, train)
from .wavio import WavError, read_wav, write_wav

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HELP_WIDTH = 80


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH)


def _variant(name: str) -> str:
    # ablation names start with a dash, which argparse reads as a flag;
    # accept them without it too ("--variant reg-loss")
    if name in VARIANTS:
        return name
    if "-" + name in VARIANTS:
        return "-" + name
    raise argparse.ArgumentTypeError(
        f"invalid choice: '{name}' (choose from {', '.join(VARIANTS)})")


def _scale_tag(scale: float) -> str:
    return f"{scale:g}".replace(".", "p")


# ---------------------------------------------------------------------------
# commands

def cmd_extract(args) -> int:
    audio = read_wav(args.wav)
    feat = extract_features(audio, args.fmin, args.fmax, args.frame_shift)
    write_features(feat, args.out)
    print(f"wrote {feat.n_frames} frames to {args.out}")
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    spec = SyntheticCorpusSpec(n_utterances=args.n, n_frames=args.frames)
    corpus = make_synthetic_corpus(spec, seed=args.seed)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return EXIT_OK


def _training_config(args) -> TrainingConfig:
    cfg = load_config(args.config) if args.config else TrainingConfig.for_variant(args.variant)
    if args.config and args.variant != "hn-usfgan" and args.variant != cfg.variant:
        raise UsageError("--variant conflicts with the config file")
    overrides = {}
    for flag, key in (("iters", "iterations"), ("preset", "preset"), ("seed", "seed"),
                      ("batch_size", "batch_size"), ("segment_length", "segment_length"),
                      ("dtype", "dtype"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _training_config(args)
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = make_synthetic_corpus(SyntheticCorpusSpec(n_utterances=50), seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = train(cfg, corpus, out, resume=args.resume)
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log: {result.loss_log}")
    return EXIT_OK


def _load_model(path):
    try:
        return load_generator(path)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint/config mismatch: {exc}") from exc


def _synthesize(gen, feat, scale, seed):
    speech, excitation, weights, src = gen.generate(feat, seed=seed, f0_scale=scale)
    return speech, excitation, weights


def cmd_synth(args) -> int:
    gen = _load_model(args.ckpt)
    feat = read_features(args.features)
    speech, _, _ = _synthesize(gen, feat, args.f0_scale, args.seed)
    write_wav(args.out, speech)
    print(f"wrote {len(speech)} samples to {args.out}")
    return EXIT_OK


def cmd_dump_excitation(args) -> int:
    gen = _load_model(args.ckpt)
    if gen.cfg.source != "hn":
        raise CheckpointError("checkpoint has no harmonic-plus-noise source network")
    feat = read_features(args.features)
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    shift = feat.frame_shift
    for scale in args.f0_scale or [1.0]:
        tag = f"{prefix}_x{_scale_tag(scale)}"
        _, excitation, weights = _synthesize(gen, feat, scale, args.seed)
        harmonic = gen.generate(feat, seed=args.seed, f0_scale=scale, weights_override=1.0)[1]
        noise = gen.generate(feat, seed=args.seed, f0_scale=scale, weights_override=0.0)[1]
        write_wav(f"{tag}_excitation.wav", excitation)
        write_wav(f"{tag}_harmonic.wav", harmonic)
        write_wav(f"{tag}_noise.wav", noise)
        per_sample = weights.mean(axis=0)
        with open(f"{tag}_weights.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "f0", "vuv", "weight_mean", "weight_min", "weight_max"])
            scaled = feat.cont_f0 * scale
            for i in range(feat.n_frames):
                w = per_sample[i * shift:(i + 1) * shift]
                writer.writerow([i, f"{scaled[i]:.3f}", int(feat.vuv[i]), f"{w.mean():.6f}",
                                 f"{w.min():.6f}", f"{w.max():.6f}"])
        print(f"wrote {tag}_{{excitation,harmonic,noise}}.wav and {tag}_weights.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    gen = _load_model(args.ckpt)
    corpus = load_corpus(args.corpus)
    if args.limit:
        corpus = corpus[-args.limit:]
    scales = args.f0_scale or [1.0]
    out = Path(args.out)
    rows = []
    for scale in scales:
        report = evaluate(gen, corpus, scale, seed=args.seed)
        sys.stdout.write(report.to_text())
        rows.extend(report.rows())
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["utterance", "f0_scale", "rmse_log_f0", "vuv_error", "mcd"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote report to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hnusfgan", formatter_class=_formatter,
                     description="Harmonic-plus-noise unified source-filter GAN vocoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("extract", formatter_class=_formatter,
                       help="analyse a WAV file into a feature file",
                       description="Extract F0, V/UV, mel-cepstrum and coded aperiodicity.")
    p.add_argument("--wav", required=True, help="input 24 kHz mono WAV")
    p.add_argument("--out", required=True, help="output feature file (.usff)")
    p.add_argument("--fmin", type=float, default=70.0, help="F0 search floor in Hz (default 70)")
    p.add_argument("--fmax", type=float, default=340.0, help="F0 search ceiling in Hz (default 340)")
    p.add_argument("--frame-shift", type=int, default=dsp.FRAME_SHIFT,
                   help=f"frame shift in samples (default {dsp.FRAME_SHIFT})")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("make-corpus", formatter_class=_formatter,
                       help="write a synthetic training corpus",
                       description="Generate pulse-train utterances with known F0 and "
                                   "write WAV + feature-file pairs.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=50, help="number of utterances (default 50)")
    p.add_argument("--frames", type=int, default=200,
                   help="frames per utterance, 5 ms each (default 200)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train", formatter_class=_formatter, help="train a model",
                       description="Adversarial training with periodic checkpoints.")
    p.add_argument("--out", required=True, help="run directory for checkpoint and loss log")
    p.add_argument("--corpus", help="corpus directory (default: a fresh 50-utterance "
                                    "synthetic corpus)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--variant", type=_variant, default="hn-usfgan", metavar="NAME",
                   help="hn-usfgan (default) or an ablation: reg-loss, hn-sn, hifi-d, "
                        "mel-loss (the leading dash of -reg-loss etc. is optional)")
    p.add_argument("--preset", choices=("toy", "full"), help="model size (default toy)")
    p.add_argument("--iters", type=int, help="training iterations (default 5000)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--batch-size", type=int, help="utterance segments per step (default 1)")
    p.add_argument("--segment-length", type=int,
                   help="samples per segment, a multiple of 120 (default 8160)")
    p.add_argument("--dtype", choices=("float32", "float64"),
                   help="training precision (default float32)")
    p.add_argument("--checkpoint-every", type=int, help="iterations between checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from the run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", formatter_class=_formatter, help="synthesize speech",
                       description="Generate a waveform from a feature file.")
    p.add_argument("--features", required=True, help="input feature file (.usff)")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--out", required=True, help="output WAV (16-bit PCM)")
    p.add_argument("--f0-scale", type=float, default=1.0,
                   help="multiply F0 before synthesis (default 1.0)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dump-excitation", formatter_class=_formatter,
                       help="write source excitation signals",
                       description="Write the excitation, its harmonic-only and "
                                   "noise-only versions, and per-frame weight statistics.")
    p.add_argument("--features", required=True, help="input feature file (.usff)")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--out-prefix", required=True, help="prefix for output files")
    p.add_argument("--f0-scale", type=float, action="append",
                   help="F0 scale factor; repeat for several (default 1.0)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.set_defaults(func=cmd_dump_excitation)

    p = sub.add_parser("eval", formatter_class=_formatter, help="objective evaluation",
                       description="Copy-synthesis or F0-scaled evaluation: RMSE of log F0, "
                                   "V/UV error and MCD.")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--ckpt", required=True, help="training checkpoint")
    p.add_argument("--out", required=True, help="output CSV report")
    p.add_argument("--f0-scale", type=float, action="append",
                   help="F0 scale factor; repeat for several (default 1.0)")
    p.add_argument("--limit", type=int, help="evaluate only the last N utterances")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hnusfgan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"hnusfgan: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (WavError, FeatureFileError, CheckpointError, OSError, ValueError) as exc:
        print(f"hnusfgan: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
