"""Command-line entry point: ``skqvc <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error (one-line diagnostic
on stderr). Option values resolve as explicit flag, then ``--config`` file,
then (for ``--seed``) the ``SKQVC_SEED`` environment variable, then the
built-in default shown in ``--help``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import SKQVCError

log = logging.getLogger("skqvc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class UnknownSubcommand(UsageError):
    pass


class MissingFlag(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# (flag, dest, type, default, help). Defaults live here rather than in
# argparse so that config files can sit between flags and defaults.
_COMMON = [
    ("--config", "config", str, None, "key = value file merged under explicit flags"),
    ("--seed", "seed", int, 0, "random seed (falls back to $SKQVC_SEED)"),
    ("--verbose", "verbose", "flag", False, "log progress to stderr"),
]

_TRAIN_FLAGS = [
    ("--lambda-fm", "lambda_fm", float, 2.0, "feature-matching weight"),
    ("--lambda-mel", "lambda_mel", float, 45.0, "mel L1 weight"),
    ("--lr", "lr", float, 2e-4, "learning rate"),
    ("--batch-size", "batch_size", int, 4, "utterances per step"),
    ("--segment-frames", "segment_frames", int, 32, "training crop length in frames"),
    ("--steps", "max_steps", int, 10000, "total training steps"),
    ("--d-v", "d_v", int, 8, "variation bottleneck width"),
    ("--svcomp", "svcomp_enabled", "onoff", True, "speaking-variation compensation (on/off)"),
    ("--bottleneck", "bottleneck", "onoff", True, "bottleneck the variation path (on/off)"),
    ("--external-speaker", "external_speaker", "onoff", False,
     "use a mel-mean speaker vector through a learned adapter (needs --svcomp off)"),
    ("--encoder", "encoder", str, "pseudo(0)", "pseudo(SEED), pseudo-nodelta(SEED) or skqf(DIR)"),
    ("--gen-channels", "gen_channels", int, 128, "generator base channels"),
    ("--disc-scale", "disc_scale", float, 0.25, "discriminator channel scale"),
    ("--checkpoint-every", "checkpoint_every", int, 0, "save every N steps (0 = only at the end)"),
]

_BUDGET_FLAGS = [
    ("--steps", "steps", int, 600, "training steps per cell"),
    ("--batch-size", "batch_size", int, 4, "utterances per step"),
    ("--segment-frames", "segment_frames", int, 32, "training crop length in frames"),
    ("--lr", "lr", float, 2e-4, "learning rate"),
    ("--gen-channels", "gen_channels", int, 64, "generator base channels"),
    ("--disc-scale", "disc_scale", float, 1 / 16, "discriminator channel scale"),
    ("--codebook-iters", "codebook_iters", int, 30, "K-means passes per codebook"),
    ("--encoder", "encoder", str, "pseudo(0)", "feature encoder"),
    ("--heldout", "heldout_per_speaker", int, 2, "held-out clips per speaker"),
]

SUBCOMMANDS = {
    "build-codebook": ("Fit a K-means codebook and write it as SKQC", [
        ("--features", "features", str, None, "directory of .skqf files"),
        ("--data", "data", str, None, "directory of .wav files (encoded with --encoder) instead of --features"),
        ("--encoder", "encoder", str, "pseudo(0)", "encoder for --data"),
        ("--k", "k", int, 256, "number of clusters"),
        ("--batch-size", "batch_size", int, 1024, "minibatch size"),
        ("--max-iters", "max_iters", int, 100, "maximum passes over the data"),
        ("--out", "out", str, None, "output .skqc path"),
    ], ["out"]),
    "extract-features": ("Encode .wav files into .skqf feature files", [
        ("--data", "data", str, None, "directory of .wav files"),
        ("--encoder", "encoder", str, "pseudo(0)", "pseudo(SEED), pseudo-nodelta(SEED) or skqf(DIR) passthrough"),
        ("--out", "out", str, None, "output directory"),
    ], ["data", "out"]),
    "train": ("Train the decoder and bottlenecks by reconstruction", [
        ("--data", "data", str, None, "directory of .wav files"),
        ("--codebook", "codebook_path", str, None, "frozen .skqc codebook"),
        ("--out-dir", "out_dir", str, None, "directory for checkpoints and the loss log"),
        ("--resume", "resume", str, None, "checkpoint to continue from"),
        *_TRAIN_FLAGS,
    ], ["data", "codebook_path", "out_dir"]),
    "convert": ("Convert a source utterance to the voice of a target utterance", [
        ("--source", "source", str, None, "source .wav or .skqf"),
        ("--target", "target", str, None, "target .wav or .skqf"),
        ("--ckpt", "ckpt", str, None, "trained checkpoint"),
        ("--codebook", "codebook", str, None, ".skqc codebook the checkpoint was trained with"),
        ("--encoder", "encoder", str, None, "encoder for .wav inputs (default: the checkpoint's)"),
        ("--out", "out", str, None, "output .wav"),
    ], ["source", "target", "ckpt", "codebook", "out"]),
    "evaluate": ("Score a checkpoint on the held-out clips of a corpus", [
        ("--data", "data", str, None, "directory of .wav files"),
        ("--ckpt", "ckpt", str, None, "trained checkpoint"),
        ("--codebook", "codebook", str, None, ".skqc codebook"),
        ("--heldout", "heldout_per_speaker", int, 2, "held-out clips per speaker"),
        ("--out", "out", str, None, "optional CSV output"),
    ], ["data", "ckpt", "codebook"]),
    "sweep": ("Codebook-size sweep with and without variation compensation", [
        ("--sizes", "sizes", str, "128,256,512,1024,4096,8192", "comma-separated codebook sizes"),
        ("--svcomp", "svcomp", str, "both", "on, off or both"),
        ("--data", "data", str, None, "directory of .wav files"),
        ("--out", "out", str, None, "results CSV"),
        ("--plot-data", "plot_data", str, None, "optional CSV of (K, metric, svcomp, value)"),
        *_BUDGET_FLAGS,
    ], ["data", "out"]),
    "ablate": ("Ablation table: full, -bottleneck, encoder variant, external speaker", [
        ("--data", "data", str, None, "directory of .wav files"),
        ("--k", "k", int, 256, "codebook size"),
        ("--out", "out", str, None, "results CSV"),
        *_BUDGET_FLAGS,
    ], ["data", "out"]),
    "toy-corpus": ("Write a synthetic multi-speaker corpus", [
        ("--out", "out", str, None, "output directory"),
        ("--speakers", "speakers", int, 4, "number of pseudo-speakers"),
        ("--clips", "clips", int, 10, "clips per speaker"),
    ], ["out"]),
}


def _onoff(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _fmt_default(v):
    if isinstance(v, bool):
        return "on" if v else "off"
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skqvc", description="One-shot voice conversion with K-means quantization.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")
    for name, (desc, flags, _required) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        for flag, dest, typ, default, text in _COMMON + flags:
            shown = f" (default: {_fmt_default(default)})" if default is not None else ""
            if typ == "flag":
                p.add_argument(flag, dest=dest, action="store_true", default=None, help=text)
            elif typ == "onoff":
                p.add_argument(flag, dest=dest, type=_onoff, default=None, metavar="on|off", help=text + shown)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None, help=text + shown)
    return parser


def resolve_options(command: str, args: argparse.Namespace, env=None) -> dict:
    """Merge explicit flags over the config file over defaults (``SKQVC_SEED`` for the seed)."""
    from .training import _coerce, read_config_file

    env = os.environ if env is None else env
    _, flags, required = SUBCOMMANDS[command]
    specs = {dest: (typ, default) for _, dest, typ, default, _ in _COMMON + flags}
    config = read_config_file(args.config) if args.config else {}
    opts = {}
    for dest, (typ, default) in specs.items():
        explicit = getattr(args, dest, None)
        if explicit is not None:
            opts[dest] = explicit
        elif dest in config:
            try:
                opts[dest] = _onoff(config[dest]) if typ in ("onoff", "flag") else (
                    typ(config[dest]) if callable(typ) else config[dest])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config {args.config}: bad value for {dest}: {config[dest]!r}") from exc
        elif dest == "seed" and env.get("SKQVC_SEED", "").strip():
            try:
                opts[dest] = int(env["SKQVC_SEED"])
            except ValueError as exc:
                raise UsageError(f"SKQVC_SEED must be an integer, got {env['SKQVC_SEED']!r}") from exc
        else:
            opts[dest] = default
    # config keys without a flag (train only) pass straight into TrainConfig
    opts["_extra"] = {k: _coerce(k, v, None) for k, v in config.items() if k not in specs}
    for dest in required:
        if opts.get(dest) is None:
            flag = next(f for f, d, *_ in flags if d == dest)
            raise MissingFlag(f"skqvc {command}: missing required flag {flag}")
    return opts


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_build_codebook(o):
    from .codebook import fit_codebook, save_codebook
    from .dataset import load_corpus
    from .features import load_features, make_encoder

    if bool(o["features"]) == bool(o["data"]):
        raise MissingFlag("skqvc build-codebook: give exactly one of --features or --data")
    if o["features"]:
        paths = sorted(Path(o["features"]).glob("*.skqf"))
        if not paths:
            from .errors import EmptyDataset

            raise EmptyDataset(f"no .skqf files in {o['features']}")
        feats = [load_features(p) for p in paths]
        tag = str(o["features"])
    else:
        feats = [u.features for u in load_corpus(o["data"], make_encoder(o["encoder"]))]
        tag = f"{o['data']} {o['encoder']}"
    cb = fit_codebook(feats, K=o["k"], batch_size=o["batch_size"], seed=o["seed"],
                      max_iters=o["max_iters"], training_tag=tag)
    save_codebook(o["out"], cb)
    print(f"K={cb.K} dim={cb.dim} frames={cb.fit_meta['frames']} checksum={cb.checksum()[:16]}")


def _cmd_extract_features(o):
    from .dataset import list_wavs
    from .errors import EmptyDataset
    from .features import load_waveform, make_encoder, write_features

    enc = make_encoder(o["encoder"])
    paths = list_wavs(o["data"])
    if not paths:
        raise EmptyDataset(f"no .wav files in {o['data']}")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        fs = enc(load_waveform(p))
        write_features(out / f"{p.stem}.skqf", fs)
    print(f"wrote {len(paths)} feature files to {out}")


def _cmd_train(o):
    from .codebook import load_codebook
    from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

    cfg_fields = TrainConfig.__dataclass_fields__
    values = dict(o["_extra"])
    for key in cfg_fields:
        if key in o and o[key] is not None:
            values[key] = o[key]
    out_dir = Path(o["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    values.setdefault("log_path", str(out_dir / "train.log"))
    cfg = TrainConfig.from_dict(values)
    cb = load_codebook(cfg.codebook_path)
    resume = load_checkpoint(o["resume"], cb) if o["resume"] else None
    (out_dir / "config.txt").write_text(cfg.to_text())
    state = fit(o["data"], cfg, resume=resume, codebook=cb)
    save_checkpoint(out_dir / "final.bin", state)
    print(f"trained to step {state.step}; checkpoint {out_dir / 'final.bin'}")


def _load_input(path, encoder):
    from .features import load_features, load_waveform

    p = Path(path)
    if p.suffix.lower() == ".skqf":
        return load_features(p)
    return encoder(load_waveform(p))


def _cmd_convert(o):
    from .codebook import load_codebook
    from .conversion import convert
    from .dataset import utterance_mel_mean
    from .features import load_waveform, make_encoder, write_waveform
    from .training import load_checkpoint

    cb = load_codebook(o["codebook"])
    ckpt = load_checkpoint(o["ckpt"], cb)
    enc = make_encoder(o["encoder"] or ckpt.config.encoder)
    src = _load_input(o["source"], enc)
    spk = None
    if ckpt.model.speaker_adapter is not None:
        spk = utterance_mel_mean(load_waveform(o["target"]))
        tgt = None
    else:
        tgt = _load_input(o["target"], enc)
    y = convert(src, tgt, ckpt, cb, speaker_vector=spk)
    write_waveform(o["out"], y)
    print(f"wrote {o['out']} ({y.length} samples)")


def _budget(o):
    from .evaluation import Budget

    return Budget(
        steps=o["steps"], batch_size=o["batch_size"], segment_frames=o["segment_frames"], lr=o["lr"],
        gen_channels=o["gen_channels"], disc_scale=o["disc_scale"], codebook_iters=o["codebook_iters"],
        seed=o["seed"], encoder=o["encoder"], heldout_per_speaker=o["heldout_per_speaker"],
    )


def _cmd_evaluate(o):
    from .codebook import load_codebook
    from .evaluation import Budget, _Corpus, evaluate_checkpoint, write_table
    from .training import load_checkpoint

    cb = load_codebook(o["codebook"])
    ckpt = load_checkpoint(o["ckpt"], cb)
    budget = Budget(seed=o["seed"], encoder=ckpt.config.encoder, heldout_per_speaker=o["heldout_per_speaker"])
    row = evaluate_checkpoint(ckpt, cb, _Corpus(o["data"], budget), ckpt.config.encoder)
    print(write_table([row], o["out"]), end="")


def _cmd_sweep(o):
    from .evaluation import plot_points, sweep_codebook_sizes, write_table

    try:
        sizes = [int(s) for s in o["sizes"].split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--sizes must be comma-separated integers, got {o['sizes']!r}") from exc
    sv = {"on": True, "off": False, "both": "both"}.get(o["svcomp"])
    if sv is None:
        raise UsageError(f"--svcomp must be on, off or both, got {o['svcomp']!r}")
    rows = sweep_codebook_sizes(sizes, sv, o["data"], _budget(o))
    print(write_table(rows, o["out"]), end="")
    if o["plot_data"]:
        lines = ["K,metric,svcomp,value"]
        for metric in ("recon_mel_l1", "f0_pcc", "code_agreement", "quant_mse"):
            for k, v, s in plot_points(rows, metric):
                lines.append(f"{k},{metric},{'on' if s else 'off'},{v!r}")
        Path(o["plot_data"]).write_text("\n".join(lines) + "\n")


def _cmd_ablate(o):
    from .evaluation import run_ablations, write_table

    rows = run_ablations(o["data"], _budget(o), K=o["k"])
    print(write_table(rows, o["out"]), end="")


def _cmd_toy_corpus(o):
    from .toy import make_toy_corpus

    paths = make_toy_corpus(o["out"], n_speakers=o["speakers"], clips_per_speaker=o["clips"], seed=o["seed"])
    print(f"wrote {len(paths)} clips to {o['out']}")


_HANDLERS = {
    "build-codebook": _cmd_build_codebook,
    "extract-features": _cmd_extract_features,
    "train": _cmd_train,
    "convert": _cmd_convert,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "toy-corpus": _cmd_toy_corpus,
}


def run(argv=None, env=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
            raise UnknownSubcommand(f"skqvc: unknown subcommand {argv[0]!r} (choose from {', '.join(SUBCOMMANDS)})")
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return EXIT_OK if not exc.code else EXIT_USAGE
        if args.command is None:
            raise UsageError("skqvc: missing subcommand")
        opts = resolve_options(args.command, args, env)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SKQVCError as exc:  # unreadable config file
        print(f"skqvc: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if opts["verbose"]:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        _HANDLERS[args.command](opts)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (SKQVCError, OSError, ValueError) as exc:
        print(f"skqvc {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())
