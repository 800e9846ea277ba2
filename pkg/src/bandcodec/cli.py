"""Command-line entry point: train, encode, decode, eval and inspect.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import struct
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .audio_io import WavError, read_wav, write_wav
from .autoencoder.checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .autoencoder.model import VARIANTS, Codec, ConfigError, ModelConfig
from .autoencoder.train import CSV_FIELDS, NumericalError, train
from .bitstream import BitstreamError, bitrate, deserialize, parse_header, serialize
from .dsp import AudioBuffer, SpectralError, make_band_plan
from .quantizer import QuantizerError, QuantizerStack, quantize, quantizer_to_bytes, subset_decode
from .synth import synthetic_batch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
EVAL_COLUMNS = ("reference", "estimate", "stft_distance", "mel_distance", "snr_db")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


DATA_ERRORS = (
    DataError, WavError, BitstreamError, CheckpointError, QuantizerError,
    SpectralError, metrics.MetricError, OSError,
)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment.  Keys may use dashes or underscores."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, argv: list[str], args: argparse.Namespace):
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    given = {
        a.dest
        for a in parser._actions
        for opt in a.option_strings
        if any(arg == opt or arg.startswith(opt + "=") for arg in argv)
    }
    for key, raw in values.items():
        if key in given:
            continue
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = act.type(raw) if act.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
            if act.choices and value not in act.choices:
                raise UsageError(f"config key {key}: {value!r} not in {list(act.choices)}")
        setattr(args, key, value)
    return args


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _model_config(args) -> tuple[ModelConfig, int]:
    preset = VARIANTS[args.variant]
    strides = args.strides or preset["strides"]
    try:
        cfg = ModelConfig(
            strides=strides,
            base_channels=args.base_channels,
            latent_dim=args.latent_dim,
            conv_groups=args.conv_groups,
            sample_rate=args.sample_rate,
            activation=args.activation,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return cfg, preset["residual_stages"]


def _load_corpus(path, cfg: ModelConfig, segment: int) -> np.ndarray:
    root = Path(path)
    files = sorted(root.glob("*.wav")) if root.is_dir() else [root]
    if not files or not all(f.is_file() for f in files):
        raise DataError(f"no readable WAV files at {path}")
    segs = []
    for f in files:
        x = read_wav(f, cfg.sample_rate).samples
        for start in range(0, len(x) - segment + 1, segment):
            segs.append(x[start : start + segment])
    if not segs:
        raise DataError(f"corpus at {path} has no clip of at least {segment} samples")
    return np.stack(segs)


def cmd_train(args) -> int:
    if not args.synthetic and not args.corpus:
        raise UsageError("train needs --corpus PATH or --synthetic")
    cfg, residual = _model_config(args)
    out = Path(args.out)
    if args.synthetic:
        data = synthetic_batch(args.batch * args.n_batches, args.segment, cfg.sample_rate, args.seed)
    else:
        data = _load_corpus(args.corpus, cfg, args.segment)
    batches = [data[i : i + args.batch] for i in range(0, len(data), args.batch)]
    model = Codec(cfg, seed=args.seed)
    plan = make_band_plan(cfg.latent_rate, (4, 2, 1), residual)
    q = QuantizerStack.create(plan, cfg.latent_dim, bits=args.bits, mode=args.mode)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()

        def log(report):
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in report.as_row().items()})
            if not args.quiet:
                print(f"step {report.step} mel={report.mel:.5f} commit={report.commitment:.5f}")

        history = train(model, q, batches, args.steps, seed=args.seed, lr=args.lr, callback=log)
    save_checkpoint(out / "model.mfae", model, q)
    (out / "quantizer.mbsq").write_bytes(quantizer_to_bytes(q))
    first, last = history[0].mel, history[-1].mel
    print(f"trained {args.steps} steps: mel {first:.5f} -> {last:.5f}")
    print(f"wrote {out / 'model.mfae'}, {out / 'quantizer.mbsq'}, {out / 'loss.csv'}")
    return EXIT_OK


def _stream_hash(model, q, pad: int) -> bytes:
    return config_digest(model, q) + struct.pack("<H", pad)


def _accounting(model, q) -> str:
    row = bitrate(model.cfg, q.n_stages, q.bits)
    return (
        f"frame_rate_hz={float(row.frame_rate):g}\n"
        f"tokens_per_s={float(row.tokens_per_s):g}\n"
        f"bits_per_s={float(row.bits_per_s):g}\n"
    )


def cmd_encode(args) -> int:
    model, q = load_checkpoint(args.checkpoint)
    audio = read_wav(args.input, model.cfg.sample_rate)
    n = len(audio)
    frames = model.cfg.n_frames(n)
    pad = frames * model.cfg.hop - n
    if pad > 0xFFFF:
        raise DataError("padding does not fit in the stream header")
    z = model.encode_array(audio.samples)[0].astype(np.float64)
    tokens, _, _ = quantize(z, q)
    data = serialize(tokens, model.cfg.sample_rate, config_hash=_stream_hash(model, q, pad))
    Path(args.output).write_bytes(data)
    print(f"frames={tokens.n_frames}\ntokens={tokens.indices.size}\npadding_samples={pad}")
    print(_accounting(model, q), end="")
    return EXIT_OK


def cmd_decode(args) -> int:
    model, q = load_checkpoint(args.checkpoint)
    tokens, header = deserialize(Path(args.input).read_bytes())
    if header.config_hash[:6] != config_digest(model, q):
        raise DataError("bitstream was not produced by this checkpoint (config hash mismatch)")
    if header.sample_rate != model.cfg.sample_rate or tokens.n_stages != q.n_stages:
        raise DataError("bitstream layout does not match checkpoint")
    (pad,) = struct.unpack("<H", header.config_hash[6:])
    stages = args.stages or tuple(range(1, q.n_stages + 1))
    bad = [s for s in stages if not 1 <= s <= q.n_stages]
    if bad:
        raise UsageError(f"--stages {bad} outside 1..{q.n_stages}")
    zhat = subset_decode(tokens, q, stages)
    y = model.decode_array(zhat)[0].astype(np.float64)
    if pad:
        y = y[:-pad]
    write_wav(args.output, AudioBuffer(y, model.cfg.sample_rate), pcm16=args.pcm16)
    print(f"decoded stages {','.join(map(str, stages))}: {len(y)} samples -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = read_wav(args.reference)
    est = read_wav(args.estimate)
    if len(ref) != len(est):
        raise DataError(f"length mismatch: {len(ref)} vs {len(est)} samples")
    row = {
        "reference": args.reference,
        "estimate": args.estimate,
        "stft_distance": metrics.stft_distance(ref, est),
        "mel_distance": metrics.mel_distance_multiscale(ref, est),
        "snr_db": metrics.snr(ref, est),
    }
    for key in EVAL_COLUMNS[2:]:
        print(f"{key}={row[key]:.6f}")
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(EVAL_COLUMNS)
            w.writerow([row[c] if isinstance(row[c], str) else f"{row[c]:.6f}" for c in EVAL_COLUMNS])
    return EXIT_OK


def _inspect_tokens(path: Path, args) -> None:
    tokens, header = deserialize(path.read_bytes())
    print(f"file={path}\nformat=mbst\nversion={header.version}")
    print(f"sample_rate={header.sample_rate}\nframe_rate_hz={float(header.frame_rate):g}")
    print(f"n_stages={header.n_stages}\nbits_per_code={header.bits_per_code}\nframes={header.frame_count}")
    tps = header.frame_rate * header.n_stages
    print(f"tokens_per_s={float(tps):g}\nbits_per_s={float(tps * header.bits_per_code):g}")
    for s in metrics.token_statistics(tokens):
        print(f"stage{s.stage}.entropy_bits={s.entropy_bits:.6f}")
        print(f"stage{s.stage}.perplexity={s.perplexity:.3f}")
        print(f"stage{s.stage}.used_codes={s.used_codes}")
    if args.checkpoint and args.reference:
        model, q = load_checkpoint(args.checkpoint)
        ref = read_wav(args.reference, model.cfg.sample_rate)
        zhat = subset_decode(tokens, q, range(1, q.n_stages + 1))
        y = model.decode_array(zhat)[0].astype(np.float64)[: len(ref)]
        report = metrics.perceptual_entropy_report(ref, AudioBuffer(y, ref.sample_rate), tokens, q.plan)
        print(report.to_text(), end="")


def _inspect_checkpoint(path: Path) -> None:
    model, q = load_checkpoint(path)
    print(f"file={path}\nformat=mfae\nparameters={model.parameters.count()}")
    print(model.cfg.to_text(), end="")
    print(f"mode={q.mode}\nn_stages={q.n_stages}\nbits={q.bits}\nlatent_rate_hz={q.plan.latent_rate:g}")
    for k in range(q.n_stages):
        band = q.plan.stage_band(k)
        desc = "residual" if band is None else f"{band.f_min:g}-{band.f_max:g}"
        print(f"stage{k + 1}.band_hz={desc}")
        print(f"stage{k + 1}.usage_perplexity={metrics.codebook_usage_perplexity(q.codebooks[k].ema_counts):.3f}")
    print(_accounting(model, q), end="")


def cmd_inspect(args) -> int:
    path = Path(args.file)
    head = path.read_bytes()[:4]
    if head == b"MBST":
        _inspect_tokens(path, args)
    elif head == b"MFAE":
        _inspect_checkpoint(path)
    else:
        # let the stream parser produce its diagnostic
        parse_header(path.read_bytes())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bandcodec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a codec on a WAV corpus or synthetic tones")
    t.add_argument("--config", help="key=value file; keys are the long option names")
    t.add_argument("--corpus", help="directory of WAV files (or a single file)")
    t.add_argument("--synthetic", action="store_true", help="train on seeded sinusoid mixtures")
    t.add_argument("--out", default="run", help="output directory (default: run)")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--batch", type=int, default=2)
    t.add_argument("--n-batches", type=int, default=1, help="synthetic batches to cycle through")
    t.add_argument("--segment", type=int, default=8000, help="samples per training clip")
    t.add_argument("--mode", choices=("mbs", "vanilla"), default="mbs")
    t.add_argument("--variant", choices=tuple(VARIANTS), default="75hz")
    t.add_argument("--strides", type=_int_list, help="override the variant's strides")
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--latent-dim", type=int, default=32)
    t.add_argument("--conv-groups", type=int, default=4)
    t.add_argument("--sample-rate", type=int, default=24000)
    t.add_argument("--activation", choices=("vanilla", "amplitude", "full"), default="full")
    t.add_argument("--bits", type=int, default=9)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)
    p.train_parser = t

    e = sub.add_parser("encode", help="WAV to .mbst token stream")
    e.add_argument("input")
    e.add_argument("checkpoint")
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help=".mbst token stream to WAV")
    d.add_argument("input")
    d.add_argument("checkpoint")
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--stages", type=_int_list, help="comma-separated 1-based stages to decode")
    d.add_argument("--pcm16", action="store_true", help="write 16-bit PCM instead of float32")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser(
        "eval",
        help="compare two WAV files",
        description="Prints stft_distance, mel_distance and snr_db. With --csv, appends a row with "
        f"columns {', '.join(EVAL_COLUMNS)}.",
    )
    v.add_argument("reference")
    v.add_argument("estimate")
    v.add_argument("--csv", help="append results to this CSV file")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="statistics for a .mbst stream or .mfae checkpoint")
    i.add_argument("file")
    i.add_argument("--checkpoint", help="with --reference, adds the perceptual-entropy report for a stream")
    i.add_argument("--reference", help="original WAV for the perceptual-entropy report")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "train":
            _apply_config(parser.train_parser, argv, args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
