"""Command line front end: ``rcpc encode|decode|stats|synth``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .codec import decode, encode, encode_with_stats, rows_to_csv
from .core import (
    CodecConfig,
    ConfigError,
    MemoryPolicy,
    Mode,
    generate_synthetic_cube,
    load_raw,
    save_raw,
)
from .entropy import CorruptStreamError

_MODES = {
    "lossless": Mode.LOSSLESS,
    "nl": Mode.NEAR_LOSSLESS,
    "rate-a": Mode.RATE_A,
    "rate-b": Mode.RATE_B,
}


def _pair(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def _dims(text: str) -> tuple[int, int, int]:
    try:
        z, y, x = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ZxYxX, got {text!r}") from None
    return z, y, x


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


def _sidecar(path: str) -> Path:
    return Path(path).with_suffix(".hdr")


def _add_coding_options(p: argparse.ArgumentParser):
    p.add_argument("--block", type=_pair, default=(16, 16), metavar="WxH")
    p.add_argument("--bands-pred", type=int, default=3, metavar="P")
    p.add_argument("--est-lines", type=int, default=2)
    p.add_argument("--tau", type=float, default=5.0)
    p.add_argument("--clip", type=int, default=None)
    p.add_argument("--memory", default="memory1", help="memory1, long or windowK")
    p.add_argument("--no-skip", action="store_true", help="never zero out blocks")


def _config(args, mode: Mode) -> CodecConfig:
    bw, bh = args.block
    return CodecConfig(
        mode=mode,
        q=getattr(args, "q", 1) or 1,
        target=getattr(args, "target", None),
        block_w=bw,
        block_h=bh,
        pred_bands=args.bands_pred,
        est_lines=args.est_lines,
        tau=args.tau,
        clip=args.clip,
        memory_policy=MemoryPolicy.parse(args.memory),
        skip_blocks=not args.no_skip,
    )


def cmd_encode(args) -> int:
    mode = _MODES[args.mode]
    if mode == Mode.NEAR_LOSSLESS and args.q is None:
        raise ConfigError("--mode nl needs --q")
    if mode in (Mode.RATE_A, Mode.RATE_B) and args.target is None:
        raise ConfigError(f"--mode {args.mode} needs --target")
    cube = load_raw(args.input, args.hdr)
    stream, report = encode(cube, _config(args, mode))
    Path(args.out).write_bytes(stream)
    q = report.quality
    snr = "lossless" if q.snr_db is None else f"{q.snr_db:.2f} dB"
    print(f"{args.out}: {len(stream)} bytes, {q.rate_bpp:.4f} bpp, SNR {snr}, MAD {q.mad}")
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    return 2 if report.target_missed else 0


def cmd_decode(args) -> int:
    cube = decode(Path(args.input).read_bytes())
    hdr = args.hdr or _sidecar(args.out)
    save_raw(cube, args.out, hdr)
    print(f"{args.out}: {cube.bands}x{cube.lines}x{cube.columns}, {cube.bit_depth} bit (header {hdr})")
    return 0


def cmd_stats(args) -> int:
    cube = load_raw(args.input, args.hdr)
    modes = {"a": (Mode.RATE_A,), "b": (Mode.RATE_B,), "both": (Mode.RATE_A, Mode.RATE_B)}[args.modes]
    rows = encode_with_stats(cube, _config(args, Mode.LOSSLESS), args.targets, modes)
    text = rows_to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    cube = generate_synthetic_cube(
        args.seed, args.dims, spectral_corr=args.spectral_corr, spatial_corr=args.spatial_corr,
        noise_sigma=args.sigma, bit_depth=args.bit_depth,
    )
    hdr = args.hdr or _sidecar(args.out)
    save_raw(cube, args.out, hdr, interleave=args.interleave)
    print(f"{args.out}: {cube.bands}x{cube.lines}x{cube.columns} ({args.interleave.upper()}, header {hdr})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a raw cube")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--hdr", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=sorted(_MODES), default="lossless")
    p.add_argument("--q", type=int, default=None, help="global odd step for --mode nl")
    p.add_argument("--target", type=float, default=None, help="bits per pixel")
    _add_coding_options(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress to a BIL raw cube")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hdr", default=None, help="sidecar header path (default: OUT with .hdr)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stats", help="rate/SNR/MAD table over several targets")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--hdr", required=True)
    p.add_argument("--targets", type=_floats, required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--modes", choices=("a", "b", "both"), default="both")
    _add_coding_options(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic Gauss-Markov cube")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, required=True, metavar="ZxYxX")
    p.add_argument("--out", required=True)
    p.add_argument("--hdr", default=None)
    p.add_argument("--bit-depth", type=int, default=12)
    p.add_argument("--sigma", type=float, default=50.0)
    p.add_argument("--spectral-corr", type=float, default=0.9)
    p.add_argument("--spatial-corr", type=float, default=0.9)
    p.add_argument("--interleave", choices=("bil", "bsq"), default="bil")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CorruptStreamError, OSError) as exc:
        print(f"rcpc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
