"""Command-line interface: ``tilecodec encode|decode|train|sweep|inspect``.

Every subcommand writes machine-readable JSON lines to standard output and
diagnostics to standard error.  Exit codes: 0 success, 1 usage error,
2 bad input data (unreadable file, corrupt stream, wrong model), 3 internal
error.  Set ``TILECODEC_LOG`` (DEBUG, INFO, WARNING, ...) for verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from collections import Counter
from pathlib import Path

from . import bitstream, evaluate, image_io, pipeline, train
from .corpus import default_corpus_dir, load_images
from .errors import TileCodecError
from .model import PAPER_ARCH, TOY_ARCH, CodecModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("tilecodec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(record: dict) -> None:
    def clean(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        return v

    print(json.dumps({k: clean(v) for k, v in record.items()}, sort_keys=False), flush=True)


def _threads(value: int | None) -> int:
    return value if value else (os.cpu_count() or 1)


def _load_model(path: str | None) -> CodecModel:
    if path is None:
        return bitstream.load_toy_model()
    return bitstream.load_model_file(path)


def _int_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_encode(args) -> int:
    if args.mode == "constant":
        if args.k is None or args.target_psnr is not None:
            raise UsageError("constant mode takes --k and not --target-psnr")
        cfg = pipeline.EncodeConfig.constant(args.k)
    else:
        if args.target_psnr is None or args.k is not None:
            raise UsageError("adaptive mode takes --target-psnr and not --k")
        cfg = pipeline.EncodeConfig.adaptive(args.target_psnr)
    img = image_io.read_image(args.input)
    model = _load_model(args.model)
    start = time.perf_counter()
    enc = pipeline.encode_image(img, cfg, model, threads=_threads(args.threads))
    Path(args.output).write_bytes(enc.data)
    log.info("encoded %s in %.2fs", args.input, time.perf_counter() - start)
    record = {
        "bpp": enc.bpp,
        "payload_bpp": enc.payload_bpp,
        "bytes": len(enc.data),
        "tiles": int(enc.plan.size),
        "mode": cfg.mode,
        "psnr": pipeline.psnr(img, enc.reconstruction),
        "mean_k": float(enc.plan.mean()),
    }
    if cfg.mode == "constant":
        record["k"] = cfg.k
    else:
        record["target_psnr"] = cfg.target_psnr
        record["k_max_tiles"] = int((enc.plan == pipeline.K_MAX).sum())
    _emit(record)
    return EXIT_OK


def cmd_decode(args) -> int:
    data = Path(args.input).read_bytes()
    model = _load_model(args.model)
    img = pipeline.decode_image(data, model, threads=_threads(args.threads))
    image_io.write_image(img, args.output)
    _emit({"width": img.shape[1], "height": img.shape[0], "output": str(args.output)})
    return EXIT_OK


def cmd_inspect(args) -> int:
    header, plan, _ = bitstream.read_stream(Path(args.input).read_bytes())
    hist = Counter(int(k) for k in plan.reshape(-1))
    record = {
        "version": header.version,
        "width": header.width,
        "height": header.height,
        "tile_size": header.tile_size,
        "grid": list(header.grid),
        "mode": "constant" if header.mode == bitstream.MODE_CONSTANT else "adaptive",
        "model_digest": header.model_digest.hex(),
        "payload_bits": int(plan.sum()) * 128,
        "histogram": {str(k): hist[k] for k in sorted(hist)},
    }
    if header.mode == bitstream.MODE_CONSTANT:
        record["k"] = header.mode_param
    else:
        record["target_psnr"] = header.target_psnr
    _emit(record)
    return EXIT_OK


def cmd_train(args) -> int:
    corpus_dir = Path(args.corpus) if args.corpus else default_corpus_dir() / "train"
    images = load_images(corpus_dir)
    if not images:
        raise FileNotFoundError(f"no images found in {corpus_dir}")
    arch = PAPER_ARCH if args.arch == "paper" else TOY_ARCH
    init = _load_model(args.init) if args.init else None
    if args.phase == "residual" and init is None:
        raise UsageError("--phase residual needs --init with a trained context model")
    if init is not None and init.arch != arch and args.arch_given:
        raise UsageError("--arch disagrees with the architecture of --init")
    model = init if init is not None else CodecModel.initialize(arch, args.seed)
    patches = train.stack_patches(train.build_corpus(images, args.patches_per_image))
    log.info("mined %d patches from %d images", len(patches), len(images))

    def progress(phase):
        def cb(step, loss):
            if args.log_every and (step % args.log_every == 0 or step == args.steps - 1):
                _emit({"phase": phase, "step": step, "loss": loss})

        return cb

    phases = ["context", "residual"] if args.phase == "both" else [args.phase]
    for phase in phases:
        cfg = train.TrainConfig(
            batch_size=args.batch_size, lr0=args.lr, steps=args.steps, seed=args.seed, phase=phase, unroll=args.unroll
        )
        if phase == "context":
            model = train.train_context(patches, cfg, model=model, callback=progress(phase))
        else:
            model = train.train_residual(patches, model, cfg, callback=progress(phase))
    bitstream.save_model_file(model, args.out)
    _emit({"out": str(args.out), "digest": model.digest.hex(), "parameters": model.num_parameters(), "steps": args.steps})
    return EXIT_OK


def cmd_sweep(args) -> int:
    corpus_dir = Path(args.corpus) if args.corpus else default_corpus_dir() / "eval"
    images = load_images(corpus_dir)
    if not images:
        raise FileNotFoundError(f"no images found in {corpus_dir}")
    model = _load_model(args.model)
    threads = _threads(args.threads)
    if args.mode == "constant":
        ks = [int(p) for p in args.params]
        if any(k != p or not 0 <= k <= pipeline.K_MAX for k, p in zip(ks, args.params)):
            raise UsageError(f"constant sweep needs integer k in [0, {pipeline.K_MAX}]")
        records, maps = evaluate.sweep_constant(images, model, ks, threads), []
    else:
        if any(not 0 <= p < 100 for p in args.params):
            raise UsageError("adaptive targets must lie in [0, 100) dB")
        records, maps = evaluate.sweep_adaptive(images, model, args.params, threads)
    for r in records:
        _emit({"image": r.image, "mode": r.mode, "param": r.param, "bpp": r.bpp, "payload_bpp": r.payload_bpp, "psnr": r.psnr})
    for p in evaluate.summarize(records):
        _emit({"summary": True, "mode": p.mode, "param": p.param, "images": p.images, "bpp": p.bpp,
               "payload_bpp": p.payload_bpp, "psnr": p.psnr, "inf_count": p.inf_count})
    if args.csv:
        evaluate.export_csv(records, args.csv)
    if args.maps_dir and maps:
        out = Path(args.maps_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m in maps:
            evaluate.export_bitmap(m, out / f"{m.image}_{evaluate._fmt_param(m.param)}.pgm")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tilecodec", description="Tile-based learned image codec.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="compress an image into a stream")
    e.add_argument("--input", required=True, help="PNG or binary PPM image")
    e.add_argument("--output", required=True, help="stream file to write")
    e.add_argument("--model", help="model checkpoint (default: shipped toy model)")
    e.add_argument("--mode", choices=("constant", "adaptive"), default="constant", help="bit allocation mode")
    e.add_argument("--k", type=int, help="iterations per tile in constant mode (0-16)")
    e.add_argument("--target-psnr", type=float, help="per-tile PSNR target in dB for adaptive mode")
    e.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct an image from a stream")
    d.add_argument("--input", required=True, help="stream file")
    d.add_argument("--output", required=True, help="image to write; format from suffix (.png or .ppm)")
    d.add_argument("--model", help="model checkpoint (default: shipped toy model)")
    d.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    d.set_defaults(func=cmd_decode)

    t = sub.add_parser("train", help="train the context predictor and/or residual coder")
    t.add_argument("--phase", choices=("context", "residual", "both"), default="both", help="which network to train")
    t.add_argument("--corpus", help="directory of training images (default: shipped toy corpus)")
    t.add_argument("--steps", type=int, default=2000, help="optimizer steps per phase; 0 writes the initialization")
    t.add_argument("--seed", type=int, default=0, help="seed for initialization and batching")
    t.add_argument("--out", required=True, help="checkpoint file to write")
    t.add_argument("--init", help="checkpoint to start from (required for --phase residual)")
    t.add_argument("--arch", choices=("toy", "paper"), help="layer widths for a fresh model (default: toy)")
    t.add_argument("--lr", type=float, help="initial learning rate (default: 1e-3 context, 3e-3 residual)")
    t.add_argument("--batch-size", type=int, default=32, help="patches per batch")
    t.add_argument("--unroll", type=int, default=8, help="residual iterations unrolled per training step")
    t.add_argument("--patches-per-image", type=int, default=100, help="hardest crops mined per image")
    t.add_argument("--log-every", type=int, default=100, help="emit a loss line every N steps (0: never)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="rate-distortion sweep over a corpus")
    s.add_argument("--corpus", help="directory of images (default: shipped evaluation images)")
    s.add_argument("--model", help="model checkpoint (default: shipped toy model)")
    s.add_argument("--mode", choices=("constant", "adaptive"), default="constant", help="allocation mode")
    s.add_argument("--params", type=_int_list, required=True, help="comma-separated k values or PSNR targets")
    s.add_argument("--csv", help="write per-image records to this CSV file")
    s.add_argument("--maps-dir", help="write adaptive bit-allocation maps (PGM) here")
    s.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect", help="print a stream's header and iteration histogram")
    i.add_argument("--input", required=True, help="stream file")
    i.set_defaults(func=cmd_inspect)
    return p


def _configure_logging() -> None:
    level = os.environ.get("TILECODEC_LOG", "WARNING").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "threads", None) is not None and args.threads < 1:
            parser.error("--threads must be at least 1")
        if args.command == "train":
            args.arch_given = args.arch is not None
            args.arch = args.arch or "toy"
            if args.steps < 0:
                parser.error("--steps must be non-negative")
            if args.unroll < 1:
                parser.error("--unroll must be at least 1")
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tilecodec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TileCodecError, OSError, ValueError) as exc:
        print(f"tilecodec {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"tilecodec {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
