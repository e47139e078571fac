"""Command-line entry point: ``ctrlsynth <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import bench, data, vq
from .codec import ControlSet, Vocabulary
from .decode import PnagConfig, ar_decode, mnag_decode, pnag_decode, trace_summary, write_trace
from .model import load_checkpoint
from .train import Corpus, TrainConfig, train, train_ar

log = logging.getLogger("ctrlsynth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- file helpers

def require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return path


def read_ppm(path) -> np.ndarray:
    raw = require(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary PPM (P6) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pixels = np.frombuffer(raw, np.uint8, w * h * 3, pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(image: np.ndarray, path) -> None:
    h, w, _ = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_grid(path) -> np.ndarray:
    rows = [line.split() for line in require(path).read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=np.int64)


def write_grid(grid: np.ndarray, path) -> None:
    Path(path).write_text("".join(" ".join(str(int(c)) for c in row) + "\n" for row in grid))


def parse_region(text: str) -> tuple[tuple[int, int, int, int] | None, str]:
    """``"r0,c0,r1,c1:path"`` (patch units, end exclusive) or a bare path."""
    head, sep, tail = text.partition(":")
    if sep and head.count(",") == 3:
        try:
            r0, c0, r1, c1 = (int(v) for v in head.split(","))
        except ValueError:
            raise UsageError(f"bad region {head!r}") from None
        if not (0 <= r0 < r1 and 0 <= c0 < c1):
            raise UsageError(f"empty or inverted region {head!r}")
        return (r0, c0, r1, c1), tail
    return None, text


def load_vocab(checkpoint: Path, K: int) -> Vocabulary:
    path = checkpoint.parent / "vocab.txt"
    return Vocabulary.load(path, K) if path.exists() else Vocabulary(data.LEXICON, K)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    records = data.make_dataset(args.n, args.seed, args.out, stratified=args.stratified)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _fit(records_or_patches, args) -> vq.Codebook:
    rng = np.random.default_rng([args.seed, 0])
    patches = records_or_patches
    if len(patches) > args.sample:
        patches = patches[np.sort(rng.choice(len(patches), args.sample, replace=False))]
    cb = vq.fit_codebook(patches, args.k, args.max_iters, seed=args.seed)
    cb.save(args.out)
    print(f"codebook K={cb.K} dim={cb.dim} iterations={len(cb.history) - 1} "
          f"objective={cb.history[-1]:.4f} -> {args.out}")
    return cb


def dataset_patches(path, patch: int) -> np.ndarray:
    records = data.read_dataset(require(path))
    return np.concatenate([vq.image_to_patches(r.image, patch, patch) for r in records])


def cmd_fit_vq(args) -> int:
    _fit(dataset_patches(args.data, args.patch), args)
    return 0


def cmd_vq(args) -> int:
    if args.vq_command == "fit":
        src = require(args.patches)
        patches = np.load(src) if src.suffix == ".npy" else dataset_patches(src, args.patch)
        _fit(np.asarray(patches, dtype=np.float64), args)
    elif args.vq_command == "encode":
        cb = vq.Codebook.load(require(args.codebook))
        grid = vq.encode_image(read_ppm(args.image), cb, args.patch, args.patch)
        write_grid(grid, args.out)
        print(f"{grid.shape[0]}x{grid.shape[1]} grid -> {args.out}")
    else:
        cb = vq.Codebook.load(require(args.codebook))
        image = vq.decode_tokens(read_grid(args.grid), cb, args.patch, args.patch)
        write_ppm(image, args.out)
        print(f"image -> {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(require(args.config)) if args.config else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return dataclasses.replace(cfg, **overrides)


def _corpus(args, cfg: TrainConfig) -> Corpus:
    cb = vq.Codebook.load(require(args.codebook))
    if cb.K != cfg.K:
        raise ValueError(f"codebook has K={cb.K} but the config says K={cfg.K}")
    return Corpus.build(data.read_dataset(require(args.data)), cb, cfg.patch)


def cmd_train(args, causal: bool = False) -> int:
    cfg = _train_config(args)
    corpus = _corpus(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.txt")
    (out / ("ar_config.txt" if causal else "train_config.txt")).write_text(cfg.to_text())
    runner = train_ar if causal else train
    _, report = runner(corpus, cfg, out, progress=lambda m: log.info(m))
    print(f"final_loss={report.epoch_losses[-1]:.6f}")
    print(f"seconds={report.seconds:.1f}")
    print(f"checkpoint={out / ('ar_final.ufcb' if causal else 'final.ufcb')}")
    return 0


def _pnag_config(args) -> PnagConfig:
    return PnagConfig(B=args.B, sigma=args.sigma, alpha=args.alpha, beta=args.beta, T=args.T,
                      patience=None if args.patience <= 0 else args.patience,
                      temperature=args.temperature, greedy=args.greedy)


def _controls(args, vocab: Vocabulary, cb: vq.Codebook, grid_shape) -> ControlSet:
    text = vocab.encode_text(args.text.split()) if args.text else None
    visuals = []
    for spec in args.visual:
        box, path = parse_region(spec)
        grid = vq.encode_image(read_ppm(path), cb, args.patch, args.patch)
        if box is not None:
            grid = grid[box[0]:box[2], box[1]:box[3]]
        visuals.append(grid)
    preserve = None
    if args.preserve:
        box, path = parse_region(args.preserve)
        if box is None:
            raise UsageError("--preserve needs r0,c0,r1,c1:source.ppm")
        source = vq.encode_image(read_ppm(path), cb, args.patch, args.patch)
        if source.shape != tuple(grid_shape):
            raise ValueError(f"preservation source grid {source.shape} != target {tuple(grid_shape)}")
        mask = np.zeros(grid_shape, dtype=bool)
        mask[box[0]:box[2], box[1]:box[3]] = True
        preserve = (source, mask)
    if preserve is not None:
        return ControlSet.preserve(preserve[0], preserve[1], text=text, visuals=visuals)
    return ControlSet(text, visuals)


def cmd_generate(args) -> int:
    ckpt = require(args.checkpoint)
    cb = vq.Codebook.load(require(args.codebook))
    model = load_checkpoint(ckpt)
    model.eval()
    vocab = load_vocab(ckpt, cb.K)
    w = model.config.grid_w
    grid_shape = (model.config.n_image // w, w)
    controls = _controls(args, vocab, cb, grid_shape)
    out = Path(args.out)
    for k in range(args.n):
        seed = args.seed + k
        if model.config.causal:
            result = ar_decode(controls, model, vocab, seed, args.temperature, args.greedy)
        elif args.decoder == "mnag":
            result = mnag_decode(controls, model, vocab, args.T, seed,
                                 temperature=args.temperature, greedy=args.greedy)
        else:
            result = pnag_decode(controls, model, vocab, _pnag_config(args), seed)
        path = out if args.n == 1 else out.with_name(f"{out.stem}_{k:03d}{out.suffix}")
        image = vq.decode_tokens(result.codes.reshape(grid_shape), cb, args.patch, args.patch)
        write_ppm(image, path)
        print(f"image={path}")
        if result.trace:
            print(trace_summary(result))
            if args.trace:
                tpath = Path(args.trace) if args.n == 1 else Path(args.trace).with_name(
                    f"{Path(args.trace).stem}_{k:03d}{Path(args.trace).suffix}")
                write_trace(result, tpath)
                print(f"trace={tpath}")
    return 0


def cmd_benchmark(args) -> int:
    model = load_checkpoint(require(args.checkpoint))
    ar_model = load_checkpoint(require(args.ar_checkpoint))
    model.eval()
    ar_model.eval()
    vocab = load_vocab(Path(args.checkpoint), model.config.K)
    configs = {f"pnag_b{B}": dataclasses.replace(_pnag_config(args), B=B) for B in args.beams}
    report = bench.benchmark_speed(ar_model, model, vocab, configs, args.n_samples, args.seed)
    for name in configs:
        report.extra[f"speedup_ar_over_{name}"] = report.ratio("ar", name)
    print(report.table())
    if args.report:
        report.write(args.report)
    return 0


def cmd_eval(args) -> int:
    ckpt = require(args.checkpoint)
    model = load_checkpoint(ckpt)
    model.eval()
    cb = vq.Codebook.load(require(args.codebook))
    vocab = load_vocab(ckpt, cb.K)
    report = bench.BenchReport()
    shape = (model.config.n_image // model.config.grid_w, model.config.grid_w)
    if model.config.causal:
        methods = {"ar": bench.ar_fn(model, vocab)}
    else:
        methods = {"mnag": bench.mnag_fn(model, vocab, args.T)}
        for B in args.beams:
            methods[f"pnag_b{B}"] = bench.pnag_fn(model, vocab, dataclasses.replace(_pnag_config(args), B=B))
    for name, fn in methods.items():
        log.info("evaluating %s", name)
        report.compliance[name] = bench.compliance_suite(fn, vocab, cb, args.n_prompts, args.seed, shape)
    if args.data and args.preservation_cases:
        grids = [vq.encode_image(r.image, cb, args.patch, args.patch)
                 for r in data.read_dataset(require(args.data))[:256]]
        for name, fn in methods.items():
            report.preservation[name] = bench.preservation_suite(fn, vocab, grids, args.preservation_cases,
                                                                 args.seed)
    print(report.table())
    if args.report:
        report.write(args.report)
    return 0


# ---------------------------------------------------------------- parser

def _add_train_flags(p) -> None:
    p.add_argument("--data", required=True, help="dataset file (.ufcd)")
    p.add_argument("--codebook", required=True, help="codebook file (.ufcv)")
    p.add_argument("--out-dir", required=True, help="directory for checkpoints")
    p.add_argument("--config", help="key=value training config file; flags override it")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        value = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(value, tuple):
            p.add_argument(flag, dest=f.name, type=lambda s: tuple(float(v) for v in s.split(",")),
                           help=f"comma-separated (default {','.join(map(str, value))})")
        elif isinstance(value, str):
            p.add_argument(flag, dest=f.name, choices=("float64", "float32"), help=f"(default {value})")
        else:
            p.add_argument(flag, dest=f.name, type=type(value), help=f"(default {value})")


def _add_decode_flags(p) -> None:
    d = PnagConfig()
    p.add_argument("--B", type=int, default=d.B, help="candidates per iteration (default %(default)s)")
    p.add_argument("--T", type=int, default=d.T, help="maximum iterations (default %(default)s)")
    p.add_argument("--sigma", type=float, default=d.sigma, help="relevance weight in the score (default %(default)s)")
    p.add_argument("--alpha", type=float, default=d.alpha, help="base mask ratio (default %(default)s)")
    p.add_argument("--beta", type=float, default=d.beta, help="decaying mask ratio (default %(default)s)")
    p.add_argument("--patience", type=int, default=d.patience,
                   help="stop after this many non-improving iterations, 0 disables (default %(default)s)")
    p.add_argument("--temperature", type=float, default=d.temperature, help="(default %(default)s)")
    p.add_argument("--greedy", action="store_true", help="argmax instead of sampling")
    p.add_argument("--patch", type=int, default=4, help="patch side in pixels (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctrlsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--n", type=int, default=4096, help="number of records (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="(default %(default)s)")
    p.add_argument("--out", default="dataset.ufcd", help="(default %(default)s)")
    p.add_argument("--stratified", action="store_true", help="cycle through all specs evenly")
    p.set_defaults(func=cmd_gen_data)

    def fit_flags(p):
        p.add_argument("--k", type=int, default=64, help="codebook size (default %(default)s)")
        p.add_argument("--max-iters", type=int, default=50, help="(default %(default)s)")
        p.add_argument("--sample", type=int, default=40000, help="patches drawn for fitting (default %(default)s)")
        p.add_argument("--patch", type=int, default=4, help="(default %(default)s)")
        p.add_argument("--seed", type=int, default=0, help="(default %(default)s)")
        p.add_argument("--out", default="codebook.ufcv", help="(default %(default)s)")

    p = sub.add_parser("fit-vq", help="fit a patch codebook on a dataset")
    p.add_argument("--data", required=True, help="dataset file (.ufcd)")
    fit_flags(p)
    p.set_defaults(func=cmd_fit_vq)

    p = sub.add_parser("vq", help="codebook tools: fit, encode, decode")
    vsub = p.add_subparsers(dest="vq_command", required=True, parser_class=_Parser)
    q = vsub.add_parser("fit", help="fit from a dataset file or an .npy array of patches")
    q.add_argument("--patches", required=True)
    fit_flags(q)
    q = vsub.add_parser("encode", help="PPM image -> token grid text file")
    q.add_argument("--codebook", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--patch", type=int, default=4, help="(default %(default)s)")
    q.add_argument("--out", default="grid.txt", help="(default %(default)s)")
    q = vsub.add_parser("decode", help="token grid text file -> PPM image")
    q.add_argument("--codebook", required=True)
    q.add_argument("--grid", required=True)
    q.add_argument("--patch", type=int, default=4, help="(default %(default)s)")
    q.add_argument("--out", default="decoded.ppm", help="(default %(default)s)")
    p.set_defaults(func=cmd_vq)

    p = sub.add_parser("train", help="train the bidirectional model")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("train-ar", help="train the left-to-right baseline")
    _add_train_flags(p)
    p.set_defaults(func=lambda a: cmd_train(a, causal=True))

    p = sub.add_parser("generate", help="decode images from controls")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--text", help='caption, e.g. "red circle center on blue"')
    p.add_argument("--visual", action="append", default=[],
                   help="visual control: image.ppm or r0,c0,r1,c1:image.ppm (patch units); repeatable")
    p.add_argument("--preserve", help="keep tokens of r0,c0,r1,c1:source.ppm (patch units, end exclusive)")
    p.add_argument("--decoder", choices=("pnag", "mnag"), default="pnag",
                   help="decoder for bidirectional checkpoints (default %(default)s)")
    p.add_argument("--n", type=int, default=1, help="images to generate (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="(default %(default)s)")
    p.add_argument("--out", default="generated.ppm", help="(default %(default)s)")
    p.add_argument("--trace", help="write the iteration trace here")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("benchmark", help="decoding latency: AR vs MNAG vs PNAG")
    p.add_argument("--checkpoint", required=True, help="bidirectional checkpoint")
    p.add_argument("--ar-checkpoint", required=True, help="causal checkpoint of the same size")
    p.add_argument("--n-samples", type=int, default=100, help="(default %(default)s)")
    p.add_argument("--beams", type=int, nargs="+", default=[1, 5], help="PNAG B values (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="(default %(default)s)")
    p.add_argument("--report", help="key=value report path")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("eval", help="compliance and preservation metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--data", help="dataset supplying preservation sources")
    p.add_argument("--n-prompts", type=int, default=200, help="(default %(default)s)")
    p.add_argument("--preservation-cases", type=int, default=100, help="(default %(default)s)")
    p.add_argument("--beams", type=int, nargs="+", default=[1, 5], help="PNAG B values (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="(default %(default)s)")
    p.add_argument("--report", help="key=value report path")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ctrlsynth: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"ctrlsynth: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
