"""Command-line entry point: ``fastwave prepare|train|upsample|eval|schedule|bench``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
4 checkpoint version mismatch. Errors print one line prefixed ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dsp, metrics
from .config import ConfigError, RunConfig
from .edm import (Denoiser, Preconditioner, StatisticsError, build_schedule, estimate_stats,
                  keyed_rng, DatasetStats)
from .model import FULL_RATE, build_model
from .nn.layers import count_flops, count_params
from .train import (CheckpointFormatError, CheckpointVersionError, Trainer, TrainingError,
                    TrainState, load_checkpoint, save_checkpoint, with_weights)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERSION = 0, 2, 3, 4
MANIFEST_HEADER = ["path", "samples", "split"]


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


# --------------------------------------------------------------------------
# Manifest and stats files


def speaker_of(path: Path) -> str:
    """VCTK-style speaker id: the file stem up to the first underscore."""
    return path.stem.split("_", 1)[0]


def write_manifest(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def read_manifest(path, split: str | None = None) -> list[tuple[Path, int, str]]:
    """Rows of the manifest, resolved against its directory; ``split="all"`` keeps every row."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != MANIFEST_HEADER:
            raise CommandError(f"{path}: bad manifest header")
        rows = []
        seen = set()
        for rel, samples, tag in reader:
            if rel in seen:
                raise CommandError(f"{path}: duplicate entry {rel}")
            seen.add(rel)
            full = path.parent / rel
            if not full.exists():
                raise CommandError(f"{path}: missing file {rel}")
            if split in (None, "all") or tag == split:
                rows.append((full, int(samples), tag))
    return rows


def load_clips(rows) -> list[dsp.AudioClip]:
    clips = []
    for full, _, _ in rows:
        clip = dsp.read_wav(full)
        if clip.sample_rate != FULL_RATE:
            raise CommandError(f"{full}: expected {FULL_RATE} Hz, got {clip.sample_rate}")
        clips.append(clip)
    return clips


def read_stats(path) -> DatasetStats:
    d = json.loads(Path(path).read_text())
    return DatasetStats(float(d["sigma_data"]), float(d["p_mean"]), float(d["p_std"]), int(d["n_segments"]))


def _segments(samples: np.ndarray, length: int):
    for start in range(0, len(samples), length):
        seg = samples[start:start + length]
        if len(seg) >= 2:
            yield seg


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except CheckpointVersionError as exc:
        raise CommandError(str(exc), EXIT_VERSION) from None
    except (CheckpointFormatError, OSError) as exc:
        raise CommandError(f"cannot load checkpoint: {exc}") from None


# --------------------------------------------------------------------------
# Commands


def cmd_prepare(args) -> int:
    data_dir = Path(args.data_dir)
    files = sorted(p for p in data_dir.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
    if not files:
        raise CommandError("no input files")
    manifest_dir = Path(args.manifest).resolve().parent
    clips = []
    for path in files:
        try:
            clip = dsp.read_wav(path)
        except (dsp.WavFormatError, OSError) as exc:
            warn(f"skipping unreadable file {path}: {exc}")
            continue
        if clip.sample_rate != FULL_RATE:
            warn(f"skipping {path}: sample rate {clip.sample_rate} != {FULL_RATE}")
            continue
        clips.append((path, clip))
    if not clips:
        raise CommandError("no usable 48 kHz input files")

    speakers = sorted({speaker_of(p) for p, _ in clips})
    n_test = max(1, round(args.test_fraction * len(speakers))) if args.test_fraction > 0 else 0
    n_test = min(n_test, len(speakers) - 1)
    test_speakers = set(speakers[len(speakers) - n_test:]) if n_test else set()

    rows, segments = [], []
    for path, clip in clips:
        split = "test" if speaker_of(path) in test_speakers else "train"
        rows.append((os.path.relpath(path.resolve(), manifest_dir), len(clip), split))
        if split == "train":
            segments.extend(_segments(clip.samples, args.segment_length))
    try:
        stats = estimate_stats(segments)
    except StatisticsError as exc:
        raise CommandError(f"cannot estimate dataset statistics: {exc}") from None

    write_manifest(rows, args.manifest)
    Path(args.stats).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"clips: {len(rows)} ({sum(r[2] == 'test' for r in rows)} test)")
    print(f"sigma_data = {stats.sigma_data!r}")
    print(f"p_mean = {stats.p_mean!r}")
    print(f"p_std = {stats.p_std!r}")
    return EXIT_OK


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except ConfigError as exc:
        raise CommandError(f"config {path}: {exc}") from None


def cmd_train(args) -> int:
    run = _load_config(args.config)
    try:
        config = run.train_config()
        model_config = run.model_config()
    except ValueError as exc:
        raise CommandError(f"config {args.config}: {exc}") from None
    if args.seed is not None:
        config.seed = args.seed
    if args.max_steps is not None:
        config.max_steps = args.max_steps

    ckpt = Path(args.checkpoint)
    log_path = Path(args.log) if args.log else ckpt.with_name(ckpt.name + ".log.csv")
    if args.resume and ckpt.exists():
        net, state = _load_checkpoint(ckpt)
    else:
        net = build_model(model_config, seed=config.seed)
        state = TrainState(stats=read_stats(args.stats))
    clips = [c.samples for c in load_clips(read_manifest(args.manifest, "train"))]
    if not clips:
        raise CommandError("manifest has no train clips")
    trainer = Trainer(net, state, clips, config)

    fresh = not (args.resume and log_path.exists())
    with open(log_path, "w" if fresh else "a") as log:
        if fresh:
            log.write("step,loss,wall_seconds\n")
        t0 = time.perf_counter()
        while state.step < config.max_steps:
            try:
                loss = trainer.step()
            except TrainingError as exc:
                save_checkpoint(net, state, ckpt)
                raise CommandError(f"step {state.step + 1}: {exc}", EXIT_NUMERIC) from None
            log.write(f"{state.step},{loss!r},{time.perf_counter() - t0:.6f}\n")
            if state.step % config.checkpoint_every == 0:
                save_checkpoint(net, state, ckpt)
    save_checkpoint(net, state, ckpt)
    print(f"trained to step {state.step}; checkpoint {ckpt}")
    return EXIT_OK


def _inference_model(path, use_ema: bool):
    net, state = _load_checkpoint(path)
    if use_ema and state.ema:
        net = with_weights(net, state.ema)
    return Denoiser(net, Preconditioner(state.stats.sigma_data))


def cmd_upsample(args) -> int:
    try:
        clip = dsp.read_wav(args.input)
    except (dsp.WavFormatError, OSError) as exc:
        raise CommandError(f"cannot read {args.input}: {exc}") from None
    rate = clip.sample_rate
    if rate > FULL_RATE or FULL_RATE % rate:
        raise CommandError(f"input rate {rate} Hz must divide {FULL_RATE} Hz")
    model = _inference_model(args.checkpoint, not args.no_ema)
    if rate == FULL_RATE:
        warn("input is already 48 kHz; writing it unchanged")
        dsp.write_wav(clip, args.output, args.encoding)
        return EXIT_OK
    low = dsp.upsample_to(clip, FULL_RATE).samples
    schedule = run_schedule_kwargs(args)
    t0 = time.perf_counter()
    est = metrics.super_resolve(model, low, rate, args.nfe, keyed_rng(args.seed, 0),
                                cond_scale=1.0 / model.pre.sigma_data, **schedule)
    elapsed = time.perf_counter() - t0
    dsp.write_wav(dsp.AudioClip(np.clip(est, -1.0, 1.0), FULL_RATE), args.output, args.encoding)
    print(f"rtf: {metrics.rtf(len(est) / FULL_RATE, max(elapsed, 1e-12)):.4f}")
    return EXIT_OK


def run_schedule_kwargs(args) -> dict:
    return dict(sigma_min=args.sigma_min, sigma_max=args.sigma_max, rho=args.rho)


def cmd_eval(args) -> int:
    rows = read_manifest(args.manifest, args.split)
    if not rows:
        raise CommandError(f"manifest has no {args.split} clips")
    clips = load_clips(rows)
    model = _inference_model(args.checkpoint, not args.no_ema)
    report = metrics.evaluate(model, clips, args.rates, args.nfe, args.seed, **run_schedule_kwargs(args))
    out = Path(args.out)
    out.write_text(report.to_csv(include_timing=False))
    out.with_suffix(".txt").write_text(report.to_table(include_timing=False))
    out.with_suffix(".timing.csv").write_text(
        "metric,mean,std\n" f"rtf,{metrics.format_value(report.rtf[0])},{metrics.format_value(report.rtf[1])}\n")
    print(report.to_table())
    return EXIT_OK


def cmd_schedule(args) -> int:
    try:
        schedule = build_schedule(args.sigma_min, args.sigma_max, args.rho, args.n)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    text = "i,sigma\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(schedule.values))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model = _inference_model(args.checkpoint, use_ema=True)
    else:
        run = _load_config(args.config)
        model = Denoiser(build_model(run.model_config(), seed=args.seed), Preconditioner(0.1))
    n = int(round(args.duration * FULL_RATE))
    rng = keyed_rng(args.seed, 0)
    low = rng.standard_normal(n) * 0.1
    rtfs = []
    for r in range(args.repeats):
        t0 = time.perf_counter()
        metrics.super_resolve(model, low, 16000, args.nfe, keyed_rng(args.seed, 1, r),
                              cond_scale=1.0 / model.pre.sigma_data)
        rtfs.append(metrics.rtf(args.duration, max(time.perf_counter() - t0, 1e-12)))
    mu, sd = metrics.mean_std(rtfs)
    print(f"params      {count_params(model.net)}")
    print(f"gflops/eval {count_flops(model.net, FULL_RATE) / 1e9:.4f}  (1 s at 48 kHz)")
    print(f"nfe         {args.nfe}")
    print(f"rtf         {mu:.4f} ± {sd:.4f}  ({args.repeats} runs of {args.duration:g} s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing


def _rates(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rate list {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="fastwave", description="Diffusion audio super-resolution toolkit.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help):
        p = sub.add_parser(name, help=help, description=help, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS threads (falls back to $FASTWAVE_THREADS, then 1)")
        return p

    def schedule_flags(p):
        p.add_argument("--sigma-min", type=float, default=0.002)
        p.add_argument("--sigma-max", type=float, default=80.0)
        p.add_argument("--rho", type=float, default=7.0)

    p = command("prepare", cmd_prepare, "Build a manifest and dataset statistics from a WAV directory.")
    p.add_argument("data_dir")
    p.add_argument("--manifest", required=True, help="output manifest CSV")
    p.add_argument("--stats", required=True, help="output statistics JSON")
    p.add_argument("--segment-length", type=int, default=32768)
    p.add_argument("--test-fraction", type=float, default=0.08, help="fraction of speakers held out")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for interface uniformity")

    p = command("train", cmd_train, "Train the denoiser.")
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="metrics log (default: <checkpoint>.log.csv)")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")
    p.add_argument("--max-steps", type=int, default=None, help="override train.max_steps")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")

    p = command("upsample", cmd_upsample, "Super-resolve a WAV file to 48 kHz.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--nfe", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")
    p.add_argument("--no-ema", action="store_true", help="use raw instead of EMA weights")
    schedule_flags(p)

    p = command("eval", cmd_eval, "Benchmark a checkpoint on a manifest.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--rates", type=_rates, default=[8000, 12000, 16000, 24000])
    p.add_argument("--nfe", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", help="manifest split to score ('all' for every row)")
    p.add_argument("--out", required=True, help="report CSV; .txt table and .timing.csv written alongside")
    p.add_argument("--no-ema", action="store_true")
    schedule_flags(p)

    p = command("schedule", cmd_schedule, "Print the noise-level schedule as CSV.")
    schedule_flags(p)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for interface uniformity")

    p = command("bench", cmd_bench, "Report parameters, GFLOPs and real-time factor.")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--duration", type=float, default=1.0, help="seconds of audio per run")
    p.add_argument("--nfe", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _thread_limit(threads):
    if threads is None:
        threads = int(os.environ.get("FASTWAVE_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=max(1, threads))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
