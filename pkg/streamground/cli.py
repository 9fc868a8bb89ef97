"""
Command-line interface for streamground.

Example usage:
    streamground gen-data --set data.train_streams=20
    streamground train --config run.toml
    streamground stream --query "event_2 second" --input frames.jsonl
    streamground eval
    streamground ablate
    streamground config show
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, TextIO

from . import _env_setup
from ._version import __version__
from .checkpoint import CheckpointManager
from .config import RunConfig, describe_fields, load_config
from .engine import FeatureFrame, StreamingEngine
from .errors import CheckpointError, MalformedInputError, StreamGroundError
from .model import QueryTask
from .synthetic import Vocabulary, iter_frame_records, read_manifest, read_split, write_corpus

logger = logging.getLogger("streamground.cli")


class Timer:
    """Context manager for timing operations."""

    def __init__(self, name: str, verbose: bool = False):
        self.name = name
        self.verbose = verbose
        self.start: Optional[float] = None

    def __enter__(self) -> "Timer":
        if self.verbose:
            self.start = time.perf_counter()
        return self

    def __exit__(self, *args) -> None:
        if self.verbose and self.start is not None:
            elapsed = time.perf_counter() - self.start
            print(f"  ⏱️  {self.name}: {elapsed:.3f}s", file=sys.stderr)


def _status(message: str) -> None:
    print(message, file=sys.stderr)


def _setup_logging(verbose: bool) -> None:
    level = logging.INFO if verbose else _env_setup.log_level_from_env()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("streamground")
    root.handlers = [h for h in root.handlers if isinstance(h, logging.NullHandler)] + [handler]
    root.setLevel(level)


def _user_config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _checkpoint_path(args, config: RunConfig) -> Path:
    if getattr(args, "checkpoint", None):
        return Path(args.checkpoint)
    latest = CheckpointManager(config.paths.run_dir or None).latest()
    if latest is None:
        raise CheckpointError("no trained model found; run 'streamground train' or pass --checkpoint")
    return latest


def _merged_config(user: RunConfig, trained: RunConfig) -> RunConfig:
    """Model-defining sections from the checkpoint; engine, eval and paths from the user."""
    return replace(trained, engine=user.engine, eval=user.eval, paths=user.paths)


def _load_trained(args, verbose: bool):
    from .trainer import load_model

    user = _user_config(args)
    path = _checkpoint_path(args, user)
    with Timer("Load checkpoint", verbose):
        loaded = load_model(path)
    _status(f"📦 Loaded model from {path} (epoch {loaded.epoch})")
    return loaded, _merged_config(user, loaded.config)


def handle_gen_data_command(args) -> int:
    config = _user_config(args)
    root = Path(args.output or config.paths.data_dir)
    with Timer("Generate corpus", args.verbose):
        write_corpus(config.data, root)
    manifest = read_manifest(root)
    for split, counts in manifest["counts"].items():
        _status(f"  {split:<5} {counts['streams']:>4} streams, {counts['queries']:>4} queries ({counts['again']} again)")
    _status(f"✅ Corpus written to {root} (checksum {manifest['checksum'][:16]})")
    return 0


def handle_train_command(args) -> int:
    from .trainer import Trainer

    config = _user_config(args)
    with Timer("Load training split", args.verbose):
        streams = read_split(config.paths.data_dir, "train", args.limit)
    manager = CheckpointManager(config.paths.run_dir or None)
    if args.fresh:
        manager.clear()
        _status(f"🧹 Cleared run directory {manager.run_dir}")
    trainer = Trainer(config, streams, manager)
    _status(
        f"🏋️  Training on {len(streams)} streams for {config.train.epochs} epochs "
        f"({trainer.model.num_parameters():,} parameters), run dir {manager.run_dir}"
    )

    def progress(m) -> None:
        _status(
            f"  epoch {m.epoch:>3}  loss {m.loss:.4f}  cls {m.cls:.4f}  reg {m.reg:.4f}  "
            f"future {m.future:.4f}  lr {m.learning_rate:.2e}  {m.seconds:.1f}s"
        )

    result = trainer.fit(progress)
    _status(f"✅ Model saved to {result.final_path}")
    return 0


def _read_queries(args, vocabulary: Vocabulary) -> List[QueryTask]:
    queries: List[QueryTask] = []
    for k, text in enumerate(args.query or []):
        words = text.replace(",", " ").split()
        queries.append(QueryTask(f"q{k}", vocabulary.encode(words)))
    if args.annotations:
        from .synthetic import read_annotations

        for annotation in read_annotations(args.annotations):
            if args.stream_id is None or annotation.stream_id == args.stream_id:
                queries.append(annotation.to_task())
    if not queries:
        raise MalformedInputError("no queries given; use --query or --annotations")
    return queries


def _frames(handle: TextIO, source: str, feature_dim: int) -> Iterator[FeatureFrame]:
    for index, features in iter_frame_records(handle, source, feature_dim):
        yield FeatureFrame(index, features)


def handle_stream_command(args) -> int:
    from .trainer import build_memory

    loaded, config = _load_trained(args, args.verbose)
    if args.mode:
        config = replace(config, engine=replace(config.engine, mode=args.mode))
    queries = _read_queries(args, Vocabulary(config.data.event_types))
    engine = StreamingEngine(
        loaded.model,
        queries,
        build_memory(config, loaded.weights),
        config.engine,
        use_future=config.ablation.future_prediction,
    )

    try:
        source = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
    except OSError as exc:
        raise MalformedInputError(f"cannot read frames from {args.input}: {exc}") from exc
    sink = sys.stdout if args.output in (None, "-") else open(args.output, "w", encoding="utf-8")
    period = 1.0 / args.realtime if args.realtime else 0.0
    windows = emitted = frames = 0
    started = time.perf_counter()
    try:
        for frame in _frames(source, args.input or "<stdin>", loaded.model.in_dim):
            if period:
                delay = started + frames * period - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            output = engine.push(frame)
            frames += 1
            if output is not None:
                for prediction in output.emissions:
                    sink.write(prediction.to_json() + "\n")
                sink.flush()
                windows += 1
                emitted += len(output.emissions)
        if engine.state.buffer:
            tail = engine.finish()
            for prediction in tail:
                sink.write(prediction.to_json() + "\n")
            sink.flush()
            windows += 1
            emitted += len(tail)
    finally:
        if source is not sys.stdin:
            source.close()
        if sink is not sys.stdout:
            sink.close()
    elapsed = time.perf_counter() - started
    _status(f"✅ {frames} frames, {windows} windows flushed, {emitted} predictions in {elapsed:.2f}s")
    return 0


def _write_reports(reports, out_dir: Path, stem: str) -> None:
    from .evaluation import format_report, write_rows_csv

    rows = [row for report in reports.values() for row in report.rows()]
    write_rows_csv(out_dir / f"{stem}.csv", rows)
    text = "\n\n".join(format_report(r) for r in reports.values())
    (out_dir / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def handle_eval_command(args) -> int:
    from .evaluation import evaluate, recompute_from_logs

    if args.emissions:
        config = _user_config(args)
        annotations = Path(config.paths.data_dir) / args.split / "annotations.jsonl"
        reports = recompute_from_logs(Path(args.emissions), annotations, config)
    else:
        loaded, config = _load_trained(args, args.verbose)
        with Timer("Load evaluation split", args.verbose):
            streams = read_split(config.paths.data_dir, args.split, args.limit)
        emission_dir = Path(config.paths.output_dir) / "emissions" / args.split
        with Timer("Stream evaluation split", args.verbose):
            reports = evaluate(loaded.model, streams, config, loaded.weights, emission_dir=emission_dir)
        _status(f"📄 Emission logs in {emission_dir}")
    out_dir = Path(config.paths.output_dir)
    _write_reports(reports, out_dir, f"report_{args.split}")
    _status(f"✅ Report written to {out_dir}")
    return 0


def handle_ablate_command(args) -> int:
    from .evaluation import run_ablation, write_rows_csv

    config = _user_config(args)
    train = read_split(config.paths.data_dir, "train", args.limit)
    test = read_split(config.paths.data_dir, "test", args.limit)
    out_dir = Path(config.paths.output_dir)
    rows = run_ablation(config, train, test, out_dir / "ablation_runs")
    path = write_rows_csv(out_dir / "ablation.csv", rows)
    for row in rows:
        again = {k: v for k, v in row.items() if k.startswith("again R@1,")}
        _status(f"  {row['row']:<22} {row['mode']}  " + "  ".join(f"{k} {v:.2f}" for k, v in again.items()))
    _status(f"✅ Ablation table written to {path}")
    return 0


def handle_sweep_command(args) -> int:
    from .evaluation import tradeoff_sweep, write_rows_csv

    loaded, config = _load_trained(args, args.verbose)
    train = read_split(config.paths.data_dir, "train", args.limit)
    test = read_split(config.paths.data_dir, "test", args.limit)
    out_dir = Path(config.paths.output_dir)
    result = tradeoff_sweep(
        loaded.model, config, loaded.weights, config.eval.sweep_points, train, test, out_dir / "sweep_runs"
    )
    path = write_rows_csv(out_dir / "sweep.csv", result.rows)
    for item in result.violations:
        _status(f"  ⚠️  {item}")
    _status(f"✅ Trade-off curve written to {path}")
    return 0


def handle_bench_command(args) -> int:
    from .bench import measure_throughput, step_latency_profile
    from .memory import ScaleWeights
    from .trainer import build_model

    if args.checkpoint:
        loaded, config = _load_trained(args, args.verbose)
        model, weights = loaded.model, loaded.weights
    else:
        config = _user_config(args)
        model, weights = build_model(config), ScaleWeights.uniform(config.model.scales)
    report = measure_throughput(model, config, weights, frames=args.frames, queries=args.queries)
    print(f"Parameters:      {report.parameters:,}")
    print(f"Frames:          {report.frames}")
    print(f"Queries:         {report.queries}")
    print(f"Throughput:      {report.frames_per_second:.1f} frames/s")
    if args.profile:
        with Timer("Latency profile", args.verbose):
            profile = step_latency_profile(model, config, weights, args.profile, samples=args.samples)
        for position, seconds in sorted(profile.items()):
            print(f"Step latency @{position:>8}: {seconds * 1e3:.3f} ms/frame (median)")
    return 0


def handle_config_command(args) -> int:
    if args.config_action == "init":
        path = RunConfig().save(args.path)
        _status(f"✅ Default configuration written to {path}")
        return 0
    if args.config_action == "show":
        print(_user_config(args).to_toml())
        return 0
    _status("Error: no config action given. Use 'config --help' for options.")
    return 1


def _config_key_listing() -> str:
    lines = ["Configuration keys (section.key = default  [origin] help):"]
    for key, default, help_text, origin in describe_fields():
        lines.append(f"  {key} = {default!r}  [{origin}] {help_text}")
    return "\n".join(lines)


def create_parser() -> argparse.ArgumentParser:
    """Create and configure the argument parser."""
    parser = argparse.ArgumentParser(
        prog="streamground",
        description="Online temporal grounding over feature streams",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "Examples:\n"
            "  streamground gen-data\n"
            "  streamground train --set train.epochs=5\n"
            '  streamground stream --query "event_1 first" --input frames.jsonl\n'
            "  streamground eval --split test\n\n" + _config_key_listing()
        ),
    )
    parser.add_argument("--version", action="version", version=f"streamground {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="TOML run configuration")
    common.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)"
    )
    common.add_argument("--verbose", action="store_true", help="Show progress logs and timings")

    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen = subparsers.add_parser("gen-data", parents=[common], help="Generate the synthetic corpus")
    gen.add_argument("--output", "-o", help="corpus directory (default: paths.data_dir)")

    train = subparsers.add_parser("train", parents=[common], help="Train a model on the corpus")
    train.add_argument("--limit", type=int, help="use only the first N training streams")
    train.add_argument("--fresh", action="store_true", help="delete earlier checkpoints and logs in the run directory")

    stream = subparsers.add_parser("stream", parents=[common], help="Run online inference over a frame stream")
    stream.add_argument("--checkpoint", help="model checkpoint (default: latest in the run directory)")
    stream.add_argument("--input", "-i", help="frame JSONL file, '-' for stdin (default)")
    stream.add_argument("--output", "-o", help="emission JSONL file, '-' for stdout (default)")
    stream.add_argument("--query", "-q", action="append", help='query words, e.g. "event_0 second" (repeatable)')
    stream.add_argument("--annotations", help="annotations JSONL to take queries from")
    stream.add_argument("--stream-id", help="only annotations of this stream")
    stream.add_argument("--mode", choices=["E", "F", "both"], help="prediction modes to emit")
    stream.add_argument("--realtime", type=float, metavar="FPS", help="pace input to this frame rate")

    ev = subparsers.add_parser("eval", parents=[common], help="Evaluate recall and prediction delay")
    ev.add_argument("--checkpoint", help="model checkpoint (default: latest in the run directory)")
    ev.add_argument("--split", default="test", choices=["train", "test"], help="corpus split (default: test)")
    ev.add_argument("--limit", type=int, help="use only the first N streams")
    ev.add_argument("--emissions", help="recompute metrics from this emission log directory")

    ablate = subparsers.add_parser("ablate", parents=[common], help="Train and compare the component ablations")
    ablate.add_argument("--limit", type=int, help="use only the first N streams per split")

    sweep = subparsers.add_parser("sweep", parents=[common], help="Accuracy-latency sweep over future windows")
    sweep.add_argument("--checkpoint", help="model checkpoint (default: latest in the run directory)")
    sweep.add_argument("--limit", type=int, help="use only the first N streams per split")

    bench = subparsers.add_parser("bench", parents=[common], help="Report parameter count and throughput")
    bench.add_argument("--checkpoint", help="model checkpoint (default: freshly initialized model)")
    bench.add_argument("--frames", type=int, default=1024, help="frames to stream (default: 1024)")
    bench.add_argument("--queries", type=int, default=1, help="concurrent queries (default: 1)")
    bench.add_argument(
        "--profile", type=int, nargs="+", metavar="POSITION", help="median step latency at these stream positions"
    )
    bench.add_argument("--samples", type=int, default=64, help="windows measured per profile position (default: 64)")

    cfg = subparsers.add_parser("config", help="Show or write the run configuration")
    cfg_sub = cfg.add_subparsers(dest="config_action", help="Configuration actions")
    cfg_sub.add_parser("show", parents=[common], help="Print the effective configuration as TOML")
    init = cfg_sub.add_parser("init", help="Write the default configuration")
    init.add_argument("path", help="destination TOML file")

    return parser


HANDLERS = {
    "gen-data": handle_gen_data_command,
    "train": handle_train_command,
    "stream": handle_stream_command,
    "eval": handle_eval_command,
    "ablate": handle_ablate_command,
    "sweep": handle_sweep_command,
    "bench": handle_bench_command,
    "config": handle_config_command,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run the command; returns the process exit code."""
    parser = create_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 1
    _setup_logging(getattr(args, "verbose", False))
    try:
        return HANDLERS[args.command](args)
    except KeyboardInterrupt:
        _status("\nOperation cancelled by user")
        return 130
    except StreamGroundError as e:
        _status(f"❌ Error: {e}")
        return e.exit_code
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        _status(f"❌ Error: {e}")
        return 1


def main() -> None:
    """Main CLI entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
