"""
SurrealDriver command line

Run single episodes, the four-condition ablation, trace replay and coaching from the shell.

Usage:
    surreal-driver run --condition D --seed 3 --duration 60 --trace-out run.jsonl
    surreal-driver ablation --seeds 20 --duration 300 --report report.md
    surreal-driver replay run.jsonl
    surreal-driver coach run.jsonl --guidelines guidelines.json
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from .coach import GuidelineStore, assess_episode, load_store, merge_into_file
from .config import add_override_arguments, collect_overrides, load_config
from .errors import ConfigError, SurrealDriverError
from .formatter import format_assessment, format_episode, format_report
from .harness import condition, episode_guidelines, replay, run_ablation_suite, run_episode
from .reasoners import RemoteCoach, load_demonstrations
from .trace import read_trace, write_trace

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_DIVERGED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surreal-driver", description="Driving-agent simulation and ablation harness")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (DEBUG, INFO, WARNING, ...)")
    subparsers = parser.add_subparsers(dest="command", required=True, help="Command to run")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--format", choices=["markdown", "json"], default="markdown", help="Output format")
    common.add_argument("--demonstrations", help="Demonstrations file (defaults to the shipped one)")
    add_override_arguments(common)

    run_parser = subparsers.add_parser("run", parents=[common], help="Run one episode")
    run_parser.add_argument("--condition", default="D", help="Ablation condition A, B, C or D")
    run_parser.add_argument("--seed", type=int, default=None, help="World seed")
    run_parser.add_argument("--duration", type=float, default=None, help="Simulated seconds")
    run_parser.add_argument("--reasoner", choices=["scripted", "remote"], help="Decision backend")
    run_parser.add_argument("--no-safety", action="store_true", help="Disable the safety criteria")
    run_parser.add_argument("--trace-out", help="Write the JSON Lines trace here")
    run_parser.add_argument("--guidelines", help="Guideline store file to drive with")

    ablation_parser = subparsers.add_parser("ablation", parents=[common], help="Run conditions A-D over paired seeds")
    ablation_parser.add_argument("--seeds", type=int, default=20, help="Number of seeds (0..N-1)")
    ablation_parser.add_argument("--duration", type=float, default=None, help="Simulated seconds per episode")
    ablation_parser.add_argument("--reasoner", choices=["scripted", "remote"], help="Decision backend")
    ablation_parser.add_argument("--workers", type=int, default=1, help="Parallel worker processes")
    ablation_parser.add_argument("--report", help="Also write the report to this file")
    ablation_parser.add_argument("--remote-coach", action="store_true", help="Ask the chat endpoint for condition D's guidelines")

    replay_parser = subparsers.add_parser("replay", help="Re-simulate a trace and check it reproduces")
    replay_parser.add_argument("trace", help="JSON Lines trace file")

    coach_parser = subparsers.add_parser("coach", parents=[common], help="Assess a trace and print guidelines")
    coach_parser.add_argument("trace", help="JSON Lines trace file")
    coach_parser.add_argument("--guidelines", help="Merge the new guidelines into this store file")
    coach_parser.add_argument("--remote-coach", action="store_true", help="Ask the chat endpoint for the guidelines")

    return parser


def _config(args: argparse.Namespace):
    overrides = collect_overrides(args)
    if getattr(args, "seed", None) is not None:
        overrides["sim.seed"] = args.seed
    if getattr(args, "duration", None) is not None:
        overrides["sim.episode_duration"] = args.duration
    if getattr(args, "reasoner", None):
        overrides["reasoner.kind"] = args.reasoner
    return load_config(args.config, overrides)


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args)
    spec = condition(args.condition)
    if args.no_safety:
        spec = replace(spec, safety_enabled=False)
    store = load_store(args.guidelines, config.agent.guideline_max) if args.guidelines else None
    trace = run_episode(
        spec,
        config.sim.seed,
        config.sim.episode_duration,
        config=config,
        guidelines=store,
        demonstrations=load_demonstrations(args.demonstrations),
    )
    if args.trace_out:
        write_trace(trace, args.trace_out)
    print(format_episode(trace, args.format))
    return EXIT_ABORTED if trace.footer.aborted else EXIT_OK


def _remote_coach(args: argparse.Namespace, config) -> Optional[RemoteCoach]:
    return RemoteCoach(config.reasoner) if args.remote_coach else None


def cmd_ablation(args: argparse.Namespace) -> int:
    config = _config(args)
    remote_coach = _remote_coach(args, config)
    try:
        report = run_ablation_suite(
            list(range(args.seeds)),
            config.sim.episode_duration,
            config=config,
            demonstrations=load_demonstrations(args.demonstrations),
            workers=args.workers,
            remote_coach=remote_coach,
            progress=lambda cid, seed: logging.getLogger(__name__).info("finished %s/seed %d", cid, seed),
        )
    finally:
        if remote_coach is not None:
            remote_coach.close()
    text = format_report(report, args.format)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    result = replay(read_trace(args.trace))
    if result.ok:
        print(f"Trace verified ({result.mode} replay, {result.ticks_checked} ticks).")
        return EXIT_OK
    print(f"Divergence at tick {result.divergence_tick} in {result.field}: expected {result.expected!r}, got {result.actual!r}")
    return EXIT_DIVERGED


def cmd_coach(args: argparse.Namespace) -> int:
    config = _config(args)
    trace = read_trace(args.trace)
    assessment = assess_episode(trace, config.coach)
    max_size = config.agent.guideline_max
    store = load_store(args.guidelines, max_size) if args.guidelines else GuidelineStore(max_size=max_size)
    remote_coach = _remote_coach(args, config)
    try:
        guidelines = episode_guidelines(trace, assessment, store, remote=remote_coach)
    finally:
        if remote_coach is not None:
            remote_coach.close()
    if args.guidelines:
        store = merge_into_file(args.guidelines, guidelines, max_size)
        logging.getLogger(__name__).info("guideline store %s holds %d guideline(s)", args.guidelines, len(store))
    print(format_assessment(assessment, guidelines, args.format))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "ablation": cmd_ablation,
    "replay": cmd_replay,
    "coach": cmd_coach,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SurrealDriverError, ValueError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_ERROR
