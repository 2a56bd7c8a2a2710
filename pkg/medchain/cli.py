"""
Command-line entry points.

Every command writes CSV with a fixed header to --output (or stdout) and is
deterministic given its inputs and seed. Failures print one JSON line on stderr:

    {"error": "<reason>", "message": "...", "exit_code": n, ...}

Exit codes: 0 success, 1 usage, 2 configuration or validation, 3 runtime.
"""

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from functools import partial
from pathlib import Path
from typing import Any, NoReturn, Sequence

import pandas as pd

from .chain_optimizer import ChainConfig, OptimizationResult, TraceRow, bco, exhaustive_search, is_unimodal, utility_profile
from .des_engine import PipelineResult, PipelineScenario, run_pipeline_sim, sweep_seeds
from .errors import MedchainException, ReferentialError, UsageError
from .ledger_channels import NORMAL_CHANNEL, Channel
from .priority_queue import PriorityOrder, assign_priorities, coupled_service_rate, sojourn_table
from .scenario import Scenario, load_scenario
from .signal_monitor import DEFAULT_WINDOW_LENGTH, DEFAULT_ZETA, extract_features, monitor_cohort
from .signals_io import generate_synthetic_cohort, ingest_signals, write_csv

FEATURE_COLUMNS = ["patient", "channel", "session", "window", "mean", "variance", "rms", "kurtosis", "min", "max", "degenerate"]
MONITOR_COLUMNS = [
    "patient",
    "channel",
    "delta_before",
    "delta_during",
    "delta_after",
    "kappa",
    "exceeds",
    "status",
    "payload",
    "delta_bar",
]
QUEUE_COLUMNS = ["service_rate", "entity", "urgency", "rank", "equal", "priority"]
TRACE_COLUMNS = ["iteration", "m", "n", "latency", "security", "cost", "utility", "accepted"]
CHANNEL_COLUMNS = ["channel", "mode", *TRACE_COLUMNS]
ENTITY_REPORT_COLUMNS = ["discipline", "seed", "entity", "urgency", "samples", "mean", "half_width"]
CHANNEL_REPORT_COLUMNS = ["discipline", "seed", "channel", "blocks", "transactions", "mean", "p50", "p95", "max"]
DISPATCH_COLUMNS = [
    "discipline",
    "seed",
    "transaction",
    "entity",
    "channel",
    "enqueued_at",
    "block",
    "formed_at",
    "committed_at",
]
EVENT_COLUMNS = ["discipline", "seed", "time", "kind", "subject", "entity"]

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting, so they share the JSON error line."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def emit(frame: pd.DataFrame, output: str | Path | None) -> None:
    if output is None:
        frame.to_csv(sys.stdout, index=False, lineterminator="\n")
    else:
        write_csv(frame, output)


def _trace_row(row: TraceRow) -> dict[str, Any]:
    return {
        "iteration": row.iteration,
        "m": row.m,
        "n": row.n,
        "latency": row.latency,
        "security": row.security,
        "cost": row.cost,
        "utility": row.utility,
        "accepted": row.accepted,
    }


def _config_row(config: ChainConfig) -> dict[str, Any]:
    return _trace_row(TraceRow(0, config.m, config.n, config.latency, config.security, config.cost, config.utility, True))


def features_command(args: argparse.Namespace) -> None:
    signals = ingest_signals(args.signals, args.window_length)
    rows = []
    for (patient, channel, session), windows in signals.groups():
        for index, window in enumerate(windows):
            rows.append(
                {"patient": patient, "channel": channel, "session": session.value, "window": index}
                | extract_features(window).dict()
            )
    emit(pd.DataFrame(rows, columns=FEATURE_COLUMNS), args.output)


def monitor_command(args: argparse.Namespace) -> None:
    signals = ingest_signals(args.signals, args.window_length)
    baseline, assessments = monitor_cohort(signals.all_windows(), args.zeta)

    rows = []
    for assessment in assessments:
        profile = assessment.profile
        for channel, kappa in zip(profile.channel_ids, profile.kappa):
            before, during, after = assessment.deltas[channel]
            rows.append(
                {
                    "patient": assessment.patient_id,
                    "channel": channel,
                    "delta_before": before,
                    "delta_during": during,
                    "delta_after": after,
                    "kappa": kappa,
                    "exceeds": kappa > args.zeta,
                    "status": assessment.status.value,
                    "payload": assessment.payload.kind.value,
                    "delta_bar": baseline.delta_bar,
                }
            )
    emit(pd.DataFrame(rows, columns=MONITOR_COLUMNS), args.output)


def _bound_channel(scenario: Scenario, channel_id: int) -> Channel:
    for channel in scenario.bind_channels():
        if channel.id == channel_id:
            return channel
    raise ReferentialError(f"Scenario {scenario.name} has no channel {channel_id}", field="channels")


def queue_command(args: argparse.Namespace) -> None:
    scenario = load_scenario(args.scenario)
    coupled = args.coupled if args.coupled is not None else scenario.queue.coupled_channel

    if coupled is not None:
        channel = _bound_channel(scenario, coupled)
        rates = [coupled_service_rate(channel.block_size, channel.verification_latency)]
        logger.info(f"Service rate coupled to channel {coupled}: mu = {channel.block_size}/{channel.verification_latency}")
    elif args.service_rate:
        rates = list(args.service_rate)
    else:
        rates = list(scenario.queue.service_rate_sweep)

    rows = [
        {
            "service_rate": row.service_rate,
            "entity": row.entity_id,
            "urgency": row.urgency.value,
            "rank": row.rank,
            "equal": row.equal,
            "priority": row.priority,
        }
        for row in sojourn_table(scenario.queue_system(), rates)
    ]
    emit(pd.DataFrame(rows, columns=QUEUE_COLUMNS), args.output)


def _summary(channel_id: int, greedy: OptimizationResult, oracle: OptimizationResult) -> str:
    best, grid = greedy.config, oracle.config
    match = math.isclose(best.utility, grid.utility, rel_tol=1e-12, abs_tol=0.0)
    return (
        f"channel={channel_id} bco m={best.m} n={best.n} U={best.utility!r} iterations={greedy.iterations} "
        f"exhaustive m={grid.m} n={grid.n} U={grid.utility!r} evaluations={oracle.evaluations} match={match}"
    )


def optimize_command(args: argparse.Namespace) -> None:
    scenario = load_scenario(args.scenario)
    entry = scenario.channel_entry(args.channel)
    validators = scenario.validator_profiles()
    if entry.validator_ids is not None:
        validators = [v for v in validators if v.id in entry.validator_ids]

    params = scenario.params()
    weights = entry.weights.weights()
    greedy = bco(params, weights, validators)
    oracle = exhaustive_search(params, weights, validators)

    profile = [c.utility for c in utility_profile(params, weights, validators)]
    if not is_unimodal(profile):
        logger.warning(f"Channel {entry.id}: U(m, n*(m)) is not unimodal in m, the greedy stop may miss the optimum")
    gap = greedy.config.utility - oracle.config.utility
    if not math.isclose(greedy.config.utility, oracle.config.utility, rel_tol=1e-12, abs_tol=0.0):
        logger.warning(f"Channel {entry.id}: BCO is {gap} above the exhaustive optimum")

    emit(pd.DataFrame([_trace_row(r) for r in greedy.trace], columns=TRACE_COLUMNS), args.output)
    print(_summary(entry.id, greedy, oracle), flush=True)


def channels_command(args: argparse.Namespace) -> None:
    scenario = load_scenario(args.scenario)
    rows = []
    for channel in scenario.bind_channels():
        trace = [_trace_row(r) for r in channel.trace] or [_config_row(channel.config)]
        rows.extend({"channel": channel.id, "mode": channel.mode.value} | row for row in trace)
    emit(pd.DataFrame(rows, columns=CHANNEL_COLUMNS), args.output)


def _simulate_once(
    scenario: Scenario,
    pipeline: PipelineScenario,
    order: PriorityOrder | None,
    record_events: bool,
    seed: int,
) -> PipelineResult:
    return run_pipeline_sim(pipeline, scenario.sim_config(seed, record_events), order)


def _report_frames(label: str, seed: int, pipeline: PipelineScenario, result: PipelineResult) -> dict[str, list[dict[str, Any]]]:
    report = result.report
    urgency = {e.id: e.urgency.value for e in pipeline.system.entities}
    return {
        "entities": [
            {
                "discipline": label,
                "seed": seed,
                "entity": s.entity_id,
                "urgency": urgency[s.entity_id],
                "samples": s.samples,
                "mean": s.mean,
                "half_width": s.half_width,
            }
            for s in report.entities.values()
        ],
        "channels": [
            {
                "discipline": label,
                "seed": seed,
                "channel": c.channel_id,
                "blocks": c.blocks,
                "transactions": c.transactions,
                "mean": c.mean,
                "p50": c.p50,
                "p95": c.p95,
                "max": c.max,
            }
            for c in report.channels.values()
        ],
        "dispatch": [
            {
                "discipline": label,
                "seed": seed,
                "transaction": r.transaction_id,
                "entity": r.entity_id,
                "channel": r.channel_id,
                "enqueued_at": r.enqueued_at,
                "block": r.block_id,
                "formed_at": r.formed_at,
                "committed_at": r.committed_at,
            }
            for r in result.dispatch_log
        ],
        "events": [
            {
                "discipline": label,
                "seed": seed,
                "time": e.time,
                "kind": e.kind.value,
                "subject": e.subject,
                "entity": e.entity_id,
            }
            for e in report.events
        ],
    }


def simulate_command(args: argparse.Namespace) -> None:
    scenario = load_scenario(args.scenario)
    pipeline = scenario.pipeline()
    first = scenario.simulation.seed if args.seed is None else args.seed
    seeds = list(range(first, first + args.replications))

    disciplines: list[tuple[str, PriorityOrder | None]] = [("priority", assign_priorities(pipeline.system.entities))]
    if args.compare:
        disciplines.append(("equal", None))

    tables: dict[str, list[dict[str, Any]]] = {"entities": [], "channels": [], "dispatch": [], "events": []}
    with ExitStack() as stack:
        pool = stack.enter_context(ProcessPoolExecutor(max_workers=args.workers)) if args.workers > 1 else None
        for label, order in disciplines:
            results = sweep_seeds(partial(_simulate_once, scenario, pipeline, order, args.events), seeds, pool)
            for seed, result in zip(seeds, results):
                for name, rows in _report_frames(label, seed, pipeline, result).items():
                    tables[name].extend(rows)

    columns = {
        "entities": ENTITY_REPORT_COLUMNS,
        "channels": CHANNEL_REPORT_COLUMNS,
        "dispatch": DISPATCH_COLUMNS,
        "events": EVENT_COLUMNS,
    }
    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        if name == "events" and not args.events:
            continue
        path = output_dir / f"{name}.csv"
        write_csv(pd.DataFrame(rows, columns=columns[name]), path)
        print(path, flush=True)


def synth_command(args: argparse.Namespace) -> None:
    frame = generate_synthetic_cohort(
        args.patients,
        args.channels,
        length=args.length,
        injected=args.injected,
        offset=args.offset,
        seed=args.seed,
        level=args.level,
        noise=args.noise,
        zeta=args.zeta,
    )
    emit(frame, args.output)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="medchain", description="Edge monitoring, BM queueing and blockchain channel tools")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default="WARNING", help="Logging level on stderr")
    commands = parser.add_subparsers(dest="command", required=True)

    features = commands.add_parser("features", help="Per-window feature vectors")
    features.add_argument("signals", help="Signal CSV")
    features.add_argument("--window-length", type=int, default=DEFAULT_WINDOW_LENGTH)
    features.add_argument("--output", help="CSV destination (default stdout)")
    features.set_defaults(handler=features_command)

    monitor = commands.add_parser("monitor", help="Per-patient delta table, kappa and share decision")
    monitor.add_argument("signals", help="Signal CSV")
    monitor.add_argument("--zeta", type=float, default=DEFAULT_ZETA, help="Change threshold in percent")
    monitor.add_argument("--window-length", type=int, default=DEFAULT_WINDOW_LENGTH)
    monitor.add_argument("--output", help="CSV destination (default stdout)")
    monitor.set_defaults(handler=monitor_command)

    queue = commands.add_parser("queue", help="Equal and priority sojourn times across service rates")
    queue.add_argument("scenario", help="Scenario file or bundled scenario name")
    queue.add_argument("--service-rate", type=float, action="append", help="Service rate to evaluate (repeatable)")
    queue.add_argument("--coupled", type=int, metavar="CHANNEL", help="Use mu = n/L of this channel")
    queue.add_argument("--output", help="CSV destination (default stdout)")
    queue.set_defaults(handler=queue_command)

    optimize = commands.add_parser("optimize", help="BCO trace and exhaustive comparison for one channel")
    optimize.add_argument("scenario", help="Scenario file or bundled scenario name")
    optimize.add_argument("--channel", type=int, default=NORMAL_CHANNEL, help="Channel whose weights are optimized")
    optimize.add_argument("--output", help="CSV destination (default stdout)")
    optimize.set_defaults(handler=optimize_command)

    channels = commands.add_parser("channels", help="Per-channel configuration traces")
    channels.add_argument("scenario", help="Scenario file or bundled scenario name")
    channels.add_argument("--output", help="CSV destination (default stdout)")
    channels.set_defaults(handler=channels_command)

    simulate = commands.add_parser("simulate", help="End-to-end discrete-event simulation")
    simulate.add_argument("scenario", help="Scenario file or bundled scenario name")
    simulate.add_argument("--seed", type=int, help="First seed (default from the scenario)")
    simulate.add_argument("--replications", type=int, default=1, help="Independent seeds starting at --seed")
    simulate.add_argument("--workers", type=int, default=1, help="Worker processes for the replications (1 runs in threads)")
    simulate.add_argument("--compare", action="store_true", help="Also run with equal priorities")
    simulate.add_argument("--events", action="store_true", help="Write the ordered event log")
    simulate.add_argument("--output-dir", default="results", help="Directory for the report CSVs")
    simulate.set_defaults(handler=simulate_command)

    synth = commands.add_parser("synth", help="Synthetic cohort in the signal CSV layout")
    synth.add_argument("--patients", type=int, default=30)
    synth.add_argument("--channels", type=int, default=14)
    synth.add_argument("--length", type=int, default=DEFAULT_WINDOW_LENGTH, help="Samples per session")
    synth.add_argument("--injected", type=int, default=0, help="Channels with a During/After change")
    synth.add_argument("--offset", type=float, help="Injected offset (default: twice the threshold)")
    synth.add_argument("--level", type=float, default=100.0, help="DC level in microvolts")
    synth.add_argument("--noise", type=float, default=1.0, help="Noise standard deviation")
    synth.add_argument("--zeta", type=float, default=DEFAULT_ZETA)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--output", help="CSV destination (default stdout)")
    synth.set_defaults(handler=synth_command)

    return parser


def report_error(reason: str, message: str, exit_code: int, details: dict[str, Any] | None = None) -> None:
    line = {"error": reason, "message": message, "exit_code": exit_code} | (details or {})
    print(json.dumps(line), file=sys.stderr, flush=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "replications", 1) < 1:
            parser.error("--replications must be >= 1")
        if getattr(args, "workers", 1) < 1:
            parser.error("--workers must be >= 1")
    except UsageError as e:
        report_error(e.reason, str(e), e.exit_code)
        return e.exit_code

    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.handler(args)
    except MedchainException as e:
        logger.error(f"{args.command} failed: {e}")
        logger.debug(f"{args.command} failed", exc_info=True)
        report_error(e.reason, str(e), e.exit_code, e.details())
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        report_error(type(e).__name__, str(e), 3)
        return 3
    return 0
