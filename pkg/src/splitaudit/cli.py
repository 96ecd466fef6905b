"""splitaudit command line: run a role, simulate, verify, generate fixtures.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import signal
import sys
from pathlib import Path

from .cnn import DEFAULT_PRESET, FC_PRESETS, ModelConfig, gen_synthetic_params, read_model, save_params
from .detector import detector_params
from .errors import SplitAuditError
from .metrics import Metrics
from .services import (
    AuditorStats,
    CloudConfig,
    CloudService,
    Inferencer,
    InferencerConfig,
    run_auditor,
)
from .sim import SimPlan, parse_schedule, simulate
from .stream import SYNTH_CLASSES, ReplayTrace, StreamConfig, SyntheticTrace, synth_trace, write_replay
from .verify import SUITES, run_suite

log = logging.getLogger("splitaudit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """`key = value` lines; '#' starts a comment. Keys use flag names with '-' or '_'."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> None:
    """Config-file values fill in any option not given on the command line."""
    if not getattr(args, "config", None):
        return
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    actions = {a.dest: a for a in parser._actions}
    for key, value in read_config_file(args.config).items():
        act = actions.get(key)
        if act is None or not act.option_strings:
            raise UsageError(f"unknown config key {key!r}")
        if any(o in given for o in act.option_strings):
            continue
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            v = value.lower() in ("1", "true", "yes", "on")
            setattr(args, key, v if isinstance(act, argparse._StoreTrueAction) else not v)
        else:
            try:
                setattr(args, key, act.type(value) if act.type else value)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None


# -- run ---------------------------------------------------------------------


async def _until_signal(stop: asyncio.Event, metrics: Metrics, metrics_file: str, every: float) -> None:
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    while not stop.is_set():
        try:
            await asyncio.wait_for(stop.wait(), every)
        except asyncio.TimeoutError:
            if metrics_file:
                metrics.write(metrics_file)


def _model_for(args) -> tuple:
    if args.params:
        try:
            return read_model(args.params)
        except OSError as exc:
            raise UsageError(f"cannot read params {args.params}: {exc}") from None
    config = ModelConfig.from_preset(args.preset)
    return detector_params(config), config


async def _run_cloud(args) -> int:
    params, config = _model_for(args)
    metrics = Metrics()
    cfg = CloudConfig(listen=args.listen, params_path=args.params or "", backend=args.backend,
                      workers=args.workers, master_seed=args.master_seed, masking=not args.no_masking)
    cloud = CloudService(params, config, cfg, metrics)
    host, port = await cloud.start()
    print(f"cloud listening on {host}:{port} preset={config.preset}", flush=True)
    stop = asyncio.Event()
    try:
        await _until_signal(stop, metrics, args.metrics_file, args.metrics_every)
    finally:
        await cloud.stop()
        for k, v in cloud.op_counters().items():
            metrics.gauge(f"cloud_op_{k}", v)
        if args.metrics_file:
            metrics.write(args.metrics_file)
    return EXIT_OK


async def _run_inferencer(args) -> int:
    metrics = Metrics()
    cfg = InferencerConfig(listen=args.listen, cloud=args.cloud, preset=args.preset, backend=args.backend,
                           packing=args.packing, key_seed=args.key_seed, queue_depth=args.queue_depth,
                           cloud_workers=args.workers, serial=args.serial, alert_log=args.alert_log,
                           hook_url=args.hook_url, event_log=args.event_log)
    inf = Inferencer(cfg, metrics=metrics)
    host, port = await inf.start()
    print(f"inferencer listening on {host}:{port} cloud={args.cloud}", flush=True)
    stop = asyncio.Event()
    try:
        await _until_signal(stop, metrics, args.metrics_file, args.metrics_every)
        try:
            await inf.drain(args.drain_timeout)
        except asyncio.TimeoutError:
            log.warning("drain timed out; stopping with work in flight")
    finally:
        await inf.stop()
        if args.metrics_file:
            metrics.write(args.metrics_file)
    return EXIT_OK


async def _run_auditor(args) -> int:
    stream = StreamConfig(args.rate, args.window_ms, args.ratio)
    if args.trace_file:
        source = ReplayTrace(args.trace_file)
        if source.sampling_rate != args.rate:
            raise UsageError(f"trace sampled at {source.sampling_rate} Hz but --rate is {args.rate}")
    else:
        source = SyntheticTrace(parse_schedule(args.schedule or args.synth_class), args.seed, args.rate)
    stats = AuditorStats()
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    try:
        await run_auditor(args.connect, source, stream, args.host, args.packets, args.speed, stats, stop)
    except OSError as exc:
        print(f"auditor: cannot connect to {args.connect}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"auditor {args.host}: sent {stats.packets} packets, {stats.bytes_sent} bytes", flush=True)
    if args.metrics_file:
        m = Metrics()
        m.gauge("auditor_packets", stats.packets)
        m.gauge("auditor_bytes_out", stats.bytes_sent)
        m.gauge("auditor_samples_out", stats.samples_sent)
        m.write(args.metrics_file)
    return EXIT_OK


def cmd_run(args) -> int:
    fn = {"cloud": _run_cloud, "inferencer": _run_inferencer, "auditor": _run_auditor}[args.role]
    return asyncio.run(fn(args))


# -- sim / verify / gen --------------------------------------------------------


def cmd_sim(args) -> int:
    plan = SimPlan(auditors=args.auditors, schedule=parse_schedule(args.schedule), duration=args.duration,
                   seed=args.seed, backend=args.backend, outdir=args.out, preset=args.preset,
                   stream=StreamConfig(args.rate, args.window_ms, args.ratio), speed=args.speed,
                   queue_depth=args.queue_depth, key_seed=args.key_seed, master_seed=args.master_seed)
    plan.validate()
    if args.params:
        plan.params, config = read_model(args.params)
        plan.preset = config.preset
    report = asyncio.run(simulate(plan))
    out = report.write()
    n = sum(1 for e in report.events if e.label is not None)
    print(f"sim: {n} predictions from {plan.auditors} auditor(s); report in {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_suite(args.suite, args.cases, args.seed)
    for c in checks:
        print(c.to_json())
    ok = all(c.passed for c in checks)
    print(f'{{"suite": "{args.suite}", "pass": {str(ok).lower()}, "checks": {len(checks)}}}')
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gen(args) -> int:
    if args.kind == "weights":
        config = ModelConfig.from_preset(args.preset)
        params = detector_params(config) if args.detector else gen_synthetic_params(args.seed, config)
        out = args.out or "weights.daud"
        save_params(out, params, config)
        print(f"wrote {out}")
    else:
        if args.trace_class not in SYNTH_CLASSES:
            raise UsageError(f"unknown class {args.trace_class!r}; choose from {SYNTH_CLASSES}")
        n = int(round(args.seconds * args.rate))
        out = args.out or f"{args.trace_class}.trace"
        write_replay(out, synth_trace(args.trace_class, args.seed, n, args.rate), args.rate)
        print(f"wrote {out} ({n} samples)")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _common(p, backend=True, preset=True):
    if backend:
        p.add_argument("--backend", default="mock", help="PHE backend (default: mock)")
    if preset:
        p.add_argument("--preset", default=DEFAULT_PRESET, choices=sorted(FC_PRESETS),
                       help="model preset (default: %(default)s)")


def _stream_flags(p):
    p.add_argument("--rate", type=int, default=1700, help="sampling rate in Hz")
    p.add_argument("--window-ms", type=int, default=1500, help="window size in ms")
    p.add_argument("--ratio", type=int, default=3, help="sliding window ratio")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitaudit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one role as a long-lived service")
    roles = run.add_subparsers(dest="role", required=True)

    c = roles.add_parser("cloud", help="Computing Cloud (holds the model)")
    c.add_argument("--config", help="key = value file with defaults for these flags")
    c.add_argument("--listen", default="127.0.0.1:7002")
    c.add_argument("--params", help="parameter file from `gen weights` (default: built-in detector)")
    _common(c)
    c.add_argument("--workers", type=int, default=4)
    c.add_argument("--master-seed", type=int, default=0, help="seed for per-session masks")
    c.add_argument("--no-masking", action="store_true", help="K=1, N=0 (debugging only)")
    c.add_argument("--metrics-file", default="")
    c.add_argument("--metrics-every", type=float, default=10.0, help="seconds between metrics lines")

    i = roles.add_parser("inferencer", help="Data Inferencer (holds the keys)")
    i.add_argument("--config", help="key = value file with defaults for these flags")
    i.add_argument("--listen", default="127.0.0.1:7001")
    i.add_argument("--cloud", default="127.0.0.1:7002")
    _common(i)
    i.add_argument("--packing", default="channel", choices=("channel", "grouped"))
    i.add_argument("--key-seed", type=int, default=0)
    i.add_argument("--queue-depth", type=int, default=8)
    i.add_argument("--workers", type=int, default=4, help="concurrent cloud requests per stage")
    i.add_argument("--serial", action="store_true", help="disable pipelining")
    i.add_argument("--alert-log", default="")
    i.add_argument("--hook-url", default="")
    i.add_argument("--event-log", default="", help="append one JSON line per prediction")
    i.add_argument("--drain-timeout", type=float, default=10.0)
    i.add_argument("--metrics-file", default="")
    i.add_argument("--metrics-every", type=float, default=10.0)

    a = roles.add_parser("auditor", help="simulated Power Auditor")
    a.add_argument("--config", help="key = value file with defaults for these flags")
    a.add_argument("--host", default="auditor0", help="hostname reported in packets")
    a.add_argument("--connect", default="127.0.0.1:7001", help="inferencer address")
    _stream_flags(a)
    src = a.add_mutually_exclusive_group()
    src.add_argument("--trace-file", help="replay file from `gen trace`")
    src.add_argument("--synth-class", default="idle", choices=SYNTH_CLASSES)
    src.add_argument("--schedule", help="class schedule, e.g. '0:idle,5:intrusion,8:idle'")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--packets", type=int, default=None, help="stop after this many packets")
    a.add_argument("--speed", type=float, default=1.0, help="time compression factor")
    a.add_argument("--metrics-file", default="")

    s = sub.add_parser("sim", help="all roles in one process over localhost")
    s.add_argument("--config", help="key = value file with defaults for these flags")
    s.add_argument("--auditors", type=int, default=1)
    s.add_argument("--schedule", default="0:idle", help="e.g. '0:idle,5:intrusion,8:idle'")
    s.add_argument("--duration", type=float, default=15.0, help="simulated seconds")
    s.add_argument("--seed", type=int, default=0, help="trace seed; auditor i uses seed + i")
    s.add_argument("--key-seed", type=int, default=0)
    s.add_argument("--master-seed", type=int, default=0)
    s.add_argument("--params", help="parameter file (default: built-in detector)")
    _common(s)
    _stream_flags(s)
    s.add_argument("--speed", type=float, default=1.0, help="time compression factor")
    s.add_argument("--queue-depth", type=int, default=8)
    s.add_argument("--out", default="sim-out", help="report directory")

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("suite", choices=SUITES)
    v.add_argument("--cases", type=int, default=100)
    v.add_argument("--seed", type=int, default=1)

    g = sub.add_parser("gen", help="generate fixtures")
    kinds = g.add_subparsers(dest="kind", required=True)
    gw = kinds.add_parser("weights", help="parameter file")
    gw.add_argument("--seed", type=int, default=42)
    _common(gw, backend=False)
    gw.add_argument("--detector", action="store_true", help="hand-built detector instead of random weights")
    gw.add_argument("--out", default="")
    gt = kinds.add_parser("trace", help="synthetic replay trace")
    gt.add_argument("--class", dest="trace_class", required=True, help=f"one of {SYNTH_CLASSES}")
    gt.add_argument("--seconds", type=float, default=10.0)
    gt.add_argument("--seed", type=int, default=0)
    gt.add_argument("--rate", type=int, default=1700)
    gt.add_argument("--out", default="")
    return ap


def _leaf_parser(ap: argparse.ArgumentParser, args) -> argparse.ArgumentParser:
    p = ap
    for dest in ("command", "role", "kind"):
        val = getattr(args, dest, None)
        if val is None:
            continue
        for act in p._actions:
            if isinstance(act, argparse._SubParsersAction) and val in act.choices:
                p = act.choices[val]
                break
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {"run": cmd_run, "sim": cmd_sim, "verify": cmd_verify, "gen": cmd_gen}
    try:
        _apply_config(_leaf_parser(ap, args), args, argv)
        return handlers[args.command](args)
    except (UsageError, SplitAuditError, ValueError) as exc:
        print(f"splitaudit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"splitaudit: io error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
