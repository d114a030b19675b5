"""``agectl`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgmod
from . import harness
from .config import ExperimentConfig
from .netsim import ConfigError
from .policies import InitAbort, PolicyKind
from .udp import EchoServer, parse_addr, run_sender

log = logging.getLogger("agectl")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _base_config(path: Optional[str], packets: Optional[int]) -> ExperimentConfig:
    cfg = cfgmod.load(path) if path else ExperimentConfig()
    if packets is not None:
        cfg = cfg.replace(packets=packets)
    return cfg


def _report_matrix(results: dict[str, harness.CellResult]) -> int:
    failed = 0
    for name, res in results.items():
        if res.summary is not None:
            s = res.summary
            print(f"{name}: runs={len(s.runs)} epochs={s.epochs} mean_age={s.mean_age_ns / 1e6:.3f} ms "
                  f"median={s.median_age_ns / 1e6:.3f} ms var={s.var_age_ns2 / 1e12:.3f} ms^2 "
                  f"clamped={s.clamp_fraction:.3f}")
        for err in res.errors:
            failed += 1
            print(f"{name}: FAILED {err}", file=sys.stderr)
    return 1 if failed else 0


# -- commands ----------------------------------------------------------------

def cmd_udp_echo(args) -> int:
    server = EchoServer(parse_addr(args.bind), round(args.delay_ms * 1_000_000))
    print(f"echo server on {server.address[0]}:{server.address[1]}", flush=True)
    stop = threading.Event()
    try:
        server.serve(stop)
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
        print(f"received={server.received} replied={server.replied} dropped={server.dropped}")
    return 0


def cmd_udp_send(args) -> int:
    cfg = _base_config(args.config, args.packets).replace(**{"policy.kind": args.policy})
    try:
        session = run_sender(parse_addr(args.peer), cfg.policy, cfg.packets)
    except InitAbort as exc:
        print(f"init aborted: {exc}", file=sys.stderr)
        return 2
    run_id = f"udp-{args.policy}"
    rows = [harness.TraceRow.from_record(run_id, args.policy, r) for r in session.records]
    harness.write_trace(args.out, rows, cfg, None, run_id, meta={
        "peer": args.peer, "sent": session.sent, "acked": session.acked,
        "lost": session.lost, "in_flight": session.in_flight})
    print(f"sent={session.sent} acked={session.acked} lost={session.lost} "
          f"in_flight={session.in_flight} epochs={len(session.records)}")
    return 0


def cmd_simulate(args) -> int:
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,), runs=1)
    name = cfg.label or cfg.policy.kind.value
    results = harness.run_matrix([harness.Cell(name, cfg)], args.out, workers=args.workers)
    res = results[name]
    if res.summary is not None:
        plots = Path(args.out) / "plots"
        harness.emit_plot_data(res.summary, "cdf", plots)
        harness.emit_plot_data(res.summary, "trace", plots)
    return _report_matrix(results)


def cmd_sweep_kappa(args) -> int:
    base = _base_config(args.config, args.packets)
    cells = harness.kappa_sweep_cells(args.values, args.runs, base)
    results = harness.run_matrix(cells, args.out, workers=args.workers)
    done = {c.config.policy.kappa: results[c.name].summary for c in cells if results[c.name].summary}
    if done:
        harness.emit_plot_data(done, "sweep", Path(args.out) / "plots", "kappa")
    return _report_matrix(results)


def cmd_compare_acpplus(args) -> int:
    base = _base_config(args.config, args.packets)
    cells = harness.acpplus_cells(args.epochs, args.runs, base)
    results = harness.run_matrix(cells, args.out, workers=args.workers)
    for res in results.values():
        if res.summary is not None:
            harness.emit_plot_data(res.summary, "cdf", Path(args.out) / "plots")
    return _report_matrix(results)


def cmd_feedback_test(args) -> int:
    base = cfgmod.load(args.config) if args.config else None
    threshold = round(args.threshold_ms * 1_000_000)
    comps = harness.feedback_test(threshold, args.out, args.seeds, base)
    for c in comps:
        print(f"seed {c.seed}: rtt at first violation {c.rtt_at_violation_without} -> "
              f"{c.rtt_at_violation_with} ns; recovery epochs {c.without.epochs} -> "
              f"{c.with_feedback.epochs}")
    wins = sum(c.rtt_lowered and c.recovers_sooner for c in comps)
    print(f"feedback helped in {wins}/{len(comps)} seeds")
    return 0


def cmd_analyze(args) -> int:
    stats = harness.summarize(args.traces, args.cell)
    report = Path(args.report)
    report.mkdir(parents=True, exist_ok=True)
    (report / "summary.txt").write_text(harness.render_summary(stats))
    harness.emit_plot_data(stats, "cdf", report)
    harness.emit_plot_data(stats, "trace", report)
    print(harness.render_summary(stats), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agectl", description="Freshness-aware update-rate control toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("udp-echo", help="run the datagram echo server")
    s.add_argument("--bind", required=True, metavar="ADDR:PORT")
    s.add_argument("--delay-ms", type=float, default=0.0, help="hold each reply back this long")
    s.set_defaults(func=cmd_udp_echo)

    s = sub.add_parser("udp-send", help="run a policy against an echo server")
    s.add_argument("--peer", required=True, metavar="ADDR:PORT")
    s.add_argument("--policy", required=True, choices=[k.value for k in PolicyKind])
    s.add_argument("--packets", type=int, default=None, help="packet budget (default from config)")
    s.add_argument("--config", default=None, metavar="FILE")
    s.add_argument("--out", required=True, metavar="TRACE.csv")
    s.set_defaults(func=cmd_udp_send)

    def matrix_opts(s, runs=True):
        s.add_argument("--out", required=True, metavar="DIR")
        s.add_argument("--workers", type=int, default=1, help="parallel processes")
        if runs:
            s.add_argument("--runs", type=int, default=5)
            s.add_argument("--packets", type=int, default=None)
            s.add_argument("--config", default=None, metavar="FILE", help="base configuration")

    s = sub.add_parser("simulate", help="simulate one configuration")
    s.add_argument("--config", required=True, metavar="FILE")
    s.add_argument("--seed", type=int, default=None, help="run only this seed")
    matrix_opts(s, runs=False)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep-kappa", help="ACP step-size sweep")
    s.add_argument("--values", type=_float_list, default=list(harness.DEFAULT_KAPPAS), metavar="LIST")
    matrix_opts(s)
    s.set_defaults(func=cmd_sweep_kappa)

    s = sub.add_parser("compare-acpplus", help="original vs modified ACP+ clamping")
    s.add_argument("--epochs", type=int, nargs="+", choices=(10, 30), default=[10, 30],
                   help="epoch multiplier(s)")
    matrix_opts(s)
    s.set_defaults(func=cmd_compare_acpplus)

    s = sub.add_parser("feedback-test", help="peak-age feedback under a scripted coalescing fault")
    s.add_argument("--threshold-ms", type=float, default=200.0)
    s.add_argument("--seeds", type=_int_list, default=[1, 2, 3, 4, 5], metavar="LIST")
    s.add_argument("--config", default=None, metavar="FILE", help="base configuration")
    s.add_argument("--out", required=True, metavar="DIR")
    s.set_defaults(func=cmd_feedback_test)

    s = sub.add_parser("analyze", help="summarize trace files")
    s.add_argument("traces", nargs="+", metavar="TRACE")
    s.add_argument("--report", required=True, metavar="DIR")
    s.add_argument("--cell", default="analysis", help="name used in the report")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, harness.TraceSchemaError, OSError, ValueError) as exc:
        print(f"agectl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
