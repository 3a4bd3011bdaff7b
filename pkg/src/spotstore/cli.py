"""Command line entry points: ``spotstore``, ``inject`` and ``bench``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import asdict
from pathlib import Path

from spotstore.bench import analysis
from spotstore.clock import RealClock, VirtualClock
from spotstore.core import StoreError

log = logging.getLogger("spotstore")


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _wait_forever(*closers):
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(1.0):
            pass
    except KeyboardInterrupt:
        pass
    for c in closers:
        c()


def _rate(text):
    return None if text in (None, "", "0", "none") else analysis.parse_bytes(text)


# -- services ----------------------------------------------------------------

def cmd_namenode(args):
    from spotstore.namenode import NameNodeServer, load_config
    server = NameNodeServer.from_config(args.listen, load_config(args.config)).start()
    print(f"namenode listening on {server.address}", flush=True)
    _wait_forever(server.close)


def cmd_datanode(args):
    from spotstore.datanode import DataNodeServer
    dn = DataNodeServer(args.capacity_blocks, args.listen, args.namenode, _rate(args.egress_limit),
                        _rate(args.ingress_limit), args.heartbeat_interval,
                        control_peers=tuple(args.control_peer or ())).start()
    print(f"datanode {dn.node_id} listening on {dn.address}", flush=True)
    _wait_forever(dn.terminate)


def cmd_relocator(args):
    from spotstore.relocator import RelocatorServer
    server = RelocatorServer(args.namenode, args.listen, args.parallelism, args.report_file).start()
    print(f"relocator listening on {server.address}", file=sys.stderr, flush=True)
    _wait_forever(server.close)


# -- client shim ---------------------------------------------------------------

def _client(args):
    from spotstore.client import Client
    address = args.namenode or os.environ.get("ESS_NAMENODE")
    if not address:
        raise SystemExit("no namenode: pass --namenode or set ESS_NAMENODE")
    return Client(address)


def cmd_put(args):
    data = sys.stdin.buffer.read() if args.file == "-" else Path(args.file).read_bytes()
    with _client(args) as c:
        meta = c.put_object(args.name, data)
    print(json.dumps({"name": meta.name, "size": meta.size, "version": meta.version, "blocks": len(meta.blocks)}))


def cmd_get(args):
    with _client(args) as c:
        data = c.get_object(args.name)
    if args.out in (None, "-"):
        sys.stdout.buffer.write(data)
    else:
        Path(args.out).write_bytes(data)


def cmd_del(args):
    with _client(args) as c:
        c.delete_object(args.name)


def cmd_stat(args):
    with _client(args) as c:
        meta = c.stat(args.name)
    out = asdict(meta)
    out["lost_blocks"] = len(meta.lost_blocks)
    print(json.dumps(out, indent=2))


# -- injector ------------------------------------------------------------------

def _fleet(cluster_cfg: dict | None):
    """Returns (fleet, closer). No cluster file means a dry run on a simulated fleet."""
    from spotstore.cluster import ClusterConfig, LocalCluster
    from spotstore.injector import LocalFleet, RemoteFleet, SimFleet
    cfg = dict(cluster_cfg or {"mode": "simulate"})
    mode = cfg.get("mode", "local")
    if mode == "simulate":
        return SimFleet(int(cfg.get("datanodes", 4))), lambda: None
    if mode == "remote":
        return RemoteFleet(cfg["namenode"], cfg["relocator"], cfg["datanodes"]), lambda: None
    if mode == "local":
        cluster = LocalCluster(ClusterConfig.from_dict(cfg)).start()
        return LocalFleet(cluster), cluster.close
    raise SystemExit(f"unknown cluster mode {mode!r}")


def cmd_inject(args):
    from spotstore.injector import PreemptionInjector, PreemptionModelParams
    params = PreemptionModelParams.from_dict(_load_json(args.config) if args.config else {})
    if args.seed is not None:
        params.seed = args.seed
    cluster_cfg = _load_json(args.cluster) if args.cluster else None
    fleet, closer = _fleet(cluster_cfg)
    simulated = cluster_cfg is None or cluster_cfg.get("mode") == "simulate"
    clock = VirtualClock() if simulated else RealClock()
    if args.log:
        Path(args.log).write_text("")
    injector = PreemptionInjector(params, fleet, clock, log_path=args.log,
                                  on_event=None if args.log else lambda e: print(e.to_json(), flush=True))
    try:
        injector.run_schedule(analysis.parse_seconds(args.duration), args.max_preemptions)
    finally:
        closer()
    print(json.dumps({"events": len(injector.events),
                      "preemptions": sum(e.kind == "terminate" for e in injector.events)}), file=sys.stderr)


# -- bench -------------------------------------------------------------------

def cmd_bench_run(args):
    from spotstore.bench import plotting
    from spotstore.bench.report import build_report, samples_csv, write_report
    from spotstore.bench.workload import WorkloadSpec, preload, run_workload
    from spotstore.cluster import ClusterConfig, LocalCluster
    from spotstore.injector import LocalFleet, PreemptionInjector, PreemptionModelParams

    spec = WorkloadSpec.from_dict(_load_json(args.spec))
    cfg = ClusterConfig.from_dict(_load_json(args.cluster) if args.cluster else {})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    events_path = None
    with LocalCluster(cfg) as cluster:
        dataset = {}
        if spec.p_write < 1.0 and spec.object_count:
            dataset = preload(cluster.client(), spec.object_count, spec.object_size, spec.seed)
        injector = None
        if args.preemptions:
            params = PreemptionModelParams.from_dict(_load_json(args.preemptions))
            events_path = str(stem) + "_events.jsonl"
            Path(events_path).write_text("")
            injector = PreemptionInjector(params, LocalFleet(cluster), log_path=events_path)
            th = threading.Thread(target=injector.run_schedule, args=(1e9, args.max_preemptions), daemon=True)
            th.start()
        samples, summary = run_workload(spec, cluster, dataset)
        if injector:
            injector.stop()
            th.join()
    report = build_report(summary, spec.to_dict(), cfg.to_dict(), spec.seed, events_path, samples)
    write_report(report, out)
    Path(str(stem) + "_samples.csv").write_text(samples_csv(samples))
    if samples:
        Path(str(stem) + "_bandwidth.csv").write_text(analysis.bandwidth_timeseries(samples))
        plotting.plot_bandwidth(samples, str(stem) + "_bandwidth.png")
    print(json.dumps(summary, indent=2))


def cmd_bench_cost(args):
    inputs = analysis.CostInputs(**_load_json(args.inputs))
    baseline, spot, savings = analysis.cost_model(inputs)
    print(json.dumps({"baseline_cost": baseline, "spot_cost": spot, "savings_fraction": savings}, indent=2))
    if args.figure:
        from spotstore.bench import plotting
        plotting.plot_cost(baseline, spot, savings, args.figure)


def cmd_bench_sizing(args):
    s = analysis.SizingInput(analysis.parse_bytes(args.memory), analysis.parse_bits_per_second(args.egress),
                             analysis.parse_seconds(args.notice))
    print(json.dumps({
        "memory_bytes": s.memory_capacity,
        "egress_bits_per_s": s.egress_bandwidth,
        "notice_s": s.notice_period,
        "sizing_time_s": analysis.sizing_time(s),
        "feasible": analysis.sizing_feasible(s),
        "max_capacity_bytes": analysis.max_capacity(s.egress_bandwidth, s.notice_period),
    }, indent=2))


def read_samples(path) -> list[float]:
    """Lifetimes from a CSV: a trace (``slot,preemption_time_s``) or a single numeric column."""
    from spotstore.injector import load_trace, trace_lifetimes
    with open(path, newline="") as f:
        header = next(csv.reader(f), [])
    if {"slot", "preemption_time_s"} <= set(header):
        return [x for gaps in trace_lifetimes(load_trace(path)).values() for x in gaps]
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    out = []
    for row in rows:
        try:
            out.append(float(row[0]))
        except (ValueError, IndexError):
            continue  # header or blank line
    return out


def cmd_bench_cdf(args):
    from spotstore.injector import PreemptionModelParams, cdf_csv, empirical_cdf, ks_test
    samples = read_samples(args.samples)
    text = cdf_csv(empirical_cdf(samples))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    params = PreemptionModelParams.from_dict(_load_json(args.model)) if args.model else None
    if params is not None:
        res = ks_test(samples, params)
        print(json.dumps({"n": len(samples), "ks_statistic": float(res.statistic), "p_value": float(res.pvalue)}),
              file=sys.stderr)
    if args.figure:
        from spotstore.bench import plotting
        plotting.plot_cdf(samples, args.figure, params)


def cmd_bench_sample(args):
    from spotstore.injector import PreemptionModelParams, sample_lifetimes
    params = PreemptionModelParams.from_dict(_load_json(args.config) if args.config else {})
    if args.seed is not None:
        params.seed = args.seed
    xs = sample_lifetimes(params, args.n)
    text = "lifetime_s\n" + "".join(f"{x!r}\n" for x in xs.tolist())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- parsers -------------------------------------------------------------------

def _add_inject(p):
    p.add_argument("--config", help="preemption model JSON (may name a preset)")
    p.add_argument("--cluster", help="cluster JSON; omit for a dry run on a simulated fleet")
    p.add_argument("--duration", default="7200s")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="JSON-lines event log (default: stdout)")
    p.add_argument("--max-preemptions", type=int)
    p.set_defaults(func=cmd_inject)


def _add_bench(sub):
    run = sub.add_parser("run", help="drive a workload against a local cluster")
    run.add_argument("--spec", required=True)
    run.add_argument("--cluster")
    run.add_argument("--out", default="run.json")
    run.add_argument("--preemptions", help="preemption model JSON to inject during the run")
    run.add_argument("--max-preemptions", type=int)
    run.set_defaults(func=cmd_bench_run)

    cost = sub.add_parser("cost", help="on-demand vs spot cost")
    cost.add_argument("--inputs", required=True)
    cost.add_argument("--figure")
    cost.set_defaults(func=cmd_bench_cost)

    sizing = sub.add_parser("sizing", help="time to drain a node's memory")
    sizing.add_argument("--memory", required=True)
    sizing.add_argument("--egress", required=True)
    sizing.add_argument("--notice", default="30s")
    sizing.set_defaults(func=cmd_bench_sizing)

    cdf = sub.add_parser("cdf", help="empirical CDF of lifetimes")
    cdf.add_argument("--samples", required=True)
    cdf.add_argument("--model", help="preemption model JSON for a KS test")
    cdf.add_argument("--out")
    cdf.add_argument("--figure")
    cdf.set_defaults(func=cmd_bench_cdf)

    sample = sub.add_parser("sample", help="draw lifetimes from a preemption model")
    sample.add_argument("--config")
    sample.add_argument("-n", type=int, default=10000)
    sample.add_argument("--seed", type=int)
    sample.add_argument("--out")
    sample.set_defaults(func=cmd_bench_sample)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spotstore", description="Ephemeral block datastore for spot instances.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("namenode")
    p.add_argument("--listen", default="127.0.0.1:9000")
    p.add_argument("--config")
    p.set_defaults(func=cmd_namenode)

    p = sub.add_parser("datanode")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--namenode", required=True)
    p.add_argument("--capacity-blocks", type=int, default=512)
    p.add_argument("--egress-limit", help="bytes/s, e.g. 50MB")
    p.add_argument("--ingress-limit", help="bytes/s, e.g. 50MB")
    p.add_argument("--heartbeat-interval", type=float, default=1.0)
    p.add_argument("--control-peer", action="append", help="extra host allowed to send control messages")
    p.set_defaults(func=cmd_datanode)

    p = sub.add_parser("relocator")
    p.add_argument("--namenode", required=True)
    p.add_argument("--listen", default="127.0.0.1:9100")
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--report-file")
    p.set_defaults(func=cmd_relocator)

    for name, func, extra in (("put", cmd_put, ("file",)), ("get", cmd_get, ()),
                              ("del", cmd_del, ()), ("stat", cmd_stat, ())):
        p = sub.add_parser(name)
        p.add_argument("--namenode")
        p.add_argument("name")
        for e in extra:
            p.add_argument(e, help="path or - for stdin")
        if name == "get":
            p.add_argument("-o", "--out")
        p.set_defaults(func=func)

    _add_inject(sub.add_parser("inject", help="inject spot preemptions"))
    _add_bench(sub.add_parser("bench", help="benchmarks and analysis").add_subparsers(dest="bench", required=True))
    return parser


def _run(parser, argv):
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StoreError as e:
        print(f"error: {e.code.name}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    return _run(build_parser(), argv)


def bench_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bench")
    parser.add_argument("-v", "--verbose", action="store_true")
    _add_bench(parser.add_subparsers(dest="bench", required=True))
    return _run(parser, argv)


def inject_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="inject")
    parser.add_argument("-v", "--verbose", action="store_true")
    _add_inject(parser)
    return _run(parser, argv)


if __name__ == "__main__":
    sys.exit(main())
