"""Command-line entry point: filter, probe, emulate, sweep and pipeline."""

from __future__ import annotations

import argparse
import functools
import json
import logging
import socket
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .config import RunConfig
from .emulator.config import Persona
from .emulator.pcapgen import write_trace
from .emulator.server import EmulatorServer
from .emulator.traces import generate_trace
from .filter import FlowFilter, SuspectRecord, write_suspect_log
from .flows import apply_loss
from .pcap import CaptureError, Transport, open_capture
from .prober.engine import Endpoint, EndpointVerdict, Verdict, expand_subnet, iter_probe_endpoints
from .sweep import build_corpus, cmd_sweep

log = logging.getLogger("ovpnfp")

# flag dest -> (config section, key)
_FLAG_MAP = {
    "window": ("filter", "window"),
    "sample_rate": ("filter", "sample_rate"),
    "loss": ("filter", "loss"),
    "table_capacity": ("filter", "table_capacity"),
    "framing": ("filter", "framing"),
    "t_short": ("probe", "t_short"),
    "t_long_min": ("probe", "t_long_min"),
    "deadline": ("probe", "deadline"),
    "connect_timeout": ("probe", "connect_timeout"),
    "min_matches": ("probe", "min_matches"),
    "rst_search": ("probe", "rst_search"),
    "workers": ("probe", "workers"),
    "expand_subnet": ("probe", "expand_subnet"),
    "ports": ("probe", "ports"),
    "batch_delay": ("probe", "batch_delay"),
    "persona": ("emulator", "persona"),
    "transport": ("emulator", "transport"),
    "mtu": ("emulator", "mtu"),
    "tls_auth": ("emulator", "tls_auth"),
    "hand_window": ("emulator", "hand_window"),
    "read_buffer": ("emulator", "read_buffer"),
    "backend": ("emulator", "backend"),
    "obfuscation": ("emulator", "obfuscation"),
    "ack_size": ("emulator", "ack_size"),
    "obfs4_delay": ("emulator", "obfs4_delay"),
}


def _int_list(text: str) -> list[int]:
    """``10,20,30`` or ``10:200:10`` (inclusive range)."""
    out: list[int] = []
    for part in text.split(","):
        if ":" in part:
            a, b, *step = (int(x) for x in part.split(":"))
            out.extend(range(a, b + 1, step[0] if step else 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


# --- argument parser ----------------------------------------------------------------------


def _filter_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("filter")
    g.add_argument("--window", type=int, help="observation window N (default 100)")
    g.add_argument("--sample-rate", type=float, help="fraction of client/server pairs inspected")
    g.add_argument("--loss", type=float, help="simulated packet loss rate")
    g.add_argument("--table-capacity", type=int, help="maximum concurrently tracked flows")
    g.add_argument("--framing", choices=["auto", "stream", "segment"],
                   help="TCP framing: length prefixes, per segment, or decided per direction (auto)")


def _probe_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("probe")
    g.add_argument("--t-short", type=float, help="seconds; closes at or before this are short")
    g.add_argument("--t-long-min", type=float, help="seconds; closes at or after this are long")
    g.add_argument("--deadline", type=float, help="seconds to wait per probe")
    g.add_argument("--connect-timeout", type=float)
    g.add_argument("--min-matches", type=int, help="secondary probes that must match (default all 5)")
    g.add_argument("--rst-search", choices=["on", "off"], help="run the RST threshold search")
    g.add_argument("--workers", type=int, help="endpoints probed concurrently")
    g.add_argument("--expand-subnet", metavar="/PREFIX", help="also probe the enclosing netblock, e.g. /29")
    g.add_argument("--ports", help="extra ports for subnet expansion, comma separated")
    g.add_argument("--batch-delay", type=float,
                   help="seconds to wait before probing a batch (trades detection delay for load)")


def _emulator_flags(p: argparse.ArgumentParser, *, serve: bool) -> None:
    personas = [x.value for x in Persona if serve is False or x is not Persona.RANDOM]
    p.add_argument("--persona", choices=personas)
    p.add_argument("--transport", choices=[t.value for t in Transport])
    p.add_argument("--mtu", type=int)
    p.add_argument("--tls-auth", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--hand-window", type=float, help="handshake window in seconds")
    p.add_argument("--read-buffer", type=int, help="bytes the server reads before closing")
    p.add_argument("--backend", choices=[Persona.HTTP.value, Persona.TLS.value, Persona.SSH.value, Persona.ECHO.value],
                   help="port-share backend")
    p.add_argument("--obfuscation", help="none | xor:mode=M,key=K | tunnel:oh=29,hs=6 | padded:oh=29,hs=6,pad=255,seed=S")
    p.add_argument("--ack-size", type=int)
    p.add_argument("--obfs4-delay", help="LO,HI seconds for the obfs4-like close delay")


def build_parser() -> argparse.ArgumentParser:
    # Shared options are accepted before or after the subcommand.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file; flags override it")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="seed for sampling, loss and probe payloads")
    common.add_argument("--dump-config", action="store_true", default=argparse.SUPPRESS,
                        help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="ovpnfp", description="Passive OpenVPN flow filter and active prober.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI file; flags override it")
    parser.add_argument("--seed", type=int, help="seed for sampling, loss and probe payloads")
    parser.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    add = functools.partial(sub.add_parser, parents=[common])

    p = add("filter", help="flag suspected OpenVPN flows in a pcap")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("pcap", nargs="?")
    src.add_argument("--in", dest="pcap_in", metavar="PCAP")
    p.add_argument("--out", required=True, help="suspect log (JSON lines, appended)")
    p.add_argument("--targets-out", help="also write probe targets, one per line")
    _filter_flags(p)
    p.set_defaults(func=run_filter_cmd)

    p = add("probe", help="actively probe target endpoints")
    p.add_argument("--targets", required=True, help='file with lines like "tcp://ip:port" (or a suspect log)')
    p.add_argument("--out", required=True, help="verdicts (JSON lines)")
    _probe_flags(p)
    p.set_defaults(func=run_probe_cmd)

    p = add("emulate", help="mock servers and synthetic traces")
    esub = p.add_subparsers(dest="emulate_command", metavar="ACTION", required=True)
    eadd = functools.partial(esub.add_parser, parents=[common])
    s = eadd("serve", help="run a mock server until interrupted")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=1194)
    _emulator_flags(s, serve=True)
    s.set_defaults(func=run_serve_cmd)
    g = eadd("gen", help="write one synthetic session as a pcap")
    _emulator_flags(g, serve=False)
    g.add_argument("--packets", type=int, default=200)
    g.add_argument("--out", required=True)
    g.set_defaults(func=run_gen_cmd)
    c = eadd("corpus", help="write a labeled positive/negative corpus for sweeps")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--positives", type=int, default=35)
    c.add_argument("--negatives", type=int, default=50)
    c.add_argument("--packets", type=int, default=200)
    c.set_defaults(func=run_corpus_cmd)

    p = add("sweep", help="flag counts across windows and loss rates")
    p.add_argument("--corpus", required=True, help="directory with positive/ and negative/ pcaps")
    p.add_argument("--windows", default="10:200:10", type=_int_list)
    p.add_argument("--loss-rates", "--loss", dest="loss_rates", default="0", type=_float_list)
    p.add_argument("--out", required=True, help="tab-separated summary table")
    p.set_defaults(func=run_sweep_cmd)

    p = add("pipeline", help="filter a pcap, then probe its suspects")
    p.add_argument("pcap")
    p.add_argument("--suspects-out", help="suspect log (default: next to targets)")
    p.add_argument("--targets-out", required=True)
    p.add_argument("--verdicts-out", required=True)
    p.add_argument("--fleet", help="JSON list mapping endpoints to local emulator personas")
    _filter_flags(p)
    _probe_flags(p)
    p.set_defaults(func=run_pipeline_cmd)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.merged("run", {"seed": args.seed})
    by_section: dict[str, dict] = {}
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is not None:
            by_section.setdefault(section, {})[key] = value
    for section, values in by_section.items():
        cfg = cfg.merged(section, values)
    cfg.validate()
    return cfg


# --- commands ---------------------------------------------------------------------------


def _target_line(rec: SuspectRecord) -> str:
    host = f"[{rec.server_addr}]" if ":" in rec.server_addr else rec.server_addr
    return f"{rec.transport}://{host}:{rec.server_port}"


def write_targets(records: Sequence[SuspectRecord], path: str) -> int:
    lines = list(dict.fromkeys(_target_line(r) for r in records))
    Path(path).write_text("".join(line + "\n" for line in lines))
    return len(lines)


def run_filter(pcap: str, out: str, cfg: RunConfig) -> list[SuspectRecord]:
    fcfg = cfg.filter_config()
    flt = FlowFilter(fcfg)
    records: list[SuspectRecord] = []

    def tee():
        for rec in flt.run(apply_loss(open_capture(pcap), fcfg.loss, fcfg.seed)):
            records.append(rec)
            yield rec

    try:
        write_suspect_log(tee(), out, seed=cfg.seed, window=fcfg.window)
    finally:
        print(f"filter: {flt.stats.summary()} packets={flt.stats.packets} seed={cfg.seed}", file=sys.stderr)
    return records


def run_filter_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    records = run_filter(args.pcap or args.pcap_in, args.out, cfg)
    if args.targets_out:
        write_targets(records, args.targets_out)
    return 0


def read_targets(path: str) -> list[tuple[str, Endpoint]]:
    """(transport, endpoint) pairs from target lines or a suspect log."""
    out = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            rec = SuspectRecord.from_json(line)
            out.append((rec.transport, Endpoint(rec.server_addr, rec.server_port)))
            continue
        scheme = "tcp"
        if "://" in line:
            scheme, rest = line.split("://", 1)
            line = "tcp://" + rest
        if scheme not in ("tcp", "udp"):
            raise ValueError(f"unsupported target scheme in {raw!r}")
        out.append((scheme, Endpoint.parse(line)))
    return list(dict.fromkeys(out))


def plan_targets(targets: Sequence[tuple[str, Endpoint]], cfg: RunConfig) -> list[tuple[Endpoint, Endpoint]]:
    """(endpoint to probe, suspect it corroborates).  UDP suspects are only
    reachable through their netblock; TCP suspects expand when asked."""
    prefix = cfg.probe.expand_subnet
    plan: dict[Endpoint, Endpoint] = {}
    for transport, ep in targets:
        if transport == "udp" or prefix is not None:
            for e in expand_subnet(ep, cfg.probe.ports, prefix):
                plan.setdefault(e, ep)
        else:
            plan.setdefault(ep, ep)
    return list(plan.items())


def probe_targets(targets: Sequence[tuple[str, Endpoint]], out: str, cfg: RunConfig,
                  resolve: Callable[[Endpoint], Endpoint | None] | None = None) -> list[EndpointVerdict]:
    pcfg = cfg.probe_config()
    plan = plan_targets(targets, cfg)
    if cfg.probe.batch_delay > 0:
        time.sleep(cfg.probe.batch_delay)
    verdicts: list[EndpointVerdict] = []
    started = time.monotonic()
    with open(out, "w") as f:
        try:
            for i, v in iter_probe_endpoints([e for e, _ in plan], pcfg, workers=cfg.probe.workers, resolve=resolve):
                suspect = plan[i][1]
                f.write(v.to_json(suspect=str(suspect), seed=cfg.seed) + "\n")
                f.flush()
                verdicts.append(v)
        finally:
            counts: dict[str, int] = {}
            for v in verdicts:
                counts[v.verdict.value] = counts.get(v.verdict.value, 0) + 1
            print(f"probe: endpoints={len(verdicts)}/{len(plan)} {counts} "
                  f"elapsed={time.monotonic() - started:.1f}s seed={cfg.seed}", file=sys.stderr)
    return verdicts


def run_probe_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    probe_targets(read_targets(args.targets), args.out, cfg)
    return 0


def run_serve_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    server = EmulatorServer(cfg.emulator_config(), args.host, args.port)
    server.start()
    host, port = server.address
    print(f"emulate: {cfg.emulator.persona.value}/{cfg.emulator.transport.value} listening on {host}:{port} "
          f"seed={cfg.seed}", file=sys.stderr)
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def run_gen_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    ecfg = cfg.emulator_config()
    trace = generate_trace(ecfg, args.packets, cfg.seed)
    n = write_trace(args.out, trace, seed=cfg.seed)
    Path(args.out + ".json").write_text(json.dumps(dict(trace.meta, packets=args.packets, records=n)) + "\n")
    print(f"emulate gen: {len(trace)} payloads, {n} records -> {args.out} seed={cfg.seed}", file=sys.stderr)
    return 0


def run_corpus_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    root = build_corpus(args.out_dir, args.positives, args.negatives, args.packets, cfg.seed)
    (root / "corpus.json").write_text(json.dumps({"positives": args.positives, "negatives": args.negatives,
                                                  "packets": args.packets, "seed": cfg.seed}) + "\n")
    print(f"emulate corpus: {args.positives} positive, {args.negatives} negative sessions -> {root} "
          f"seed={cfg.seed}", file=sys.stderr)
    return 0


def run_sweep_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    rows = cmd_sweep(args.corpus, args.windows, args.loss_rates, args.out, cfg.filter_config())
    for r in rows:
        print(f"N={r.window} p={r.loss}: positives {r.flagged_positive}/{r.positive_flows} "
              f"negatives {r.flagged_negative}/{r.negative_flows}", file=sys.stderr)
    return 0


@dataclass
class Fleet:
    servers: list[EmulatorServer]
    mapping: dict[Endpoint, Endpoint]
    closed: Endpoint

    def resolve(self, ep: Endpoint) -> Endpoint:
        # Unknown endpoints dial a port nothing listens on.
        return self.mapping.get(ep, self.closed)

    def stop(self) -> None:
        for s in self.servers:
            s.stop()


def _closed_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def start_fleet(spec: list[dict], base: RunConfig) -> Fleet:
    """Start one local emulator per fleet entry: ``{"endpoint": "tcp://ip:port", "persona": ..., ...}``."""
    servers, mapping = [], {}
    try:
        for i, entry in enumerate(spec):
            entry = dict(entry)
            ep = Endpoint.parse(entry.pop("endpoint"))
            ecfg = base.merged("emulator", entry).merged("run", {"seed": base.seed + i}).emulator_config()
            server = EmulatorServer(ecfg).start()
            servers.append(server)
            mapping[ep] = Endpoint(*server.address)
    except Exception:
        for s in servers:
            s.stop()
        raise
    return Fleet(servers, mapping, Endpoint("127.0.0.1", _closed_port()))


def run_pipeline_cmd(args: argparse.Namespace, cfg: RunConfig) -> int:
    suspects = args.suspects_out or str(Path(args.targets_out).with_suffix(".suspects.jsonl"))
    Path(suspects).unlink(missing_ok=True)
    records = run_filter(args.pcap, suspects, cfg)
    write_targets(records, args.targets_out)
    targets = [(r.transport, Endpoint(r.server_addr, r.server_port)) for r in records]
    targets = list(dict.fromkeys(targets))
    if not targets:
        Path(args.verdicts_out).write_text("")
        print("pipeline: no suspects; prober not invoked", file=sys.stderr)
        return 0
    fleet = None
    if args.fleet:
        fleet = start_fleet(json.loads(Path(args.fleet).read_text()), cfg)
    try:
        verdicts = probe_targets(targets, args.verdicts_out, cfg, fleet.resolve if fleet else None)
    finally:
        if fleet:
            fleet.stop()
    confirmed = sum(v.verdict in (Verdict.OPENVPN, Verdict.OPENVPN_NO_HMAC, Verdict.PORT_SHARED) for v in verdicts)
    print(f"pipeline: suspects={len(targets)} confirmed={confirmed}", file=sys.stderr)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    if args.dump_config:
        sys.stdout.write(cfg.to_ini())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except KeyboardInterrupt:
        print("interrupted; partial output kept", file=sys.stderr)
        return 130
    except (CaptureError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
