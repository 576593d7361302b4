"""Window and loss sweeps over a labeled corpus, plus corpus building."""

from __future__ import annotations

import csv
import os
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .emulator.config import EmulatorConfig, Obfuscation, ObfsKind, Persona
from .emulator.obfuscation import XorMode
from .emulator.pcapgen import Session, session_endpoints, write_sessions
from .emulator.traces import SyntheticTrace, generate_trace
from .filter import FilterConfig, FlowFilter
from .flows import apply_loss
from .pcap import RawPacket, Transport, open_capture

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class SweepRow:
    window: int
    loss: float
    seed: int
    flagged_positive: int
    positive_flows: int
    flagged_negative: int
    negative_flows: int


def _pcaps(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.pcap")) if directory.is_dir() else []


def count_flagged(packets: Iterable[RawPacket], cfg: FilterConfig) -> tuple[int, int]:
    """(distinct flagged flows, flows seen) for one packet stream."""
    flt = FlowFilter(cfg)
    flagged = {(r.server_addr, r.server_port, r.transport) for r in flt.run(packets)}
    return len(flagged), flt.stats.flows_seen


def load_corpus(corpus: str | os.PathLike) -> dict[str, list[list[RawPacket]]]:
    """Decoded packets for every pcap under ``positive/`` and ``negative/``."""
    root = Path(corpus)
    out = {label: [list(open_capture(p)) for p in _pcaps(root / label)] for label in (POSITIVE, NEGATIVE)}
    if not out[POSITIVE] and not out[NEGATIVE]:
        raise ValueError(f"corpus {root} has no pcaps under {POSITIVE}/ or {NEGATIVE}/")
    return out


def sweep_packets(corpus: dict[str, list[list[RawPacket]]], windows: Sequence[int], loss_rates: Sequence[float],
                  base: FilterConfig | None = None) -> list[SweepRow]:
    base = base or FilterConfig()
    rows = []
    for n in windows:
        for p in loss_rates:
            cfg = replace(base, window=n, loss=p)
            cfg.validate()
            counts = {}
            for label in (POSITIVE, NEGATIVE):
                flagged = seen = 0
                for i, packets in enumerate(corpus[label]):
                    f, s = count_flagged(apply_loss(packets, p, cfg.seed + i), cfg)
                    flagged += f
                    seen += s
                counts[label] = (flagged, seen)
            rows.append(SweepRow(n, p, base.seed, counts[POSITIVE][0], counts[POSITIVE][1],
                                 counts[NEGATIVE][0], counts[NEGATIVE][1]))
    return rows


def cmd_sweep(corpus: str | os.PathLike, windows: Sequence[int], loss_rates: Sequence[float],
              out: str | os.PathLike, base: FilterConfig | None = None) -> list[SweepRow]:
    """Run the sweep and write a tab-separated table to ``out``."""
    rows = sweep_packets(load_corpus(corpus), windows, loss_rates, base)
    write_table(rows, out)
    return rows


def write_table(rows: Sequence[SweepRow], out: str | os.PathLike) -> None:
    with open(out, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["window", "loss", "seed", "flagged_positive", "positive_flows", "flagged_negative", "negative_flows"])
        for r in rows:
            w.writerow([r.window, r.loss, r.seed, r.flagged_positive, r.positive_flows, r.flagged_negative, r.negative_flows])


# --- corpus --------------------------------------------------------------------------------

NEGATIVE_PERSONAS = (Persona.HTTP, Persona.TLS, Persona.SSH, Persona.ECHO, Persona.RANDOM)

POSITIVE_VARIANTS: tuple[tuple[Transport, Obfuscation], ...] = (
    (Transport.TCP, Obfuscation()),
    (Transport.UDP, Obfuscation()),
    (Transport.TCP, Obfuscation(ObfsKind.XOR, XorMode.MASK)),
    (Transport.TCP, Obfuscation(ObfsKind.XOR, XorMode.COMPOSITE)),
    (Transport.UDP, Obfuscation(ObfsKind.XOR, XorMode.PTRPOS)),
    (Transport.TCP, Obfuscation(ObfsKind.TUNNEL)),
    (Transport.TCP, Obfuscation(ObfsKind.PADDED)),
)


def positive_traces(count: int, packets: int, seed: int) -> list[SyntheticTrace]:
    out = []
    for i in range(count):
        transport, obf = POSITIVE_VARIANTS[i % len(POSITIVE_VARIANTS)]
        cfg = EmulatorConfig(transport=transport, persona=Persona.OPENVPN, obfuscation=obf)
        out.append(generate_trace(cfg, packets, seed * 1_000_003 + i))
    return out


def negative_traces(count: int, packets: int, seed: int) -> list[SyntheticTrace]:
    rng = random.Random(seed)
    out = []
    for i in range(count):
        persona = NEGATIVE_PERSONAS[i % len(NEGATIVE_PERSONAS)]
        transport = Transport.UDP if persona is Persona.RANDOM and rng.random() < 0.5 else Transport.TCP
        out.append(generate_trace(EmulatorConfig(transport=transport, persona=persona), packets, seed * 1_000_003 + i))
    return out


def build_corpus(out_dir: str | os.PathLike, positives: int = 35, negatives: int = 50, packets: int = 200,
                 seed: int = 0, per_file: int = 10) -> Path:
    """Write a labeled corpus: ``positive/*.pcap`` and ``negative/*.pcap``."""
    root = Path(out_dir)
    for label, traces in ((POSITIVE, positive_traces(positives, packets, seed)),
                          (NEGATIVE, negative_traces(negatives, packets, seed + 1))):
        (root / label).mkdir(parents=True, exist_ok=True)
        for start in range(0, len(traces), per_file):
            sessions = []
            for j, tr in enumerate(traces[start : start + per_file], start=start):
                port = 1194 if label == POSITIVE else 443
                client, server = session_endpoints(j, port)
                sessions.append(Session(tr, client, server, seed=seed + j))
            write_sessions(root / label / f"{label}-{start // per_file:04d}.pcap", sessions)
    return root
