"""Merged run configuration: defaults, then an INI file, then command-line flags."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable

from .ack import AckThresholds
from .emulator.config import EmulatorConfig, Obfuscation, Persona
from .filter import FilterConfig
from .pcap import Transport
from .prober.engine import ProbeConfig


def _pair(cast: Callable) -> Callable[[Any], tuple]:
    def parse(v: Any) -> tuple:
        if isinstance(v, str):
            v = [x for x in v.replace(" ", "").split(",") if x]
        v = tuple(cast(x) for x in v)
        if len(v) != 2:
            raise ValueError(f"expected two comma-separated values, got {v!r}")
        return v

    return parse


def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: Any) -> int | None:
    if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none", "auto")):
        return None
    return int(v)


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, Obfuscation):
        return v.describe()
    if hasattr(v, "value"):
        return str(v.value)
    return "auto" if v is None else str(v)


@dataclass
class FilterSection:
    window: int = 100
    sample_rate: float = 1.0
    loss: float = 0.0
    opcode_min: int = 4
    opcode_max: int = 10
    ack_bin1: tuple[int, int] = (1, 3)
    ack_bin2: tuple[int, int] = (2, 5)
    ack_bins3to5_max: int = 5
    ack_bins6plus_max: int = 1
    ack_search_bound: int = 16
    ack_min_bins: int = 6
    reassembly_cap: int = 65536
    frame_sanity_max: int = 16384
    table_capacity: int = 200_000
    framing: str = "auto"


@dataclass
class ProbeSection:
    t_short: float = 3.0
    t_long_min: float = 30.0
    deadline: float = 75.0
    connect_timeout: float = 5.0
    min_matches: int = 5
    rst_search: bool = False
    workers: int = 16
    expand_subnet: int | None = None
    ports: tuple[int, ...] = ()
    batch_delay: float = 0.0


@dataclass
class EmulatorSection:
    persona: Persona = Persona.OPENVPN
    transport: Transport = Transport.TCP
    mtu: int = 1500
    tls_auth: bool = True
    hand_window: float = 60.0
    read_buffer: int | None = None
    backend: Persona = Persona.HTTP
    obfuscation: Obfuscation = field(default_factory=Obfuscation)
    ack_size: int | None = None
    obfs4_delay: tuple[float, float] = (20.0, 120.0)
    settle: float = 0.05


def _ports(v: Any) -> tuple[int, ...]:
    if isinstance(v, str):
        return tuple(int(x) for x in v.replace(" ", "").split(",") if x)
    return tuple(int(x) for x in v)


def _prefix(v: Any) -> int | None:
    if v is None:
        return None
    s = str(v).strip().lstrip("/")
    return None if s.lower() in ("", "none", "off", "auto") else int(s)


_COERCE: dict[str, Callable[[Any], Any]] = {
    "ack_bin1": _pair(int),
    "ack_bin2": _pair(int),
    "obfs4_delay": _pair(float),
    "tls_auth": _bool,
    "rst_search": _bool,
    "read_buffer": _opt_int,
    "ack_size": _opt_int,
    "expand_subnet": _prefix,
    "ports": _ports,
    "persona": Persona,
    "backend": Persona,
    "transport": Transport,
    "obfuscation": lambda v: v if isinstance(v, Obfuscation) else Obfuscation.parse(v),
}

_SECTIONS = {"filter": FilterSection, "probe": ProbeSection, "emulator": EmulatorSection}


def _coerce(name: str, default: Any, value: Any) -> Any:
    if name in _COERCE:
        return _COERCE[name](value)
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class RunConfig:
    seed: int = 0
    filter: FilterSection = field(default_factory=FilterSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    emulator: EmulatorSection = field(default_factory=EmulatorSection)

    def merged(self, section: str, values: dict[str, Any]) -> "RunConfig":
        """New config with ``values`` (``None`` entries ignored) applied to one section."""
        if section == "run":
            return replace(self, seed=int(values.get("seed", self.seed)))
        current = getattr(self, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for k, v in values.items():
            if v is None:
                continue
            if k not in known:
                raise ValueError(f"unknown option [{section}] {k}")
            updates[k] = _coerce(k, known[k], v)
        return replace(self, **{section: replace(current, **updates)})

    @classmethod
    def from_ini(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = base or cls()
        for section in cp.sections():
            if section != "run" and section not in _SECTIONS:
                raise ValueError(f"unknown config section [{section}]")
            cfg = cfg.merged(section, dict(cp[section]))
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as f:
            return cls.from_ini(f.read())

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for name in _SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    # Builders validate against each module's own preconditions.

    def filter_config(self) -> FilterConfig:
        f = self.filter
        cfg = FilterConfig(
            window=f.window,
            sample_rate=f.sample_rate,
            loss=f.loss,
            seed=self.seed,
            opcode_min=f.opcode_min,
            opcode_max=f.opcode_max,
            ack_thresholds=AckThresholds(f.ack_bin1, f.ack_bin2, f.ack_bins3to5_max, f.ack_bins6plus_max),
            ack_search_bound=f.ack_search_bound,
            ack_min_bins=f.ack_min_bins,
            reassembly_cap=f.reassembly_cap,
            frame_sanity_max=f.frame_sanity_max,
            table_capacity=f.table_capacity,
            framing=f.framing,
        )
        cfg.validate()
        return cfg

    def probe_config(self) -> ProbeConfig:
        p = self.probe
        if p.workers < 1:
            raise ValueError("workers must be at least 1")
        if p.expand_subnet is not None and not 0 <= p.expand_subnet <= 128:
            raise ValueError("expand_subnet prefix out of range")
        return ProbeConfig(
            t_short=p.t_short,
            t_long_min=p.t_long_min,
            deadline=p.deadline,
            connect_timeout=p.connect_timeout,
            seed=self.seed,
            min_matches=p.min_matches,
            rst_search=p.rst_search,
        )

    def emulator_config(self) -> EmulatorConfig:
        e = self.emulator
        return EmulatorConfig(
            transport=e.transport,
            persona=e.persona,
            mtu=e.mtu,
            tls_auth=e.tls_auth,
            hand_window=e.hand_window,
            read_buffer=e.read_buffer,
            backend=e.backend,
            obfuscation=e.obfuscation,
            ack_size=e.ack_size,
            obfs4_delay=e.obfs4_delay,
            settle=e.settle,
            seed=self.seed,
        )

    def validate(self) -> None:
        self.filter_config()
        self.probe_config()
        self.emulator_config()
