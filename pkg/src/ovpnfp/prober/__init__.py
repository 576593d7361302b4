"""Active probing of suspected OpenVPN endpoints."""

from .engine import (
    CloseKind,
    Endpoint,
    EndpointVerdict,
    Interim,
    ProbeConfig,
    ProbeObservation,
    RstThreshold,
    Verdict,
    base_probe_pair,
    classify,
    expand_subnet,
    port_share_screen,
    probe_endpoint,
    iter_probe_endpoints,
    matches,
    probe_endpoints,
    rst_threshold_search,
    run_probe,
    secondary_probes,
    synthesize_verdict,
)
from .probes import BehaviorClass, Expect, ProbeName, ProbeSpec, build_probes, rst_payload, tls_client_hello

__all__ = [
    "BehaviorClass",
    "CloseKind",
    "Endpoint",
    "EndpointVerdict",
    "Expect",
    "Interim",
    "ProbeConfig",
    "ProbeName",
    "ProbeObservation",
    "ProbeSpec",
    "RstThreshold",
    "Verdict",
    "base_probe_pair",
    "build_probes",
    "classify",
    "expand_subnet",
    "port_share_screen",
    "iter_probe_endpoints",
    "matches",
    "probe_endpoint",
    "probe_endpoints",
    "rst_payload",
    "rst_threshold_search",
    "run_probe",
    "secondary_probes",
    "synthesize_verdict",
    "tls_client_hello",
]
