import pytest

from conftest import closed_port
from ovpnfp.emulator.config import EmulatorConfig, Persona
from ovpnfp.emulator.server import EmulatorServer
from ovpnfp.prober import (
    BehaviorClass,
    CloseKind,
    Endpoint,
    Expect,
    ProbeConfig,
    ProbeName,
    ProbeObservation,
    Verdict,
    build_probes,
    classify,
    expand_subnet,
    matches,
    probe_endpoint,
    probe_endpoints,
    rst_payload,
    rst_threshold_search,
)
from ovpnfp.prober.engine import is_server_reset_frame

FAST = ProbeConfig(t_short=0.5, t_long_min=1.0, deadline=2.5, connect_timeout=1.0)
WINDOW = 1.5


def server(**kw):
    kw.setdefault("hand_window", WINDOW)
    return EmulatorServer(EmulatorConfig(**kw))


def ep(srv):
    return Endpoint(*srv.address)


def test_probe_payloads():
    p = build_probes(0)
    b1, b2 = p[ProbeName.BASE_PROBE_1].payload, p[ProbeName.BASE_PROBE_2].payload
    assert len(b1) == 16 and b1[:3] == b"\x00\x0e\x38" and b1[-5:] == bytes(5)
    assert b2 == b1[:15]
    assert p[ProbeName.ONE_ZERO].payload == b"\x00"
    assert p[ProbeName.TWO_ZERO].payload == b"\x00\x00"
    assert p[ProbeName.EPMD].payload == b"\x00\x01\x6e"
    assert p[ProbeName.TCP_GENERIC].payload == b"\r\n\r\n"
    assert len(p[ProbeName.TWO_K_RANDOM].payload) == 2000
    tls = p[ProbeName.TLS].payload
    assert len(tls) == 517 and tls[:2] == b"\x16\x03"
    assert int.from_bytes(tls[3:5], "big") == 512
    assert build_probes(0) == p and build_probes(1) != p


def test_rst_payload():
    for n in (1, 2, 1628, 8192):
        data = rst_payload(n, 5)
        assert len(data) == n and data[0] & 0x80
    assert rst_payload(100, 5) == rst_payload(100, 5)
    with pytest.raises(ValueError):
        rst_payload(0)


def _obs(behavior, elapsed, close=CloseKind.FIN):
    return ProbeObservation(ProbeName.ONE_ZERO, elapsed, b"", close, behavior)


def test_classify_order():
    c = ProbeConfig()
    assert classify(80, True, CloseKind.RST, c) is BehaviorClass.EXPLICIT_RESPONSE
    assert classify(0.1, False, CloseKind.RST, c) is BehaviorClass.RST_CLOSE
    assert classify(75, False, CloseKind.NONE, c) is BehaviorClass.TIMEOUT
    assert classify(3.0, False, CloseKind.FIN, c) is BehaviorClass.SHORT_CLOSE
    assert classify(30.0, False, CloseKind.FIN, c) is BehaviorClass.LONG_CLOSE
    assert classify(10.0, False, CloseKind.FIN, c) is BehaviorClass.INDETERMINATE


def test_matches():
    c = ProbeConfig()
    assert matches(_obs(BehaviorClass.SHORT_CLOSE, 1), Expect.SHORT, c)
    assert matches(_obs(BehaviorClass.TIMEOUT, 75, CloseKind.NONE), Expect.LONG, c)
    assert matches(_obs(BehaviorClass.RST_CLOSE, 0.1, CloseKind.RST), Expect.SHORT_RST, c)
    assert not matches(_obs(BehaviorClass.SHORT_CLOSE, 0.1), Expect.SHORT_RST, c)
    assert not matches(_obs(BehaviorClass.INDETERMINATE, 10), Expect.LONG, c)


def test_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig(t_short=5, t_long_min=4)
    with pytest.raises(ValueError):
        ProbeConfig(min_matches=6)


def test_endpoint_parse():
    assert Endpoint.parse("tcp://1.2.3.4:1194") == Endpoint("1.2.3.4", 1194)
    assert Endpoint.parse("[::1]:443") == Endpoint("::1", 443)
    assert str(Endpoint("::1", 443)) == "tcp://[::1]:443"
    with pytest.raises(ValueError):
        Endpoint.parse("udp://1.2.3.4:1194")


def test_expand_subnet():
    out = expand_subnet(Endpoint("10.0.0.12", 1300), ports=(1194,))
    assert len(out) == 16 and out[0] == Endpoint("10.0.0.12", 1300)
    assert {e.addr for e in out} == {f"10.0.0.{i}" for i in range(8, 16)}
    assert {e.port for e in out} == {1300, 1194}
    assert expand_subnet(Endpoint("10.0.0.12", 1194), prefix=32) == [Endpoint("10.0.0.12", 1194)]
    v6 = expand_subnet(Endpoint("2001:db8::5", 1194))
    assert len(v6) == 8 and v6[0].addr == "2001:db8::5"


def test_server_reset_frame_detection():
    assert is_server_reset_frame(b"\x00\x1a\x40" + bytes(25))
    assert not is_server_reset_frame(b"\x00\x10\x38" + bytes(15))
    assert not is_server_reset_frame(b"HTTP/1.0")


def test_hmac_server_is_openvpn():
    with server() as srv:
        v = probe_endpoint(ep(srv), FAST)
    assert v.verdict is Verdict.OPENVPN
    assert v.matches == 5 and v.connections <= 10
    byname = {o.name: o for o in v.evidence}
    assert byname[ProbeName.BASE_PROBE_1].behavior is BehaviorClass.SHORT_CLOSE
    assert byname[ProbeName.BASE_PROBE_2].behavior is BehaviorClass.LONG_CLOSE
    assert byname[ProbeName.TWO_K_RANDOM].behavior is BehaviorClass.RST_CLOSE


def test_no_hmac_short_circuits():
    with server(tls_auth=False) as srv:
        v = probe_endpoint(ep(srv), FAST)
    assert v.verdict is Verdict.OPENVPN_NO_HMAC and v.connections == 1


def test_port_shared():
    with server(persona=Persona.PORTSHARED) as srv:
        v = probe_endpoint(ep(srv), FAST)
    assert v.verdict is Verdict.PORT_SHARED


@pytest.mark.parametrize("persona", [Persona.HTTP, Persona.TLS, Persona.SSH, Persona.ECHO])
def test_non_vpn_personas(persona):
    with server(persona=persona) as srv:
        v = probe_endpoint(ep(srv), FAST)
    assert v.verdict is Verdict.NOT_OPENVPN


def test_large_read_buffer_loses_rst_match():
    with server(read_buffer=8192) as srv:
        v = probe_endpoint(ep(srv), FAST)
        relaxed = probe_endpoint(ep(srv), ProbeConfig(**{**FAST.__dict__, "min_matches": 4}))
    two_k = next(o for o in v.evidence if o.name is ProbeName.TWO_K_RANDOM)
    assert two_k.close_kind is CloseKind.FIN
    assert v.verdict is Verdict.NOT_OPENVPN and v.matches == 4
    assert relaxed.verdict is Verdict.OPENVPN


def test_unreachable():
    v = probe_endpoint(Endpoint("127.0.0.1", closed_port()), FAST)
    assert v.verdict is Verdict.UNREACHABLE
    assert v.evidence[0].behavior is BehaviorClass.UNREACHABLE


@pytest.mark.parametrize("buf", [1627, 2000])
def test_rst_threshold_search(buf):
    with server(read_buffer=buf) as srv:
        r = rst_threshold_search(ep(srv), FAST)
    assert r.value == buf + 1 and r.connections <= 14


def test_rst_threshold_above_search_range():
    with server(read_buffer=9000) as srv:
        r = rst_threshold_search(ep(srv), FAST)
    assert r.label() == ">8192" and r.connections == 1


def test_rst_threshold_always_rst(monkeypatch):
    from ovpnfp.prober import engine

    def fake(endpoint, spec, cfg):
        return ProbeObservation(spec.name, 0.01, b"", CloseKind.RST, BehaviorClass.RST_CLOSE, len(spec.payload))

    monkeypatch.setattr(engine, "run_probe", fake)
    r = rst_threshold_search(Endpoint("127.0.0.1", 1), FAST)
    assert r.label() == "<1" and r.connections == 14


def test_probe_endpoints_keeps_order():
    with server() as a, server(persona=Persona.HTTP) as b:
        out = probe_endpoints([ep(b), ep(a)], FAST, workers=2)
    assert [v.verdict for v in out] == [Verdict.NOT_OPENVPN, Verdict.OPENVPN]
