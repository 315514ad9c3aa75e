"""Scenario files: TOML with nested tables, rationals written as "p/q"."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..adversary import STRATEGIES, FaultConfig
from ..client import PARTIAL_SYNC, SYNC, ClientAssumption
from ..core import ProtocolConfig, fmt_fraction
from ..netsim import PARTIAL_SYNCHRONY, SCRIPTED, SYNCHRONOUS, ConfigurationError, DelayModel

E_PARSE = "E_PARSE"
E_FIELD = "E_FIELD"
E_RANGE = "E_RANGE"
E_QUORUM = "E_QUORUM"
E_OVERLAP = "E_OVERLAP"
E_UNKNOWN_STRATEGY = "E_UNKNOWN_STRATEGY"
E_DELAY = "E_DELAY"


class ScenarioError(ValueError):
    def __init__(self, code: str, field_name: str, message: str):
        super().__init__(f"{code} [{field_name}]: {message}")
        self.code = code
        self.field = field_name


@dataclass(frozen=True)
class ClientSpec:
    name: str
    assumption: ClientAssumption


@dataclass
class Expectations:
    liveness: bool = True
    victims: tuple = ()
    view_changes: Optional[object] = None  # int, or "per_silent_leader"


@dataclass
class ScenarioConfig:
    name: str
    protocol: ProtocolConfig
    faults: FaultConfig
    delay: DelayModel
    clients: tuple
    heights_target: int = 10
    probe_cadence: int = 10
    seed: int = 0
    time_limit: int = 1_000_000
    expect: Expectations = field(default_factory=Expectations)

    @property
    def n(self) -> int:
        return self.protocol.n

    def with_seed(self, seed: int) -> "ScenarioConfig":
        out = copy.copy(self)
        out.seed = seed
        out.delay = DelayModel(**{**_delay_fields(self.delay), "seed": seed})
        return out

    def to_dict(self) -> dict:
        """Canonical dict, loadable again through `from_dict`."""
        d = {
            "name": self.name,
            "seed": self.seed,
            "heights_target": self.heights_target,
            "probe_cadence": self.probe_cadence,
            "time_limit": self.time_limit,
            "protocol": {
                "n": self.protocol.n,
                "q_r": fmt_fraction(self.protocol.q_r),
                "base_timeout": self.protocol.base_timeout,
                "timeout_growth": self.protocol.timeout_growth,
            },
            "delay": {
                "kind": self.delay.kind,
                "actual_delta": self.delay.actual_delta,
                "min_delay": self.delay.min_delay,
                "gst": self.delay.gst,
                "post_gst_delta": self.delay.post_gst_delta,
                "links": [list(x) for x in self.delay.links],
            },
            "faults": {
                "byzantine": sorted(self.faults.byzantine),
                "abc": sorted(self.faults.abc),
                "strategy": self.faults.strategy,
                "params": _plain(self.faults.params),
            },
            "clients": [_client_dict(c) for c in self.clients],
            "expect": {
                "liveness": self.expect.liveness,
                "victims": list(self.expect.victims),
            },
        }
        if self.expect.view_changes is not None:
            d["expect"]["view_changes"] = self.expect.view_changes
        return d


def _plain(params: dict) -> dict:
    out = {}
    for k in sorted(params):
        v = params[k]
        if isinstance(v, Fraction):
            v = fmt_fraction(v)
        elif isinstance(v, (list, tuple)):
            v = list(v)
        out[k] = v
    return out


def _delay_fields(m: DelayModel) -> dict:
    return {
        "kind": m.kind, "actual_delta": m.actual_delta, "min_delay": m.min_delay, "gst": m.gst,
        "post_gst_delta": m.post_gst_delta, "links": m.links, "seed": m.seed,
    }


def _client_dict(c: ClientSpec) -> dict:
    a = c.assumption
    if a.mode == PARTIAL_SYNC:
        return {"name": c.name, "mode": a.mode, "q_c": fmt_fraction(a.q_c)}
    return {"name": c.name, "mode": a.mode, "delta": a.delta}


def _frac(value, field_name: str) -> Fraction:
    if isinstance(value, bool) or isinstance(value, float):
        raise ScenarioError(E_FIELD, field_name, "write fractions as \"p/q\" strings or integers")
    try:
        return Fraction(value)
    except (ValueError, TypeError, ZeroDivisionError):
        raise ScenarioError(E_FIELD, field_name, f"not a rational: {value!r}") from None


def _int(d: dict, key: str, field_name: str, default=None, minimum: Optional[int] = None) -> int:
    if key not in d:
        if default is None:
            raise ScenarioError(E_FIELD, field_name, "missing")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(E_FIELD, field_name, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ScenarioError(E_RANGE, field_name, f"must be at least {minimum}, got {v}")
    return v


def _ids(values, n: int, field_name: str) -> frozenset:
    if not isinstance(values, list):
        raise ScenarioError(E_FIELD, field_name, "expected a list of replica ids")
    for v in values:
        if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < n:
            raise ScenarioError(E_RANGE, field_name, f"replica id {v!r} outside 0..{n - 1}")
    return frozenset(values)


def from_dict(raw: dict) -> ScenarioConfig:
    if "protocol" not in raw:
        raise ScenarioError(E_FIELD, "protocol", "missing table")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise ScenarioError(E_FIELD, "name", "missing scenario name")

    p = raw["protocol"]
    n = _int(p, "n", "protocol.n", minimum=1)
    q_r = _frac(p.get("q_r", "2/3"), "protocol.q_r")
    if q_r <= Fraction(1, 2):
        raise ScenarioError(E_QUORUM, "protocol.q_r", "q_r must exceed 1/2")
    if q_r > 1:
        raise ScenarioError(E_QUORUM, "protocol.q_r", "q_r must be at most 1")
    protocol = ProtocolConfig(
        n, q_r,
        _int(p, "base_timeout", "protocol.base_timeout", 100, minimum=1),
        _int(p, "timeout_growth", "protocol.timeout_growth", 2, minimum=1),
    )

    seed = _int(raw, "seed", "seed", 0, minimum=0)
    dl = raw.get("delay", {})
    kind = dl.get("kind", SYNCHRONOUS)
    if kind not in (SYNCHRONOUS, PARTIAL_SYNCHRONY, SCRIPTED):
        raise ScenarioError(E_FIELD, "delay.kind", f"unknown delay model {kind!r}")
    links = []
    for i, entry in enumerate(dl.get("links", [])):
        if not (isinstance(entry, list) and len(entry) == 3 and all(isinstance(x, int) for x in entry)):
            raise ScenarioError(E_FIELD, f"delay.links[{i}]", "expected [sender, recipient, delay]")
        links.append(tuple(entry))
    try:
        delay = DelayModel(
            kind,
            _int(dl, "actual_delta", "delay.actual_delta", 10, minimum=1),
            _int(dl, "min_delay", "delay.min_delay", 1, minimum=1),
            _int(dl, "gst", "delay.gst", 0, minimum=0),
            _int(dl, "post_gst_delta", "delay.post_gst_delta", 10, minimum=1),
            tuple(links),
            seed,
        )
    except ConfigurationError as exc:
        raise ScenarioError(E_DELAY, "delay", str(exc)) from None

    fl = raw.get("faults", {})
    byz = _ids(fl.get("byzantine", []), n, "faults.byzantine")
    abc = _ids(fl.get("abc", []), n, "faults.abc")
    if byz & abc:
        raise ScenarioError(E_OVERLAP, "faults", f"byzantine and abc overlap on {sorted(byz & abc)}")
    strategy = fl.get("strategy", "silent")
    if strategy not in STRATEGIES:
        raise ScenarioError(E_UNKNOWN_STRATEGY, "faults.strategy", f"unknown strategy {strategy!r}")
    params = dict(fl.get("params", {}))
    for key in ("victim_q_c",):
        if key in params:
            params[key] = _frac(params[key], f"faults.params.{key}")
    faults = FaultConfig(byz, abc, strategy, params)

    clients = []
    seen = set()
    for i, c in enumerate(raw.get("clients", [])):
        cname = c.get("name", f"client{i}")
        if cname in seen:
            raise ScenarioError(E_FIELD, f"clients[{i}].name", f"duplicate client name {cname!r}")
        seen.add(cname)
        mode = c.get("mode")
        if mode == PARTIAL_SYNC:
            q_c = _frac(c.get("q_c", fmt_fraction(q_r)), f"clients[{i}].q_c")
            if q_c < q_r or q_c > 1:
                raise ScenarioError(E_QUORUM, f"clients[{i}].q_c", "q_c must satisfy q_r <= q_c <= 1")
            a = ClientAssumption(PARTIAL_SYNC, q_c=q_c)
        elif mode == SYNC:
            a = ClientAssumption(SYNC, delta=_int(c, "delta", f"clients[{i}].delta", minimum=1))
        else:
            raise ScenarioError(E_FIELD, f"clients[{i}].mode", f"expected partial_sync or sync, got {mode!r}")
        clients.append(ClientSpec(cname, a))
    if not clients:
        raise ScenarioError(E_FIELD, "clients", "at least one client is required")

    ex = raw.get("expect", {})
    victims = tuple(ex.get("victims", []))
    for v in victims:
        if v not in seen:
            raise ScenarioError(E_FIELD, "expect.victims", f"no client named {v!r}")
    vc = ex.get("view_changes")
    if vc is not None and not (isinstance(vc, int) or vc == "per_silent_leader"):
        raise ScenarioError(E_FIELD, "expect.view_changes", "integer or \"per_silent_leader\"")
    expect = Expectations(bool(ex.get("liveness", True)), victims, vc)
    if expect.liveness and protocol.quorum > n - len(byz):
        raise ScenarioError(E_QUORUM, "expect.liveness",
                            "liveness declared but Byzantine replicas leave fewer than q_r voters")

    return ScenarioConfig(
        name,
        protocol,
        faults,
        delay,
        tuple(clients),
        _int(raw, "heights_target", "heights_target", 10, minimum=1),
        _int(raw, "probe_cadence", "probe_cadence", 10, minimum=1),
        seed,
        _int(raw, "time_limit", "time_limit", 1_000_000, minimum=0),
        expect,
    )


def loads(text: str) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(E_PARSE, "<file>", str(exc)) from None
    return from_dict(raw)


def load_scenario(path) -> ScenarioConfig:
    return loads(Path(path).read_text())


def load_corpus(directory) -> list:
    return [load_scenario(p) for p in sorted(Path(directory).glob("*.toml"))]
