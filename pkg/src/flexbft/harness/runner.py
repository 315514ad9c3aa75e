"""Build a simulated world from a scenario, run it, and produce the run report."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

from .. import __version__
from ..adversary import build_nodes
from ..client import PARTIAL_SYNC, Client
from ..core import BlockStore, Keyring, fmt_fraction, quorum_count
from ..netsim import (
    ATTACK,
    END,
    FORMAT_VERSION,
    INIT,
    PARTIAL_SYNCHRONY,
    WORLD,
    Simulation,
    TranscriptWriter,
    read_transcript,
)
from . import audit, metrics
from .scenario import ScenarioConfig

LIVENESS_FAIL = "LIVENESS_FAIL"
SAFETY_FAIL = "SAFETY_FAIL"
VICTIM_UNHARMED = "VICTIM_UNHARMED"
AUDIT_FAIL = "AUDIT_FAIL"


@dataclass
class World:
    config: ScenarioConfig
    keyring: Keyring
    store: BlockStore
    nodes: list
    strategy: object
    clients: list
    sim: Simulation
    tx: TranscriptWriter


@dataclass
class RunResult:
    config: ScenarioConfig
    transcript: bytes
    report: dict
    world: World
    records: list = field(default_factory=list)

    @property
    def clients(self):
        return self.world.clients

    def client(self, name: str) -> Client:
        for c in self.world.clients:
            if c.name == name:
                return c
        raise KeyError(name)


def init_payload(cfg: ScenarioConfig) -> dict:
    return {"format": FORMAT_VERSION, "code": __version__, "scenario": cfg.to_dict()}


def settle_time(cfg: ScenarioConfig) -> int:
    """How long probes keep running after the last protocol event."""
    deltas = [c.assumption.delta for c in cfg.clients if c.assumption.delta is not None]
    return 2 * max(deltas, default=0) + 2 * cfg.probe_cadence + cfg.delay.bound_after_gst()


def build_world(cfg: ScenarioConfig) -> World:
    keyring = Keyring(cfg.n, cfg.seed)
    store = BlockStore()
    nodes, strategy = build_nodes(cfg.protocol, cfg.faults, keyring, store, cfg.delay,
                                  height_cap=cfg.heights_target + 1)
    clients = [Client(c.name, c.assumption, cfg.protocol, keyring, store) for c in cfg.clients]
    tx = TranscriptWriter()
    tx.write(0, WORLD, INIT, init_payload(cfg))
    for note in strategy.notes():
        tx.write(0, WORLD, ATTACK, note.data)
    sim = Simulation(nodes, clients, cfg.delay, tx, cfg.probe_cadence, settle_time(cfg),
                     link_override=strategy.link_delay)
    return World(cfg, keyring, store, nodes, strategy, clients, sim, tx)


def run_scenario(cfg: ScenarioConfig, until: Optional[int] = None) -> RunResult:
    limit = cfg.time_limit if until is None else min(until, cfg.time_limit)
    world = build_world(cfg)
    sim = world.sim
    if limit > 0:
        sim.run(limit)
        if world.clients:
            sim.probe(sim.now)
    end = {"final_time": sim.now, "message_count": sim.send_count, "probes": sim.probe_count}
    if until is not None:
        end["until"] = until
    world.tx.write(sim.now, WORLD, END, end)
    data = world.tx.getvalue()
    records = read_transcript(data, verify=False)
    report = build_report(cfg, records, world)
    return RunResult(cfg, data, report, world, records)


# ------------------------------------------------------------------ correctness


def client_correct(cfg: ScenarioConfig, assumption) -> bool:
    """Whether the client's assumption holds for this scenario's faults and network."""
    n = cfg.n
    f = len(cfg.faults.faulty)
    qr = cfg.protocol.quorum
    if assumption.mode == PARTIAL_SYNC:
        qc = quorum_count(n, assumption.q_c)
        return f < qc + qr - n
    m = cfg.delay
    bound = m.bound_after_gst()
    if m.kind == PARTIAL_SYNCHRONY and m.gst > 0:
        return False
    return bound <= assumption.delta and f < qr


def client_live(cfg: ScenarioConfig, assumption) -> bool:
    n = cfg.n
    available = n - len(cfg.faults.byzantine)
    if assumption.mode == PARTIAL_SYNC:
        return available >= max(quorum_count(n, assumption.q_c), cfg.protocol.quorum)
    return available >= cfg.protocol.quorum and client_correct(cfg, assumption)


# ----------------------------------------------------------------------- report


def build_report(cfg: ScenarioConfig, records: list, world: Optional[World] = None) -> dict:
    """Run report with a stable field order, computed from the transcript alone."""
    idx = metrics.TranscriptIndex(records)
    honest = [i for i in range(cfg.n) if i not in cfg.faults.faulty]
    lat = metrics.latencies(idx, cfg)
    per_height = metrics.messages_per_height(idx)
    vc = metrics.view_change_count(idx, honest)

    clients = []
    for c in cfg.clients:
        chain = idx.client_chain(c.name)
        entry = {
            "name": c.name,
            "assumption": c.assumption.describe(),
            "correct": client_correct(cfg, c.assumption),
            "committed_height": max((d["height"] for d in chain), default=0),
            "conflict_flag": idx.client_conflicted(c.name),
            "conflicts": [d["digest"] for d in idx.client_conflicts(c.name)],
            "first_commit_latency": lat[c.name]["first"],
            "latency_exact": lat[c.name]["exact"],
            "latency_probe": lat[c.name]["probe"],
        }
        clients.append(entry)

    checks = []
    flags = []

    def check(name, ok, detail="", flag=None):
        checks.append({"name": name, "ok": bool(ok), "detail": detail})
        if not ok and flag and flag not in flags:
            flags.append(flag)

    # safety across correct clients
    correct = [c for c in clients if c["correct"]]
    for c in correct:
        check(f"no_conflict[{c['name']}]", not c["conflict_flag"], "", SAFETY_FAIL)
    chains = {c.name: {d["height"]: d["digest"] for d in idx.client_chain(c.name)} for c in cfg.clients}
    for i, a in enumerate(correct):
        for b in correct[i + 1:]:
            ca, cb = chains[a["name"]], chains[b["name"]]
            agree = all(ca[h] == cb[h] for h in ca.keys() & cb.keys())
            check(f"prefix_consistent[{a['name']},{b['name']}]", agree, "", SAFETY_FAIL)
    for v in cfg.expect.victims:
        flagged = next(c for c in clients if c["name"] == v)["conflict_flag"]
        check(f"victim_conflict[{v}]", flagged, "expected a conflicting commit", VICTIM_UNHARMED)

    if cfg.expect.liveness:
        for c, spec in zip(clients, cfg.clients):
            if not client_live(cfg, spec.assumption) or c["name"] in cfg.expect.victims:
                continue
            check(f"progress[{c['name']}]", c["committed_height"] >= cfg.heights_target,
                  f"height {c['committed_height']} of {cfg.heights_target}", LIVENESS_FAIL)
        ok, detail = metrics.window_progress(idx, cfg, honest)
        check("view_window_progress", ok, detail, LIVENESS_FAIL)
        ok, detail = metrics.resume_after_view_change(idx, cfg, honest)
        check("resume_after_view_change", ok, detail, LIVENESS_FAIL)
    if cfg.expect.view_changes is not None:
        if cfg.expect.view_changes == "per_silent_leader":
            want = metrics.silent_leaders_encountered(idx, cfg, honest)
        else:
            want = cfg.expect.view_changes
        check("view_changes", vc == want, f"{vc} view changes, expected {want}", LIVENESS_FAIL)

    for name, problems in audit.run_all(idx, cfg).items():
        check(f"audit[{name}]", not problems, "; ".join(problems[:3]), AUDIT_FAIL)

    end = idx.end or {}
    return {
        "scenario": cfg.name,
        "seed": cfg.seed,
        "n": cfg.n,
        "q_r": fmt_fraction(cfg.protocol.q_r),
        "quorum": cfg.protocol.quorum,
        "byzantine": sorted(cfg.faults.byzantine),
        "abc": sorted(cfg.faults.abc),
        "strategy": cfg.faults.strategy,
        "delay_model": cfg.delay.kind,
        "heights_target": cfg.heights_target,
        "final_time": end.get("final_time", 0),
        "message_count": end.get("message_count", 0),
        "messages_per_height": {str(h): c for h, c in sorted(per_height.items())},
        "view_changes": vc,
        "attack": idx.attack,
        "clients": clients,
        "checks": checks,
        "flags": flags,
        "ok": not flags,
        "transcript_sha256": hashlib.sha256(b"".join(r.digest for r in records)).hexdigest(),
    }
