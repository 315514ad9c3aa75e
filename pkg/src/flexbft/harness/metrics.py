"""Measurements recomputed from a transcript: latencies, message counts, view changes."""

from __future__ import annotations

from collections import defaultdict
from typing import Optional

from ..core import quorum_count
from ..messages import block_from_wire
from ..netsim import (
    ATTACK, COMMIT, CONFLICT, DELIVER, END, INIT, LOCK, PARTIAL_SYNCHRONY, SEND, TEQUIV, TIMER,
    TLOCK, TVC, VIEW,
)


class TranscriptIndex:
    """One pass over the records, grouping what the report and audits need."""

    def __init__(self, records: list):
        self.records = records
        self.init: dict = {}
        self.end: Optional[dict] = None
        self.attack: Optional[dict] = None
        self.sends: list = []  # (record, payload)
        self.send_by_seq: dict = {}
        self.commits = defaultdict(list)  # client -> [(time, payload)]
        self.conflicts = defaultdict(list)
        self.flagged: set = set()
        self.views = defaultdict(list)  # actor -> [(time, view)]
        self.locks = defaultdict(list)  # actor -> [(time, payload)]
        self.tlocks = defaultdict(list)
        self.tequiv = defaultdict(list)
        self.tvc = defaultdict(list)
        for rec in records:
            k = rec.kind
            if k in (DELIVER, TIMER):
                continue
            data = rec.json()
            if k == SEND:
                self.sends.append((rec, data))
                self.send_by_seq[rec.seq] = data
            elif k == INIT:
                self.init = data
            elif k == END:
                self.end = data
            elif k == ATTACK and self.attack is None:
                self.attack = data
            elif k == COMMIT:
                self.commits[data["client"]].append((rec.time, data))
            elif k == CONFLICT:
                self.flagged.add(data["client"])
                if "digest" in data:
                    self.conflicts[data["client"]].append(data)
            elif k == VIEW:
                self.views[rec.actor].append((rec.time, data["view"]))
            elif k == LOCK:
                self.locks[rec.actor].append((rec.time, data))
            elif k == TLOCK:
                self.tlocks[rec.actor].append(data)
            elif k == TEQUIV:
                self.tequiv[rec.actor].append(data)
            elif k == TVC:
                self.tvc[rec.actor].append(data)

    @property
    def scenario(self) -> dict:
        return self.init.get("scenario", {})

    def client_chain(self, name: str) -> list:
        return [d for _, d in self.commits.get(name, [])]

    def client_conflicted(self, name: str) -> bool:
        return name in self.flagged

    def client_conflicts(self, name: str) -> list:
        return self.conflicts.get(name, [])

    def height_at(self, name: str, t: int) -> int:
        h = 0
        for time, d in self.commits.get(name, []):
            if time > t:
                break
            h = max(h, d["height"])
        return h

    def view_entries(self, actors) -> dict:
        """view -> earliest time any of `actors` entered it (view 0 at time 0)."""
        out = {0: 0}
        for a in actors:
            for t, v in self.views.get(a, []):
                if v not in out or t < out[v]:
                    out[v] = t
        return out

    def proposal_times(self) -> dict:
        out = {}
        for rec, data in self.sends:
            m = data["msg"]
            if m["t"] == "propose":
                key = block_key(m["block"])
                out.setdefault(key, rec.time)
        return out


def block_key(bw: dict) -> str:
    return block_from_wire(bw).digest.hex()


def messages_per_height(idx: TranscriptIndex) -> dict:
    """Point-to-point deliveries of proposals and votes, grouped by block height."""
    out: dict = defaultdict(int)
    for rec, data in idx.sends:
        m = data["msg"]
        if m["t"] == "propose":
            h = m["block"]["h"]
        elif m["t"] == "vote":
            h = m["proposal"]["block"]["h"]
        else:
            continue
        out[h] += sum(1 for r, _, _ in data["deliveries"] if r != rec.actor)
    return dict(out)


def view_change_count(idx: TranscriptIndex, honest) -> int:
    return max((v for a in honest for _, v in idx.views.get(a, [])), default=0)


def silent_leaders_encountered(idx: TranscriptIndex, cfg, honest) -> int:
    silent = silent_replicas(cfg)
    entered = idx.view_entries(honest)
    return sum(1 for v in entered if cfg.protocol.leader(v) in silent)


def silent_replicas(cfg) -> set:
    f = cfg.faults
    if f.strategy == "silent":
        return set(f.byzantine)
    if f.strategy == "mixed":
        return set(f.params.get("silent", [])) & set(f.byzantine)
    return set()


# -------------------------------------------------------------- latencies


def _reporting(cfg) -> list:
    silent = silent_replicas(cfg)
    return [i for i in range(cfg.n) if i not in silent]


def cr1_exact_commits(idx: TranscriptIndex, cfg, q_c) -> dict:
    """Earliest time each block becomes committed under CR1, from vote arrival times."""
    need = max(quorum_count(cfg.n, q_c), cfg.protocol.quorum)
    reporting = set(_reporting(cfg))
    arrival: dict = {}  # (block, view) -> {voter: earliest arrival}
    parent_of: dict = {}
    height_of: dict = {}
    for rec, data in idx.sends:
        m = data["msg"]
        if m["t"] != "vote":
            continue
        vote = m["vote"]
        times = [t for r, t, _ in data["deliveries"] if r in reporting]
        if not times:
            continue
        key = (vote["b"], vote["v"])
        bucket = arrival.setdefault(key, {})
        t = min(times)
        if vote["r"] not in bucket or t < bucket[vote["r"]]:
            bucket[vote["r"]] = t
        bw = m["proposal"]["block"]
        parent_of[vote["b"]] = bw["parent"]
        height_of[vote["b"]] = bw["h"]
    strong = {}
    for key, bucket in arrival.items():
        if len(bucket) >= need:
            strong[key] = sorted(bucket.values())[need - 1]
    direct: dict = {}
    for (child, view), t_child in strong.items():
        parent = parent_of[child]
        t_parent = strong.get((parent, view))
        if t_parent is None:
            continue
        t = max(t_child, t_parent)
        if parent not in direct or t < direct[parent]:
            direct[parent] = t
    # indirect: a block is committed once any descendant is
    out = dict(direct)
    for block, t in direct.items():
        cur = parent_of.get(block)
        while cur is not None and cur in height_of:
            if cur not in out or t < out[cur]:
                out[cur] = t
            cur = parent_of.get(cur)
    return {b: (height_of.get(b), t) for b, t in out.items()}


def cr2_exact_commits(idx: TranscriptIndex, cfg, delta: int) -> dict:
    """Earliest time each block gathers q_r attesting replicas under CR2."""
    reporting = _reporting(cfg)
    parent_of = {}
    height_of = {}
    for rec, data in idx.sends:
        m = data["msg"]
        if m["t"] == "propose":
            bw = m["block"]
            d = block_key(bw)
            parent_of[d] = bw["parent"]
            height_of[d] = bw["h"]
    per_block: dict = defaultdict(dict)  # block -> {replica: earliest attest}
    for r in reporting:
        equiv = {(e["height"], e["view"]): e["time"] for e in idx.tequiv.get(r, [])}
        vc = {e["view"]: e["time"] for e in idx.tvc.get(r, [])}
        for lk in idx.tlocks.get(r, []):
            at = lk["time"] + 2 * delta
            end = min(equiv.get((lk["height"], lk["view"]), float("inf")), vc.get(lk["view"], float("inf")))
            if at > end:
                continue
            cur = lk["block"]
            while cur in height_of:
                got = per_block[cur].get(r)
                if got is None or at < got:
                    per_block[cur][r] = at
                cur = parent_of[cur]
    q = cfg.protocol.quorum
    out = {}
    for b, who in per_block.items():
        if len(who) >= q:
            out[b] = (height_of[b], sorted(who.values())[q - 1])
    return out


def latencies(idx: TranscriptIndex, cfg) -> dict:
    """Per client: exact and probe-observed latency per committed height."""
    proposed = idx.proposal_times()
    out = {}
    for c in cfg.clients:
        a = c.assumption
        if a.mode == "partial_sync":
            exact_commits = cr1_exact_commits(idx, cfg, a.q_c)
        else:
            exact_commits = cr2_exact_commits(idx, cfg, a.delta)
        exact, probe = {}, {}
        for t, d in idx.commits.get(c.name, []):
            b = d["digest"]
            if b not in proposed:
                continue
            probe[str(d["height"])] = t - proposed[b]
            if b in exact_commits:
                exact[str(d["height"])] = exact_commits[b][1] - proposed[b]
        first = {"exact": exact.get("1"), "probe": probe.get("1")}
        out[c.name] = {"exact": exact, "probe": probe, "first": first}
    return out


# --------------------------------------------------------------- liveness


def _live_clients(cfg) -> list:
    from .runner import client_live

    return [c.name for c in cfg.clients
            if client_live(cfg, c.assumption) and c.name not in cfg.expect.victims]


def _gst(cfg) -> int:
    return cfg.delay.gst if cfg.delay.kind == PARTIAL_SYNCHRONY else 0


def window_progress(idx: TranscriptIndex, cfg, honest):
    """Every window of n consecutive views after GST raises every live client's height."""
    entries = idx.view_entries(honest)
    names = _live_clients(cfg)
    target = cfg.heights_target
    n = cfg.n
    bad = []
    for v in sorted(entries):
        if entries[v] < _gst(cfg) or v + n not in entries:
            continue
        t0, t1 = entries[v], entries[v + n]
        for name in names:
            h0, h1 = idx.height_at(name, t0), idx.height_at(name, t1)
            if h0 < target and h1 <= h0:
                bad.append(f"{name} stuck at {h0} over views {v}..{v + n - 1}")
    return not bad, "; ".join(bad[:3])


def resume_after_view_change(idx: TranscriptIndex, cfg, honest):
    """After a blame quorum under an honest next leader, commits resume within one timeout."""
    entries = idx.view_entries(honest)
    names = _live_clients(cfg)
    faulty = cfg.faults.faulty
    deltas = [c.assumption.delta or 0 for c in cfg.clients]
    slack = 2 * max(deltas, default=0) + cfg.probe_cadence
    bad = []
    for v in sorted(entries):
        if v == 0 or cfg.protocol.leader(v) in faulty or entries[v] < _gst(cfg):
            continue
        start = entries[v]
        if entries.get(v + 1, float("inf")) < start + cfg.protocol.timeout(v):
            continue  # the view itself ended early; covered by the window check
        deadline = start + cfg.protocol.timeout(v) + slack
        for name in names:
            h0 = idx.height_at(name, start)
            if h0 >= cfg.heights_target:
                continue
            if idx.height_at(name, deadline) <= h0:
                bad.append(f"{name} made no progress in view {v} by t={deadline}")
    return not bad, "; ".join(bad[:3])

