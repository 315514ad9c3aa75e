"""Deterministic discrete-event network simulation and the binary transcript format.

Delays are sampled by hashing (seed, sender, recipient, message digest, send
time), so adding one message never shifts the delays of unrelated ones.
"""

from __future__ import annotations

import hashlib
import heapq
import io
import json
import struct
from dataclasses import dataclass
from typing import Callable, Optional

SYNCHRONOUS = "synchronous"
PARTIAL_SYNCHRONY = "partial_synchrony"
SCRIPTED = "scripted"

FORMAT_VERSION = 1

# record kinds
INIT, SEND, DELIVER, TIMER, ARM, PROBE, COMMIT, CONFLICT = 1, 2, 3, 4, 5, 6, 7, 8
VIEW, LOCK, TLOCK, TEQUIV, TVC, DROP, END, ATTACK = 9, 10, 11, 12, 13, 14, 15, 16
KIND_NAMES = {
    INIT: "INIT", SEND: "SEND", DELIVER: "DELIVER", TIMER: "TIMER", ARM: "ARM",
    PROBE: "PROBE", COMMIT: "COMMIT", CONFLICT: "CONFLICT", VIEW: "VIEW", LOCK: "LOCK",
    TLOCK: "TLOCK", TEQUIV: "TEQUIV", TVC: "TVC", DROP: "DROP", END: "END", ATTACK: "ATTACK",
}
NOTE_KINDS = {"VIEW": VIEW, "LOCK": LOCK, "TLOCK": TLOCK, "TEQUIV": TEQUIV, "TVC": TVC,
              "DROP": DROP, "ATTACK": ATTACK}

WORLD = -1

_HEADER = struct.Struct("<QQiB")


def client_actor(index: int) -> int:
    return -(index + 2)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DelayModel:
    kind: str = SYNCHRONOUS
    actual_delta: int = 10
    min_delay: int = 1
    gst: int = 0
    post_gst_delta: int = 10
    links: tuple = ()  # ((sender, recipient, delay), ...) fixed per-link delays
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (SYNCHRONOUS, PARTIAL_SYNCHRONY, SCRIPTED):
            raise ConfigurationError(f"unknown delay model {self.kind!r}")
        if self.min_delay < 1:
            raise ConfigurationError("min_delay must be at least one tick")
        if self.min_delay > self.bound_after_gst():
            raise ConfigurationError("min_delay exceeds the delay bound")
        if self.kind == SCRIPTED and not self.links:
            raise ConfigurationError("scripted delay model needs a link table")
        object.__setattr__(self, "_table", {(s, r): d for s, r, d in self.links})
        for s, r, d in self.links:
            if not self.min_delay <= d <= self.bound_after_gst():
                raise ConfigurationError(
                    f"scripted delay {d} on link {s}->{r} outside [{self.min_delay}, "
                    f"{self.bound_after_gst()}]"
                )

    def bound_after_gst(self) -> int:
        return self.post_gst_delta if self.kind == PARTIAL_SYNCHRONY else self.actual_delta

    def max_delay(self, now: int) -> int:
        """Largest delay the model allows for a message sent at `now`."""
        if self.kind == PARTIAL_SYNCHRONY and now < self.gst:
            return self.gst - now + self.post_gst_delta
        return self.bound_after_gst()

    def check(self, delay: int, now: int):
        if not self.min_delay <= delay <= self.max_delay(now):
            raise ConfigurationError(
                f"delay {delay} at t={now} outside [{self.min_delay}, {self.max_delay(now)}]"
            )

    def _uniform(self, sender, recipient, digest: bytes, now: int, hi: int) -> int:
        h = hashlib.sha256(
            struct.pack("<Qiiq", self.seed & 0xFFFFFFFFFFFFFFFF, sender, recipient, now) + digest
        ).digest()
        span = hi - self.min_delay + 1
        return self.min_delay + int.from_bytes(h[:8], "little") % span

    def sample(self, sender: int, recipient: int, digest: bytes, now: int) -> int:
        if sender == recipient:
            return self.min_delay
        fixed = self._table.get((sender, recipient))
        if fixed is not None:
            return fixed
        d = self._uniform(sender, recipient, digest, now, self.bound_after_gst())
        if self.kind == PARTIAL_SYNCHRONY and now < self.gst:
            d += self.gst - now
        return d


def schedule_broadcast(sender: int, digest: bytes, recipients, now: int, model: DelayModel,
                       override: Optional[Callable] = None) -> list:
    """(recipient, delivery time) for each recipient, loopback at min_delay."""
    out = []
    for r in recipients:
        if r == sender:
            d = model.min_delay
        else:
            d = override(sender, r, now) if override is not None else None
            if d is None:
                d = model.sample(sender, r, digest, now)
            else:
                model.check(d, now)
        out.append((r, now + d))
    return out


# ----------------------------------------------------------------- transcript


@dataclass(frozen=True)
class Record:
    time: int
    seq: int
    actor: int
    kind: int
    digest: bytes
    payload: bytes

    def json(self):
        return json.loads(self.payload) if self.payload else None

    def text(self) -> str:
        body = self.payload.decode() if self.payload else ""
        return f"{self.time:>10} {self.seq:>8} {self.actor:>4} {KIND_NAMES.get(self.kind, self.kind):<8} {body}"


class TranscriptWriter:
    def __init__(self):
        self.buf = io.BytesIO()
        self.buf.write(bytes([FORMAT_VERSION]))
        self.seq = 0
        self.count = 0

    def write(self, time: int, actor: int, kind: int, payload) -> int:
        if not isinstance(payload, bytes):
            payload = json.dumps(payload, separators=(",", ":")).encode()
        seq = self.seq
        self.seq += 1
        body = _HEADER.pack(time, seq, actor, kind) + hashlib.sha256(payload).digest() + payload
        self.buf.write(struct.pack("<I", len(body)))
        self.buf.write(body)
        self.count += 1
        return seq

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class TranscriptError(Exception):
    def __init__(self, message, time=None, seq=None):
        super().__init__(message)
        self.time = time
        self.seq = seq


def read_transcript(data: bytes, verify: bool = True) -> list:
    if not data:
        raise TranscriptError("empty transcript")
    if data[0] != FORMAT_VERSION:
        raise TranscriptError(f"format version mismatch: file has {data[0]}, reader expects {FORMAT_VERSION}")
    pos = 1
    out = []
    prev = None
    while pos < len(data):
        if pos + 4 > len(data):
            raise TranscriptError("truncated length prefix", *(prev or (None, None)))
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        body = data[pos:pos + length]
        if len(body) != length or length < _HEADER.size + 32:
            raise TranscriptError("truncated record", *(prev or (None, None)))
        pos += length
        time, seq, actor, kind = _HEADER.unpack_from(body, 0)
        digest = body[_HEADER.size:_HEADER.size + 32]
        payload = body[_HEADER.size + 32:]
        if verify and hashlib.sha256(payload).digest() != digest:
            raise TranscriptError("payload digest mismatch", time, seq)
        if prev is not None and (time, seq) <= prev:
            raise TranscriptError("records out of order", time, seq)
        prev = (time, seq)
        out.append(Record(time, seq, actor, kind, digest, payload))
    return out


def text_projection(records) -> str:
    return "\n".join(r.text() for r in records) + "\n"


# ------------------------------------------------------------------ simulator

_DELIVER, _TIMER, _PROBE, _START = 0, 1, 2, 3


class Simulation:
    """Single-threaded event loop over replicas (or faulty stand-ins) and clients."""

    def __init__(self, nodes, clients, model: DelayModel, transcript: TranscriptWriter,
                 probe_cadence: int, settle: int, link_override: Optional[Callable] = None):
        self.nodes = nodes
        self.n = len(nodes)
        self.clients = clients
        self.model = model
        self.tx = transcript
        self.cadence = probe_cadence
        self.settle = settle
        self.link_override = link_override
        self.heap: list = []
        self.eseq = 0
        self.now = 0
        self.pending = 0  # protocol events (deliveries and timers) in the heap
        self.last_protocol_time = 0
        self.send_count = 0  # point-to-point deliveries, loopback excluded
        self.probe_count = 0

    def _push(self, time: int, kind: int, data):
        heapq.heappush(self.heap, (time, self.eseq, kind, data))
        self.eseq += 1
        if kind in (_DELIVER, _TIMER):
            self.pending += 1

    def run(self, until: Optional[int] = None):
        for i in range(self.n):
            self._push(0, _START, i)
        if self.clients:
            self._push(self.cadence, _PROBE, None)
        while self.heap:
            time, seq, kind, data = self.heap[0]
            if until is not None and time >= until:
                break
            heapq.heappop(self.heap)
            self.now = time
            if kind in (_DELIVER, _TIMER):
                self.pending -= 1
            if kind == _START:
                self._apply(data, self.nodes[data].start(time))
            elif kind == _DELIVER:
                sender, recipient, msg, send_seq = data
                self.last_protocol_time = time
                self.tx.write(time, recipient, DELIVER, {
                    "from": sender, "send": send_seq, "event": seq, "m": msg.mdigest.hex(),
                })
                self._apply(recipient, self.nodes[recipient].on_message(msg, sender, time))
            elif kind == _TIMER:
                rid, tag = data
                self.last_protocol_time = time
                self.tx.write(time, rid, TIMER, {"tag": tag, "event": seq})
                self._apply(rid, self.nodes[rid].on_timer(tag, time))
            elif kind == _PROBE:
                self.probe(time)
                if self.pending > 0 or time < self.last_protocol_time + self.settle:
                    nxt = time + self.cadence
                    if time >= self.last_protocol_time + self.settle and self.heap:
                        # idle until the next protocol event; stay on the cadence grid
                        nxt = max(nxt, -(-self.heap[0][0] // self.cadence) * self.cadence)
                    self._push(nxt, _PROBE, None)
        return self

    def _apply(self, actor: int, outs):
        now = self.now
        for out in outs:
            cls = type(out).__name__
            if cls == "Send":
                sender = actor if out.origin is None else out.origin
                recipients = range(self.n) if out.to is None else out.to
                override = None
                if self.link_override is not None:
                    msg = out.msg
                    override = lambda s, r, t: self.link_override(s, r, msg, t)
                plan = schedule_broadcast(sender, out.msg.mdigest, recipients, now, self.model, override)
                base = self.eseq
                send_seq = self.tx.write(now, sender, SEND, {
                    "msg": out.msg.wire,
                    "deliveries": [[r, t, base + i] for i, (r, t) in enumerate(plan)],
                })
                for r, t in plan:
                    self._push(t, _DELIVER, (sender, r, out.msg, send_seq))
                    if r != sender:
                        self.send_count += 1
            elif cls == "Timer":
                self.tx.write(now, actor, ARM, {"at": out.at, "tag": out.tag, "event": self.eseq})
                self._push(out.at, _TIMER, (actor, out.tag))
            elif cls == "Note":
                self.tx.write(now, actor, NOTE_KINDS[out.kind], out.data)
            else:
                raise TypeError(f"unknown output {out!r}")

    def collect_reports(self, now: int) -> list:
        reports = []
        for node in self.nodes:
            rep = node.report(now)
            if rep is not None:
                reports.append(rep)
        return reports

    def probe(self, now: int):
        self.probe_count += 1
        reports = self.collect_reports(now)
        self.tx.write(now, WORLD, PROBE, {"reports": [r.replica for r in reports]})
        for idx, client in enumerate(self.clients):
            was_conflicted = client.state.conflict_flag
            for dec in client.observe(reports, now):
                kind = COMMIT
                if any(c is dec for c in client.state.conflicts):
                    kind = CONFLICT
                payload = dec.export()
                payload["client"] = client.name
                payload["evidence"] = dec.evidence_json()
                self.tx.write(now, client_actor(idx), kind, payload)
            if client.state.conflict_flag and not was_conflicted:
                self.tx.write(now, client_actor(idx), CONFLICT,
                              {"client": client.name, "flag": True})
