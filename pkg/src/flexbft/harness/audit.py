"""Transcript audits: invariants every honest replica and correct client must satisfy.

Each audit returns a list of human-readable problems; empty means it passed.
"""

from __future__ import annotations

from ..core import BlockStore, Keyring, ProtocolConfig, equivocates, extends
from ..messages import block_from_wire, cert_from_wire
from ..netsim import DELIVER, END, LOCK, PROBE, TIMER
from .metrics import TranscriptIndex


def _walk(obj, visit):
    if isinstance(obj, dict):
        visit(obj)
        for v in obj.values():
            if isinstance(v, (dict, list)):
                _walk(v, visit)
    elif isinstance(obj, list):
        for v in obj:
            if isinstance(v, (dict, list)):
                _walk(v, visit)


def _is_block(d) -> bool:
    return "parent" in d and "p" in d and "h" in d


def _is_cert(d) -> bool:
    return "votes" in d and "b" in d


def _signed(d):
    """(signer, auth) of a signed wire object, or None."""
    if "a" not in d:
        return None
    if "r" in d and "b" in d:
        return d["r"], d["a"]
    if "from" in d:
        return d["from"], d["a"]
    return None


class AuditContext:
    def __init__(self, idx: TranscriptIndex, cfg):
        self.idx = idx
        self.cfg = cfg
        self.protocol: ProtocolConfig = cfg.protocol
        self.keyring = Keyring(cfg.n, cfg.seed)
        self.faulty = set(cfg.faults.faulty)
        self.honest = [i for i in range(cfg.n) if i not in self.faulty]
        self.store = BlockStore()
        blocks = {}
        self.cert_wires = []
        for _, data in idx.sends:
            def visit(d):
                if _is_block(d):
                    b = block_from_wire(d)
                    blocks[b.digest] = b
                elif _is_cert(d):
                    self.cert_wires.append(d)
            _walk(data["msg"], visit)
        for b in sorted(blocks.values(), key=lambda b: b.height):
            if b.parent in self.store and b.digest not in self.store:
                self.store.add(b)
        self._valid: dict = {}

    def cert_valid(self, d: dict):
        """Certificate object when the wire form is a valid certificate, else None."""
        key = (d["b"], d["v"], tuple((v["r"], v["a"]) for v in d["votes"]))
        if key in self._valid:
            return self._valid[key]
        cert = cert_from_wire(d)
        ok = None
        if cert.is_genesis():
            ok = cert
        elif cert.block in self.store and self.store.get(cert.block).height == cert.height:
            voters = {v.voter for v in cert.votes}
            if (len(voters) >= self.protocol.quorum and len(voters) == len(cert.votes)
                    and all(v.block == cert.block and v.view == cert.view
                            and self.keyring.verify_vote(v) for v in cert.votes)):
                ok = cert
        self._valid[key] = ok
        return ok

    def all_certs(self) -> dict:
        """(block, view) -> height for every valid certificate seen anywhere."""
        out = {}
        for d in self.cert_wires:
            c = self.cert_valid(d)
            if c is not None and not c.is_genesis():
                out[(c.block, c.view)] = c.height
        return out


def vote_uniqueness(ctx: AuditContext) -> list:
    seen = {}
    problems = []
    for rec, data in ctx.idx.sends:
        m = data["msg"]
        if rec.actor in ctx.faulty or m["t"] != "vote":
            continue
        v = m["vote"]
        key = (v["r"], m["proposal"]["block"]["h"], v["v"])
        if seen.setdefault(key, v["b"]) != v["b"]:
            problems.append(f"replica {key[0]} voted twice at height {key[1]} view {key[2]}")
    return problems


def no_post_blame(ctx: AuditContext) -> list:
    blamed = {}
    problems = []
    for rec, data in ctx.idx.sends:
        if rec.actor in ctx.faulty:
            continue
        m = data["msg"]
        views = blamed.setdefault(rec.actor, set())
        if m["t"] == "blame" and m["from"] == rec.actor:
            views.add(m["view"])
        elif m["t"] == "vote" and m["vote"]["r"] == rec.actor and m["vote"]["v"] in views:
            problems.append(f"replica {rec.actor} voted in blamed view {m['vote']['v']}")
        elif m["t"] == "propose" and m["from"] == rec.actor and m["view"] in views:
            problems.append(f"replica {rec.actor} proposed in blamed view {m['view']}")
    return problems


def lock_maximality(ctx: AuditContext) -> list:
    """After handling a delivery, an honest replica's lock ranks at least every valid cert in it."""
    highest = {r: (0, 0) for r in ctx.honest}
    problems = []
    pending = None  # (replica, rank needed, seq)
    ranks = {}  # send seq -> highest valid cert rank in that message
    honest = set(ctx.honest)
    for rec in ctx.idx.records:
        if rec.kind in (DELIVER, TIMER, PROBE, END) and pending is not None:
            r, need, seq = pending
            if highest[r] < need:
                problems.append(f"replica {r} lock {highest[r]} below {need} after record {seq}")
            pending = None
        if rec.kind == LOCK and rec.actor in honest:
            d = rec.json()
            highest[rec.actor] = max(highest[rec.actor], (d["view"], d["height"]))
        elif rec.kind == DELIVER and rec.actor in honest:
            send_seq = rec.json()["send"]
            best = ranks.get(send_seq)
            if best is None:
                send = ctx.idx.send_by_seq.get(send_seq)
                if send is None:
                    continue
                found = [(0, 0)]

                def visit(d):
                    if _is_cert(d):
                        c = ctx.cert_valid(d)
                        if c is not None:
                            found.append(c.rank)

                _walk(send["msg"], visit)
                best = ranks[send_seq] = max(found)
            pending = (rec.actor, best, rec.seq)
    return problems


def authenticator_boundary(ctx: AuditContext) -> list:
    """Honest signatures only ever appear after their owner emitted them."""
    emitted = set()
    problems = []
    for rec, data in ctx.idx.sends:
        found = []

        def visit(d):
            s = _signed(d)
            if s is not None:
                found.append(s)

        _walk(data["msg"], visit)
        if rec.actor not in ctx.faulty:
            for s in found:
                if s[0] == rec.actor:
                    emitted.add(s)
        for s in found:
            if s[0] in ctx.faulty or s in emitted:
                continue
            problems.append(f"record {rec.seq}: signature of honest replica {s[0]} never emitted by it")
    return problems


def certificate_uniqueness(ctx: AuditContext) -> list:
    """With fewer than 2q_r - 1 faulty, no view certifies two equivocating blocks."""
    n, qr = ctx.cfg.n, ctx.protocol.quorum
    if len(ctx.faulty) >= 2 * qr - n:
        return []
    by_view = {}
    for (block, view) in ctx.all_certs():
        by_view.setdefault(view, []).append(block)
    problems = []
    for view, blocks in sorted(by_view.items()):
        blocks.sort()
        for i, a in enumerate(blocks):
            for b in blocks[i + 1:]:
                if equivocates(a, b, ctx.store):
                    problems.append(f"view {view} certifies equivocating {a.hex()[:8]} and {b.hex()[:8]}")
    return problems


def direct_commit_scan(ctx: AuditContext) -> list:
    """Every certificate ranked at or above a correct client's direct commit extends it."""
    from .runner import client_correct

    certs = ctx.all_certs()
    problems = []
    for spec in ctx.cfg.clients:
        if not client_correct(ctx.cfg, spec.assumption):
            continue
        for _, d in ctx.idx.commits.get(spec.name, []):
            block = bytes.fromhex(d["digest"])
            view = _direct_view(ctx, d)
            if view is None:
                continue
            for (cb, cv), ch in certs.items():
                if (cv, ch) < (view, d["height"]):
                    continue
                if cb != block and not extends(cb, block, ctx.store):
                    problems.append(
                        f"{spec.name}: cert {cb.hex()[:8]}@({cv},{ch}) does not extend "
                        f"direct commit {d['digest'][:8]}@({view},{d['height']})"
                    )
    return problems


def _direct_view(ctx: AuditContext, d: dict):
    ev = d.get("evidence", {})
    if d["rule"] == "CR1":
        return ev.get("view") if d["direct"] else None
    views = [v for r, h, v, _ in ev.get("attesters", []) if h == d["height"] and r not in ctx.faulty]
    return min(views) if views else None


AUDITS = {
    "vote_uniqueness": vote_uniqueness,
    "no_post_blame": no_post_blame,
    "lock_maximality": lock_maximality,
    "authenticator_boundary": authenticator_boundary,
    "certificate_uniqueness": certificate_uniqueness,
    "direct_commit_scan": direct_commit_scan,
}


def run_all(idx: TranscriptIndex, cfg) -> dict:
    ctx = AuditContext(idx, cfg)
    return {name: fn(ctx) for name, fn in AUDITS.items()}
