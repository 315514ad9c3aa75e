"""The replica state machine: propose/vote steady state, leader monitoring, view change.

A Replica is driven by three entry points, `start`, `on_message` and
`on_timer`, each returning a list of outputs for the simulation loop to act
on. Handlers never wait and never look at a synchrony bound; the only clock
use is the exponentially growing view timeout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .core import (
    GENESIS,
    GENESIS_CERT,
    Block,
    BlockStore,
    Certificate,
    Keyring,
    ProtocolConfig,
    Vote,
    always_valid,
    equivocates,
    extends,
    make_certificate,
    verify_certificate,
)
from .messages import (
    BlameCertificate,
    BlameMsg,
    Proposal,
    StatusMsg,
    StatusSet,
    VoteMsg,
)


@dataclass(frozen=True)
class Send:
    msg: object
    to: Optional[tuple] = None  # None means every replica, sender included
    origin: Optional[int] = None  # coalition member sending on the handler's behalf


@dataclass(frozen=True)
class Timer:
    at: int
    tag: int


@dataclass(frozen=True)
class Note:
    """State change worth a transcript record (locks, timestamps, views)."""

    kind: str
    data: dict


@dataclass(frozen=True)
class LockEntry:
    height: int
    view: int
    block: bytes
    time: int


@dataclass(frozen=True)
class ReplicaReport:
    replica: int
    time: int
    view: int
    votes: dict  # (block digest, view) -> tuple of Vote sorted by voter
    certs: tuple
    locks: tuple  # LockEntry
    t_equiv: dict  # (height, view) -> time
    t_viewchange: dict  # view -> time


class NotLeader(Exception):
    pass


class MissingStatus(Exception):
    pass


def default_payload(view: int, height: int, leader: int) -> bytes:
    return b"v%d/h%d/r%d" % (view, height, leader)


class Replica:
    faulty = False

    def __init__(
        self,
        rid: int,
        cfg: ProtocolConfig,
        keyring: Keyring,
        store: BlockStore,
        height_cap: Optional[int] = None,
        payload_fn: Callable[[int, int, int], bytes] = default_payload,
        validity: Callable[[bytes], bool] = always_valid,
    ):
        self.id = rid
        self.cfg = cfg
        self.keyring = keyring
        self.signer = keyring.signer(rid)
        self.store = store
        self.height_cap = height_cap
        self.payload_fn = payload_fn
        self.validity = validity

        self.known = {GENESIS.digest}
        self.view = 0
        self.view_entry_time = 0
        self.last_vote_time = 0
        self.highest_cert: Certificate = GENESIS_CERT
        self.votes: dict = {}  # (digest, view) -> {voter: Vote}
        self.certs: dict = {(GENESIS.digest, 0): GENESIS_CERT}
        self.t_lock: dict = {}
        self.lock_block: dict = {}
        self.t_equiv: dict = {}
        self.t_viewchange: dict = {}
        self.last_proposed_in_view: Optional[bytes] = None
        self.voted_heights_in_view: set = set()
        self.blamed_views: set = set()
        self.status_set: Optional[StatusSet] = None

        self.seen_proposals: dict = {}  # view -> {digest: Proposal}, leader-signed only
        self.equivocating_views: set = set()
        self.processed: set = set()  # (view, digest) of proposals already handled
        self.parked: dict = {}  # parent digest -> [Proposal]
        self.future: list = []  # messages for views not yet entered
        self.blames: dict = {}  # view -> {blamer: BlameMsg}
        self.blame_cert_sent: set = set()
        self.statuses: dict = {}  # view -> {sender: StatusMsg}
        self.my_proposal: Optional[bytes] = None  # last block this replica proposed in its view
        self.proposed_first: set = set()
        self.timer_deadline: Optional[int] = None
        self.timer_armed = False
        self._vote_snap: dict = {}

    # ---------------------------------------------------------------- helpers

    def is_leader(self, view: Optional[int] = None) -> bool:
        return self.cfg.leader(self.view if view is None else view) == self.id

    def settled(self, cert: Certificate) -> bool:
        """Cert reaches the height cap and its parent is certified in the same view."""
        if self.height_cap is None or cert.height < self.height_cap:
            return False
        parent = self.store.get(cert.block).parent
        return (parent, cert.view) in self.certs

    def quiescent(self) -> bool:
        return self.settled(self.highest_cert)

    def _arm(self, now: int, out: list):
        start = max(self.view_entry_time, self.last_vote_time)
        self.timer_deadline = start + self.cfg.timeout(self.view) + 1
        if not self.timer_armed:
            self.timer_armed = True
            out.append(Timer(self.timer_deadline, self.view))

    def _harvest(self, msg, out: list):
        for cert in msg.certificates():
            self._learn_cert(cert, out)

    def _learn_cert(self, cert: Certificate, out: list) -> bool:
        key = (cert.block, cert.view)
        if key in self.certs:
            return False
        if cert.block not in self.store:
            return False
        if self.store.get(cert.block).height != cert.height:
            return False
        if not verify_certificate(cert, self.cfg, self.keyring):
            return False
        self.certs[key] = cert
        if cert.rank > self.highest_cert.rank:
            self.highest_cert = cert
            out.append(Note("LOCK", {"block": cert.block.hex(), "height": cert.height, "view": cert.view}))
        return True

    # ------------------------------------------------------------ entry points

    def start(self, now: int) -> list:
        out: list = []
        self.view_entry_time = now
        self._arm(now, out)
        if self.is_leader(0):
            out.extend(self.leader_propose(now))
        return out

    def on_message(self, msg, sender: int, now: int) -> list:
        out: list = []
        self._harvest(msg, out)
        if isinstance(msg, VoteMsg):
            self._on_proposal(msg.proposal, now, out)
            self._on_vote(msg.vote, now, out)
        elif isinstance(msg, Proposal):
            self._on_proposal(msg, now, out)
        elif isinstance(msg, BlameMsg):
            self._on_blame(msg, now, out)
        elif isinstance(msg, BlameCertificate):
            self._on_blame_cert(msg, now, out)
        elif isinstance(msg, StatusMsg):
            self._on_status(msg, now, out)
        return out

    def on_timer(self, tag: int, now: int) -> list:
        out: list = []
        self.timer_armed = False
        blame = self.check_timeout(now, out)
        if blame is None and not self.quiescent() and self.view not in self.blamed_views:
            self.timer_armed = True
            out.append(Timer(self.timer_deadline, self.view))
        return out

    # ---------------------------------------------------------------- leader

    def leader_propose(self, now: int, payload: Optional[bytes] = None) -> list:
        """Propose the next block of the current view, if this replica leads it."""
        if not self.is_leader():
            raise NotLeader(f"replica {self.id} does not lead view {self.view}")
        if self.view in self.blamed_views:
            return []
        status = None
        if self.my_proposal is None:
            if self.view == 0:
                parent_cert = GENESIS_CERT
            else:
                if self.status_set is None:
                    raise MissingStatus(f"no status set for view {self.view}")
                status = self.status_set
                parent_cert = status.highest()[0].cert
        else:
            parent_cert = self.certs.get((self.my_proposal, self.view))
            if parent_cert is None:
                return []
        if self.settled(parent_cert):
            return []
        parent = self.store.get(parent_cert.block)
        height = parent.height + 1
        if payload is None:
            payload = self.payload_fn(self.view, height, self.id)
        block = Block(height, payload, parent.digest)
        self.store.add(block)
        prop = Proposal.make(self.signer, block, self.view, parent_cert, status)
        self.my_proposal = block.digest
        return [Send(prop)]

    def _maybe_continue(self, cert: Certificate, now: int, out: list):
        if (
            self.is_leader()
            and cert.view == self.view
            and cert.block == self.my_proposal
        ):
            out.extend(self.leader_propose(now))

    # -------------------------------------------------------------- proposals

    def _valid_proposal(self, p: Proposal) -> bool:
        if p.proposer != self.cfg.leader(p.view):
            return False
        if not p.verify_auth(self.keyring):
            return False
        if p.prev_cert.block != p.block.parent or p.prev_cert.height != p.block.height - 1:
            return False
        if not verify_certificate(p.prev_cert, self.cfg, self.keyring):
            return False
        if not self.validity(p.block.payload):
            return False
        if p.status is not None:
            if p.status.view != p.view or not p.status.verify(self.cfg, self.keyring):
                return False
        if p.block.digest not in self.store:
            self.store.add(p.block)
        return True

    def _record_proposal(self, p: Proposal, now: int, out: list):
        """Track leader proposals per view; note equivocation times."""
        seen = self.seen_proposals.setdefault(p.view, {})
        if p.block.digest in seen:
            return None
        clash = None
        for other in seen.values():
            if equivocates(p.block.digest, other.block.digest, self.store):
                clash = other
                break
        seen[p.block.digest] = p
        if clash is not None and p.view not in self.equivocating_views:
            self.equivocating_views.add(p.view)
            for q in seen.values():
                self._set_equiv(q.block.height, p.view, now, out)
        elif p.view in self.equivocating_views:
            self._set_equiv(p.block.height, p.view, now, out)
        return clash

    def _set_equiv(self, height: int, view: int, now: int, out: list):
        if (height, view) not in self.t_equiv:
            self.t_equiv[(height, view)] = now
            out.append(Note("TEQUIV", {"height": height, "view": view, "time": now}))

    def _on_proposal(self, p: Proposal, now: int, out: list):
        key = (p.view, p.block.digest)
        if key in self.processed:
            return
        if not self._valid_proposal(p):
            out.append(Note("DROP", {"reason": "invalid proposal", "view": p.view}))
            return
        if p.view > self.view:
            self.future.append(p)
            return
        self.processed.add(key)
        if p.status is not None:
            for s in p.status.statuses:
                self._mark_known(s.locked_block.digest)
        clash = self._record_proposal(p, now, out)
        if p.view < self.view:
            if p.block.parent in self.known:
                self.known.add(p.block.digest)
            return
        if clash is not None and self.view not in self.blamed_views:
            self._blame(now, out, evidence=(clash, p))
        if p.block.parent not in self.known:
            self.parked.setdefault(p.block.parent, []).append(p)
            return
        self._accept(p, now, out)

    def _mark_known(self, digest: bytes):
        for b in self.store.ancestors(digest):
            if b.digest in self.known:
                break
            self.known.add(b.digest)

    def _accept(self, p: Proposal, now: int, out: list):
        """Parent is known: record lock time, decide on the vote, release children."""
        self.known.add(p.block.digest)
        v = self.view
        if p.view == v and v not in self.blamed_views:
            if p.prev_cert.view == v and p.block.height >= 2:
                lk = (p.block.height - 1, v)
                if lk not in self.t_lock:
                    self.t_lock[lk] = now
                    self.lock_block[lk] = p.prev_cert.block
                    out.append(Note("TLOCK", {"height": lk[0], "view": v,
                                              "block": p.prev_cert.block.hex(), "time": now}))
            if self._should_vote(p):
                self._vote(p, now, out)
        for child in self.parked.pop(p.block.digest, []):
            if child.view == self.view:
                self._accept(child, now, out)
            else:
                self.known.add(child.block.digest)

    def _should_vote(self, p: Proposal) -> bool:
        if self.view in self.equivocating_views:
            return False
        if p.block.height in self.voted_heights_in_view:
            return False
        if self.last_proposed_in_view is None:
            if p.view == 0:
                return p.block.parent == GENESIS.digest
            if p.status is None:
                return False
            return any(
                extends(p.block.parent, s.cert.block, self.store) for s in p.status.highest()
            )
        return p.block.parent == self.last_proposed_in_view

    def _vote(self, p: Proposal, now: int, out: list):
        vote = self.signer.vote(p.block.digest, p.view)
        self.voted_heights_in_view.add(p.block.height)
        self.last_proposed_in_view = p.block.digest
        self.last_vote_time = now
        out.append(Send(VoteMsg(vote, p)))
        self._arm(now, out)

    # ------------------------------------------------------------------ votes

    def _on_vote(self, vote: Vote, now: int, out: list):
        key = (vote.block, vote.view)
        bucket = self.votes.get(key)
        if bucket is not None and vote.voter in bucket:
            return
        if not self.keyring.verify_vote(vote):
            out.append(Note("DROP", {"reason": "bad vote auth", "voter": vote.voter}))
            return
        if bucket is None:
            bucket = self.votes[key] = {}
        bucket[vote.voter] = vote
        self._vote_snap.pop(key, None)
        if len(bucket) == self.cfg.quorum and key not in self.certs and vote.block in self.store:
            cert = make_certificate(self.store.get(vote.block), vote.view, bucket.values())
            if self._learn_cert(cert, out):
                self._maybe_continue(cert, now, out)

    # ----------------------------------------------------------------- blames

    def check_timeout(self, now: int, out: Optional[list] = None) -> Optional[BlameMsg]:
        if out is None:
            out = []
        if self.view in self.blamed_views or self.quiescent():
            return None
        start = max(self.view_entry_time, self.last_vote_time)
        if now - start > self.cfg.timeout(self.view):
            return self._blame(now, out)
        return None

    def _blame(self, now: int, out: list, evidence=None) -> BlameMsg:
        blame = BlameMsg.make(self.signer, self.view, evidence)
        self.blamed_views.add(self.view)
        out.append(Send(blame))
        return blame

    def _verify_evidence(self, blame: BlameMsg) -> bool:
        a, b = blame.evidence
        if a.view != blame.view or b.view != blame.view:
            return False
        if not (self._valid_proposal(a) and self._valid_proposal(b)):
            return False
        return equivocates(a.block.digest, b.block.digest, self.store)

    def _on_blame(self, blame: BlameMsg, now: int, out: list):
        if blame.view < self.view:
            return
        if not blame.verify_auth(self.keyring):
            return
        if blame.evidence and self._verify_evidence(blame):
            for p in blame.evidence:
                clash = self._record_proposal(p, now, out)
                if clash is not None and blame.view == self.view and self.view not in self.blamed_views:
                    self._blame(now, out, evidence=(clash, p))
        bucket = self.blames.setdefault(blame.view, {})
        if blame.blamer in bucket:
            return
        bucket[blame.blamer] = blame
        if len(bucket) >= self.cfg.quorum:
            blames = tuple(
                BlameMsg(b.view, b.blamer, b.auth) for _, b in sorted(bucket.items())
            )
            self._view_change(BlameCertificate(blame.view, blames), now, out)

    def _on_blame_cert(self, bc: BlameCertificate, now: int, out: list):
        if bc.view < self.view:
            return
        if not bc.verify(self.cfg, self.keyring):
            out.append(Note("DROP", {"reason": "bad blame certificate", "view": bc.view}))
            return
        self._view_change(bc, now, out)

    def _view_change(self, bc: BlameCertificate, now: int, out: list):
        v = bc.view
        for w in range(self.view, v + 1):
            if w not in self.t_viewchange:
                self.t_viewchange[w] = now
                out.append(Note("TVC", {"view": w, "time": now}))
        if v not in self.blame_cert_sent:
            self.blame_cert_sent.add(v)
            out.append(Send(bc))
        self._enter_view(v + 1, now, out)

    def _enter_view(self, view: int, now: int, out: list):
        self.view = view
        self.view_entry_time = now
        self.last_proposed_in_view = None
        self.voted_heights_in_view = set()
        self.status_set = None
        self.my_proposal = None
        out.append(Note("VIEW", {"view": view}))
        if view in self.equivocating_views:
            self._blame(now, out)
        locked = self.store.get(self.highest_cert.block)
        status = StatusMsg.make(self.signer, view, locked, self.highest_cert)
        out.append(Send(status, (self.cfg.leader(view),)))
        self._arm(now, out)
        pending, self.future = self.future, []
        for msg in pending:
            if getattr(msg, "view", view) > view:
                self.future.append(msg)
            elif msg.view == view:
                if isinstance(msg, Proposal):
                    self._on_proposal(msg, now, out)
                elif isinstance(msg, StatusMsg):
                    self._on_status(msg, now, out)

    # --------------------------------------------------------------- statuses

    def _on_status(self, st: StatusMsg, now: int, out: list):
        if st.view < self.view or self.cfg.leader(st.view) != self.id:
            return
        if st.view > self.view:
            self.future.append(st)
            return
        if self.status_set is not None or self.view in self.proposed_first:
            return
        if not st.verify(self.cfg, self.keyring):
            out.append(Note("DROP", {"reason": "bad status", "from": st.sender}))
            return
        bucket = self.statuses.setdefault(st.view, {})
        if st.sender in bucket:
            return
        bucket[st.sender] = st
        self._mark_known(st.locked_block.digest)
        if len(bucket) == self.cfg.quorum:
            self.status_set = StatusSet(st.view, tuple(s for _, s in sorted(bucket.items())))
            self.proposed_first.add(st.view)
            out.extend(self.leader_propose(now))

    # ---------------------------------------------------------------- reports

    def report(self, now: int) -> ReplicaReport:
        return self.report_snapshot(now)

    def report_snapshot(self, now: int) -> ReplicaReport:
        snap = self._vote_snap
        for key, bucket in self.votes.items():
            if key not in snap:
                snap[key] = tuple(v for _, v in sorted(bucket.items()))
        locks = tuple(
            LockEntry(h, v, self.lock_block[(h, v)], t) for (h, v), t in self.t_lock.items()
        )
        certs = tuple(c for c in self.certs.values() if not c.is_genesis())
        return ReplicaReport(
            self.id, now, self.view, dict(snap), certs, locks,
            dict(self.t_equiv), dict(self.t_viewchange),
        )
