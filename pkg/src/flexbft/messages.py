"""Replica-to-replica messages and their canonical wire form.

The wire form is a JSON-compatible dict with bytes as hex and every set
emitted in sorted order, so encodings do not depend on hash seeds.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

from .core import Block, Certificate, Keyring, ProtocolConfig, Signer, Vote, verify_certificate


def propose_message(block_digest: bytes, view: int) -> bytes:
    return b"propose" + block_digest + struct.pack("<Q", view)


def blame_message(view: int) -> bytes:
    return b"blame" + struct.pack("<Q", view)


def status_message(view: int, cert: Certificate) -> bytes:
    return b"status" + struct.pack("<Q", view) + cert.block + struct.pack("<Q", cert.view)


def block_wire(block: Block) -> dict:
    return {"h": block.height, "p": block.payload.hex(), "parent": block.parent.hex()}


def vote_wire(vote: Vote) -> dict:
    return {"b": vote.block.hex(), "v": vote.view, "r": vote.voter, "a": vote.auth.hex()}


def cert_wire(cert: Certificate) -> dict:
    votes = sorted(cert.votes, key=lambda v: v.voter)
    return {
        "b": cert.block.hex(),
        "h": cert.height,
        "v": cert.view,
        "votes": [vote_wire(v) for v in votes],
    }


def block_from_wire(d: dict) -> Block:
    return Block(d["h"], bytes.fromhex(d["p"]), bytes.fromhex(d["parent"]))


def vote_from_wire(d: dict) -> Vote:
    return Vote(bytes.fromhex(d["b"]), d["v"], d["r"], bytes.fromhex(d["a"]))


def cert_from_wire(d: dict) -> Certificate:
    return Certificate(
        bytes.fromhex(d["b"]), d["h"], d["v"], frozenset(vote_from_wire(v) for v in d["votes"])
    )


class _Wire:
    """Mixin: cached canonical encoding and message digest."""

    @cached_property
    def wire(self) -> dict:
        return self._to_wire()

    @cached_property
    def encoded(self) -> bytes:
        return json.dumps(self.wire, sort_keys=True, separators=(",", ":")).encode()

    @cached_property
    def mdigest(self) -> bytes:
        return hashlib.sha256(self.encoded).digest()


@dataclass(frozen=True, eq=False)
class StatusMsg(_Wire):
    view: int  # the view being entered
    locked_block: Block
    cert: Certificate
    sender: int
    auth: bytes

    kind = "status"

    @classmethod
    def make(cls, signer: Signer, view: int, block: Block, cert: Certificate) -> "StatusMsg":
        return cls(view, block, cert, signer.replica, signer.sign(status_message(view, cert)))

    def _to_wire(self):
        return {
            "t": "status",
            "view": self.view,
            "block": block_wire(self.locked_block),
            "cert": cert_wire(self.cert),
            "from": self.sender,
            "a": self.auth.hex(),
        }

    def verify(self, cfg: ProtocolConfig, keyring: Keyring) -> bool:
        if self.cert.block != self.locked_block.digest or self.cert.height != self.locked_block.height:
            return False
        if not keyring.verify(self.sender, status_message(self.view, self.cert), self.auth):
            return False
        return verify_certificate(self.cert, cfg, keyring)

    def certificates(self):
        return (self.cert,)


@dataclass(frozen=True, eq=False)
class StatusSet(_Wire):
    view: int
    statuses: tuple  # StatusMsg, sorted by sender

    def _to_wire(self):
        return {"view": self.view, "statuses": [s.wire for s in self.statuses]}

    def verify(self, cfg: ProtocolConfig, keyring: Keyring) -> bool:
        senders = [s.sender for s in self.statuses]
        if len(set(senders)) != len(senders) or len(senders) < cfg.quorum:
            return False
        return all(s.view == self.view and s.verify(cfg, keyring) for s in self.statuses)

    def highest(self) -> list:
        """Max-ranked certificates, lowest block digest first."""
        best = max(s.cert.rank for s in self.statuses)
        found = {}
        for s in self.statuses:
            if s.cert.rank == best:
                found.setdefault(s.cert.block, s)
        return [found[d] for d in sorted(found)]


@dataclass(frozen=True, eq=False)
class Proposal(_Wire):
    block: Block
    view: int
    prev_cert: Certificate
    status: Optional[StatusSet]
    proposer: int
    auth: bytes

    kind = "propose"

    @classmethod
    def make(cls, signer, block, view, prev_cert, status=None) -> "Proposal":
        return cls(block, view, prev_cert, status, signer.replica,
                   signer.sign(propose_message(block.digest, view)))

    def _to_wire(self):
        return {
            "t": "propose",
            "block": block_wire(self.block),
            "view": self.view,
            "prev": cert_wire(self.prev_cert),
            "status": self.status.wire if self.status is not None else None,
            "from": self.proposer,
            "a": self.auth.hex(),
        }

    def verify_auth(self, keyring: Keyring) -> bool:
        return keyring.verify(self.proposer, propose_message(self.block.digest, self.view), self.auth)

    def certificates(self):
        out = [self.prev_cert]
        if self.status is not None:
            out.extend(s.cert for s in self.status.statuses)
        return tuple(out)

    def blocks(self):
        out = [self.block]
        if self.status is not None:
            out.extend(s.locked_block for s in self.status.statuses)
        return out


@dataclass(frozen=True, eq=False)
class VoteMsg(_Wire):
    """A vote travelling together with the proposal it endorses."""

    vote: Vote
    proposal: Proposal

    kind = "vote"

    def _to_wire(self):
        return {"t": "vote", "vote": vote_wire(self.vote), "proposal": self.proposal.wire}

    def certificates(self):
        return self.proposal.certificates()


@dataclass(frozen=True, eq=False)
class BlameMsg(_Wire):
    view: int
    blamer: int
    auth: bytes
    evidence: Optional[tuple] = None  # two conflicting proposals from the leader

    kind = "blame"

    @classmethod
    def make(cls, signer: Signer, view: int, evidence=None) -> "BlameMsg":
        return cls(view, signer.replica, signer.sign(blame_message(view)), evidence)

    def _to_wire(self):
        return {
            "t": "blame",
            "view": self.view,
            "from": self.blamer,
            "a": self.auth.hex(),
            "evidence": [p.wire for p in self.evidence] if self.evidence else None,
        }

    def verify_auth(self, keyring: Keyring) -> bool:
        return keyring.verify(self.blamer, blame_message(self.view), self.auth)

    def certificates(self):
        if not self.evidence:
            return ()
        return tuple(c for p in self.evidence for c in p.certificates())


@dataclass(frozen=True, eq=False)
class BlameCertificate(_Wire):
    view: int
    blames: tuple  # BlameMsg, sorted by blamer, evidence stripped

    kind = "blamecert"

    def _to_wire(self):
        return {"t": "blamecert", "view": self.view, "blames": [b.wire for b in self.blames]}

    def verify(self, cfg: ProtocolConfig, keyring: Keyring) -> bool:
        blamers = [b.blamer for b in self.blames]
        if len(set(blamers)) != len(blamers) or len(blamers) < cfg.quorum:
            return False
        return all(b.view == self.view and b.verify_auth(keyring) for b in self.blames)

    def certificates(self):
        return ()


def status_from_wire(d: dict) -> StatusMsg:
    return StatusMsg(d["view"], block_from_wire(d["block"]), cert_from_wire(d["cert"]),
                     d["from"], bytes.fromhex(d["a"]))


def proposal_from_wire(d: dict) -> Proposal:
    status = None
    if d["status"] is not None:
        status = StatusSet(d["status"]["view"],
                           tuple(status_from_wire(s) for s in d["status"]["statuses"]))
    return Proposal(block_from_wire(d["block"]), d["view"], cert_from_wire(d["prev"]), status,
                    d["from"], bytes.fromhex(d["a"]))


def blame_from_wire(d: dict) -> BlameMsg:
    evidence = None
    if d.get("evidence"):
        evidence = tuple(proposal_from_wire(p) for p in d["evidence"])
    return BlameMsg(d["view"], d["from"], bytes.fromhex(d["a"]), evidence)


def message_from_wire(d: dict):
    t = d["t"]
    if t == "propose":
        return proposal_from_wire(d)
    if t == "vote":
        return VoteMsg(vote_from_wire(d["vote"]), proposal_from_wire(d["proposal"]))
    if t == "blame":
        return blame_from_wire(d)
    if t == "blamecert":
        return BlameCertificate(d["view"], tuple(blame_from_wire(b) for b in d["blames"]))
    if t == "status":
        return status_from_wire(d)
    raise ValueError(f"unknown message type {t!r}")


def author(msg) -> int:
    """Identity whose authenticator heads the message (-1 for unsigned bundles)."""
    if isinstance(msg, Proposal):
        return msg.proposer
    if isinstance(msg, VoteMsg):
        return msg.vote.voter
    if isinstance(msg, BlameMsg):
        return msg.blamer
    if isinstance(msg, StatusMsg):
        return msg.sender
    return -1
