"""Client-side commit rules evaluated over replica reports.

Clients never vote. They read reports, decide which blocks are committed
under their own assumption, keep a committed chain, and flag conflicts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional

from .core import (
    BlockStore,
    Keyring,
    ProtocolConfig,
    Rational,
    as_fraction,
    equivocates,
    fmt_fraction,
    quorum_count,
    verify_certificate,
)

PARTIAL_SYNC = "partial_sync"
SYNC = "sync"
CR1 = "CR1"
CR2 = "CR2"
INF = float("inf")

SAFETY_VIOLATION = "SAFETY_VIOLATION"
NO_PROGRESS = "NO_PROGRESS"


class NoPartialSyncRule(Exception):
    """Raised when q_c cannot grow any further; only a synchronous rule remains."""


@dataclass(frozen=True)
class ClientAssumption:
    mode: str
    q_c: Optional[Fraction] = None
    delta: Optional[int] = None

    def __post_init__(self):
        if self.mode == PARTIAL_SYNC:
            if self.q_c is None:
                raise ValueError("partial-synchrony clients need q_c")
            q_c = as_fraction(self.q_c)
            if q_c <= 0 or q_c > 1:
                raise ValueError("q_c must lie in (0, 1]")
            object.__setattr__(self, "q_c", q_c)
        elif self.mode == SYNC:
            if self.delta is None or self.delta <= 0:
                raise ValueError("synchronous clients need a positive delta")
        else:
            raise ValueError(f"unknown client mode {self.mode!r}")

    def check(self, cfg: ProtocolConfig):
        if self.mode == PARTIAL_SYNC and self.q_c < cfg.q_r:
            raise ValueError("q_c must be at least q_r")

    def describe(self) -> str:
        if self.mode == PARTIAL_SYNC:
            return f"CR1(q_c={fmt_fraction(self.q_c)})"
        return f"CR2(delta={self.delta})"


def partial_sync(q_c: Rational) -> ClientAssumption:
    return ClientAssumption(PARTIAL_SYNC, q_c=as_fraction(q_c))


def sync(delta: int) -> ClientAssumption:
    return ClientAssumption(SYNC, delta=delta)


@dataclass(frozen=True)
class CommitDecision:
    block: bytes
    height: int
    rule: str
    direct: bool
    view: int
    # CR1: (direct block, its child, view). CR2: tuple of (replica, height, view, window).
    evidence: tuple = field(default=(), compare=False)

    def export(self) -> dict:
        return {
            "height": self.height,
            "digest": self.block.hex(),
            "rule": self.rule,
            "direct": self.direct,
            "view": self.view,
        }

    def evidence_json(self):
        if self.rule == CR1:
            parent, child, view = self.evidence
            return {"parent": parent.hex(), "child": child.hex(), "view": view}
        return {"attesters": [list(e) for e in self.evidence]}


# ------------------------------------------------------------------- CR1


def merge_votes(reports: Iterable, keyring: Keyring, into: Optional[dict] = None) -> dict:
    """Union verified votes by voter identity: (block, view) -> {voter: Vote}."""
    merged = {} if into is None else into
    for rep in reports:
        for key, votes in rep.votes.items():
            bucket = merged.get(key)
            if bucket is None:
                bucket = merged[key] = {}
            if len(bucket) >= len(votes) and all(v.voter in bucket for v in votes):
                continue
            for vote in votes:
                if vote.voter in bucket:
                    continue
                if (vote.block, vote.view) != key or not keyring.verify_vote(vote):
                    continue
                bucket[vote.voter] = vote
    return merged


def cr1_from_votes(merged: dict, q_c: Rational, cfg: ProtocolConfig, store: BlockStore) -> list:
    need = max(quorum_count(cfg.n, q_c), cfg.quorum)
    strong = {}  # block -> sorted views with enough votes
    for (block, view), bucket in merged.items():
        if len(bucket) >= need and block in store:
            strong.setdefault(block, set()).add(view)
    decisions = {}
    for child in sorted(strong):
        cblock = store.get(child)
        parent = cblock.parent
        if parent not in strong:
            continue
        for view in sorted(strong[child] & strong[parent]):
            evidence = (parent, child, view)
            for i, anc in enumerate(store.ancestors(parent)):
                if anc.height == 0:
                    break
                dec = CommitDecision(anc.digest, anc.height, CR1, i == 0, view, evidence)
                old = decisions.get(anc.digest)
                if old is None or (dec.direct and not old.direct):
                    decisions[anc.digest] = dec
            break
    return sorted(decisions.values(), key=lambda d: (d.height, d.block))


def evaluate_cr1(reports, q_c: Rational, cfg: ProtocolConfig, store: BlockStore,
                 keyring: Keyring) -> list:
    return cr1_from_votes(merge_votes(reports, keyring), q_c, cfg, store)


# ------------------------------------------------------------------- CR2


def attestations(report, delta: int, cfg: ProtocolConfig, keyring: Keyring) -> list:
    """(height, view, block, window) entries for which this report shows an undisturbed 2*delta."""
    certs = {(c.block, c.view): c for c in report.certs}
    out = []
    for lk in report.locks:
        cert = certs.get((lk.block, lk.view))
        if cert is None or cert.height != lk.height:
            continue
        if not verify_certificate(cert, cfg, keyring):
            continue
        end = min(
            report.time,
            report.t_equiv.get((lk.height, lk.view), INF),
            report.t_viewchange.get(lk.view, INF),
        )
        window = end - lk.time
        if window >= 2 * delta:
            out.append((lk.height, lk.view, lk.block, window))
    return out


def evaluate_cr2(reports, delta: int, cfg: ProtocolConfig, store: BlockStore,
                 keyring: Keyring) -> list:
    support: dict = {}  # block -> {replica: (height, view, window)}
    direct: dict = {}
    for rep in sorted(reports, key=lambda r: r.replica):
        for height, view, block, window in attestations(rep, delta, cfg, keyring):
            if block not in store:
                continue
            direct.setdefault(block, set()).add(rep.replica)
            for anc in store.ancestors(block):
                if anc.height == 0:
                    break
                bucket = support.setdefault(anc.digest, {})
                old = bucket.get(rep.replica)
                # keep the attestation closest to the block so self-attestation is visible
                if old is None or (height, view) < old[:2]:
                    bucket[rep.replica] = (height, view, window)
    decisions = []
    for block, who in support.items():
        if len(who) < cfg.quorum:
            continue
        b = store.get(block)
        evidence = tuple((r,) + who[r] for r in sorted(who))
        view = min(e[2] for e in evidence)
        decisions.append(CommitDecision(block, b.height, CR2, block in direct, view, evidence))
    return sorted(decisions, key=lambda d: (d.height, d.block))


# ---------------------------------------------------------- client state


@dataclass
class ClientState:
    assumption: ClientAssumption
    committed: dict = field(default_factory=dict)  # height -> CommitDecision
    conflict_flag: bool = False
    conflicts: list = field(default_factory=list)

    def chain(self) -> list:
        return [self.committed[h] for h in sorted(self.committed)]

    def height(self) -> int:
        return max(self.committed, default=0)


def integrate_commits(state: ClientState, fresh: Iterable[CommitDecision],
                      store: Optional[BlockStore] = None) -> list:
    """Fold fresh decisions into the chain; returns decisions that were new."""
    added = []
    for dec in sorted(fresh, key=lambda d: (d.height, d.block)):
        have = state.committed.get(dec.height)
        if have is not None:
            if have.block == dec.block:
                continue
            if not any(c.block == dec.block for c in state.conflicts):
                state.conflicts.append(dec)
                added.append(dec)
            state.conflict_flag = True
            continue
        if store is not None:
            for other in state.committed.values():
                if equivocates(dec.block, other.block, store):
                    state.conflict_flag = True
                    if not any(c.block == dec.block for c in state.conflicts):
                        state.conflicts.append(dec)
                        added.append(dec)
                    break
            else:
                state.committed[dec.height] = dec
                added.append(dec)
        else:
            state.committed[dec.height] = dec
            added.append(dec)
    return added


def recommend_adjustment(state: ClientState, observed: str, cfg: ProtocolConfig) -> ClientAssumption:
    a = state.assumption
    if a.mode == PARTIAL_SYNC:
        count = quorum_count(cfg.n, a.q_c)
        if observed == SAFETY_VIOLATION:
            if count >= cfg.n:
                raise NoPartialSyncRule(
                    "q_c already requires every replica; switch to a synchronous commit rule"
                )
            # quorum_count(n, k/n) == k + 1, so k/n moves the threshold up by one replica
            return replace(a, q_c=Fraction(count, cfg.n))
        if observed == NO_PROGRESS:
            if a.q_c <= cfg.q_r:
                return a
            lowered = Fraction(count - 2, cfg.n)
            if lowered < cfg.q_r or quorum_count(cfg.n, lowered) <= cfg.quorum:
                return replace(a, q_c=cfg.q_r)
            return replace(a, q_c=lowered)
        raise ValueError(f"unknown observation {observed!r}")
    if observed == SAFETY_VIOLATION:
        return replace(a, delta=a.delta * 2)
    if observed == NO_PROGRESS:
        return a
    raise ValueError(f"unknown observation {observed!r}")


class Client:
    """Stateful observer: accumulates votes and integrates commits at each probe."""

    def __init__(self, name: str, assumption: ClientAssumption, cfg: ProtocolConfig,
                 keyring: Keyring, store: BlockStore):
        assumption.check(cfg)
        self.name = name
        self.cfg = cfg
        self.keyring = keyring
        self.store = store
        self.state = ClientState(assumption)
        self.merged: dict = {}
        self.first_seen: dict = {}  # block digest -> time first committed
        self.first_direct: dict = {}  # block digest -> time first committed directly

    @property
    def assumption(self) -> ClientAssumption:
        return self.state.assumption

    def evaluate(self, reports) -> list:
        a = self.assumption
        if a.mode == PARTIAL_SYNC:
            merge_votes(reports, self.keyring, self.merged)
            return cr1_from_votes(self.merged, a.q_c, self.cfg, self.store)
        return evaluate_cr2(reports, a.delta, self.cfg, self.store, self.keyring)

    def observe(self, reports, now: int) -> list:
        fresh = self.evaluate(reports)
        added = integrate_commits(self.state, fresh, self.store)
        for dec in added:
            self.first_seen.setdefault(dec.block, now)
        for dec in fresh:
            if dec.direct:
                self.first_direct.setdefault(dec.block, now)
        return added


def export_chain(state: ClientState) -> str:
    lines = [json.dumps(d.export(), sort_keys=False) for d in state.chain()]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_chain(text: str) -> list:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
