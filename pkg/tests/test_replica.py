import re
from collections import deque
from fractions import Fraction as F
from pathlib import Path

import pytest

from flexbft.core import GENESIS, GENESIS_CERT, Block, BlockStore, Keyring, ProtocolConfig
from flexbft.messages import BlameCertificate, BlameMsg, Proposal, StatusMsg, VoteMsg
from flexbft.replica import MissingStatus, NotLeader, Replica, Send, Timer

from conftest import certify


def make(n=4, q_r=F(2, 3), cap=None):
    cfg = ProtocolConfig(n, q_r)
    keyring = Keyring(n, 0)
    store = BlockStore()
    return cfg, keyring, store, [Replica(i, cfg, keyring, store, height_cap=cap) for i in range(n)]


def sends(out):
    return [o for o in out if isinstance(o, Send)]


def pump(replicas, initial, now=0, drop=lambda msg, src, dst: False):
    """Deliver every send to its recipients in FIFO order at a fixed time."""
    q = deque()

    def enqueue(src, out):
        for o in sends(out):
            targets = o.to if o.to is not None else range(len(replicas))
            for dst in targets:
                q.append((o.msg, src, dst))

    for src, out in initial:
        enqueue(src, out)
    delivered = 0
    while q:
        msg, src, dst = q.popleft()
        if drop(msg, src, dst):
            continue
        delivered += 1
        enqueue(dst, replicas[dst].on_message(msg, src, now))
    return delivered


def test_leader_propose_view0():
    cfg, keyring, store, reps = make()
    (s,) = reps[0].leader_propose(0)
    p = s.msg
    assert isinstance(p, Proposal) and s.to is None
    assert p.block.height == 1 and p.block.parent == GENESIS.digest
    assert p.prev_cert == GENESIS_CERT and p.status is None
    with pytest.raises(NotLeader):
        reps[1].leader_propose(0)


def test_leader_without_status_set():
    cfg, keyring, store, reps = make()
    reps[1].view = 1
    with pytest.raises(MissingStatus):
        reps[1].leader_propose(0)


def test_follower_votes_on_valid_proposal():
    cfg, keyring, store, reps = make()
    (s,) = reps[0].leader_propose(0)
    out = reps[1].on_message(s.msg, 0, 3)
    (vote_send,) = sends(out)
    vm = vote_send.msg
    assert isinstance(vm, VoteMsg) and vm.vote.voter == 1 and vm.vote.block == s.msg.block.digest
    assert any(isinstance(o, Timer) for o in out)
    assert reps[1].last_vote_time == 3


def test_proposal_from_non_leader_dropped():
    cfg, keyring, store, reps = make()
    b = Block(1, b"x", GENESIS.digest)
    p = Proposal.make(keyring.signer(2), b, 0, GENESIS_CERT)
    assert sends(reps[1].on_message(p, 2, 0)) == []


def test_equivocation_blames_with_evidence():
    cfg, keyring, store, reps = make()
    leader = keyring.signer(0)
    a = Proposal.make(leader, Block(1, b"a", GENESIS.digest), 0, GENESIS_CERT)
    b = Proposal.make(leader, Block(1, b"b", GENESIS.digest), 0, GENESIS_CERT)
    assert isinstance(sends(reps[1].on_message(a, 0, 1))[0].msg, VoteMsg)
    out = sends(reps[1].on_message(b, 0, 2))
    (blame,) = [o.msg for o in out]
    assert isinstance(blame, BlameMsg) and blame.view == 0
    assert {p.block.digest for p in blame.evidence} == {a.block.digest, b.block.digest}
    assert reps[1].t_equiv == {(1, 0): 2}
    # no further votes in an equivocating view
    c = Proposal.make(leader, Block(1, b"c", GENESIS.digest), 0, GENESIS_CERT)
    assert not any(isinstance(o.msg, VoteMsg) for o in sends(reps[1].on_message(c, 0, 3)))


def test_blame_evidence_spreads_equivocation_time():
    cfg, keyring, store, reps = make()
    leader = keyring.signer(0)
    a = Proposal.make(leader, Block(1, b"a", GENESIS.digest), 0, GENESIS_CERT)
    b = Proposal.make(leader, Block(1, b"b", GENESIS.digest), 0, GENESIS_CERT)
    reps[1].on_message(a, 0, 1)
    (blame,) = [o.msg for o in sends(reps[1].on_message(b, 0, 2))]
    out = sends(reps[2].on_message(blame, 1, 5))
    assert reps[2].t_equiv == {(1, 0): 5}
    assert [type(o.msg) for o in out] == [BlameMsg]


def test_parked_child_released_by_parent():
    cfg, keyring, store, reps = make()
    leader = keyring.signer(0)
    b1 = Block(1, b"p", GENESIS.digest)
    b2 = Block(2, b"c", b1.digest)
    p1 = Proposal.make(leader, b1, 0, GENESIS_CERT)
    p2 = Proposal.make(leader, b2, 0, certify(b1, 0, [0, 1, 2], keyring))
    store.add(b1)  # block bodies are shared; the replica has not seen p1 yet
    r = reps[3]
    assert sends(r.on_message(p2, 0, 1)) == []
    assert b1.digest in r.parked
    out = sends(r.on_message(p1, 0, 2))
    voted = [o.msg.vote.block for o in out if isinstance(o.msg, VoteMsg)]
    assert voted == [b1.digest, b2.digest]
    assert r.t_lock == {(1, 0): 2}


def test_vote_idempotent():
    cfg, keyring, store, reps = make()
    (s,) = reps[0].leader_propose(0)
    (vs,) = sends(reps[1].on_message(s.msg, 0, 0))
    r = reps[2]
    r.on_message(vs.msg, 1, 1)
    before = {k: dict(v) for k, v in r.votes.items()}
    assert r.on_message(vs.msg, 1, 2) == []
    assert {k: dict(v) for k, v in r.votes.items()} == before


def test_lockstep_run_builds_chain_and_locks():
    cfg, keyring, store, reps = make(cap=3)
    initial = [(i, r.start(0)) for i, r in enumerate(reps)]
    pump(reps, initial, now=7)
    for r in reps:
        assert r.highest_cert.height == 3 and r.highest_cert.view == 0
        assert set(r.t_lock) == {(1, 0), (2, 0)}
        assert r.quiescent()
    rep = reps[2].report(9)
    assert rep.time == 9 and rep.view == 0
    assert [(lk.height, lk.view) for lk in sorted(rep.locks, key=lambda e: e.height)] == [(1, 0), (2, 0)]
    assert all(c.height >= 1 for c in rep.certs)
    for votes in rep.votes.values():
        assert [v.voter for v in votes] == sorted(v.voter for v in votes)


def test_check_timeout_boundary():
    cfg, keyring, store, reps = make()
    r = reps[1]
    r.start(0)
    t = cfg.timeout(0)
    assert r.check_timeout(t) is None
    blame = r.check_timeout(t + 1)
    assert isinstance(blame, BlameMsg) and blame.view == 0
    assert r.check_timeout(t + 2) is None  # at most one blame per view


def test_blame_quorum_changes_view():
    cfg, keyring, store, reps = make()
    r = reps[3]
    r.start(0)
    out = []
    for i in range(3):
        out = r.on_message(BlameMsg.make(keyring.signer(i), 0), i, 50)
    assert r.view == 1 and r.t_viewchange == {0: 50}
    kinds = [(type(o.msg), o.to) for o in sends(out)]
    assert (BlameCertificate, None) in kinds
    assert (StatusMsg, (1,)) in kinds


def test_blame_certificate_moves_other_replica():
    cfg, keyring, store, reps = make()
    bc = BlameCertificate(0, tuple(BlameMsg.make(keyring.signer(i), 0) for i in range(3)))
    reps[2].on_message(bc, 0, 10)
    assert reps[2].view == 1
    short = BlameCertificate(0, tuple(BlameMsg.make(keyring.signer(i), 0) for i in range(2)))
    reps[1].on_message(short, 0, 10)
    assert reps[1].view == 0


def test_view_change_then_new_leader_proposes():
    cfg, keyring, store, reps = make(cap=2)
    bc = BlameCertificate(0, tuple(BlameMsg.make(keyring.signer(i), 0) for i in range(3)))
    initial = [(0, [Send(bc)])]
    pump(reps, initial, now=20)
    assert all(r.view == 1 for r in reps)
    assert all(r.highest_cert.height == 2 and r.highest_cert.view == 1 for r in reps)


def test_replica_has_no_delay_bound():
    src = (Path(__file__).resolve().parent.parent / "src" / "flexbft" / "replica.py").read_text()
    assert not re.search(r"delta", src, re.IGNORECASE)
