from fractions import Fraction as F

import pytest
from hypothesis import given, settings, strategies as st

from flexbft.client import (
    CR1,
    CR2,
    NO_PROGRESS,
    SAFETY_VIOLATION,
    Client,
    ClientState,
    CommitDecision,
    NoPartialSyncRule,
    evaluate_cr1,
    evaluate_cr2,
    export_chain,
    integrate_commits,
    parse_chain,
    partial_sync,
    recommend_adjustment,
    sync,
)
from flexbft.core import BlockStore, Keyring, ProtocolConfig, quorum_count
from flexbft.replica import LockEntry, ReplicaReport

from conftest import certify, chain


def vote_report(replica, keyring, entries, time=100):
    """entries: iterable of (block, view, voters)."""
    grouped = {}
    for block, view, voters in entries:
        grouped.setdefault((block.digest, view), set()).update(voters)
    votes = {
        (d, view): tuple(keyring.signer(r).vote(d, view) for r in sorted(who))
        for (d, view), who in grouped.items()
    }
    return ReplicaReport(replica, time, 0, votes, (), (), {}, {})


def lock_report(replica, keyring, block, view, lock_time, now, quorum_voters, t_equiv=None, t_vc=None):
    cert = certify(block, view, quorum_voters, keyring)
    return ReplicaReport(
        replica, now, view, {}, (cert,),
        (LockEntry(block.height, view, block.digest, lock_time),),
        dict(t_equiv or {}), dict(t_vc or {}),
    )


@pytest.fixture
def n30():
    cfg = ProtocolConfig(30, F(2, 3))
    keyring = Keyring(30, 0)
    store = BlockStore()
    blocks = chain(store, 3)
    return cfg, keyring, store, blocks


def test_cr1_direct_commit_at_replica_quorum(n30):
    cfg, keyring, store, (b1, b2, b3) = n30
    assert cfg.quorum == 21
    rep = vote_report(0, keyring, [(b1, 0, range(21)), (b2, 0, range(21))])
    decs = evaluate_cr1([rep], F(2, 3), cfg, store, keyring)
    assert [(d.height, d.direct, d.rule) for d in decs] == [(1, True, CR1)]


def test_cr1_higher_qc_needs_more_votes(n30):
    cfg, keyring, store, (b1, b2, b3) = n30
    assert quorum_count(30, F(4, 5)) == 25
    rep = vote_report(0, keyring, [(b1, 0, range(24)), (b2, 0, range(24))])
    assert evaluate_cr1([rep], F(4, 5), cfg, store, keyring) == []
    rep = vote_report(0, keyring, [(b1, 0, range(25)), (b2, 0, range(25))])
    assert [d.height for d in evaluate_cr1([rep], F(4, 5), cfg, store, keyring)] == [1]


def test_cr1_votes_union_across_reports(n30):
    cfg, keyring, store, (b1, b2, b3) = n30
    r0 = vote_report(0, keyring, [(b1, 0, range(0, 15)), (b2, 0, range(0, 15))])
    r1 = vote_report(1, keyring, [(b1, 0, range(10, 30)), (b2, 0, range(10, 30))])
    # 15 and 20 on their own, 30 together
    assert evaluate_cr1([r0], F(4, 5), cfg, store, keyring) == []
    assert evaluate_cr1([r1], F(4, 5), cfg, store, keyring) == []
    assert [d.height for d in evaluate_cr1([r0, r1], F(4, 5), cfg, store, keyring)] == [1]


def test_cr1_split_views_do_not_commit(n30):
    cfg, keyring, store, (b1, b2, b3) = n30
    rep = vote_report(0, keyring, [(b1, 0, range(30)), (b2, 1, range(30))])
    assert evaluate_cr1([rep], F(2, 3), cfg, store, keyring) == []


def test_cr1_indirect_commits_ancestors(n30):
    cfg, keyring, store, (b1, b2, b3) = n30
    rep = vote_report(0, keyring, [(b2, 3, range(21)), (b3, 3, range(21))])
    decs = evaluate_cr1([rep], F(2, 3), cfg, store, keyring)
    assert [(d.height, d.direct) for d in decs] == [(1, False), (2, True)]


def test_cr1_ignores_forged_votes(n30):
    cfg, keyring, store, (b1, b2, b3) = n30
    other = Keyring(30, 99)
    rep = vote_report(0, other, [(b1, 0, range(30)), (b2, 0, range(30))])
    assert evaluate_cr1([rep], F(2, 3), cfg, store, keyring) == []


@pytest.fixture
def n4():
    cfg = ProtocolConfig(4, F(3, 5))
    keyring = Keyring(4, 0)
    store = BlockStore()
    blocks = chain(store, 3)
    return cfg, keyring, store, blocks


def test_cr2_needs_undisturbed_window(n4):
    cfg, keyring, store, (b1, b2, b3) = n4
    assert cfg.quorum == 3
    q = [0, 1, 2]
    reps = [lock_report(r, keyring, b1, 0, 5, 25, q) for r in range(3)]
    decs = evaluate_cr2(reps, 10, cfg, store, keyring)
    assert [(d.height, d.rule, d.direct) for d in decs] == [(1, CR2, True)]
    # window 20 < 2*delta when delta is 11
    assert evaluate_cr2(reps, 11, cfg, store, keyring) == []


@pytest.mark.parametrize("now,t_equiv,ok", [(25, None, True), (25, 18, False), (19, None, False), (20, None, True)])
def test_cr2_window_formula(n4, now, t_equiv, ok):
    cfg, keyring, store, (b1, b2, b3) = n4
    eq = {} if t_equiv is None else {(1, 0): t_equiv}
    reps = [lock_report(r, keyring, b1, 0, 10, now, [0, 1, 2], t_equiv=eq) for r in range(3)]
    assert bool(evaluate_cr2(reps, 5, cfg, store, keyring)) == ok


def test_cr2_equivocation_or_view_change_cuts_window(n4):
    cfg, keyring, store, (b1, b2, b3) = n4
    q = [0, 1, 2]
    reps = [lock_report(r, keyring, b1, 0, 5, 40, q) for r in range(2)]
    reps.append(lock_report(2, keyring, b1, 0, 5, 40, q, t_equiv={(1, 0): 20}))
    assert evaluate_cr2(reps, 10, cfg, store, keyring) == []
    reps[2] = lock_report(2, keyring, b1, 0, 5, 40, q, t_vc={0: 24})
    assert evaluate_cr2(reps, 10, cfg, store, keyring) == []
    reps[2] = lock_report(2, keyring, b1, 0, 5, 40, q, t_vc={0: 25})
    assert [d.height for d in evaluate_cr2(reps, 10, cfg, store, keyring)] == [1]


def test_cr2_mixed_heights_commit_common_prefix(n4):
    cfg, keyring, store, (b1, b2, b3) = n4
    q = [0, 1, 2]
    reps = [
        lock_report(0, keyring, b1, 0, 0, 50, q),
        lock_report(1, keyring, b2, 0, 0, 50, q),
        lock_report(2, keyring, b2, 0, 0, 50, q),
    ]
    decs = evaluate_cr2(reps, 10, cfg, store, keyring)
    assert [(d.height, d.direct) for d in decs] == [(1, True)]
    ev = {e[0]: e[1] for e in decs[0].evidence}
    assert ev == {0: 1, 1: 2, 2: 2}


def test_cr2_rejects_bad_certificate(n4):
    cfg, keyring, store, (b1, b2, b3) = n4
    reps = [lock_report(r, keyring, b1, 0, 0, 50, [0, 1]) for r in range(3)]
    assert evaluate_cr2(reps, 10, cfg, store, keyring) == []


def dec(block, rule=CR1):
    return CommitDecision(block.digest, block.height, rule, True, 0)


def test_integrate_commits_cases():
    store = BlockStore()
    a1, a2 = chain(store, 2, tag=b"a")
    b1, b2 = chain(store, 2, tag=b"b")
    state = ClientState(partial_sync(F(2, 3)))
    assert integrate_commits(state, [dec(a1)], store) == [dec(a1)]
    assert integrate_commits(state, [dec(a1)], store) == []
    assert integrate_commits(state, [dec(a2)], store) == [dec(a2)]
    assert not state.conflict_flag
    # same height, other block
    assert integrate_commits(state, [dec(b1)], store) == [dec(b1)]
    assert state.conflict_flag and state.height() == 2
    # repeated conflict is reported once
    assert integrate_commits(state, [dec(b1)], store) == []
    assert [d.block for d in state.chain()] == [a1.digest, a2.digest]


def test_integrate_commits_detects_cross_height_conflict():
    store = BlockStore()
    (a1,) = chain(store, 1, tag=b"a")
    b1, b2 = chain(store, 2, tag=b"b")
    state = ClientState(partial_sync(F(2, 3)))
    integrate_commits(state, [dec(a1)], store)
    integrate_commits(state, [dec(b2)], store)
    assert state.conflict_flag
    assert 2 not in state.committed


def test_export_chain_round_trip():
    store = BlockStore()
    a1, a2 = chain(store, 2)
    state = ClientState(sync(5))
    integrate_commits(state, [dec(a1, CR2), dec(a2, CR2)], store)
    rows = parse_chain(export_chain(state))
    assert [r["height"] for r in rows] == [1, 2]
    assert rows[0]["digest"] == a1.digest.hex() and rows[0]["rule"] == CR2


def test_recommend_adjustment():
    cfg = ProtocolConfig(30, F(2, 3))
    up = recommend_adjustment(ClientState(partial_sync(F(2, 3))), SAFETY_VIOLATION, cfg)
    assert up.q_c == F(7, 10) and quorum_count(30, up.q_c) == 22
    assert recommend_adjustment(ClientState(sync(5)), SAFETY_VIOLATION, cfg).delta == 10
    assert recommend_adjustment(ClientState(sync(5)), NO_PROGRESS, cfg).delta == 5
    # already at the floor
    assert recommend_adjustment(ClientState(partial_sync(F(2, 3))), NO_PROGRESS, cfg).q_c == F(2, 3)
    down = recommend_adjustment(ClientState(partial_sync(F(4, 5))), NO_PROGRESS, cfg)
    assert down.q_c == F(23, 30) and quorum_count(30, down.q_c) == 24
    down = recommend_adjustment(ClientState(partial_sync(F(7, 10))), NO_PROGRESS, cfg)
    assert down.q_c == F(2, 3)
    with pytest.raises(NoPartialSyncRule):
        recommend_adjustment(ClientState(partial_sync(1)), SAFETY_VIOLATION, cfg)


def test_assumption_validation():
    with pytest.raises(ValueError):
        partial_sync(0)
    with pytest.raises(ValueError):
        sync(0)
    cfg = ProtocolConfig(4, F(2, 3))
    with pytest.raises(ValueError):
        Client("c", partial_sync(F(3, 5)), cfg, Keyring(4), BlockStore())


# ---------------------------------------------------------- properties

N = 7
CFG7 = ProtocolConfig(N, F(4, 7))
KEYS7 = Keyring(N, 0)
STORE7 = BlockStore()
CHAIN7 = chain(STORE7, 4)
FORK7 = chain(STORE7, 3, parent=CHAIN7[0], tag=b"f")
BLOCKS7 = CHAIN7 + FORK7

vote_sets = st.lists(
    st.tuples(st.integers(0, len(BLOCKS7) - 1), st.integers(0, 2), st.sets(st.integers(0, N - 1))),
    max_size=10,
)


def cr1_set(reports, q_c):
    return {d.block for d in evaluate_cr1(reports, q_c, CFG7, STORE7, KEYS7)}


@settings(max_examples=150, deadline=None)
@given(vote_sets, st.sampled_from([F(4, 7), F(5, 7), F(6, 7), F(1)]), st.sampled_from([F(5, 7), F(6, 7), F(1)]))
def test_cr1_monotone_in_qc(entries, lo, hi):
    if hi < lo:
        lo, hi = hi, lo
    rep = vote_report(0, KEYS7, [(BLOCKS7[i], v, s) for i, v, s in entries])
    assert cr1_set([rep], hi) <= cr1_set([rep], lo)


@settings(max_examples=150, deadline=None)
@given(vote_sets, st.lists(st.integers(0, 2), min_size=10, max_size=10))
def test_cr1_insensitive_to_report_split(entries, owner):
    whole = vote_report(0, KEYS7, [(BLOCKS7[i], v, s) for i, v, s in entries])
    parts = [
        vote_report(k, KEYS7, [(BLOCKS7[i], v, s) for j, (i, v, s) in enumerate(entries) if owner[j] == k])
        for k in range(3)
    ]
    assert cr1_set([whole], F(4, 7)) == cr1_set(parts, F(4, 7)) == cr1_set(parts[::-1], F(4, 7))


locks = st.lists(
    st.tuples(st.integers(0, N - 1), st.integers(0, len(BLOCKS7) - 1), st.integers(0, 40), st.one_of(st.none(), st.integers(0, 80))),
    max_size=8,
)


@settings(max_examples=150, deadline=None)
@given(locks, st.integers(1, 20), st.integers(1, 20))
def test_cr2_monotone_in_delta(entries, d1, d2):
    lo, hi = min(d1, d2), max(d1, d2)
    reps = []
    for r, i, t, eq in entries:
        b = BLOCKS7[i]
        reps.append(lock_report(r, KEYS7, b, 0, t, 80, range(CFG7.quorum),
                                t_equiv={} if eq is None else {(b.height, 0): eq}))
    big = {d.block for d in evaluate_cr2(reps, hi, CFG7, STORE7, KEYS7)}
    small = {d.block for d in evaluate_cr2(reps, lo, CFG7, STORE7, KEYS7)}
    assert big <= small
