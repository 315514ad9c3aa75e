"""Fault configuration and scripted strategies for Byzantine and alive-but-corrupt replicas.

Every faulty replica is a FaultyNode wrapping a shadow honest Replica. The
strategy decides what the shadow sees, which of its outputs leave the node,
what extra messages the coalition injects, and what the node reports to
clients. Strategies only ever hold signing keys of faulty replicas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .client import ClientAssumption
from .core import Block, BlockStore, Keyring, ProtocolConfig, make_certificate, quorum_count
from .messages import Proposal, StatusMsg, VoteMsg
from .replica import LockEntry, Note, Replica, ReplicaReport, Send


class AttackRefused(Exception):
    """The fault budget cannot break the target's rule, so the coalition stays honest."""


class UnknownStrategy(ValueError):
    pass


@dataclass(frozen=True)
class FaultConfig:
    byzantine: frozenset = frozenset()
    abc: frozenset = frozenset()
    strategy: str = "silent"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "byzantine", frozenset(self.byzantine))
        object.__setattr__(self, "abc", frozenset(self.abc))
        if self.byzantine & self.abc:
            raise ValueError("byzantine and abc sets overlap: " + str(sorted(self.byzantine & self.abc)))

    @property
    def faulty(self) -> frozenset:
        return self.byzantine | self.abc

    def byz_fraction(self, n: int) -> Fraction:
        return Fraction(len(self.byzantine), n)

    def abc_fraction(self, n: int) -> Fraction:
        return Fraction(len(self.abc), n)

    def total_fraction(self, n: int) -> Fraction:
        return Fraction(len(self.faulty), n)


@dataclass(frozen=True)
class AttackTarget:
    victim_rule: ClientAssumption
    description: str = ""


@dataclass
class WorldView:
    """What a strategy is allowed to know and hold."""

    cfg: ProtocolConfig
    store: BlockStore
    keyring: Keyring
    faults: FaultConfig
    delay_model: object
    signers: dict  # faulty replica id -> Signer


class FaultyNode:
    def __init__(self, rid: int, shadow: Replica, strategy: "Strategy", kind: str):
        self.id = rid
        self.shadow = shadow
        self.strategy = strategy
        self.kind = kind  # "byzantine" or "abc"
        self.faulty = True

    def start(self, now):
        return self.strategy.start(self, now)

    def on_message(self, msg, sender, now):
        return self.strategy.deliver(self, msg, sender, now)

    def on_timer(self, tag, now):
        return self.strategy.timer(self, tag, now)

    def report(self, now):
        return self.strategy.report(self, now)


class Strategy:
    """Honest pass-through. Subclasses override the hooks they need."""

    name = "shim"

    def __init__(self, params: Optional[dict] = None):
        self.params = dict(params or {})
        self.world: Optional[WorldView] = None

    def attach(self, world: WorldView):
        self.world = world

    def start(self, node, now):
        return self.filter(node, node.shadow.start(now), now)

    def deliver(self, node, msg, sender, now):
        return self.filter(node, node.shadow.on_message(msg, sender, now), now)

    def timer(self, node, tag, now):
        return self.filter(node, node.shadow.on_timer(tag, now), now)

    def filter(self, node, outs, now):
        return outs

    def report(self, node, now):
        return node.shadow.report_snapshot(now)

    def link_delay(self, sender, recipient, msg, now) -> Optional[int]:
        return None

    def notes(self) -> list:
        return []


class Shim(Strategy):
    name = "shim"


class Silent(Strategy):
    """Sends nothing and reports nothing."""

    name = "silent"

    def start(self, node, now):
        return []

    def deliver(self, node, msg, sender, now):
        return []

    def timer(self, node, tag, now):
        return []

    def report(self, node, now):
        return None


def sibling(block: Block, tag: bytes = b"'") -> Block:
    return Block(block.height, block.payload + tag, block.parent)


class Equivocate(Strategy):
    """A faulty leader sends each proposal to a partition and a sibling to the rest."""

    name = "equivocate"

    def filter(self, node, outs, now):
        result = []
        for out in outs:
            msg = out.msg if isinstance(out, Send) else None
            if isinstance(msg, Proposal) and msg.proposer == node.id and out.to is None:
                result.extend(self._split(node, msg))
            else:
                result.append(out)
        return result

    def _split(self, node, prop: Proposal):
        w = self.world
        n = w.cfg.n
        part = self.params.get("partition")
        if part is None:
            honest = [i for i in range(n) if i not in w.faults.faulty]
            part = honest[: len(honest) // 2]
        side_a = sorted(set(part) | set(w.faults.faulty))
        side_b = [i for i in range(n) if i not in side_a]
        if not part or not side_b:
            return [Send(prop)]
        alt_block = sibling(prop.block)
        w.store.add(alt_block)
        alt = Proposal.make(w.signers[node.id], alt_block, prop.view, prop.prev_cert, prop.status)
        return [Send(prop, tuple(side_a)), Send(alt, tuple(side_b))]


class Mixed(Strategy):
    """Per-replica choice among silent, equivocate and the honest shim."""

    name = "mixed"

    def __init__(self, params=None):
        super().__init__(params)
        self.silent = set(self.params.get("silent", ()))
        self.equivocating = set(self.params.get("equivocate", ()))
        self._s = Silent(params)
        self._e = Equivocate(params)
        self._h = Shim(params)

    def attach(self, world):
        super().attach(world)
        for s in (self._s, self._e, self._h):
            s.attach(world)

    def _pick(self, node):
        if node.id in self.silent:
            return self._s
        if node.id in self.equivocating:
            return self._e
        return self._h

    def start(self, node, now):
        return self._pick(node).start(node, now)

    def deliver(self, node, msg, sender, now):
        return self._pick(node).deliver(node, msg, sender, now)

    def timer(self, node, tag, now):
        return self._pick(node).timer(node, tag, now)

    def report(self, node, now):
        return self._pick(node).report(node, now)


# ------------------------------------------------------------ split-brain attacks


class SplitBrain(Strategy):
    """Shared machinery for the two safety attacks.

    The leader of view 0 (faulty) proposes X1 to group A plus the coalition
    and a sibling Y1 to group B. Faulty shadows only ever see the X branch;
    the coalition signs Y-branch votes itself and sends them to B alone.
    Subclasses decide how the conflict becomes visible to the victim.
    """

    def __init__(self, params=None):
        super().__init__(params)
        self.refused: Optional[str] = None
        self.group_a: tuple = ()
        self.group_b: tuple = ()
        self.faulty: tuple = ()
        self.x_blocks: dict = {}  # height -> Proposal on branch X
        self.y_blocks: dict = {}  # height -> Proposal on branch Y
        self.y_votes: dict = {}  # digest -> {voter: Vote}
        self.y_certs: dict = {}  # height -> Certificate
        self.max_height = 2  # last X height the faulty leader proposes in view 0
        self.y_height = 2  # last Y height the coalition proposes in view 0
        self._notes: list = []

    # subclasses: precondition(world) raises AttackRefused
    def precondition(self):
        raise NotImplementedError

    def attach(self, world):
        super().attach(world)
        cfg = world.cfg
        self.faulty = tuple(sorted(world.faults.faulty))
        honest = [i for i in range(cfg.n) if i not in world.faults.faulty]
        a = self.params.get("group_a")
        if a is None:
            a = honest[: self.default_group_a_size()]
        self.group_a = tuple(sorted(a))
        self.group_b = tuple(i for i in honest if i not in self.group_a)
        try:
            if cfg.leader(0) not in world.faults.faulty:
                raise AttackRefused("the leader of view 0 is not faulty")
            self.precondition()
        except AttackRefused as exc:
            self.refused = str(exc)
        self._notes.append(Note("ATTACK", {
            "strategy": self.name,
            "launched": self.refused is None,
            "reason": self.refused or "",
            "group_a": list(self.group_a),
            "group_b": list(self.group_b),
        }))

    def notes(self):
        return self._notes

    def default_group_a_size(self) -> int:
        return 1

    @property
    def active(self) -> bool:
        return self.refused is None

    def side_x(self):
        return tuple(sorted(set(self.group_a) | set(self.faulty)))

    # ------------------------------------------------------------- hooks

    def start(self, node, now):
        outs = node.shadow.start(now)
        if not self.active:
            return outs
        return self.filter(node, outs, now)

    def deliver(self, node, msg, sender, now):
        if not self.active:
            return node.shadow.on_message(msg, sender, now)
        if self._is_y(msg):
            self._record_y(msg)
            return self._y_progress(node, now)
        if not self.pass_to_shadow(node, msg, sender, now):
            return []
        return self.filter(node, node.shadow.on_message(msg, sender, now), now)

    def timer(self, node, tag, now):
        outs = node.shadow.on_timer(tag, now)
        if not self.active:
            return outs
        return self.filter(node, outs, now)

    def pass_to_shadow(self, node, msg, sender, now) -> bool:
        return True

    def _is_y(self, msg) -> bool:
        if isinstance(msg, VoteMsg):
            return msg.proposal.view == 0 and msg.proposal.block.digest in self.y_digests()
        if isinstance(msg, Proposal):
            return msg.view == 0 and msg.block.digest in self.y_digests()
        return False

    def y_digests(self):
        return {p.block.digest for p in self.y_blocks.values()}

    def _record_y(self, msg):
        if isinstance(msg, VoteMsg):
            v = msg.vote
            bucket = self.y_votes.setdefault(v.block, {})
            bucket.setdefault(v.voter, v)

    def _y_progress(self, node, now) -> list:
        """Certify Y blocks from collected votes and extend the Y branch up to max_height."""
        w = self.world
        out = []
        for h in sorted(self.y_blocks):
            p = self.y_blocks[h]
            bucket = self.y_votes.get(p.block.digest, {})
            if h in self.y_certs or len(bucket) < w.cfg.quorum:
                continue
            votes = [bucket[k] for k in sorted(bucket)]
            self.y_certs[h] = make_certificate(p.block, 0, votes)
            if h + 1 <= self.y_height and h + 1 not in self.y_blocks:
                out.extend(self._propose_y(h + 1, p.block, self.y_certs[h]))
        return out

    def _propose_y(self, height, parent: Block, prev_cert) -> list:
        w = self.world
        x = self.x_blocks.get(height)
        payload = (x.block.payload if x is not None else b"y%d" % height) + b"'"
        block = Block(height, payload, parent.digest)
        w.store.add(block)
        leader = w.cfg.leader(0)
        prop = Proposal.make(w.signers[leader], block, 0, prev_cert)
        self.y_blocks[height] = prop
        out = [Send(prop, self.group_b, origin=leader)]
        for f in self.faulty:
            vote = w.signers[f].vote(block.digest, 0)
            self.y_votes.setdefault(block.digest, {})[f] = vote
            out.append(Send(VoteMsg(vote, prop), self.group_b, origin=f))
        return out

    def filter(self, node, outs, now):
        w = self.world
        result = []
        for out in outs:
            if not isinstance(out, Send):
                result.append(out)
                continue
            msg = out.msg
            if isinstance(msg, Proposal) and msg.view == 0 and msg.proposer == node.id:
                h = msg.block.height
                if h > self.max_height:
                    continue
                self.x_blocks[h] = msg
                result.append(Send(msg, self.side_x()))
                if h == 1:
                    result.extend(self._propose_y(1, w.store.get(msg.block.parent), msg.prev_cert))
                continue
            if isinstance(msg, VoteMsg) and msg.proposal.view == 0:
                result.append(Send(msg, self.side_x()))
                continue
            replaced = self.rewrite(node, out, now)
            if replaced is not None:
                result.extend(replaced)
            else:
                result.append(out)
        return result

    def rewrite(self, node, out, now):
        """Return replacement outputs for `out`, or None to keep it."""
        return None

    def link_delay(self, sender, recipient, msg, now):
        return None


class DoubleCommit(SplitBrain):
    """Break CR1 for a victim whose q_c leaves q_c + q_r - 1 at or below the faulty fraction.

    View 0 certifies X1, X2 with A plus the coalition (enough votes for the
    victim) and Y1 with B plus the coalition. Honest A<->B traffic is held
    back until GST. In view 1 the coalition reports Y1 as its lock, the faulty
    leader drops statuses from A, and the Y branch is extended and committed.
    """

    name = "abc_double_commit"

    def default_group_a_size(self):
        w = self.world
        qc = quorum_count(w.cfg.n, self.victim_qc())
        return max(qc - len(w.faults.faulty), 0)

    def victim_qc(self) -> Fraction:
        return Fraction(self.params.get("victim_q_c", self.world.cfg.q_r))

    def precondition(self):
        w = self.world
        n, qr = w.cfg.n, w.cfg.quorum
        f = len(w.faults.faulty)
        qc = quorum_count(n, self.victim_qc())
        if f < qc + qr - n:
            raise AttackRefused(
                f"{f} faulty replicas cannot reach the {qc + qr - n} needed against q_c={self.victim_qc()}"
            )
        if w.cfg.leader(1) not in w.faults.faulty:
            raise AttackRefused("the leader of view 1 is not faulty")
        if len(self.group_a) + f < qc:
            raise AttackRefused("group A plus the coalition cannot reach the victim's quorum")
        if len(self.group_b) + f < qr:
            raise AttackRefused("group B plus the coalition cannot certify the Y branch")
        if w.delay_model.kind != "partial_synchrony":
            raise AttackRefused("holding back A<->B traffic needs a partially synchronous network")
        self.y_height = 1

    def pass_to_shadow(self, node, msg, sender, now):
        leader1 = self.world.cfg.leader(1)
        if isinstance(msg, StatusMsg) and msg.view == 1 and node.id == leader1:
            return msg.sender not in self.group_a
        return True

    def rewrite(self, node, out, now):
        msg = out.msg
        if isinstance(msg, StatusMsg) and msg.view == 1 and 1 in self.y_certs:
            w = self.world
            y1 = self.y_blocks[1].block
            lie = StatusMsg.make(w.signers[node.id], 1, y1, self.y_certs[1])
            return [Send(lie, out.to)]
        return None

    def link_delay(self, sender, recipient, msg, now):
        if not self.active:
            return None
        m = self.world.delay_model
        if now >= m.gst:
            return None
        a, b = set(self.group_a), set(self.group_b)
        if (sender in a and recipient in b) or (sender in b and recipient in a):
            return None  # model default: held until GST
        return m.post_gst_delta


class DelayAttack(SplitBrain):
    """Break CR2 for a victim whose delta is below the network's actual bound.

    A and B only talk over slow links, so each side sees the other branch
    late; the coalition reports both X1 and Y1 as undisturbed locks.
    """

    name = "cr2_delay_attack"

    def victim_delta(self) -> int:
        return int(self.params.get("victim_delta", 1))

    def default_group_a_size(self):
        w = self.world
        return max(w.cfg.quorum - len(w.faults.faulty), 1)

    def precondition(self):
        w = self.world
        m = w.delay_model
        if m.kind == "partial_synchrony":
            raise AttackRefused("delay attack needs a synchronous bound to exceed")
        if m.actual_delta <= self.victim_delta():
            raise AttackRefused(
                f"actual bound {m.actual_delta} does not exceed the victim's delta {self.victim_delta()}"
            )
        # the victim-side window is (actual + min) - 3 * min from lock to equivocation
        if 2 * self.victim_delta() > m.actual_delta - 2 * m.min_delay:
            raise AttackRefused("slow links are not slow enough to hide the other branch")
        f = len(w.faults.faulty)
        if len(self.group_a) + f < w.cfg.quorum or len(self.group_b) + f < w.cfg.quorum:
            raise AttackRefused("each side plus the coalition must reach q_r")

    def link_delay(self, sender, recipient, msg, now):
        if not self.active:
            return None
        m = self.world.delay_model
        a, b = set(self.group_a), set(self.group_b)
        if (sender in a and recipient in b) or (sender in b and recipient in a):
            return m.actual_delta
        return m.min_delay

    def report(self, node, now):
        rep = node.shadow.report_snapshot(now)
        if not self.active or 1 not in self.y_certs or 1 not in self.x_blocks:
            return rep
        x1 = self.x_blocks[1].block
        x_cert = node.shadow.certs.get((x1.digest, 0))
        if x_cert is None:
            return rep
        t = node.shadow.t_lock.get((1, 0), rep.time)
        locks = tuple(lk for lk in rep.locks if lk.view != 0) + (
            LockEntry(1, 0, x1.digest, t),
            LockEntry(1, 0, self.y_blocks[1].block.digest, t),
        )
        certs = tuple(c for c in rep.certs if c.view != 0) + (x_cert, self.y_certs[1])
        t_equiv = {k: v for k, v in rep.t_equiv.items() if k[1] != 0}
        t_vc = {k: v for k, v in rep.t_viewchange.items() if k != 0}
        return ReplicaReport(rep.replica, rep.time, rep.view, rep.votes, certs, locks, t_equiv, t_vc)


STRATEGIES = {
    "shim": Shim,
    "honest": Shim,
    "silent": Silent,
    "equivocate": Equivocate,
    "mixed": Mixed,
    "abc_double_commit": DoubleCommit,
    "cr2_delay_attack": DelayAttack,
}


def make_strategy(name: str, params: Optional[dict] = None) -> Strategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise UnknownStrategy(f"unknown strategy {name!r}") from None
    return cls(params)


def build_nodes(cfg: ProtocolConfig, faults: FaultConfig, keyring: Keyring, store: BlockStore,
                delay_model, height_cap: Optional[int]):
    """Replicas for honest ids, FaultyNode wrappers for faulty ones, plus the strategy."""
    strategy = make_strategy(faults.strategy, faults.params)
    signers = {i: keyring.signer(i) for i in sorted(faults.faulty)}
    strategy.attach(WorldView(cfg, store, keyring, faults, delay_model, signers))
    nodes = []
    for i in range(cfg.n):
        rep = Replica(i, cfg, keyring, store, height_cap=height_cap)
        if i in faults.faulty:
            kind = "byzantine" if i in faults.byzantine else "abc"
            # a-b-c replicas stay on the honest shim unless an attack script claims them
            s = strategy if (kind == "byzantine" or isinstance(strategy, SplitBrain)) else Shim()
            nodes.append(FaultyNode(i, rep, s, kind))
        else:
            nodes.append(rep)
    return nodes, strategy
