"""Exhaustive schedule explorer for tiny instances, used as a test oracle.

The model abstracts the replica protocol down to the decisions an adversary
controls in partial synchrony: which proposals exist, which honest replicas
see (and vote for) which proposal, and when honest replicas give up on a
view. Faulty replicas vote for everything and claim any existing certificate
in their status. Honest replicas only learn certificates through proposals
they voted for, which keeps their reported locks as low as the adversary can
make them. A depth-first search over these events, memoized on the abstract
state, looks for two conflicting CR1 commits.

Timing is not modeled, so the synchronous rule is not covered here; see
`delay_sweep` for the simulator-based sweep used for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import chain, combinations, permutations
from typing import Optional

from .core import quorum_count

GENESIS = 0


@dataclass(frozen=True)
class Instance:
    n: int
    q_r: Fraction
    faulty: int  # replicas 0..faulty-1 are faulty
    q_c: Fraction
    views: int = 2  # views 0..views-1
    horizon: int = 12
    max_height: int = 3

    @property
    def qr(self) -> int:
        return quorum_count(self.n, self.q_r)

    @property
    def need(self) -> int:
        return max(quorum_count(self.n, self.q_c), self.qr)

    def attack_precondition(self) -> bool:
        """Enough faulty replicas for one quorum to overlap a commit quorum in faulty ones only."""
        return self.faulty >= self.need + self.qr - self.n


# proposal kinds
FIRST, CHAIN, FAULTY = 0, 1, 2


class _State:
    __slots__ = ("blocks", "props", "votes", "hview", "entry", "lock")

    def __init__(self, honest: int):
        self.blocks = [(-1, 0)]  # (parent, height)
        self.props = {}  # (block, view) -> (prev cert view, kind)
        self.votes = {}  # (block, view) -> bitmask of honest voters
        self.hview = [0] * honest
        self.entry = [dict() for _ in range(honest)]  # view -> lock (rank, block) on entry
        self.lock = [((0, 0), GENESIS)] * honest

    def copy(self):
        s = _State.__new__(_State)
        s.blocks = list(self.blocks)
        s.props = dict(self.props)
        s.votes = dict(self.votes)
        s.hview = list(self.hview)
        s.entry = [dict(e) for e in self.entry]
        s.lock = list(self.lock)
        return s

    def key(self, perm, table):
        """Canonical form: blocks are identified by their subtree, not creation order,
        and honest replicas are renamed by `perm`."""
        marks = [[] for _ in self.blocks]
        for (b, v), (pv, kind) in self.props.items():
            marks[b].append((0, v, pv, kind, table[self.votes.get((b, v), 0)]))
        for h, (rank, b) in enumerate(self.lock):
            marks[b].append((1, perm[h], rank))
        for h, e in enumerate(self.entry):
            for v, (rank, b) in e.items():
                marks[b].append((2, perm[h], v, rank))
        children = [[] for _ in self.blocks]
        for b in range(len(self.blocks) - 1, 0, -1):
            children[self.blocks[b][0]].append(b)
        sig = [None] * len(self.blocks)
        for b in range(len(self.blocks) - 1, -1, -1):
            sig[b] = (tuple(sorted(marks[b])), tuple(sorted(sig[c] for c in children[b])))
        views = [0] * len(self.hview)
        for h, v in enumerate(self.hview):
            views[perm[h]] = v
        return sig[0], tuple(views)


def _popcount(x: int) -> int:
    return x.bit_count()


class Explorer:
    def __init__(self, inst: Instance):
        if inst.n > 5:
            raise ValueError("the explorer is meant for n <= 5")
        if inst.faulty >= inst.qr:
            raise ValueError("faulty replicas alone would form certificates")
        self.inst = inst
        self.qr = inst.qr
        self.need = inst.need
        self.f = inst.faulty
        self.honest = inst.n - inst.faulty
        # honest replicas that lead no explored view are interchangeable
        free = [h for h in range(self.honest) if h + self.f >= min(inst.views, inst.n)]
        self.perms = []
        for order in permutations(free):
            perm = list(range(self.honest))
            for a, b in zip(free, order):
                perm[a] = b
            table = [sum(1 << perm[h] for h in range(self.honest) if m >> h & 1)
                     for m in range(1 << self.honest)]
            self.perms.append((perm, table))
        self.visited: dict = {}
        self.expanded = 0

    # ------------------------------------------------------------ helpers

    def _extends(self, s: _State, b: int, a: int) -> bool:
        ha = s.blocks[a][1]
        while s.blocks[b][1] > ha:
            b = s.blocks[b][0]
        return b == a

    def _certs(self, s: _State) -> list:
        """Existing certificates as (rank, block), genesis included."""
        out = [((0, 0), GENESIS)]
        for (b, v), mask in s.votes.items():
            if _popcount(mask) + self.f >= self.qr:
                out.append(((v, s.blocks[b][1]), b))
        return out

    def _cert_views(self, s: _State, b: int) -> list:
        if b == GENESIS:
            return [0]
        return sorted(v for (rank, blk) in self._certs(s) if blk == b for v in (rank[0],))

    def _feasible_highest(self, s: _State, view: int) -> set:
        """Certificates that can be the highest of some valid status set for `view`."""
        qr, f = self.qr, self.f
        locks = sorted(e[view] for e in s.entry if view in e)
        k = max(0, qr - f)
        if len(locks) < k:
            return set()
        if k < qr:
            floor = locks[k - 1][0] if k > 0 else None
            return {c for c in self._certs(s) if floor is None or c[0] >= floor}
        out = set()
        for c in locks:
            if sum(1 for o in locks if o[0] <= c[0]) >= qr:
                out.add(c)
        return out

    def _last_vote(self, s: _State, h: int, view: int) -> Optional[int]:
        bit = 1 << h
        best = None
        for (b, v), mask in s.votes.items():
            if v == view and mask & bit:
                if best is None or s.blocks[b][1] > s.blocks[best][1]:
                    best = b
        return best

    def _may_vote(self, s: _State, h: int, parent: int, height: int, view: int, kind: int,
                  feasible) -> bool:
        """Whether honest h would vote for a block (parent, height) proposed in `view`."""
        if s.hview[h] != view:
            return False
        bit = 1 << h
        for (ob, ov), mask in s.votes.items():
            if ov == view and mask & bit and s.blocks[ob][1] == height:
                return False
        last = self._last_vote(s, h, view)
        if last is not None:
            return parent == last
        if view == 0:
            return parent == GENESIS
        if kind == FIRST:
            return True
        if kind == CHAIN:
            return False
        return any(self._extends(s, parent, c[1]) for c in feasible(view))

    def _groups(self, s: _State, parent: int, height: int, view: int, kind: int, feasible):
        ok = [h for h in range(self.honest)
              if self._may_vote(s, h, parent, height, view, kind, feasible)]
        for size in range(1, len(ok) + 1):
            yield from combinations(ok, size)

    # ------------------------------------------------------------ commits

    def committed(self, s: _State) -> set:
        need, f = self.need, self.f
        strong = {}
        for (b, v), mask in s.votes.items():
            if _popcount(mask) + f >= need:
                strong.setdefault(b, set()).add(v)
        out = set()
        for b, views in strong.items():
            p = s.blocks[b][0]
            if p != GENESIS and views & strong.get(p, set()):
                while p != GENESIS:
                    out.add(p)
                    p = s.blocks[p][0]
        return out

    def violated(self, s: _State) -> bool:
        c = sorted(self.committed(s), key=lambda b: s.blocks[b][1])
        for i, a in enumerate(c):
            for b in c[i + 1:]:
                if not self._extends(s, b, a):
                    return True
        return False

    # ------------------------------------------------------------ moves

    def moves(self, s: _State):
        inst, f = self.inst, self.f
        cache = {}

        def feasible(view):
            if view not in cache:
                cache[view] = self._feasible_highest(s, view)
            return cache[view]

        certs = self._certs(s)
        # a proposal only matters once someone votes for it, so creation carries the first votes
        for view in range(inst.views):
            leader = view % inst.n
            options = []
            if leader < f:
                for rank, p in sorted(set(certs)):
                    if s.blocks[p][1] >= inst.max_height:
                        continue
                    pv = min(self._cert_views(s, p))
                    options.append(("new", view, p, pv, FAULTY))
                    for b, (parent, _) in enumerate(s.blocks):
                        if parent == p and (b, view) not in s.props:
                            options.append(("again", view, b, pv, FAULTY))
            elif s.hview[leader - f] == view:
                mine = [(s.blocks[b][1], b) for (b, v), (_, kind) in s.props.items()
                        if v == view and kind != FAULTY]
                if not mine:
                    if view == 0:
                        options.append(("new", 0, GENESIS, 0, FIRST))
                    else:
                        for rank, c in sorted(feasible(view)):
                            if s.blocks[c][1] < inst.max_height:
                                options.append(("new", view, c, rank[0], FIRST))
                else:
                    height, last = max(mine)
                    mask = s.votes.get((last, view), 0)
                    if _popcount(mask) + f >= self.qr and height < inst.max_height:
                        options.append(("new", view, last, view, CHAIN))
            for op, v, x, pv, kind in options:
                parent = x if op == "new" else s.blocks[x][0]
                height = s.blocks[parent][1] + 1
                for group in self._groups(s, parent, height, v, kind, feasible):
                    yield (op, v, x, pv, kind, group)
        # later votes on existing proposals
        for (b, view), (_, kind) in sorted(s.props.items()):
            parent, height = s.blocks[b]
            for group in self._groups(s, parent, height, view, kind, feasible):
                yield ("vote", b, view, group)
        # view changes: a group of honest replicas jumps to a later view
        for target in range(1, inst.views):
            behind = [h for h in range(self.honest) if s.hview[h] < target]
            for size in range(1, len(behind) + 1):
                for group in combinations(behind, size):
                    if self._advance_ok(s, group, target):
                        yield ("advance", target, group)

    def _advance_ok(self, s: _State, group, target: int) -> bool:
        views = list(s.hview)
        for h in group:
            views[h] = target
        for u in range(min(s.hview[h] for h in group), target):
            if self.f + sum(1 for v in views if v > u) < self.qr:
                return False
        return True

    def apply(self, s: _State, move) -> _State:
        t = s.copy()
        if move[0] in ("new", "again"):
            op, view, x, pv, kind, group = move
            if op == "new":
                t.blocks.append((x, t.blocks[x][1] + 1))
                x = len(t.blocks) - 1
            t.props[(x, view)] = (pv, kind)
            self._cast(t, x, view, group)
        elif move[0] == "vote":
            _, b, view, group = move
            self._cast(t, b, view, group)
        else:
            _, target, group = move
            for h in group:
                t.hview[h] = target
                t.entry[h][target] = t.lock[h]
        return t

    def _cast(self, t: _State, b: int, view: int, group):
        parent = t.blocks[b][0]
        pv = t.props[(b, view)][0]
        prev = ((pv, t.blocks[parent][1]), parent)
        mask = t.votes.get((b, view), 0)
        for h in group:
            mask |= 1 << h
            if prev > t.lock[h]:
                t.lock[h] = prev
        t.votes[(b, view)] = mask

    # ------------------------------------------------------------ search

    def search(self) -> Optional[list]:
        """A violating schedule (list of moves) or None if none exists within the horizon."""
        self.visited.clear()
        return self._dfs(_State(self.honest), self.inst.horizon, [])

    def _moves_needed(self, s: _State) -> int:
        """Admissible bound: a violation needs four distinct strongly voted blocks
        (two conflicting parent/child pairs) and each move strengthens one block."""
        need, f = self.need, self.f
        strong = {b for (b, v), mask in s.votes.items() if _popcount(mask) + f >= need}
        return max(0, 4 - len(strong))

    def _dfs(self, s: _State, depth: int, trace: list) -> Optional[list]:
        if self.violated(s):
            return list(trace)
        if depth == 0 or depth < self._moves_needed(s):
            return None
        key = min(s.key(perm, table) for perm, table in self.perms)
        if self.visited.get(key, -1) >= depth:
            return None
        self.visited[key] = depth
        self.expanded += 1
        for move in self.moves(s):
            trace.append(move)
            found = self._dfs(self.apply(s, move), depth - 1, trace)
            trace.pop()
            if found is not None:
                return found
        return None


def explore(inst: Instance) -> Optional[list]:
    return Explorer(inst).search()


# ------------------------------------------------------------------ CR2 sweep


@dataclass(frozen=True)
class SweepOutcome:
    label: str
    client: str
    delta: int
    correct: bool
    conflicted: bool
    attack_launched: bool


def _cuts(honest):
    """Non-empty proper subsets of the honest replicas."""
    return [list(c) for c in chain.from_iterable(
        combinations(honest, k) for k in range(1, len(honest)))]


def delay_sweep(n: int = 5, q_r: str = "11/20", byzantine=(0, 1), actual: int = 10,
                min_delay: int = 1, deltas=(2, 4, 10, 12), heights: int = 4) -> list:
    """Run the real simulator over a family of delay schedules and fault scripts.

    Each honest cut A splits the honest replicas; links crossing the cut run
    at the network bound and all others at the minimum. The faulty replicas
    either stay silent, equivocate along the cut, or run the delay attack
    with A as its first group. Every synchronous client is evaluated; it is
    correct when its delta covers the actual bound.
    """
    from .harness.runner import client_correct, run_scenario
    from .harness.scenario import from_dict

    honest = [i for i in range(n) if i not in byzantine]
    out = []
    for cut in _cuts(honest):
        rest = [i for i in honest if i not in cut]
        links = [[a, b, actual] for a in cut for b in rest] + [[b, a, actual] for a in cut for b in rest]
        for strategy, params in (
            ("silent", {}),
            ("equivocate", {"partition": cut}),
            ("cr2_delay_attack", {"group_a": cut, "victim_delta": min(deltas)}),
        ):
            label = f"{strategy} cut={cut}"
            raw = {
                "name": "sweep",
                "seed": 1,
                "heights_target": heights,
                "probe_cadence": 1,
                "protocol": {"n": n, "q_r": q_r, "base_timeout": 100},
                "delay": {"kind": "scripted", "actual_delta": actual, "min_delay": min_delay,
                          "links": links},
                "faults": {"byzantine": list(byzantine), "strategy": strategy, "params": params},
                "clients": [{"name": f"d{d}", "mode": "sync", "delta": d} for d in deltas],
                "expect": {"liveness": False},
            }
            cfg = from_dict(raw)
            res = run_scenario(cfg)
            launched = bool(res.report.get("attack")) and res.report["attack"].get("launched", False)
            for spec in cfg.clients:
                client = res.client(spec.name)
                out.append(SweepOutcome(label, spec.name, spec.assumption.delta,
                                        client_correct(cfg, spec.assumption),
                                        client.state.conflict_flag, launched))
    return out
