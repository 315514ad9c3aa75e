"""Exact tolerance arithmetic for flexible quorums and the client regions they support.

Everything here is a pure function over Fractions. Fractions of replicas are
never rounded onto a replica grid; that happens only when a simulation picks
an n and calls `quorum_count`.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Iterable, Optional

from .core import Rational, as_fraction, fmt_fraction

HALF = Fraction(1, 2)


@dataclass(frozen=True)
class QuorumConfig:
    q_unq: Fraction
    q_lck: Fraction
    q_cmt: Fraction
    q_ulck: Fraction

    def __post_init__(self):
        for name in ("q_unq", "q_lck", "q_cmt", "q_ulck"):
            value = as_fraction(getattr(self, name))
            if value <= 0 or value > 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
            object.__setattr__(self, name, value)

    def balanced(self) -> "QuorumConfig":
        """Even out the two intersection sums without changing the largest quorum.

        The pair with the larger sum gives up its surplus, larger member
        first, so the minimum of the two sums is unchanged and no quorum grows.
        """
        s1 = self.q_unq + self.q_lck
        s2 = self.q_cmt + self.q_ulck
        if s1 == s2:
            return self
        if s1 > s2:
            a, b = _shrink_pair(self.q_unq, self.q_lck, s1 - s2)
            return QuorumConfig(a, b, self.q_cmt, self.q_ulck)
        a, b = _shrink_pair(self.q_cmt, self.q_ulck, s2 - s1)
        return QuorumConfig(self.q_unq, self.q_lck, a, b)


def _shrink_pair(x: Fraction, y: Fraction, surplus: Fraction):
    # take from the larger member first so the maximum drops or stays put
    hi, lo = (x, y) if x >= y else (y, x)
    take = min(surplus, hi - lo)
    hi -= take
    surplus -= take
    hi -= surplus / 2
    lo -= surplus / 2
    return (hi, lo) if x >= y else (lo, hi)


@dataclass(frozen=True)
class Tolerance:
    safety_total: Fraction  # strict: safe while faulty fraction < this
    liveness_byz: Fraction  # inclusive: live while Byzantine fraction <= this

    def safe_against(self, faulty_fraction: Rational) -> bool:
        return as_fraction(faulty_fraction) < self.safety_total

    def live_against(self, byz_fraction: Rational) -> bool:
        return as_fraction(byz_fraction) <= self.liveness_byz


def general_tolerance(cfg: QuorumConfig) -> Tolerance:
    return Tolerance(
        min(cfg.q_unq + cfg.q_lck - 1, cfg.q_cmt + cfg.q_ulck - 1),
        1 - max(cfg.q_unq, cfg.q_cmt, cfg.q_lck, cfg.q_ulck),
    )


def _check_qr(q_r: Rational) -> Fraction:
    q_r = as_fraction(q_r)
    if q_r <= HALF or q_r > 1:
        raise ValueError(f"q_r must exceed 1/2 and be at most 1, got {q_r}")
    return q_r


def cr1_tolerance(q_r: Rational, q_c: Rational) -> Tolerance:
    q_r = _check_qr(q_r)
    q_c = as_fraction(q_c)
    if q_c < q_r or q_c > 1:
        raise ValueError(f"q_c must satisfy q_r <= q_c <= 1, got q_c={q_c}, q_r={q_r}")
    return Tolerance(q_c + q_r - 1, 1 - q_c)


def cr2_tolerance(q_r: Rational) -> Tolerance:
    # 1/2 is admitted here as the limit point of classic synchronous protocols
    q_r = as_fraction(q_r)
    if q_r < HALF or q_r > 1:
        raise ValueError(f"q_r must lie in [1/2, 1], got {q_r}")
    return Tolerance(q_r, 1 - q_r)


CR1 = "CR1"
CR2 = "CR2"
UNSUPPORTED = "UNSUPPORTED"


@dataclass(frozen=True)
class ClientPoint:
    """A client's fault model as (Byzantine fraction, total faulty fraction)."""

    byz: Fraction
    total: Fraction
    supported_by: str = UNSUPPORTED
    q_c: Optional[Fraction] = None

    def __post_init__(self):
        object.__setattr__(self, "byz", as_fraction(self.byz))
        object.__setattr__(self, "total", as_fraction(self.total))
        if self.total < self.byz:
            raise ValueError("total fault fraction cannot be below the Byzantine fraction")
        if self.byz < 0 or self.total > 1:
            raise ValueError("fractions must lie in [0, 1]")


@dataclass(frozen=True)
class RuleChoice:
    rule: str
    q_c: Optional[Fraction] = None


def pick_rule(byz: Rational, total: Rational, q_r: Rational) -> RuleChoice:
    """Choose the weakest commit rule whose tolerance covers the point.

    The point's coordinates are the tolerance levels the client asks for, so
    the point itself sits on the boundary of the rule that serves it: the
    diamond (1 - q_r, q_r) is the synchronous rule's own tolerance.
    """
    q_r = _check_qr(q_r)
    byz = as_fraction(byz)
    total = as_fraction(total)
    if total < byz:
        raise ValueError("invalid point: total below byz")
    q_c = max(q_r, total - q_r + 1)
    if q_c <= 1 and byz <= 1 - q_c:
        return RuleChoice(CR1, q_c)
    if total <= q_r and byz <= 1 - q_r:
        return RuleChoice(CR2)
    return RuleChoice(UNSUPPORTED)


def classify(byz: Rational, total: Rational, q_r: Rational) -> ClientPoint:
    choice = pick_rule(byz, total, q_r)
    return ClientPoint(byz, total, choice.rule, choice.q_c)


@dataclass(frozen=True)
class Region:
    q_r: Fraction
    step: Fraction
    points: tuple  # ClientPoint, ordered by (byz, total)
    cr1_segment: tuple  # ((byz, total), (byz, total)) along the CR1 frontier
    cr2_corner: tuple  # (byz, total)

    def members(self, rule: str) -> set:
        return {(p.byz, p.total) for p in self.points if p.supported_by == rule}

    def max_byz(self, rule: str) -> Optional[Fraction]:
        vals = [p.byz for p in self.points if p.supported_by == rule]
        return max(vals) if vals else None

    def max_total(self, rule: str) -> Optional[Fraction]:
        vals = [p.total for p in self.points if p.supported_by == rule]
        return max(vals) if vals else None


def cr1_segment(q_r: Rational):
    """End points of the CR1 frontier b + t = q_r inside the valid half-plane t >= b."""
    q_r = _check_qr(q_r)
    q_c = max(q_r, (2 - q_r) / 2)
    right = (1 - q_c, q_c + q_r - 1)
    left = (Fraction(0), q_r)
    return right, left


def cr1_max_byz(q_r: Rational) -> Fraction:
    q_r = _check_qr(q_r)
    return min(1 - q_r, q_r / 2)


def region_grid(q_r: Rational, step: Rational) -> Region:
    q_r = _check_qr(q_r)
    step = as_fraction(step)
    if step <= 0 or step > Fraction(1, 10):
        raise ValueError("step must lie in (0, 1/10]")
    ticks = []
    x = Fraction(0)
    while x <= 1:
        ticks.append(x)
        x += step
    points = []
    for b in ticks:
        for t in ticks:
            if t < b:
                continue
            points.append(classify(b, t, q_r))
    return Region(q_r, step, tuple(points), cr1_segment(q_r), (1 - q_r, q_r))


@dataclass(frozen=True)
class Comparison:
    a: Fraction
    b: Fraction
    relation: str  # equal | contained | contains | incomparable (a relative to b)
    a_max_total: Fraction
    b_max_total: Fraction
    a_max_byz: Fraction
    b_max_byz: Fraction


def compare_qr(q_r_list: Iterable[Rational], step: Rational = Fraction(1, 20)) -> list:
    values = [_check_qr(q) for q in q_r_list]
    regions = {q: region_grid(q, step) for q in dict.fromkeys(values)}
    pairs = list(combinations(values, 2)) if len(values) > 1 else []
    out = []
    for a, b in pairs:
        ra, rb = regions[a], regions[b]
        sa, sb = ra.members(CR1), rb.members(CR1)
        if sa == sb:
            rel = "equal"
        elif sa < sb:
            rel = "contained"
        elif sa > sb:
            rel = "contains"
        else:
            rel = "incomparable"
        out.append(
            Comparison(
                a, b, rel,
                ra.max_total(CR1), rb.max_total(CR1),
                ra.max_byz(CR1), rb.max_byz(CR1),
            )
        )
    return out


def region_csv(region: Region) -> str:
    buf = io.StringIO()
    (rb, rt), (lb, lt) = region.cr1_segment
    cb, ct = region.cr2_corner
    counts = {}
    for p in region.points:
        counts[p.supported_by] = counts.get(p.supported_by, 0) + 1
    buf.write(f"# q_r={fmt_fraction(region.q_r)} step={fmt_fraction(region.step)}\n")
    buf.write(
        f"# cr1_segment=({fmt_fraction(rb)},{fmt_fraction(rt)})"
        f"-({fmt_fraction(lb)},{fmt_fraction(lt)})\n"
    )
    buf.write(f"# cr2_corner=({fmt_fraction(cb)},{fmt_fraction(ct)})\n")
    buf.write(
        "# counts=" + ",".join(f"{k}:{counts.get(k, 0)}" for k in (CR1, CR2, UNSUPPORTED)) + "\n"
    )
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["byz", "total", "rule", "q_c"])
    for p in region.points:
        writer.writerow([
            fmt_fraction(p.byz),
            fmt_fraction(p.total),
            p.supported_by,
            fmt_fraction(p.q_c) if p.q_c is not None else "",
        ])
    return buf.getvalue()


def parse_region_csv(text: str) -> list:
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.DictReader(rows)
    return [
        ClientPoint(
            Fraction(r["byz"]), Fraction(r["total"]), r["rule"],
            Fraction(r["q_c"]) if r["q_c"] else None,
        )
        for r in reader
    ]
