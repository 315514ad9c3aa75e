"""Blocks, votes, certificates and the quorum arithmetic shared by every module."""

from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, Optional, Union

Digest = bytes
Rational = Union[Fraction, int, str]

DIGEST_SIZE = 32
GENESIS_PARENT: Digest = bytes(DIGEST_SIZE)
AUTH_SIZE = 16


class UnknownBlock(KeyError):
    """A digest does not resolve in the block store."""


def as_fraction(value: Rational) -> Fraction:
    """Parse "p/q", ints and Fractions exactly. Floats are refused on purpose."""
    if isinstance(value, float):
        raise TypeError("use exact rationals (Fraction or 'p/q'), not float")
    return Fraction(value)


def fmt_fraction(value: Fraction) -> str:
    value = Fraction(value)
    return f"{value.numerator}/{value.denominator}"


def quorum_count(n: int, q: Rational) -> int:
    """Smallest number of replicas m out of n with m/n "slightly larger than" q.

    When q*n is integral the strict reading applies (f+1 out of 2f+1 for
    q = 1/2), otherwise it is the ceiling. q = 1 means every replica.
    """
    q = as_fraction(q)
    if n < 1:
        raise ValueError("n must be positive")
    if q <= 0 or q > 1:
        raise ValueError(f"quorum fraction must lie in (0, 1], got {q}")
    m = q * n
    if m.denominator == 1:
        count = m.numerator + 1
    else:
        count = -(-m.numerator // m.denominator)
    return min(count, n)


@dataclass(frozen=True)
class Block:
    height: int
    payload: bytes
    parent: Digest = GENESIS_PARENT

    def __post_init__(self):
        if self.height < 0:
            raise ValueError("negative height")
        if len(self.parent) != DIGEST_SIZE:
            raise ValueError("parent digest must be 32 bytes")
        if (self.height == 0) != (self.parent == GENESIS_PARENT):
            raise ValueError("only the genesis block (height 0) has the reserved parent")

    def encode(self) -> bytes:
        return (
            struct.pack("<QQ", self.height, len(self.payload))
            + self.payload
            + self.parent
        )

    @cached_property
    def digest(self) -> Digest:
        return hashlib.sha256(self.encode()).digest()


GENESIS = Block(0, b"")


def digest(block: Block) -> Digest:
    return block.digest


def vote_message(block: Digest, view: int) -> bytes:
    return b"vote" + block + struct.pack("<Q", view)


@dataclass(frozen=True)
class Vote:
    block: Digest
    view: int
    voter: int
    auth: bytes = field(repr=False)

    def message(self) -> bytes:
        return vote_message(self.block, self.view)


@dataclass(frozen=True)
class Certificate:
    block: Digest
    height: int
    view: int
    votes: frozenset = field(default_factory=frozenset, repr=False)

    @property
    def rank(self) -> tuple[int, int]:
        return (self.view, self.height)

    def voters(self) -> list[int]:
        return sorted(v.voter for v in self.votes)

    def is_genesis(self) -> bool:
        return self.block == GENESIS.digest and self.view == 0 and self.height == 0


GENESIS_CERT = Certificate(GENESIS.digest, 0, 0, frozenset())


@dataclass(frozen=True)
class ProtocolConfig:
    n: int
    q_r: Fraction
    base_timeout: int = 100
    timeout_growth: int = 2

    def __post_init__(self):
        object.__setattr__(self, "q_r", as_fraction(self.q_r))
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.q_r <= Fraction(1, 2) or self.q_r > 1:
            raise ValueError("q_r must exceed 1/2 and be at most 1")
        if self.base_timeout <= 0 or self.timeout_growth < 1:
            raise ValueError("timeouts must be positive and non-decreasing")

    @cached_property
    def quorum(self) -> int:
        return quorum_count(self.n, self.q_r)

    def leader(self, view: int) -> int:
        return view % self.n

    def timeout(self, view: int) -> int:
        return self.base_timeout * self.timeout_growth ** view


class Signer:
    """Signing capability for one identity. Faulty code only ever holds its own."""

    __slots__ = ("replica", "_key")

    def __init__(self, replica: int, key: bytes):
        self.replica = replica
        self._key = key

    def sign(self, message: bytes) -> bytes:
        return hmac.new(self._key, message, hashlib.sha256).digest()[:AUTH_SIZE]

    def vote(self, block: Digest, view: int) -> Vote:
        return Vote(block, view, self.replica, self.sign(vote_message(block, view)))


class Keyring:
    """Simulated PKI: deterministic per-replica keys and a verification cache."""

    def __init__(self, n: int, seed: int = 0):
        self.n = n
        self.seed = seed
        self._keys = [
            hashlib.sha256(b"flexbft/key/%d/%d" % (seed, i)).digest() for i in range(n)
        ]
        self._verified: set = set()
        self._certs: dict = {}

    def signer(self, replica: int) -> Signer:
        return Signer(replica, self._keys[replica])

    def verify(self, replica: int, message: bytes, auth: bytes) -> bool:
        if not 0 <= replica < self.n:
            return False
        key = (replica, message, auth)
        if key in self._verified:
            return True
        expected = hmac.new(self._keys[replica], message, hashlib.sha256).digest()[:AUTH_SIZE]
        if hmac.compare_digest(expected, auth):
            self._verified.add(key)
            return True
        return False

    def verify_vote(self, vote: Vote) -> bool:
        return self.verify(vote.voter, vote.message(), vote.auth)


class BlockStore:
    """Append-only, content-addressed block map shared by a simulation run."""

    def __init__(self, blocks: Iterable[Block] = ()):
        self._blocks: dict[Digest, Block] = {GENESIS.digest: GENESIS}
        for block in blocks:
            self.add(block)

    def add(self, block: Block) -> Digest:
        d = block.digest
        if d in self._blocks:
            return d
        parent = self._blocks.get(block.parent)
        if parent is None:
            raise UnknownBlock(block.parent.hex())
        if parent.height != block.height - 1:
            raise ValueError("block height must be parent height + 1")
        self._blocks[d] = block
        return d

    def get(self, d: Digest) -> Block:
        try:
            return self._blocks[d]
        except KeyError:
            raise UnknownBlock(d.hex()) from None

    def __contains__(self, d: object) -> bool:
        return d in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def ancestors(self, d: Digest) -> Iterator[Block]:
        """Yield the block and every ancestor down to genesis."""
        block = self.get(d)
        while True:
            yield block
            if block.height == 0:
                return
            block = self._blocks[block.parent]

    def ancestor_at(self, d: Digest, height: int) -> Optional[Block]:
        block = self.get(d)
        if height > block.height or height < 0:
            return None
        while block.height > height:
            block = self._blocks[block.parent]
        return block


def extends(descendant: Digest, ancestor: Digest, store: BlockStore) -> bool:
    """True if `ancestor` is `descendant` or lies on its parent chain."""
    anc = store.get(ancestor)
    found = store.ancestor_at(descendant, anc.height)
    return found is not None and found.digest == ancestor


def equivocates(a: Digest, b: Digest, store: BlockStore) -> bool:
    return a != b and not extends(a, b, store) and not extends(b, a, store)


def rank_certificates(a: Certificate, b: Certificate) -> int:
    """-1, 0 or 1 as `a` ranks below, equal to or above `b`."""
    ra, rb = a.rank, b.rank
    return (ra > rb) - (ra < rb)


def verify_certificate(cert: Certificate, cfg: ProtocolConfig, keyring: Keyring) -> bool:
    if cert.is_genesis():
        return True
    voters = set()
    for vote in cert.votes:
        if vote.block != cert.block or vote.view != cert.view:
            return False
        if vote.voter in voters:
            return False
        voters.add(vote.voter)
    if len(voters) < cfg.quorum:
        return False
    cached = keyring._certs.get(cert)
    if cached is not None:
        return cached
    ok = all(keyring.verify_vote(v) for v in cert.votes)
    keyring._certs[cert] = ok
    return ok


def make_certificate(block: Block, view: int, votes: Iterable[Vote]) -> Certificate:
    return Certificate(block.digest, block.height, view, frozenset(votes))


def always_valid(payload: bytes) -> bool:
    """Application-level validity hook; every payload is accepted."""
    return True
