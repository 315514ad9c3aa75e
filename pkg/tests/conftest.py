import time
from fractions import Fraction
from pathlib import Path

import pytest

from flexbft.core import Block, BlockStore, GENESIS, Keyring, ProtocolConfig, make_certificate
from flexbft.harness.runner import run_scenario
from flexbft.harness.scenario import load_corpus

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


def chain(store: BlockStore, length: int, parent=GENESIS, tag: bytes = b"") -> list:
    """Append `length` blocks above `parent`; returns them in height order."""
    out = []
    for _ in range(length):
        b = Block(parent.height + 1, b"blk%d" % (parent.height + 1) + tag, parent.digest)
        store.add(b)
        out.append(b)
        parent = b
    return out


def certify(block: Block, view: int, voters, keyring: Keyring):
    return make_certificate(block, view, [keyring.signer(r).vote(block.digest, view) for r in voters])


@pytest.fixture
def cfg4():
    return ProtocolConfig(4, Fraction(2, 3))


@pytest.fixture
def keyring4():
    return Keyring(4, 0)


@pytest.fixture(scope="session")
def corpus():
    """Every corpus scenario run once per session: (name -> RunResult, wall seconds)."""
    start = time.perf_counter()
    results = {cfg.name: run_scenario(cfg) for cfg in load_corpus(SCENARIOS)}
    return results, time.perf_counter() - start


_ACCEPTANCE: list = []


@pytest.fixture
def accept():
    """Record one acceptance line; the summary prints them after the run."""

    def record(criterion: str, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
