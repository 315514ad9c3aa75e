"""Replay a transcript: integrity check, deterministic re-simulation, audits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .. import __version__
from ..netsim import FORMAT_VERSION, INIT, TranscriptError, read_transcript
from . import audit
from .metrics import TranscriptIndex
from .scenario import ScenarioError, from_dict


@dataclass
class ReplayResult:
    ok: bool
    reason: str = ""
    time: Optional[int] = None
    seq: Optional[int] = None
    audits: dict = field(default_factory=dict)

    def line(self) -> str:
        if self.ok:
            return "PASS"
        where = f" at (time={self.time}, seq={self.seq})" if self.seq is not None else ""
        return f"FAIL{where}: {self.reason}"


def first_divergence(a: list, b: list):
    """(time, seq) of the first record that differs, or None."""
    for ra, rb in zip(a, b):
        if (ra.time, ra.seq, ra.actor, ra.kind, ra.payload) != (rb.time, rb.seq, rb.actor, rb.kind, rb.payload):
            return ra.time, ra.seq
    if len(a) != len(b):
        longer = a if len(a) > len(b) else b
        r = longer[min(len(a), len(b))]
        return r.time, r.seq
    return None


def replay(data: bytes, run_audits: bool = True) -> ReplayResult:
    from .runner import run_scenario

    try:
        records = read_transcript(data, verify=True)
    except TranscriptError as exc:
        return ReplayResult(False, str(exc), exc.time, exc.seq)
    if not records or records[0].kind != INIT:
        return ReplayResult(False, "missing initialization record")
    init = records[0].json()
    if init.get("format") != FORMAT_VERSION:
        return ReplayResult(False, f"format version mismatch: {init.get('format')} vs {FORMAT_VERSION}", 0, 0)
    if init.get("code") != __version__:
        return ReplayResult(False, f"code version mismatch: transcript {init.get('code')}, running {__version__}",
                            0, 0)
    try:
        cfg = from_dict(init["scenario"])
    except (ScenarioError, KeyError) as exc:
        return ReplayResult(False, f"bad initialization record: {exc}", 0, 0)
    fresh = run_scenario(cfg, until=_until(records, cfg))
    if fresh.transcript != data:
        where = first_divergence(records, read_transcript(fresh.transcript, verify=False))
        if where is None:
            return ReplayResult(False, "byte-level mismatch with identical records")
        return ReplayResult(False, "re-simulation diverges", *where)
    audits = {}
    if run_audits:
        audits = audit.run_all(TranscriptIndex(records), cfg)
        bad = {k: v for k, v in audits.items() if v}
        if bad:
            name = sorted(bad)[0]
            return ReplayResult(False, f"audit {name}: {bad[name][0]}", audits=audits)
    return ReplayResult(True, audits=audits)


def _until(records, cfg) -> Optional[int]:
    # a run cut short by the CLI records its bound in END; the scenario limit covers the rest
    end = records[-1].json() if records else None
    if isinstance(end, dict) and "until" in end:
        return end["until"]
    return None
