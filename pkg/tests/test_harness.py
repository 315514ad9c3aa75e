import json
import shutil

import pytest

from flexbft.harness import cli, replay as replay_mod
from flexbft.harness.replay import replay
from flexbft.harness.runner import build_report, run_scenario
from flexbft.harness.scenario import load_scenario
from flexbft.netsim import COMMIT, SEND, TranscriptWriter

from conftest import SCENARIOS

PNG = b"\x89PNG\r\n\x1a\n"


@pytest.fixture(scope="module")
def ideal():
    return run_scenario(load_scenario(SCENARIOS / "ideal_n4.toml"))


def rewrite(records, edit):
    """Re-encode records, letting `edit` change payloads; digests stay consistent."""
    w = TranscriptWriter()
    for r in records:
        w.write(r.time, r.actor, r.kind, edit(r))
    return w.getvalue()


def test_replay_passes(ideal):
    assert replay(ideal.transcript).line() == "PASS"


def test_replay_flags_tampered_vote(ideal):
    target = next(r for r in ideal.records if r.kind == SEND and b'"t":"vote"' in r.payload)
    marker = b'"a":"'

    def edit(r):
        if r.seq != target.seq:
            return r.payload
        i = r.payload.index(marker) + len(marker)
        flipped = b"0" if r.payload[i:i + 1] != b"0" else b"1"
        return r.payload[:i] + flipped + r.payload[i + 1:]

    res = replay(rewrite(ideal.records, edit))
    assert not res.ok
    assert (res.time, res.seq) == (target.time, target.seq)
    assert res.line().startswith(f"FAIL at (time={target.time}, seq={target.seq})")


def test_replay_flags_corrupt_bytes(ideal):
    data = bytearray(ideal.transcript)
    data[-1] ^= 0xFF
    res = replay(bytes(data))
    assert not res.ok and "digest" in res.reason
    assert res.seq == ideal.records[-1].seq


def test_replay_rejects_other_code_version(ideal, monkeypatch):
    monkeypatch.setattr(replay_mod, "__version__", "9.9.9")
    res = replay(ideal.transcript)
    assert not res.ok and "code version" in res.reason


def test_replay_of_truncated_run():
    cfg = load_scenario(SCENARIOS / "ideal_n4.toml")
    assert replay(run_scenario(cfg, until=35).transcript).ok


def test_report_recomputes_from_transcript(ideal):
    again = build_report(ideal.config, ideal.records)
    assert json.dumps(again) == json.dumps(ideal.report)
    # message count equals the non-loopback deliveries scheduled in SEND records
    count = 0
    for r in ideal.records:
        if r.kind == SEND:
            count += sum(1 for dst, _, _ in r.json()["deliveries"] if dst != r.actor)
    assert ideal.report["message_count"] == count
    for c in ideal.report["clients"]:
        heights = [r.json()["height"] for r in ideal.records
                   if r.kind == COMMIT and r.json()["client"] == c["name"]]
        assert c["committed_height"] == max(heights)


def test_report_fields_are_ordered(ideal):
    keys = list(ideal.report)
    assert keys[:4] == ["scenario", "seed", "n", "q_r"]
    assert keys[-2:] == ["ok", "transcript_sha256"]


def test_cli_run_writes_outputs(tmp_path, capsys):
    code = cli.main(["run", str(SCENARIOS / "ideal_n4.toml"), "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split("\t")[:3] == ["scenario", "seed", "client"]
    assert any(line.startswith("# ideal_n4 seed=") and line.endswith("OK") for line in out)
    seed = load_scenario(SCENARIOS / "ideal_n4.toml").seed
    d = tmp_path / "ideal_n4" / str(seed)
    assert out[-1] == f"# outputs in {d}"
    for name in ("transcript.bin", "transcript.txt", "report.json", "chain-cr1.jsonl", "timeline.png"):
        assert (d / name).exists(), name
    assert (d / "timeline.png").read_bytes()[:8] == PNG
    assert cli.main(["replay", str(d / "transcript.bin")]) == 0
    assert capsys.readouterr().out.strip() == "PASS"


def test_cli_run_bad_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('name = "x"\n[protocol]\nn = 4\nq_r = "1/2"\n')
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == 2
    assert "E_QUORUM" in capsys.readouterr().err


def test_cli_corpus(tmp_path, capsys):
    src = tmp_path / "sc"
    src.mkdir()
    for name in ("ideal_n4", "silent_leader_n4"):
        shutil.copy(SCENARIOS / f"{name}.toml", src)
    assert cli.main(["corpus", str(src), "--no-plot", "--out", str(tmp_path / "o")]) == 0
    assert capsys.readouterr().out.splitlines() == ["ideal_n4\tPASS", "silent_leader_n4\tPASS"]


def test_cli_region_and_compare(tmp_path, capsys):
    csv, png = tmp_path / "r.csv", tmp_path / "r.png"
    assert cli.main(["region", "--qr", "2/3", "--csv", str(csv), "--plot", str(png)]) == 0
    assert csv.read_text().startswith("#")
    assert png.read_bytes()[:8] == PNG
    cmp_png = tmp_path / "c.png"
    assert cli.main(["compare-qr", "11/20", "2/3", "3/4", "--plot", str(cmp_png)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("q_r_a,q_r_b,relation")
    assert "11/20,2/3,contained" in lines[1]
    assert cmp_png.read_bytes()[:8] == PNG
