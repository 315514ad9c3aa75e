from fractions import Fraction as F

import pytest
from hypothesis import given, strategies as st

from flexbft.calculus import (
    CR1,
    CR2,
    UNSUPPORTED,
    ClientPoint,
    QuorumConfig,
    compare_qr,
    cr1_max_byz,
    cr1_segment,
    cr1_tolerance,
    cr2_tolerance,
    general_tolerance,
    parse_region_csv,
    pick_rule,
    region_csv,
    region_grid,
)


def tol(t):
    return (t.safety_total, t.liveness_byz)


def test_general_tolerance_examples():
    q = F(2, 3)
    assert tol(general_tolerance(QuorumConfig(q, q, q, q))) == (F(1, 3), F(1, 3))
    assert tol(general_tolerance(QuorumConfig(F(4, 5), F(7, 10), F(4, 5), F(7, 10)))) == (F(1, 2), F(1, 5))


def test_general_tolerance_rejects_out_of_range():
    with pytest.raises(ValueError):
        QuorumConfig(F(0), F(1, 2), F(1, 2), F(1, 2))
    with pytest.raises(ValueError):
        QuorumConfig(F(6, 5), F(1, 2), F(1, 2), F(1, 2))


def _independent(a, b, c, d):
    return (min(a + b - 1, c + d - 1), 1 - max(a, b, c, d))


def test_balanced_dominates_exhaustive():
    """Every grid config is matched or beaten by its balanced version."""
    checked = 0
    for den in range(2, 21):
        values = [F(k, den) for k in range(den // 2 + 1, den + 1)]
        for a in values:
            for b in values:
                for c in values:
                    for d in values:
                        cfg = QuorumConfig(a, b, c, d)
                        bal = cfg.balanced()
                        assert bal.q_unq + bal.q_lck == bal.q_cmt + bal.q_ulck
                        before = _independent(a, b, c, d)
                        after = _independent(bal.q_unq, bal.q_lck, bal.q_cmt, bal.q_ulck)
                        assert tol(general_tolerance(cfg)) == before
                        assert after[0] >= before[0]
                        assert after[1] >= before[1]
                        checked += 1
    assert checked > 10_000


@pytest.mark.parametrize("q_r,q_c,expected", [
    (F(2, 3), F(2, 3), (F(1, 3), F(1, 3))),
    (F(7, 10), F(4, 5), (F(1, 2), F(1, 5))),
    (F(2, 3), F(1), (F(2, 3), F(0))),
])
def test_cr1_tolerance_examples(q_r, q_c, expected):
    assert tol(cr1_tolerance(q_r, q_c)) == expected


def test_cr1_tolerance_rejects_qc_below_qr():
    with pytest.raises(ValueError):
        cr1_tolerance(F(2, 3), F(3, 5))


@pytest.mark.parametrize("q_r,expected", [
    (F(2, 3), (F(2, 3), F(1, 3))),
    (F(1, 2), (F(1, 2), F(1, 2))),
    (F(7, 10), (F(7, 10), F(3, 10))),
])
def test_cr2_tolerance_examples(q_r, expected):
    assert tol(cr2_tolerance(q_r)) == expected


def test_cr2_tolerance_out_of_range():
    with pytest.raises(ValueError):
        cr2_tolerance(F(2, 5))


def test_collapse_to_general_tolerance():
    grid = sorted({F(k, d) for d in range(2, 13) for k in range(1, d + 1) if F(k, d) > F(1, 2)})
    for q_r in grid:
        for q_c in grid:
            if q_c < q_r:
                continue
            assert cr1_tolerance(q_r, q_c) == general_tolerance(QuorumConfig(q_c, q_r, q_c, q_r))


def test_pick_rule_examples():
    q_r = F(2, 3)
    c = pick_rule(F(1, 5), F(2, 5), q_r)
    assert c.rule == CR1 and c.q_c == F(11, 15)
    # independent check of both inequalities at the chosen q_c
    assert F(2, 5) <= c.q_c + q_r - 1 and F(1, 5) <= 1 - c.q_c
    assert pick_rule(F(3, 10), F(3, 5), q_r).rule == CR2
    assert pick_rule(F(2, 5), F(7, 10), q_r).rule == UNSUPPORTED


def test_pick_rule_rejects_invalid_point():
    with pytest.raises(ValueError):
        pick_rule(F(1, 2), F(1, 4), F(2, 3))
    with pytest.raises(ValueError):
        ClientPoint(F(1, 2), F(1, 4))


qrs = st.sampled_from([F(11, 20), F(3, 5), F(2, 3), F(7, 10), F(3, 4), F(4, 5)])
levels = st.builds(F, st.integers(0, 20), st.just(20))


@given(qrs, levels, levels)
def test_pick_rule_choice_is_sound(q_r, a, b):
    byz, total = min(a, b), max(a, b)
    c = pick_rule(byz, total, q_r)
    if c.rule == CR1:
        t = cr1_tolerance(q_r, c.q_c)
        assert total <= t.safety_total and byz <= t.liveness_byz
        # minimal: any smaller q_c on the 1/60 grid loses the safety level
        smaller = c.q_c - F(1, 60)
        assert smaller < q_r or total > smaller + q_r - 1
    elif c.rule == CR2:
        t = cr2_tolerance(q_r)
        assert total <= t.safety_total and byz <= t.liveness_byz
        # CR1 could not have served it
        q_c = max(q_r, total - q_r + 1)
        assert q_c > 1 or byz > 1 - q_c


def test_region_endpoints_and_corner():
    reg = region_grid(F(2, 3), F(1, 30))
    assert reg.cr1_segment == ((F(1, 3), F(1, 3)), (F(0), F(2, 3)))
    assert reg.cr2_corner == (F(1, 3), F(2, 3))
    assert cr1_segment(F(2, 3)) == reg.cr1_segment


@pytest.mark.parametrize("q_r,step", [(F(3, 5), F(1, 20)), (F(2, 3), F(1, 30)), (F(3, 5), F(1, 10))])
def test_region_max_byz_is_half_qr(q_r, step):
    reg = region_grid(q_r, step)
    assert reg.max_byz(CR1) == q_r / 2 == cr1_max_byz(q_r)


def test_region_max_byz_above_two_thirds():
    # the q_r/2 bound still holds but liveness (1 - q_r) binds first
    for q_r in (F(3, 4), F(4, 5)):
        reg = region_grid(q_r, F(1, 20))
        assert reg.max_byz(CR1) == 1 - q_r < q_r / 2


def test_region_grid_step_range():
    with pytest.raises(ValueError):
        region_grid(F(2, 3), F(1, 5))


def test_region_csv_round_trip():
    reg = region_grid(F(2, 3), F(1, 10))
    text = region_csv(reg)
    assert text.startswith("# q_r=2/3 step=1/10\n")
    parsed = parse_region_csv(text)
    assert parsed == list(reg.points)


def test_compare_qr_examples():
    (c,) = compare_qr([F(11, 20), F(2, 3)])
    assert c.relation == "contained"
    (c,) = compare_qr([F(2, 3), F(3, 4)])
    assert c.relation == "incomparable"
    assert c.b_max_total > c.a_max_total and c.b_max_byz < c.a_max_byz
    (c,) = compare_qr([F(2, 3), F(2, 3)])
    assert c.relation == "equal"
