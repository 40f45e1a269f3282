import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from gridrl.grid import (ACTIONS_PER_LINE, BUS1, BUS2, DISCONNECTED, NOOP, Action, ActionKind, GridSpecError,
                         IllegalActionError, apply_action, disconnect_lines, grid_from_dict, grid_to_dict,
                         is_legal, legal_actions, legal_mask, line_action, action_index, load_grid, random_grid)

from conftest import tiny_grid


def test_case14_counts(case14):
    assert (case14.n_sub, case14.n_line, case14.n_gen, case14.n_load) == (14, 20, 6, 11)


def test_minimal_grid():
    g = tiny_grid()
    assert (g.n_sub, g.n_line) == (2, 1)


def test_initial_state_all_bus1(case14):
    s = case14.initial_state()
    assert np.all(s.line_or_bus == BUS1) and np.all(s.gen_bus == BUS1)
    assert s.line_status.all()
    s.check_invariants()


def _spec():
    return grid_to_dict(tiny_grid())


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["lines"][0].update(extremity=0), "origin equals extremity"),
    (lambda d: d["lines"][0].update(x=0.0), "non-positive reactance"),
    (lambda d: d["lines"][0].update(thermal_limit=-1.0), "non-positive thermal limit"),
    (lambda d: d["lines"].append(dict(d["lines"][0])), "duplicate id"),
    (lambda d: d["loads"][0].update(substation=9), "unknown substation"),
    (lambda d: d.update(slack_gen=5), "unknown generator"),
    (lambda d: d.pop("lines"), "missing top-level key"),
])
def test_spec_validation(mutate, msg):
    d = _spec()
    mutate(d)
    with pytest.raises(GridSpecError, match=msg):
        grid_from_dict(d)


def test_error_reports_element_id():
    d = _spec()
    d["lines"][0]["id"] = 42
    d["lines"][0]["x"] = -1
    with pytest.raises(GridSpecError, match="line 42"):
        grid_from_dict(d)


def test_load_grid_file_and_parse_error(tmp_path):
    p = tmp_path / "g.yaml"
    p.write_text(yaml.safe_dump(_spec()))
    assert load_grid(p).n_line == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("lines: [unclosed")
    with pytest.raises(GridSpecError, match="parse error"):
        load_grid(bad)


def test_round_trip(case14):
    again = grid_from_dict(grid_to_dict(case14))
    assert np.array_equal(again.thermal_limit, case14.thermal_limit)
    assert np.array_equal(again.line_or_sub, case14.line_or_sub)


def test_legal_actions_default_state(case14):
    s = case14.initial_state()
    for line in range(case14.n_line):
        acts = legal_actions(case14, s, line)
        assert acts == [NOOP, Action.set_endpoint(line, 0, BUS2), Action.set_endpoint(line, 1, BUS2)]


def test_legal_actions_cooldown_masks_all(case14):
    s = case14.initial_state()
    cd = s.sub_cooldown.copy()
    cd[case14.line_or_sub[3]] = 2
    cd[case14.line_ex_sub[3]] = 1
    assert legal_actions(case14, s.replace(sub_cooldown=cd), 3) == [NOOP]


def test_legal_actions_disconnected(case14):
    s = disconnect_lines(case14.initial_state(), np.array([5]))
    assert legal_actions(case14, s, 5) == [NOOP]  # line cooldown armed
    s = s.replace(line_cooldown=np.zeros(case14.n_line, np.int32))
    acts = legal_actions(case14, s, 5)
    expected = {(bo, be) for bo in (1, 2) for be in (1, 2)}
    assert len(acts) == 5
    assert {(a.bus_or, a.bus_ex) for a in acts[1:]} == expected


def test_unknown_line(case14):
    with pytest.raises(IndexError):
        legal_mask(case14, case14.initial_state(), 99)


def test_apply_noop_identity(case14):
    s = case14.initial_state()
    assert apply_action(s, NOOP, case14) is s


def test_apply_set_endpoint(case14):
    s = case14.initial_state()
    out = apply_action(s, Action.set_endpoint(3, 0, BUS2), case14)
    assert out.line_or_bus[3] == BUS2
    assert out.sub_cooldown[case14.line_or_sub[3]] == s.cooldown
    changed = np.flatnonzero(out.sub_cooldown != s.sub_cooldown)
    assert changed.tolist() == [case14.line_or_sub[3]]


@pytest.mark.parametrize("action", [
    Action.reconnect(0, 1, 1),  # connected line
    Action.set_endpoint(0, 0, BUS1),  # no effect
])
def test_apply_illegal(case14, action):
    with pytest.raises(IllegalActionError):
        apply_action(case14.initial_state(), action, case14)


def test_reconnect_sets_line_cooldown_only(case14):
    s = disconnect_lines(case14.initial_state(), np.array([2]))
    s = s.replace(line_cooldown=np.zeros(case14.n_line, np.int32))
    out = apply_action(s, Action.reconnect(2, 2, 1), case14)
    assert (out.line_or_bus[2], out.line_ex_bus[2]) == (BUS2, BUS1)
    assert out.line_cooldown[2] == s.cooldown
    assert np.array_equal(out.sub_cooldown, s.sub_cooldown)


def test_slot_mapping_round_trip():
    for connected in (True, False):
        for k in range(ACTIONS_PER_LINE):
            a = line_action(4, k, connected)
            assert action_index(a) == k
            assert (a.kind == ActionKind.NOOP) == (k == 0)


def test_state_arrays_read_only(case14):
    s = case14.initial_state()
    with pytest.raises(ValueError):
        s.line_or_bus[0] = 2


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_random_action_sequences_keep_invariants(seed, n):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, int(rng.integers(2, 8)), int(rng.integers(1, 12)))
    s = g.initial_state()
    for _ in range(n):
        line = int(rng.integers(g.n_line))
        acts = legal_actions(g, s, line)
        assert acts[0] == NOOP and len(acts) <= ACTIONS_PER_LINE
        a = acts[int(rng.integers(len(acts)))]
        assert is_legal(g, s, a)
        nxt = apply_action(s, a, g)
        nxt.check_invariants()
        # frame property: at most one line's endpoints change
        diff = np.flatnonzero((nxt.line_or_bus != s.line_or_bus) | (nxt.line_ex_bus != s.line_ex_bus))
        assert len(diff) <= 1
        assert len(np.flatnonzero(nxt.sub_cooldown != s.sub_cooldown)) <= 1
        if rng.random() < 0.2:
            nxt = disconnect_lines(nxt, np.array([int(rng.integers(g.n_line))]))
        if rng.random() < 0.5:
            nxt = nxt.replace(sub_cooldown=np.maximum(nxt.sub_cooldown - 1, 0).astype(np.int32),
                              line_cooldown=np.maximum(nxt.line_cooldown - 1, 0).astype(np.int32))
        nxt.check_invariants()
        s = nxt
