import functools

import pytest
from hypothesis import given, settings, strategies as st

from conftest import EXAMPLE_HEADS, EXAMPLE_WORDS
from dtg.errors import IllegalTransition, IncompleteParse, NonProjective
from dtg.transitions import (END, GEN, LA, POP, RA, System, Transition, _apply, _completable,
                             _local_ok, extract_oracle, format_transitions, hybrid_equals_standard,
                             initial_state, is_terminal, legal_moves, legal_transitions,
                             parse_transitions, random_rollout, replay, replay_states)
from dtg.treebank import DepTree, Token, enumerate_projective_trees, random_projective_tree

SYSTEMS = list(System)
EXAMPLE = DepTree.from_forms(EXAMPLE_WORDS, EXAMPLE_HEADS)


def line(system, tree):
    return format_transitions(extract_oracle(system, tree), system)


def test_example_arc_standard():
    assert line("arc-standard", EXAMPLE) == "GEN:There GEN:is LA GEN:a GEN:difference LA RA RA"


def test_example_arc_eager():
    assert line("arc-eager", EXAMPLE) == "GEN:There GEN:is LA RA GEN:a GEN:difference LA RA POP POP POP"


def test_arc_swift_example_numbers():
    tree = DepTree.from_forms(EXAMPLE_WORDS + (".",), EXAMPLE_HEADS + (2,))
    seq = extract_oracle("arc-swift", tree)
    assert [t.k for t in seq if t.kind in (LA, RA)] == [1, 1, 1, 1, 2]
    assert seq[-1] == Transition(RA, k=2)


def test_single_token():
    hi = DepTree.from_forms(["Hi"], [0])
    assert line("arc-standard", hi) == "GEN:Hi RA"
    assert replay("arc-standard", extract_oracle("arc-standard", hi)).heads == (0,)


def test_la_on_root_is_illegal():
    seq = [Transition(GEN, Token("a")), Transition(LA)]
    with pytest.raises(IllegalTransition) as e:
        replay("arc-standard", seq)
    assert e.value.index == 1


def test_incomplete_parse():
    with pytest.raises(IncompleteParse):
        replay("arc-standard", [Transition(GEN, Token("a"))])


def test_nonprojective_oracle_input():
    bad = DepTree.__new__(DepTree)
    object.__setattr__(bad, "tokens", tuple(Token(f"w{i}") for i in range(4)))
    object.__setattr__(bad, "heads", (3, 4, 0, 3))
    with pytest.raises(NonProjective):
        extract_oracle("arc-standard", bad)


@pytest.mark.parametrize("system", SYSTEMS)
def test_round_trip_enumeration_n5(system):
    for n in range(1, 6):
        for t in enumerate_projective_trees(n):
            assert replay(system, extract_oracle(system, t)).heads == t.heads


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(SYSTEMS), st.integers(1, 30), st.integers(0, 10**6))
def test_round_trip_random(system, n, seed):
    t = random_projective_tree(n, seed)
    assert replay(system, extract_oracle(system, t)).heads == t.heads


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10**6))
def test_length_laws(n, seed):
    t = random_projective_tree(n, seed)
    std = extract_oracle("arc-standard", t)
    assert len(std) == 2 * n
    assert sum(x.kind == GEN for x in std) == n
    eager = extract_oracle("arc-eager", t)
    n_ra = sum(x.kind == RA for x in eager)
    n_pop = sum(x.kind == POP for x in eager)
    assert sum(x.kind == GEN for x in eager) == n
    assert sum(x.kind in (LA, RA) for x in eager) == n
    # every right dependent and finally ROOT leave the stack by POP
    assert n_pop == n_ra + 1
    assert len(eager) == 2 * n + n_ra + 1 <= 3 * n + 1


@pytest.mark.parametrize("system", SYSTEMS)
def test_oracle_moves_are_legal(system):
    for n in range(1, 6):
        for t in enumerate_projective_trees(n):
            for s, tr, _ in replay_states(system, extract_oracle(system, t)):
                left = n - s.n_generated
                assert tr.move in legal_moves(system, s)
                assert tr.move in legal_moves(system, s, words_left=left, exact=True, canonical=True)


def _all_canonical(system, n):
    """Depth-first enumeration of every canonical legal sequence over exactly n words."""
    out, dead = [], []

    def go(s, seq):
        moves = legal_moves(system, s, words_left=n - s.n_generated, exact=True, canonical=True)
        if not moves:
            dead.append(seq)
        for mv in moves:
            if mv[0] == END:
                out.append(s.heads)
            else:
                go(_apply(system, s, mv)[0], seq + [mv])

    go(initial_state(), [])
    return out, dead


@pytest.mark.parametrize("system", SYSTEMS)
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_canonical_sequences_biject_with_trees(system, n):
    heads, dead = _all_canonical(system, n)
    assert not dead
    assert sorted(heads) == [t.heads for t in enumerate_projective_trees(n)]


def _brute_completable(system, s, words_left, exact):
    @functools.lru_cache(maxsize=None)
    def go(s, left, depth):
        if depth > 6 * 8:
            return False
        if _local_ok(system, s, (END, None)) is None and (not exact or left == 0):
            return True
        cands = [(GEN, None), (LA, None), (RA, None), (POP, None)]
        if system is System.ARC_SWIFT:
            cands = [(GEN, None)] + [(k_, k) for k in range(1, len(s.stack) + 1) for k_ in (LA, RA)]
        for mv in cands:
            if _local_ok(system, s, mv) is not None:
                continue
            if mv[0] == GEN and left <= 0:
                continue
            if go(_apply(system, s, mv)[0], left - (mv[0] == GEN), depth + 1):
                return True
        return False

    return go(s, words_left, 0)


@pytest.mark.parametrize("system", SYSTEMS)
def test_closed_form_completability_matches_search(system):
    checked = 0
    for seed in range(150):
        n = 1 + seed % 5
        seq = random_rollout(system, n, seed, exact=True)
        s = initial_state()
        for t in seq:
            for left in range(0, 3):
                for exact in (False, True):
                    assert _completable(system, s, left, exact) == _brute_completable(system, s, left, exact)
                    checked += 1
            s = _apply(system, s, t.move)[0]
    assert checked > 1000


def test_legal_set_examples():
    s0 = initial_state()
    assert {m[0] for m in legal_transitions("arc-standard", s0, False)} == {GEN}
    # arc-eager: stack top without a head cannot be popped
    s = s0
    for mv in [(GEN, None), (GEN, None)]:
        s = _apply(System.ARC_EAGER, s, mv)[0]
    assert not s.has_head(s.stack[-1])
    assert POP not in {m[0] for m in legal_moves("arc-eager", s)}
    # generation done forbids GEN
    assert all(m[0] != GEN for m in legal_transitions("arc-eager", s, True))


def test_swift_k_bounded_by_stack():
    s = initial_state()
    for _ in range(3):
        s = _apply(System.ARC_SWIFT, s, (GEN, None))[0]
    ks = {m[1] for m in legal_moves("arc-swift", s) if m[0] in (LA, RA)}
    assert ks and max(ks) <= len(s.stack)


@pytest.mark.parametrize("seed", range(40))
def test_swift_rollout_round_trip(seed):
    seq = random_rollout("arc-swift", 1 + seed % 20, seed)
    assert len(seq) <= 60
    tree = replay("arc-swift", seq)
    assert replay("arc-swift", extract_oracle("arc-swift", tree)) == tree


@pytest.mark.parametrize("system", SYSTEMS)
def test_text_round_trip(system):
    for seed in range(30):
        t = random_projective_tree(1 + seed % 12, seed)
        t = DepTree.from_forms([f"w{i}" for i in range(t.n)], t.heads)
        text = format_transitions(extract_oracle(system, t), system)
        back = parse_transitions(text, system)
        assert format_transitions(back, system) == text
        assert replay(system, back).heads == t.heads


def test_parse_errors():
    with pytest.raises(IllegalTransition):
        parse_transitions("GEN:a LA:2", "arc-standard")
    with pytest.raises(IllegalTransition):
        parse_transitions("GEN: RA", "arc-standard")
    with pytest.raises(IllegalTransition):
        parse_transitions("SHIFT", "arc-eager")


def test_hybrid_equals_standard_exhaustive():
    assert hybrid_equals_standard(EXAMPLE)
    assert hybrid_equals_standard(DepTree.from_forms(["Hi"], [0]))
    for n in range(1, 6):
        assert all(hybrid_equals_standard(t) for t in enumerate_projective_trees(n))


def test_deterministic():
    for s in SYSTEMS:
        assert line(s, EXAMPLE) == line(s, EXAMPLE)


def test_terminal_state():
    s = initial_state()
    assert not is_terminal("arc-standard", s)
    for t in extract_oracle("arc-standard", EXAMPLE):
        s = _apply(System.ARC_STANDARD, s, t.move)[0]
    assert is_terminal("arc-standard", s)


def test_transition_validation():
    with pytest.raises(ValueError):
        Transition(GEN)
    with pytest.raises(ValueError):
        Transition(POP, k=1)
    with pytest.raises(ValueError):
        Transition(LA, k=0)
    with pytest.raises(ValueError):
        Transition("SHIFT")
