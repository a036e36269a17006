import io
import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from conftest import EXAMPLE_CONLL, EXAMPLE_HEADS, EXAMPLE_WORDS
from dtg.errors import (CycleDetected, HeadOutOfRange, MalformedLine, MultipleRoots,
                        NonIntegerHead, NonProjective, TooLarge, UnknownForm)
from dtg.treebank import (NUM_RESERVED, RESERVED, DepTree, Vocabulary, check_tree,
                          collapse_subwords, count_projective_trees, enumerate_projective_trees,
                          format_conllu, is_projective, parse_conllu, random_projective_tree,
                          subword_align, write_conllu)
from oracles import all_head_assignments, brute_force_trees, chi_square_sf, crossing_free, is_tree


def test_example_block():
    c = parse_conllu(EXAMPLE_CONLL)
    assert len(c) == 1
    t = c.sentences[0]
    assert t.heads == EXAMPLE_HEADS
    assert t.forms == EXAMPLE_WORDS


def test_three_column_lines_and_crlf():
    c = parse_conllu("1 Hi 0\r\n")
    assert c.sentences[0].heads == (0,)


def test_comments_and_multiword_ranges_skipped():
    text = "# sent_id = 1\n1-2\tThere's\t_\t_\t_\t_\t_\t_\t_\t_\n" + EXAMPLE_CONLL + "\n"
    assert parse_conllu(text).sentences[0].heads == EXAMPLE_HEADS


def test_reserved_block_order():
    assert RESERVED == ("<ROOT>", "<END>", "LA", "RA", "LA2", "RA2", "POP", "<UNK>")
    v = Vocabulary(["b", "a"])
    assert v.id("b") == NUM_RESERVED and v.id("a") == NUM_RESERVED + 1
    assert v.id("zzz") == RESERVED.index("<UNK>")
    with pytest.raises(UnknownForm):
        v.id("zzz", allow_unk=False)
    with pytest.raises(ValueError):
        v.add("<END>")


def test_vocab_file_round_trip():
    v = Vocabulary(["x", "y", "z"])
    buf = io.StringIO()
    v.save(buf)
    assert Vocabulary.load(io.StringIO(buf.getvalue())) == v


def test_min_freq_threshold():
    c = parse_conllu(EXAMPLE_CONLL + "\n" + "1\tis\t_\t_\t_\t_\t0\t_\t_\t_\n", min_freq=2)
    assert c.vocabulary.lexical_forms == ["is"]
    assert c.sentences[0].tokens[0].subtokens == (RESERVED.index("<UNK>"),)


@pytest.mark.parametrize("text,err", [
    ("1\tHi\n", MalformedLine),
    ("1\tHi\t_\t_\t_\t_\tx\t_\t_\t_\n", NonIntegerHead),
    ("1\tHi\t_\t_\t_\t_\t3\t_\t_\t_\n", HeadOutOfRange),
    ("1 a 2\n2 b 1\n", CycleDetected),
    ("2 a 0\n", MalformedLine),
])
def test_malformed_input(text, err):
    with pytest.raises(err):
        parse_conllu(text)


def test_injected_defect_on_token3():
    bad = EXAMPLE_CONLL.replace("3\ta\t_\t_\t_\t_\t4", "3\ta\t_\t_\t_\t_\t5")
    with pytest.raises(HeadOutOfRange):
        parse_conllu(bad)
    cyc = EXAMPLE_CONLL.replace("3\ta\t_\t_\t_\t_\t4", "3\ta\t_\t_\t_\t_\t3")
    with pytest.raises(CycleDetected):
        parse_conllu(cyc)


def test_nonprojective_skip_or_reject():
    text = "1 a 3\n2 b 4\n3 c 0\n4 d 3\n"
    assert len(parse_conllu(text)) == 0
    with pytest.raises(NonProjective):
        parse_conllu(text, strict=True)


def test_multiple_roots_normalized():
    c = parse_conllu("1 a 0\n2 b 0\n3 c 2\n")
    assert c.sentences[0].heads == (0, 1, 2)
    with pytest.raises(MultipleRoots):
        check_tree([0, 0])


def test_all_4_to_the_4_assignments_against_brute_force():
    for h in all_head_assignments(4):
        try:
            check_tree(h)
            valid = True
        except (CycleDetected, MultipleRoots, HeadOutOfRange):
            valid = False
        assert valid == is_tree(h), h
        if valid:
            assert is_projective(h) == crossing_free(h), h


def test_is_projective_matches_crossing_oracle_up_to_6():
    for n in range(1, 7):
        for h in all_head_assignments(n):
            if any(h[i] == i + 1 for i in range(n)) or not is_tree(h):
                continue
            assert is_projective(h) == crossing_free(h)


def test_projective_examples():
    assert is_projective(EXAMPLE_HEADS)
    assert is_projective((0,))


def test_enumeration_small_cases():
    assert [t.heads for t in enumerate_projective_trees(1)] == [(0,)]
    assert sorted(t.heads for t in enumerate_projective_trees(2)) == [(0, 1), (2, 0)]


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_enumeration_equals_brute_force_filter(n):
    got = [t.heads for t in enumerate_projective_trees(n)]
    assert got == brute_force_trees(n)
    assert len(got) == count_projective_trees(n)


def test_counts_strictly_increasing():
    counts = [count_projective_trees(n) for n in range(1, 9)]
    assert counts[:7] == [1, 2, 7, 30, 143, 728, 3876]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_enumeration_guards():
    with pytest.raises(TooLarge):
        enumerate_projective_trees(11)
    with pytest.raises(TooLarge):
        enumerate_projective_trees(5, cap=100)
    assert enumerate_projective_trees(4) == enumerate_projective_trees(4)


def test_random_tree_uniform_chi_square():
    trees = [t.heads for t in enumerate_projective_trees(4)]
    freq = Counter(random_projective_tree(4, s).heads for s in range(10000))
    assert set(freq) == set(trees)
    exp = 10000 / len(trees)
    stat = sum((freq[t] - exp) ** 2 / exp for t in trees)
    assert chi_square_sf(stat, len(trees) - 1) > 0.01


def test_random_tree_examples():
    assert random_projective_tree(1, 3).heads == (0,)
    t = random_projective_tree(30, 7)
    assert is_projective(t) and t.heads.count(0) == 1
    assert random_projective_tree(30, 7) == t


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10**6))
def test_random_trees_valid(n, seed):
    h = random_projective_tree(n, seed).heads
    assert is_tree(h) and crossing_free(h)


def test_subword_identity():
    t = DepTree.from_forms(EXAMPLE_WORDS, EXAMPLE_HEADS)
    a = subword_align(t)
    assert a.tree.heads == EXAMPLE_HEADS
    assert a.spans == ((1, 1), (2, 2), (3, 3), (4, 4))


def test_subword_split_difference():
    tok = lambda f: ["diff", "erence"] if f == "difference" else [f]
    a = subword_align(DepTree.from_forms(EXAMPLE_WORDS, EXAMPLE_HEADS), tok)
    forms = [x.form for x in a.tree.tokens]
    assert forms == ["There", "is", "a", "diff", "erence"]
    assert a.tree.heads[2] == 5        # a -> erence
    assert a.tree.heads[3] == 5        # diff -> erence
    assert a.tree.heads[4] == 2        # erence -> is


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6))
def test_subword_collapse_round_trip(n, seed):
    rng = random.Random(seed)
    tree = random_projective_tree(n, seed)
    tree = DepTree.from_forms([f"w{i}x{rng.randint(1, 9)}" for i in range(n)], tree.heads)
    cuts = {}

    def tokenizer(form):
        k = cuts.setdefault(form, rng.randint(1, len(form) - 1))
        return [form[:k], form[k:]]

    a = subword_align(tree, tokenizer)
    assert is_projective(a.tree)
    back = collapse_subwords(a)
    assert back.heads == tree.heads and back.forms == tree.forms


def test_subword_empty_tokenizer():
    with pytest.raises(UnknownForm):
        subword_align(DepTree.from_forms(["a"], [0]), lambda f: [])


def test_conll_round_trip_fixed_vocab():
    trees = [random_projective_tree(n, n) for n in range(1, 9)]
    trees = [DepTree.from_forms([f"t{i}" for i in range(t.n)], t.heads) for t in trees]
    buf = io.StringIO()
    write_conllu(trees, buf)
    c1 = parse_conllu(buf.getvalue())
    buf2 = io.StringIO()
    write_conllu(c1.sentences, buf2)
    c2 = parse_conllu(buf2.getvalue(), vocab=c1.vocabulary)
    assert buf.getvalue() == buf2.getvalue()
    assert [t.heads for t in c2.sentences] == [t.heads for t in trees]
    assert c2.sentences == c1.sentences


def test_deptree_rejects_invalid():
    with pytest.raises(NonProjective):
        DepTree.skeleton((3, 4, 0, 3))
    with pytest.raises(MultipleRoots):
        DepTree.skeleton((0, 0))


def test_format_conllu_columns():
    line = format_conllu(DepTree.from_forms(["Hi"], [0])).splitlines()[0]
    assert line.split("\t")[1] == "Hi" and line.split("\t")[6] == "0" and len(line.split("\t")) == 10
