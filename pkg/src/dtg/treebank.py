"""Unlabeled projective dependency trees: ingestion, validation, enumeration.

Trees are 1-indexed with ``heads[i-1]`` holding the head of token ``i`` and
0 standing for the artificial ROOT.
"""
from __future__ import annotations

import io
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence, TextIO

from .errors import (
    CycleDetected,
    HeadOutOfRange,
    MalformedLine,
    MultipleRoots,
    NonIntegerHead,
    NonProjective,
    TooLarge,
    UnknownForm,
)

log = logging.getLogger(__name__)

RESERVED = ("<ROOT>", "<END>", "LA", "RA", "LA2", "RA2", "POP", "<UNK>")
ROOT_ID, END_ID, LA_ID, RA_ID, LA2_ID, RA2_ID, POP_ID, UNK_ID = range(len(RESERVED))
NUM_RESERVED = len(RESERVED)

MAX_ENUM_N = 10

Tokenizer = Callable[[str], Sequence[str]]


def identity_tokenizer(form: str) -> list[str]:
    return [form]


class Vocabulary:
    """Bidirectional form<->id map; lexical ids start after the reserved block."""

    def __init__(self, forms: Iterable[str] = ()):
        self._forms: list[str] = []
        self._ids: dict[str, int] = {}
        for f in forms:
            self.add(f)

    def add(self, form: str) -> int:
        if form in RESERVED:
            raise ValueError(f"{form!r} collides with a reserved symbol")
        if form not in self._ids:
            self._ids[form] = NUM_RESERVED + len(self._forms)
            self._forms.append(form)
        return self._ids[form]

    @classmethod
    def build(cls, counts: Counter, min_freq: int = 1) -> "Vocabulary":
        keep = [f for f, c in counts.items() if c >= min_freq and f not in RESERVED]
        return cls(sorted(keep))

    def __len__(self) -> int:
        return NUM_RESERVED + len(self._forms)

    def __contains__(self, form: str) -> bool:
        return form in self._ids or form in RESERVED

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._forms == other._forms

    @property
    def lexical_forms(self) -> list[str]:
        return list(self._forms)

    def id(self, form: str, allow_unk: bool = True) -> int:
        if form in self._ids:
            return self._ids[form]
        if form in RESERVED:
            return RESERVED.index(form)
        if allow_unk:
            return UNK_ID
        raise UnknownForm(form)

    def form(self, idx: int) -> str:
        if idx < NUM_RESERVED:
            return RESERVED[idx]
        return self._forms[idx - NUM_RESERVED]

    def save(self, stream: TextIO) -> None:
        for f in self._forms:
            stream.write(f + "\n")

    @classmethod
    def load(cls, stream: TextIO) -> "Vocabulary":
        return cls(line.rstrip("\r\n") for line in stream if line.rstrip("\r\n"))


@dataclass(frozen=True)
class Token:
    form: str
    subtokens: tuple[int, ...] = (UNK_ID,)

    def __post_init__(self):
        if not self.subtokens:
            raise ValueError(f"token {self.form!r} has no subtokens")

    @property
    def last_subtoken(self) -> int:
        return self.subtokens[-1]


@dataclass(frozen=True)
class DepTree:
    tokens: tuple[Token, ...]
    heads: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.tokens) != len(self.heads):
            raise ValueError("tokens and heads differ in length")
        if not self.heads:
            raise ValueError("empty tree")
        check_tree(self.heads)
        if not is_projective(self.heads):
            raise NonProjective(f"heads {list(self.heads)} are not projective")

    @classmethod
    def skeleton(cls, heads: Sequence[int]) -> "DepTree":
        return cls(tuple(Token(f"w{i + 1}") for i in range(len(heads))), tuple(heads))

    @classmethod
    def from_forms(cls, forms: Sequence[str], heads: Sequence[int],
                   vocab: Vocabulary | None = None,
                   tokenizer: Tokenizer = identity_tokenizer) -> "DepTree":
        return cls(tuple(make_token(f, vocab, tokenizer) for f in forms), tuple(heads))

    @property
    def n(self) -> int:
        return len(self.heads)

    @property
    def forms(self) -> tuple[str, ...]:
        return tuple(t.form for t in self.tokens)

    def with_heads(self, heads: Sequence[int]) -> "DepTree":
        return DepTree(self.tokens, tuple(heads))

    def dependents(self, h: int) -> list[int]:
        return [i + 1 for i, x in enumerate(self.heads) if x == h]


def make_token(form: str, vocab: Vocabulary | None, tokenizer: Tokenizer = identity_tokenizer,
               allow_unk: bool = True) -> Token:
    pieces = list(tokenizer(form))
    if not pieces:
        raise UnknownForm(f"tokenizer produced no subtokens for {form!r}")
    if vocab is None:
        return Token(form, tuple(UNK_ID for _ in pieces))
    return Token(form, tuple(vocab.id(p, allow_unk=allow_unk) for p in pieces))


@dataclass
class Corpus:
    sentences: list[DepTree]
    vocabulary: Vocabulary = field(default_factory=Vocabulary)

    def __len__(self) -> int:
        return len(self.sentences)


# ---------------------------------------------------------------- validation

def check_tree(heads: Sequence[int]) -> None:
    """Raise unless ``heads`` is a single-rooted tree over tokens 1..n."""
    n = len(heads)
    for i, h in enumerate(heads, start=1):
        if not 0 <= h <= n:
            raise HeadOutOfRange(f"token {i} has head {h} outside 0..{n}")
        if h == i:
            raise CycleDetected(f"token {i} is its own head")
    state = [0] * (n + 1)  # 0 unseen, 1 on path, 2 reaches root
    state[0] = 2
    for start in range(1, n + 1):
        path = []
        v = start
        while state[v] == 0:
            state[v] = 1
            path.append(v)
            v = heads[v - 1]
        if state[v] == 1:
            raise CycleDetected(f"cycle through token {v}")
        for p in path:
            state[p] = 2
    roots = sum(1 for h in heads if h == 0)
    if roots != 1:
        raise MultipleRoots(f"{roots} tokens attach to ROOT")


def is_projective(tree) -> bool:
    """True iff every token strictly inside an arc's span descends from its head."""
    heads = tree.heads if isinstance(tree, DepTree) else tuple(tree)
    n = len(heads)

    def dominates(h: int, d: int) -> bool:
        while d != 0:
            d = heads[d - 1]
            if d == h:
                return True
        return h == 0

    for d in range(1, n + 1):
        h = heads[d - 1]
        lo, hi = min(h, d), max(h, d)
        for k in range(lo + 1, hi):
            if not dominates(h, k):
                return False
    return True


def normalize_roots(heads: Sequence[int]) -> tuple[int, ...]:
    """Reattach every extra ROOT dependent to the leftmost one."""
    roots = [i + 1 for i, h in enumerate(heads) if h == 0]
    if len(roots) <= 1:
        return tuple(heads)
    first = roots[0]
    return tuple(first if (h == 0 and i + 1 != first) else h for i, h in enumerate(heads))


# ---------------------------------------------------------------- CoNLL I/O

@dataclass
class RawSentence:
    forms: list[str]
    heads: list[int]
    comments: list[str]
    line_no: int


def read_blocks(stream: TextIO) -> list[RawSentence]:
    """Split a CoNLL-X/U style stream into raw (forms, heads) blocks."""
    out: list[RawSentence] = []
    forms: list[str] = []
    heads: list[int] = []
    comments: list[str] = []
    start = 0

    def flush():
        nonlocal forms, heads, comments
        if forms:
            out.append(RawSentence(forms, heads, comments, start))
        elif comments:
            # comments directly preceding a blank line belong to the next block
            return
        forms, heads, comments = [], [], []

    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            if not forms:
                start = line_no
            comments.append(line[1:].strip())
            continue
        cols = line.split("\t") if "\t" in line else line.split()
        if len(cols) >= 7:
            idx, form, head = cols[0], cols[1], cols[6]
        elif len(cols) == 3:
            idx, form, head = cols
        else:
            raise MalformedLine(f"line {line_no}: expected 3 or >=7 columns, got {len(cols)}")
        if "-" in idx or "." in idx:
            continue  # multiword ranges and empty nodes carry no tree arcs
        if not forms:
            start = line_no
        try:
            i = int(idx)
        except ValueError:
            raise MalformedLine(f"line {line_no}: non-integer ID {idx!r}") from None
        if i != len(forms) + 1:
            raise MalformedLine(f"line {line_no}: ID {i} out of sequence")
        try:
            h = int(head)
        except ValueError:
            raise NonIntegerHead(f"line {line_no}: head {head!r}") from None
        forms.append(form)
        heads.append(h)
    flush()
    return out


def validate_block(raw: RawSentence) -> tuple[int, ...]:
    """Check a raw block; returns heads normalized to a single ROOT dependent."""
    heads = list(raw.heads)
    n = len(heads)
    for i, h in enumerate(heads, start=1):
        if not 0 <= h <= n:
            raise HeadOutOfRange(f"sentence at line {raw.line_no}: token {i} head {h}")
    try:
        check_tree(heads)
    except MultipleRoots:
        fixed = normalize_roots(heads)
        if fixed == tuple(heads):
            raise CycleDetected(f"sentence at line {raw.line_no}: no token attaches to ROOT") from None
        heads = list(fixed)
        log.warning("sentence at line %d: multiple ROOT dependents merged", raw.line_no)
        check_tree(heads)
    if not is_projective(heads):
        raise NonProjective(f"sentence at line {raw.line_no} is non-projective")
    return tuple(heads)


def parse_conllu(stream: TextIO | str, *, min_freq: int = 1, strict: bool = False,
                 vocab: Vocabulary | None = None,
                 tokenizer: Tokenizer = identity_tokenizer) -> Corpus:
    """Read a treebank. Non-projective sentences are skipped unless ``strict``."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    kept: list[tuple[list[str], tuple[int, ...]]] = []
    for raw in read_blocks(stream):
        try:
            heads = validate_block(raw)
        except NonProjective:
            if strict:
                raise
            log.warning("skipping non-projective sentence at line %d", raw.line_no)
            continue
        kept.append((raw.forms, heads))
    if vocab is None:
        counts = Counter(p for forms, _ in kept for f in forms for p in tokenizer(f))
        vocab = Vocabulary.build(counts, min_freq)
    trees = [DepTree.from_forms(forms, heads, vocab, tokenizer) for forms, heads in kept]
    return Corpus(trees, vocab)


def format_conllu(tree: DepTree, comments: Sequence[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    for i, (tok, h) in enumerate(zip(tree.tokens, tree.heads), start=1):
        lines.append(f"{i}\t{tok.form}\t_\t_\t_\t_\t{h}\t_\t_\t_")
    return "\n".join(lines) + "\n"


def write_conllu(trees: Iterable[DepTree], stream: TextIO) -> None:
    for t in trees:
        stream.write(format_conllu(t))
        stream.write("\n")


# ---------------------------------------------------------------- enumeration

@lru_cache(maxsize=None)
def _count_single(n: int) -> int:
    # trees over a span of length n with one head of the span
    return sum(_count_forest(r) * _count_forest(n - 1 - r) for r in range(n))


@lru_cache(maxsize=None)
def _count_forest(n: int) -> int:
    # sequences of consecutive single-headed subtrees covering a span of length n
    if n == 0:
        return 1
    return sum(_count_single(m) * _count_forest(n - m) for m in range(1, n + 1))


def count_projective_trees(n: int) -> int:
    """Number of projective trees over n tokens with exactly one ROOT dependent."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _count_single(n)


def _single_trees(lo: int, hi: int):
    """Yield (root, {dep: head}) for every single-headed projective tree on lo..hi."""
    for r in range(lo, hi + 1):
        for left in _forests(lo, r - 1):
            for right in _forests(r + 1, hi):
                arcs = {}
                for roots, sub in (left, right):
                    arcs.update(sub)
                    for x in roots:
                        arcs[x] = r
                yield r, arcs


def _forests(lo: int, hi: int):
    """Yield (roots, arcs) covering lo..hi by consecutive single-headed subtrees."""
    if lo > hi:
        yield (), {}
        return
    for m in range(lo, hi + 1):
        for root, arcs in _single_trees(lo, m):
            for roots, rest in _forests(m + 1, hi):
                merged = dict(arcs)
                merged.update(rest)
                yield (root,) + roots, merged


def enumerate_projective_trees(n: int, cap: int = 100_000) -> list[DepTree]:
    """All single-root projective skeletons over n tokens, sorted by heads."""
    if not 1 <= n <= MAX_ENUM_N:
        raise TooLarge(f"enumeration guarded to 1 <= n <= {MAX_ENUM_N}, got {n}")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    total = count_projective_trees(n)
    if total > cap:
        raise TooLarge(f"{total} trees for n={n} exceed cap {cap}")
    out = set()
    for root, arcs in _single_trees(1, n):
        arcs = dict(arcs)
        arcs[root] = 0
        out.add(tuple(arcs[i] for i in range(1, n + 1)))
    return [DepTree.skeleton(h) for h in sorted(out)]


def _sample_single(lo: int, hi: int, rng: random.Random, heads: dict, head: int) -> None:
    n = hi - lo + 1
    pick = rng.randrange(_count_single(n))
    for r in range(lo, hi + 1):
        w = _count_forest(r - lo) * _count_forest(hi - r)
        if pick < w:
            heads[r] = head
            _sample_forest(lo, r - 1, rng, heads, r)
            _sample_forest(r + 1, hi, rng, heads, r)
            return
        pick -= w
    raise AssertionError("unreachable")


def _sample_forest(lo: int, hi: int, rng: random.Random, heads: dict, head: int) -> None:
    while lo <= hi:
        n = hi - lo + 1
        pick = rng.randrange(_count_forest(n))
        for m in range(1, n + 1):
            w = _count_single(m) * _count_forest(n - m)
            if pick < w:
                _sample_single(lo, lo + m - 1, rng, heads, head)
                lo += m
                break
            pick -= w


def random_projective_tree(n: int, seed: int) -> DepTree:
    """Uniform sample over single-root projective trees (exact for every n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    heads: dict[int, int] = {}
    _sample_single(1, n, rng, heads, 0)
    return DepTree.skeleton([heads[i] for i in range(1, n + 1)])


# ---------------------------------------------------------------- subwords

@dataclass(frozen=True)
class SubwordAlignment:
    tree: DepTree
    spans: tuple[tuple[int, int], ...]  # inclusive 1-based subtoken span per word


def subword_align(tree: DepTree, tokenizer: Tokenizer = identity_tokenizer,
                  vocab: Vocabulary | None = None, allow_unk: bool = True) -> SubwordAlignment:
    """Re-express a word-level tree over subtokens.

    Inter-word arcs connect the last subtokens of the two words; every
    non-final subtoken attaches to its own word's last subtoken.
    """
    spans = []
    pieces: list[str] = []
    for tok in tree.tokens:
        parts = list(tokenizer(tok.form))
        if not parts:
            raise UnknownForm(f"tokenizer produced no subtokens for {tok.form!r}")
        start = len(pieces) + 1
        pieces.extend(parts)
        spans.append((start, len(pieces)))
    heads = [0] * len(pieces)
    for w, (a, b) in enumerate(spans):
        h = tree.heads[w]
        heads[b - 1] = 0 if h == 0 else spans[h - 1][1]
        for s in range(a, b):
            heads[s - 1] = b
    toks = tuple(
        Token(p, (vocab.id(p, allow_unk=allow_unk),) if vocab is not None else (UNK_ID,))
        for p in pieces
    )
    return SubwordAlignment(DepTree(toks, tuple(heads)), tuple(spans))


def collapse_subwords(aligned: SubwordAlignment, join: str = "") -> DepTree:
    """Inverse of :func:`subword_align` at the word level."""
    word_of = {}
    for w, (a, b) in enumerate(aligned.spans, start=1):
        for s in range(a, b + 1):
            word_of[s] = w
    heads = []
    toks = []
    for a, b in aligned.spans:
        h = aligned.tree.heads[b - 1]
        heads.append(0 if h == 0 else word_of[h])
        parts = aligned.tree.tokens[a - 1:b]
        toks.append(Token(join.join(t.form for t in parts),
                          tuple(t.subtokens[0] for t in parts)))
    return DepTree(tuple(toks), tuple(heads))
