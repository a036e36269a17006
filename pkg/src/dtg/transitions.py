"""Generative transition systems over unlabeled projective trees.

Four systems are supported. Arc-standard keeps every generated token on the
stack. Arc-eager, arc-swift and arc-hybrid keep the most recently generated
token in a one-slot buffer until the next GEN shifts it; arcs that involve
that token read it from the buffer.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from .errors import IllegalTransition, IncompleteParse, NonProjective, OracleStuck
from .treebank import DepTree, Token, Vocabulary, is_projective, make_token

GEN, LA, RA, POP, END = "GEN", "LA", "RA", "POP", "END"


class System(str, Enum):
    ARC_STANDARD = "arc-standard"
    ARC_EAGER = "arc-eager"
    ARC_SWIFT = "arc-swift"
    ARC_HYBRID = "arc-hybrid"

    @classmethod
    def parse(cls, value: "System | str") -> "System":
        if isinstance(value, System):
            return value
        v = value.strip().lower().replace("_", "-")
        for s in cls:
            if v in (s.value, s.value.replace("arc-", ""), s.name.lower().replace("_", "-")):
                return s
        raise ValueError(f"unknown transition system {value!r}")

    @property
    def uses_buffer(self) -> bool:
        return self is not System.ARC_STANDARD


@dataclass(frozen=True)
class Transition:
    kind: str
    token: Token | None = None
    k: int | None = None

    def __post_init__(self):
        if self.kind not in (GEN, LA, RA, POP):
            raise ValueError(f"unknown transition kind {self.kind!r}")
        if (self.kind == GEN) != (self.token is not None):
            raise ValueError("GEN carries a token; other transitions do not")
        if self.k is not None and (self.kind not in (LA, RA) or self.k < 1):
            raise ValueError(f"bad arc number {self.k} on {self.kind}")

    @property
    def move(self) -> tuple[str, int | None]:
        return (self.kind, self.k)

    def __str__(self) -> str:
        if self.kind == GEN:
            return f"GEN:{self.token.form}"
        if self.k is not None:
            return f"{self.kind}:{self.k}"
        return self.kind


Move = tuple  # (kind, k) with kind in GEN/LA/RA/POP/END


@dataclass(frozen=True)
class ParserState:
    stack: tuple[int, ...] = (0,)
    buffer: int | None = None
    heads: tuple[int, ...] = ()  # per generated token, -1 while unattached
    root_has_dep: bool = False
    root_popped: bool = False
    passed: frozenset = field(default_factory=frozenset)
    pop_debt: int = 0  # arc-eager canonical form, see _EAGER_DEBT_MOVES
    bare_gen: bool = False  # arc-eager: last move was GEN into an empty buffer

    @property
    def n_generated(self) -> int:
        return len(self.heads)

    def has_head(self, i: int) -> bool:
        return i != 0 and self.heads[i - 1] >= 0

    def combined(self) -> tuple[int, ...]:
        return self.stack + ((self.buffer,) if self.buffer is not None else ())


def initial_state() -> ParserState:
    return ParserState()


def _attach(heads: tuple[int, ...], dep: int, head: int) -> tuple[int, ...]:
    h = list(heads)
    h[dep - 1] = head
    return tuple(h)


# ---------------------------------------------------------------- local rules

def _local_ok(system: System, s: ParserState, move: Move) -> str | None:
    """Return None when ``move`` is allowed by the system's own rules."""
    kind, k = move
    st = s.stack
    if system is System.ARC_SWIFT:
        if kind in (LA, RA) and k is None:
            return "arc-swift arcs need an arc number"
    elif k is not None:
        return "arc numbers exist only in arc-swift"

    if system is System.ARC_STANDARD:
        if kind == GEN:
            return "ROOT already has its dependent" if s.root_has_dep else None
        if kind == LA:
            if len(st) < 3:
                return "LEFTARC needs two tokens above ROOT"
            return None
        if kind == RA:
            return None if len(st) >= 2 else "RIGHTARC needs two stack items"
        if kind == END:
            return None if st == (0,) and s.root_has_dep else "not terminal"
        return f"{kind} not in arc-standard"

    if system is System.ARC_HYBRID:
        if kind == GEN:
            return "ROOT already has its dependent" if s.root_has_dep else None
        if kind == LA:
            if s.buffer is None or st[-1] == 0:
                return "LEFTARC needs a buffer head and a non-ROOT stack top"
            return None
        if kind == RA:
            return None if len(s.combined()) >= 2 else "RIGHTARC needs two items"
        if kind == END:
            ok = st == (0,) and s.buffer is None and s.root_has_dep
            return None if ok else "not terminal"
        return f"{kind} not in arc-hybrid"

    if system is System.ARC_EAGER:
        if kind == GEN:
            return "stack already emptied" if s.root_popped else None
        if kind == LA:
            if s.buffer is None or not st or st[-1] == 0 or s.has_head(st[-1]):
                return "LEFTARC needs a buffer head and a headless stack top"
            return None
        if kind == RA:
            if s.buffer is None or not st or (st[-1] == 0 and s.root_has_dep):
                return "RIGHTARC needs a buffer head and a free stack top"
            return None
        if kind == POP:
            if not st:
                return "empty stack"
            if st[-1] != 0:
                return None if s.has_head(st[-1]) else "POP needs a right dependent on top"
            ok = len(st) == 1 and s.buffer is None and s.root_has_dep
            return None if ok else "ROOT pops only at the very end"
        if kind == END:
            return None if s.root_popped and s.buffer is None else "not terminal"
        return f"{kind} not in arc-eager"

    # arc-swift
    if kind == GEN:
        return None
    if kind in (LA, RA):
        if s.buffer is None:
            return "arc needs a buffer head"
        if not 1 <= k <= len(st):
            return "arc number exceeds stack size"
        target = st[-k]
        if any(not s.has_head(x) for x in st[len(st) - k + 1:]):
            return "popped tokens must already have heads"
        if kind == LA:
            if target == 0 or s.has_head(target):
                return "LEFTARC target must be a headless token"
        elif target == 0 and s.root_has_dep:
            return "ROOT already has its dependent"
        return None
    if kind == END:
        ok = (s.buffer is None and s.root_has_dep
              and all(s.has_head(x) for x in st if x != 0))
        return None if ok else "not terminal"
    return f"{kind} not in arc-swift"


def _apply(system: System, s: ParserState, move: Move, token_index: int | None = None):
    """Apply a move already known to be legal. Returns (state, arc or None)."""
    kind, k = move
    st = s.stack
    if kind == GEN:
        new = s.n_generated + 1
        heads = s.heads + (-1,)
        if system is System.ARC_STANDARD:
            passed = s.passed | {st[-1]} if len(st) >= 2 else s.passed
            return replace(s, stack=st + (new,), heads=heads, passed=passed), None
        stack = st + ((s.buffer,) if s.buffer is not None else ())
        debt = 1 if s.pop_debt == 2 else 0
        return (replace(s, stack=stack, buffer=new, heads=heads, pop_debt=debt,
                        bare_gen=s.buffer is None), None)

    if system in (System.ARC_STANDARD, System.ARC_HYBRID):
        if system is System.ARC_HYBRID and kind == RA and s.buffer is not None:
            st = st + (s.buffer,)
            s = replace(s, stack=st, buffer=None)
        if kind == LA:
            if system is System.ARC_STANDARD:
                head, dep = st[-1], st[-2]
                stack = st[:-2] + (head,)
            else:
                head, dep = s.buffer, st[-1]
                stack = st[:-1]
            return replace(s, stack=stack, heads=_attach(s.heads, dep, head)), (head, dep)
        head, dep = st[-2], st[-1]
        return (replace(s, stack=st[:-1], heads=_attach(s.heads, dep, head),
                        root_has_dep=s.root_has_dep or head == 0), (head, dep))

    if system is System.ARC_EAGER:
        if kind == LA:
            head, dep = s.buffer, st[-1]
            return (replace(s, stack=st[:-1], heads=_attach(s.heads, dep, head), pop_debt=0,
                            bare_gen=False), (head, dep))
        if kind == RA:
            head, dep = st[-1], s.buffer
            return (replace(s, stack=st + (dep,), buffer=None, heads=_attach(s.heads, dep, head),
                            root_has_dep=s.root_has_dep or head == 0, pop_debt=0, bare_gen=False),
                    (head, dep))
        # POP
        debt = 3 if s.buffer is not None else 2
        return (replace(s, stack=st[:-1], root_popped=s.root_popped or st[-1] == 0, pop_debt=debt,
                        bare_gen=False), None)

    # arc-swift
    if kind == LA:
        head, dep = s.buffer, st[-k]
        return replace(s, stack=st[:-k], heads=_attach(s.heads, dep, head)), (head, dep)
    head, dep = st[-k], s.buffer
    return (replace(s, stack=st[:len(st) - k + 1] + (dep,), buffer=None,
                    heads=_attach(s.heads, dep, head),
                    root_has_dep=s.root_has_dep or head == 0), (head, dep))


def apply(system: System | str, state: ParserState, t: Transition, index: int = 0):
    """Apply one transition; returns ``(state, arc)`` where arc is (head, dep) or None."""
    system = System.parse(system)
    why = _local_ok(system, state, t.move)
    if why is not None:
        raise IllegalTransition(index, f"{t}: {why}")
    return _apply(system, state, t.move)


# ---------------------------------------------------------------- legality

def _completable(system: System, s: ParserState, words_left: int | None, exact: bool) -> bool:
    """Can ``s`` still reach <END> generating at most/exactly ``words_left`` words?"""
    can_gen = words_left is None or words_left >= 1
    none_left = words_left is None or not exact or words_left == 0

    if system in (System.ARC_STANDARD, System.ARC_HYBRID):
        if s.root_has_dep:
            return none_left
        return len(s.combined()) >= 2 or can_gen

    if system is System.ARC_EAGER:
        if s.root_popped:
            return s.buffer is None and none_left
        if not s.root_has_dep:
            return s.buffer is not None or can_gen
        if len(s.stack) <= 1:
            return s.buffer is None and none_left
        if s.buffer is not None:
            return True
        if any(not s.has_head(x) for x in s.stack if x != 0):
            return can_gen
        return True

    # arc-swift
    if s.buffer is not None:
        return True
    if not s.root_has_dep or any(not s.has_head(x) for x in s.stack if x != 0):
        return can_gen
    return True


def _candidate_moves(system: System, s: ParserState, max_k: int | None):
    yield (GEN, None)
    if system is System.ARC_SWIFT:
        top = len(s.stack) if max_k is None else min(len(s.stack), max_k)
        for k in range(1, top + 1):
            yield (LA, k)
            yield (RA, k)
    else:
        yield (LA, None)
        yield (RA, None)
    if system is System.ARC_EAGER:
        yield (POP, None)
    yield (END, None)


def legal_moves(system: System | str, state: ParserState, *, words_left: int | None = None,
                exact: bool = False, canonical: bool = False,
                max_k: int | None = None) -> frozenset:
    """Moves allowed in ``state``.

    ``words_left`` caps (or with ``exact`` fixes) how many more tokens are
    generated; moves after which <END> becomes unreachable are excluded.
    ``canonical`` removes spurious ambiguity so that every tree has exactly
    one legal sequence. Under arc-standard it forbids LEFTARC between a pair
    that was already on top of the stack when a token was generated; under
    arc-eager a run of POPs must be followed by an arc (possibly after one
    GEN) or by <END>, so tokens are popped only when needed, and POP may not
    directly follow a GEN into an empty buffer (the two commute).
    """
    system = System.parse(system)
    out = set()
    for move in _candidate_moves(system, state, max_k):
        kind = move[0]
        if _local_ok(system, state, move) is not None:
            continue
        if kind == GEN and words_left is not None and words_left <= 0:
            continue
        if kind == END:
            if not exact or not words_left:
                out.add(move)
            continue
        if canonical and kind == LA and system is System.ARC_STANDARD and state.stack[-1] in state.passed:
            continue
        eager_canon = canonical and system is System.ARC_EAGER
        if eager_canon and not _eager_canon_allows(state, kind):
            continue
        nxt, _ = _apply(system, state, move)
        left = None if words_left is None else words_left - (kind == GEN)
        if eager_canon:
            ok = _completable_eager_canon(nxt, left, exact)
        else:
            ok = _completable(system, nxt, left, exact)
        if ok:
            out.add(move)
    return frozenset(out)


# moves allowed right after a POP run: 3 = popped with a buffer word, 2 = popped
# with an empty buffer, 1 = generated after such a run
_EAGER_DEBT_MOVES = {3: (POP, LA, RA), 2: (POP, GEN, END), 1: (LA, RA)}


def _eager_canon_allows(s: ParserState, kind: str) -> bool:
    if s.pop_debt:
        return kind in _EAGER_DEBT_MOVES[s.pop_debt]
    return not (s.bare_gen and kind == POP)


def _completable_eager_canon(s: ParserState, words_left: int | None, exact: bool) -> bool:
    """Completability for arc-eager under the canonical POP rules."""
    if s.pop_debt == 0 and not s.bare_gen:
        return _completable(System.ARC_EAGER, s, words_left, exact)
    for mv in ((POP, None), (LA, None), (RA, None), (GEN, None), (END, None)):
        if not _eager_canon_allows(s, mv[0]) or _local_ok(System.ARC_EAGER, s, mv) is not None:
            continue
        if mv[0] == END:
            if not exact or not words_left:
                return True
            continue
        if mv[0] == GEN and words_left is not None and words_left <= 0:
            continue
        left = None if words_left is None else words_left - (mv[0] == GEN)
        if _completable_eager_canon(_apply(System.ARC_EAGER, s, mv)[0], left, exact):
            return True
    return False


def legal_transitions(system: System | str, state: ParserState, generation_done: bool,
                      **kw) -> frozenset:
    """Legal move set; ``generation_done`` forbids further GEN."""
    if generation_done:
        kw["words_left"] = 0
    return legal_moves(system, state, **kw)


def is_terminal(system: System | str, state: ParserState) -> bool:
    return _local_ok(System.parse(system), state, (END, None)) is None


# ---------------------------------------------------------------- replay

def replay_states(system: System | str, seq: Sequence[Transition]):
    """Yield ``(state_before, transition, arc)`` for each step of ``seq``."""
    system = System.parse(system)
    s = initial_state()
    for i, t in enumerate(seq):
        nxt, arc = apply(system, s, t, i)
        yield s, t, arc
        s = nxt


def run(system: System | str, seq: Sequence[Transition]) -> ParserState:
    system = System.parse(system)
    s = initial_state()
    for i, t in enumerate(seq):
        s, _ = apply(system, s, t, i)
    return s


def replay(system: System | str, seq: Sequence[Transition]) -> DepTree:
    """Rebuild the tree produced by ``seq``."""
    system = System.parse(system)
    s = run(system, seq)
    if not is_terminal(system, s):
        raise IncompleteParse(f"sequence of {len(seq)} transitions stops in a non-terminal state")
    tokens = tuple(t.token for t in seq if t.kind == GEN)
    return DepTree(tokens, s.heads)


# ---------------------------------------------------------------- oracles

class _Gold:
    def __init__(self, tree: DepTree):
        if not is_projective(tree.heads):
            raise NonProjective("oracle needs a projective tree")
        self.tree = tree
        self.n = tree.n
        self.heads = (None,) + tree.heads  # 1-indexed
        self.ndeps = [0] * (self.n + 1)
        for h in tree.heads:
            self.ndeps[h] += 1
        self.attached = [0] * (self.n + 1)
        self.has_head = [False] * (self.n + 1)
        self.out: list[Transition] = []
        self.generated = 0

    def head(self, i: int) -> int | None:
        return None if i == 0 else self.heads[i]

    def complete(self, i: int) -> bool:
        return self.attached[i] == self.ndeps[i]

    def arc(self, kind: str, head: int, dep: int, k: int | None = None):
        self.attached[head] += 1
        self.has_head[dep] = True
        self.out.append(Transition(kind, k=k))

    def gen_upto(self, i: int):
        while self.generated < i:
            self.generated += 1
            self.out.append(Transition(GEN, self.tree.tokens[self.generated - 1]))


def _oracle_standard(g: _Gold):
    stack = [0]
    nxt = 1
    while True:
        if len(stack) >= 2:
            s0, s1 = stack[-1], stack[-2]
            if s1 != 0 and g.head(s1) == s0:
                g.arc(LA, s0, s1)
                del stack[-2]
                continue
            if g.head(s0) == s1 and g.complete(s0):
                g.arc(RA, s1, s0)
                stack.pop()
                continue
        if nxt <= g.n:
            g.gen_upto(nxt)
            stack.append(nxt)
            nxt += 1
            continue
        if stack == [0]:
            return
        raise OracleStuck(f"arc-standard oracle stuck with stack {stack}")


def _oracle_hybrid(g: _Gold):
    # static arc-hybrid oracle; tokens are generated lazily when first needed
    stack = [0]
    nxt = 1
    while True:
        beta = nxt if nxt <= g.n else None
        s0 = stack[-1]
        if beta is not None and s0 != 0 and g.head(s0) == beta:
            g.gen_upto(beta)
            g.arc(LA, beta, s0)
            stack.pop()
            continue
        if len(stack) >= 2 and g.head(s0) == stack[-2] and g.complete(s0):
            if beta is not None and g.generated >= beta:
                raise OracleStuck("RIGHTARC below an unshifted generated token")
            g.arc(RA, stack[-2], s0)
            stack.pop()
            continue
        if beta is not None:
            g.gen_upto(beta)
            stack.append(beta)
            nxt += 1
            continue
        if stack == [0]:
            return
        raise OracleStuck(f"arc-hybrid oracle stuck with stack {stack}")


def _oracle_eager(g: _Gold):
    # arc > GEN > POP; POP only when shifting would strand a gold arc
    stack = [0]
    nxt = 1
    while True:
        beta = nxt if nxt <= g.n else None
        s0 = stack[-1] if stack else None
        if beta is not None:
            if s0 not in (None, 0) and not g.has_head[s0] and g.head(s0) == beta:
                g.gen_upto(beta)
                g.arc(LA, beta, s0)
                stack.pop()
                continue
            if s0 is not None and g.head(beta) == s0:
                g.gen_upto(beta)
                g.arc(RA, s0, beta)
                stack.append(beta)
                nxt += 1
                continue
            tied = any(g.head(beta) == x or (x != 0 and g.head(x) == beta) for x in stack)
            if not tied:
                g.gen_upto(beta)
                stack.append(beta)
                nxt += 1
                continue
        if not stack:
            return
        if s0 == 0:
            if len(stack) == 1 and beta is None:
                g.out.append(Transition(POP))
                stack.pop()
                continue
        elif g.has_head[s0] and g.complete(s0):
            g.out.append(Transition(POP))
            stack.pop()
            continue
        raise OracleStuck(f"arc-eager oracle stuck with stack {stack}")


def _oracle_swift(g: _Gold):
    stack = [0]
    nxt = 1
    while True:
        beta = nxt if nxt <= g.n else None
        if beta is None:
            if all(x == 0 or g.has_head[x] for x in stack):
                return
            raise OracleStuck(f"arc-swift oracle ends with headless tokens {stack}")
        done = False
        # LEFTARC[k]: dependent is the first headless token below complete ones
        for k in range(1, len(stack) + 1):
            x = stack[-k]
            if x != 0 and not g.has_head[x]:
                if g.head(x) == beta:
                    g.gen_upto(beta)
                    g.arc(LA, beta, x, k)
                    del stack[-k:]
                    done = True
                break
            if x == 0 or not g.complete(x):
                break
        if done:
            continue
        for k in range(1, len(stack) + 1):
            x = stack[-k]
            if g.head(beta) == x:
                g.gen_upto(beta)
                g.arc(RA, x, beta, k)
                del stack[len(stack) - k + 1:]
                stack.append(beta)
                nxt += 1
                done = True
                break
            if x == 0 or not g.has_head[x] or not g.complete(x):
                break
        if done:
            continue
        g.gen_upto(beta)
        stack.append(beta)
        nxt += 1


_ORACLES = {
    System.ARC_STANDARD: _oracle_standard,
    System.ARC_HYBRID: _oracle_hybrid,
    System.ARC_EAGER: _oracle_eager,
    System.ARC_SWIFT: _oracle_swift,
}


def extract_oracle(system: System | str, tree: DepTree) -> list[Transition]:
    """Canonical transition sequence for ``tree`` (arcs preferred, then GEN, then POP)."""
    system = System.parse(system)
    g = _Gold(tree)
    _ORACLES[system](g)
    return g.out


def hybrid_equals_standard(tree: DepTree) -> bool:
    return extract_oracle(System.ARC_HYBRID, tree) == extract_oracle(System.ARC_STANDARD, tree)


# ---------------------------------------------------------------- rollouts

def random_rollout(system: System | str, n_words: int, seed: int, *, exact: bool = False,
                   tokens: Sequence[Token] | None = None, canonical: bool = False,
                   max_steps: int | None = None) -> list[Transition]:
    """Uniformly random legal walk to <END>.

    With ``exact`` the walk generates exactly ``n_words`` tokens, otherwise at
    most that many.
    """
    system = System.parse(system)
    rng = random.Random(seed)
    s = initial_state()
    out: list[Transition] = []
    limit = max_steps if max_steps is not None else 6 * n_words + 8
    while True:
        left = n_words - s.n_generated
        moves = sorted(legal_moves(system, s, words_left=left, exact=exact, canonical=canonical),
                       key=lambda m: (m[0], m[1] or 0))
        if not moves:
            raise OracleStuck("rollout reached a state with no legal move")
        move = rng.choice(moves)
        if move[0] == END:
            return out
        if move[0] == GEN:
            i = s.n_generated
            tok = tokens[i] if tokens is not None else Token(f"w{i + 1}")
            t = Transition(GEN, tok)
        else:
            t = Transition(move[0], k=move[1])
        s, _ = _apply(system, s, move)
        out.append(t)
        if len(out) > limit:
            raise OracleStuck("rollout did not terminate")


# ---------------------------------------------------------------- text format

def format_transitions(seq: Iterable[Transition], system: System | str | None = None) -> str:
    swift = system is not None and System.parse(system) is System.ARC_SWIFT
    parts = []
    for t in seq:
        if swift and t.kind in (LA, RA):
            parts.append(f"{t.kind}:{t.k or 1}")
        else:
            parts.append(str(t))
    return " ".join(parts)


def parse_transitions(line: str, system: System | str, vocab: Vocabulary | None = None,
                      tokenizer=None) -> list[Transition]:
    system = System.parse(system)
    out = []
    for i, field_ in enumerate(line.split()):
        name, _, arg = field_.partition(":")
        if name == GEN:
            if not arg:
                raise IllegalTransition(i, "GEN without a form")
            tok = make_token(arg, vocab, tokenizer) if tokenizer else make_token(arg, vocab)
            out.append(Transition(GEN, tok))
        elif name in (LA, RA):
            if system is System.ARC_SWIFT:
                out.append(Transition(name, k=int(arg) if arg else 1))
            elif arg:
                raise IllegalTransition(i, f"arc number on {system.value}")
            else:
                out.append(Transition(name))
        elif name == POP and not arg:
            out.append(Transition(POP))
        else:
            raise IllegalTransition(i, f"unknown token {field_!r}")
    return out
