"""Sequence expansion, stack/compose attention masks and stack-depth positions.

Each arc transition is duplicated into a COMPOSE item (no prediction) and a
``*2`` item that predicts the next transition. Masks come in two flavours
that must agree bit for bit: :func:`build_masks` runs over the whole
sequence with a mutable stack, :func:`step` extends an immutable state by
one row and is what incremental decoding uses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import IllegalTransition, StackUnderflow
from .transitions import GEN, LA, POP, RA, System, Transition, replay_states
from .treebank import (END_ID, LA2_ID, LA_ID, NUM_RESERVED, POP_ID, RA2_ID, RA_ID, ROOT_ID,
                       Vocabulary)

DEFAULT_K = 16
SELF = 1  # R value for a COMPOSE or POP row attending to itself


class Kind(str, Enum):
    ROOT = "ROOT"
    TOKEN = "TOKEN"
    LA_COMPOSE = "LA_COMPOSE"
    RA_COMPOSE = "RA_COMPOSE"
    LA2 = "LA2"
    RA2 = "RA2"
    POP = "POP"


class Form(str, Enum):
    STACK = "STACK"
    COMPOSE = "COMPOSE"
    POPSTACK = "POPSTACK"


_SYMBOL = {Kind.ROOT: ROOT_ID, Kind.LA_COMPOSE: LA_ID, Kind.RA_COMPOSE: RA_ID,
           Kind.LA2: LA2_ID, Kind.RA2: RA2_ID, Kind.POP: POP_ID}


@dataclass(frozen=True)
class ExpandedItem:
    kind: Kind
    form: Form
    predicts: bool
    token_id: int                 # subtoken id for TOKEN, reserved symbol id otherwise
    head_id: int | None = None    # last subtoken of the head word on arc items
    k: int | None = None
    word: int = 0
    sub: int = 0
    text: str = ""
    target: tuple | None = None   # ("GEN"|"SUB", id, text) | ("LA"|"RA", k) | ("POP",) | ("END",)

    @property
    def is_compose(self) -> bool:
        return self.form is Form.COMPOSE

    def input_label(self) -> str:
        k = f"[{self.k}]" if self.k is not None else ""
        if self.kind is Kind.ROOT:
            return "<ROOT>"
        if self.kind is Kind.TOKEN:
            return self.text
        if self.kind is Kind.POP:
            return "POP"
        name = {Kind.LA_COMPOSE: "LEFTARC", Kind.RA_COMPOSE: "RIGHTARC",
                Kind.LA2: "LEFTARC2", Kind.RA2: "RIGHTARC2"}[self.kind]
        return f"{name}{k} + {self.text}"


def target_label(target: tuple | None, vocab: Vocabulary | None = None, swift: bool = False) -> str:
    if target is None:
        return "-"
    kind = target[0]
    if kind in ("GEN", "SUB"):
        if len(target) > 2:
            form = target[2]
        else:
            form = vocab.form(target[1]) if vocab is not None else str(target[1])
        return f"GEN({form})" if kind == "GEN" else form
    if kind in ("LA", "RA"):
        name = "LEFTARC" if kind == "LA" else "RIGHTARC"
        return f"{name}[{target[1]}]" if swift else name
    if kind == "POP":
        return "POP"
    return "<END>"


class ClassMap:
    """Output classes: vocabulary ids, plus LA[k]/RA[k] for k >= 2 under arc-swift."""

    def __init__(self, vocab_size: int, system: System | str, max_k: int = 32):
        self.vocab_size = vocab_size
        self.system = System.parse(system)
        self.max_k = max_k if self.system is System.ARC_SWIFT else 1
        self.n_classes = vocab_size + 2 * (self.max_k - 1)

    def class_of(self, target: tuple) -> int:
        kind = target[0]
        if kind in ("GEN", "SUB"):
            return target[1]
        if kind in ("LA", "RA"):
            k = target[1] or 1
            if k == 1:
                return LA_ID if kind == "LA" else RA_ID
            if k > self.max_k:
                raise IllegalTransition(0, f"arc number {k} exceeds max_k={self.max_k}")
            return self.vocab_size + 2 * (k - 2) + (kind == "RA")
        if kind == "POP":
            return POP_ID
        return END_ID

    def target_of(self, cls: int) -> tuple:
        if cls == END_ID:
            return ("END",)
        if cls == POP_ID:
            return ("POP",)
        if cls in (LA_ID, RA_ID):
            return ("LA" if cls == LA_ID else "RA", 1)
        if cls >= self.vocab_size:
            off = cls - self.vocab_size
            return ("LA" if off % 2 == 0 else "RA", off // 2 + 2)
        if cls >= NUM_RESERVED:
            return ("GEN", cls)
        raise ValueError(f"class {cls} is not a predictable symbol")

    def move_class(self, move: tuple) -> int:
        kind, k = move
        if kind in (LA, RA):
            return self.class_of((kind, k or 1))
        if kind == POP:
            return POP_ID
        if kind == "END":
            return END_ID
        raise ValueError("GEN moves map to lexical classes")


# ---------------------------------------------------------------- expansion

def transition_items(system: System, t: Transition, arc, words: Sequence,
                     vocab: Vocabulary | None = None) -> list[ExpandedItem]:
    """Items contributed by one transition; ``words[w]`` is the w-th generated Token.

    Targets are left unset except between subtokens of one word.
    """
    swift = system is System.ARC_SWIFT
    if t.kind == GEN:
        tok = t.token
        w = len(words) - 1 if words and words[-1] is tok else len(words)
        m = len(tok.subtokens)
        texts = [tok.form if m == 1 or vocab is None else vocab.form(sid) for sid in tok.subtokens]
        out = []
        for j, sid in enumerate(tok.subtokens):
            target = ("SUB", tok.subtokens[j + 1], texts[j + 1]) if j + 1 < m else None
            out.append(ExpandedItem(Kind.TOKEN, Form.STACK, True, sid, word=w, sub=j,
                                    text=texts[j], target=target))
        return out
    if t.kind in (LA, RA):
        head = arc[0]
        k = (t.k or 1) if swift else None
        if head == 0:
            hid, htext = ROOT_ID, "<ROOT>"
        else:
            hid, htext = words[head].last_subtoken, words[head].form
        comp = Kind.LA_COMPOSE if t.kind == LA else Kind.RA_COMPOSE
        two = Kind.LA2 if t.kind == LA else Kind.RA2
        return [ExpandedItem(comp, Form.COMPOSE, False, _SYMBOL[comp], hid, k, head, text=htext),
                ExpandedItem(two, Form.STACK, True, _SYMBOL[two], hid, k, head, text=htext)]
    return [ExpandedItem(Kind.POP, Form.POPSTACK, True, POP_ID, text="POP")]


ROOT_ITEM = ExpandedItem(Kind.ROOT, Form.STACK, True, ROOT_ID, text="<ROOT>")


def transition_target(t: Transition, system: System) -> tuple:
    if t.kind == GEN:
        tok = t.token
        return ("GEN", tok.subtokens[0], tok.form if len(tok.subtokens) == 1 else None)
    if t.kind in (LA, RA):
        return (t.kind, t.k or 1)
    return ("POP",)


def expand(system: System | str, seq: Sequence[Transition],
           vocab: Vocabulary | None = None) -> list[ExpandedItem]:
    """Duplicate arcs and attach prediction targets."""
    system = System.parse(system)
    items: list[ExpandedItem] = [ROOT_ITEM]
    words: list = [None]  # 1-based word list for head lookups
    for state, t, arc in replay_states(system, seq):
        new = transition_items(system, t, arc, words + ([t.token] if t.kind == GEN else []), vocab)
        if t.kind == GEN:
            words.append(t.token)
            target = ("GEN", t.token.subtokens[0], new[0].text)
        else:
            target = transition_target(t, system)
        items[-1] = replace(items[-1], target=target)
        items.extend(new)
    items[-1] = replace(items[-1], target=("END",))
    return items


# ---------------------------------------------------------------- incremental masker

@dataclass(frozen=True)
class MaskerState:
    stack: tuple[tuple[int, ...], ...] = ()   # position groups, bottom first
    buffer: tuple[int, ...] | None = None    # generated-but-unshifted word (eager/swift)
    masked: frozenset = frozenset()
    t: int = 0

    def entries(self) -> tuple[tuple[int, ...], ...]:
        return self.stack + ((self.buffer,) if self.buffer is not None else ())

    def depths(self) -> dict[int, int]:
        ent = self.entries()
        top = len(ent) - 1
        return {p: top - e for e, grp in enumerate(ent) for p in grp}


def _uses_buffer(system: System) -> bool:
    return system in (System.ARC_EAGER, System.ARC_SWIFT)


def _stack_row(state: MaskerState, i: int, add_self: bool):
    depth = state.depths()
    rel = {p: -d for p, d in depth.items()}
    if add_self:
        rel[i] = SELF
    return frozenset(rel), rel


def step(system: System | str, state: MaskerState, item: ExpandedItem):
    """Process one expanded item; returns ``(state', attend, relpos)``."""
    system = System.parse(system)
    i = state.t
    buf = _uses_buffer(system)
    stack, buffer, masked = state.stack, state.buffer, state.masked
    kind = item.kind

    if kind is Kind.ROOT:
        if stack or buffer is not None:
            raise StackUnderflow("ROOT must come first")
        new = MaskerState(((i,),), None, masked, i + 1)
        return (new,) + _stack_row(new, i, False)

    if kind is Kind.TOKEN:
        if item.sub > 0:
            if buf:
                if buffer is None:
                    raise StackUnderflow("subtoken continues no word")
                buffer = buffer + (i,)
            else:
                stack = stack[:-1] + (stack[-1] + (i,),)
        elif buf:
            if buffer is not None:
                stack = stack + (buffer,)
            buffer = (i,)
        else:
            stack = stack + ((i,),)
        new = MaskerState(stack, buffer, masked, i + 1)
        return (new,) + _stack_row(new, i, False)

    if kind in (Kind.LA2, Kind.RA2):
        new = MaskerState(stack, buffer, masked, i + 1)
        return (new,) + _stack_row(new, i, False)

    if kind is Kind.POP:
        if not stack:
            raise StackUnderflow("POP on an empty stack")
        masked = masked | frozenset(stack[-1])
        new = MaskerState(stack[:-1], buffer, masked, i + 1)
        return (new,) + _stack_row(new, i, True)

    # COMPOSE
    k = item.k or 1
    la = kind is Kind.LA_COMPOSE
    if not buf:
        if len(stack) < 2:
            raise StackUnderflow("COMPOSE needs two stack entries")
        top, second = stack[-1], stack[-2]
        head, dep = (top, second) if la else (second, top)
        between: tuple = ()
        consumed = top + second
        stack = stack[:-2] + ((i,),)
    else:
        if buffer is None or len(stack) < k:
            raise StackUnderflow("COMPOSE needs a buffer word and k stack entries")
        between_groups = stack[len(stack) - k + 1:]
        between = tuple(p for g in between_groups for p in g)
        if la:
            head, dep = buffer, stack[-k]
            consumed = head + dep + between
            stack, buffer = stack[:-k], (i,)
        else:
            head, dep = stack[-k], buffer
            consumed = head + between
            stack, buffer = stack[:-k] + ((i,), dep), None
    rel = {i: SELF}
    rel.update({p: 0 for p in head})
    rel.update({p: -1 for p in dep})
    rel.update({p: -1 for p in between})
    new = MaskerState(stack, buffer, masked | frozenset(consumed), i + 1)
    return new, frozenset(rel), rel


# ---------------------------------------------------------------- batch builder

@dataclass
class MaskBundle:
    A: np.ndarray            # bool [T, T]
    R: np.ndarray            # int16 [T, T], 0 where A is 0
    items: list[ExpandedItem]
    forms: list[Form] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def prediction_positions(self) -> list[int]:
        return [i for i, it in enumerate(self.items) if it.predicts]

    @property
    def targets(self) -> list[tuple]:
        return [it.target for it in self.items if it.predicts]

    def target_ids(self, classmap: ClassMap) -> list[int]:
        return [classmap.class_of(t) for t in self.targets]

    def buckets(self, K: int = DEFAULT_K) -> np.ndarray:
        return relpos_buckets(self.R, self.A, self.forms, K)


def n_buckets(K: int = DEFAULT_K) -> int:
    return K + 4


def bucket_of(form: Form, r: int, K: int = DEFAULT_K) -> int:
    if r == SELF:
        return K + 3
    if form is Form.COMPOSE:
        return K + 1 if r == 0 else K + 2
    return min(-r, K)


def relpos_buckets(R: np.ndarray, A: np.ndarray, forms: Sequence[Form], K: int = DEFAULT_K) -> np.ndarray:
    """Map R to embedding buckets: 0..K stack depth, K+1 head, K+2 dependent, K+3 self."""
    R = np.asarray(R, dtype=np.int64)
    out = np.minimum(-R, K)
    compose = np.array([f is Form.COMPOSE for f in forms], dtype=bool)[:, None]
    out = np.where(compose & (R == 0), K + 1, out)
    out = np.where(compose & (R == -1), K + 2, out)
    out = np.where(R == SELF, K + 3, out)
    return np.where(A, out, 0)


def build_masks(system: System | str, items: Sequence[ExpandedItem]):
    """Attention mask for a whole expanded sequence.

    Returns ``(A, trace)``; ``trace[i]`` records the row's form and the stack
    entries (or compose roles) it saw, and feeds :func:`build_relpos`.
    """
    system = System.parse(system)
    buf = _uses_buffer(system)
    T = len(items)
    A = np.zeros((T, T), dtype=bool)
    stack: list[list[int]] = []
    buffer: list[int] | None = None
    trace = []
    for i, it in enumerate(items):
        if it.form is Form.COMPOSE:
            k = it.k or 1
            la = it.kind is Kind.LA_COMPOSE
            if not buf:
                if len(stack) < 2:
                    raise StackUnderflow(f"row {i}: COMPOSE needs two stack entries")
                l = stack.pop()
                r = stack.pop()
                head, dep, between = (l, r, []) if la else (r, l, [])
                stack.append([i])
            else:
                if buffer is None or len(stack) < k:
                    raise StackUnderflow(f"row {i}: COMPOSE needs a buffer word and k entries")
                between = [p for g in stack[len(stack) - k + 1:] for p in g]
                target = stack[-k]
                del stack[len(stack) - k:]
                if la:
                    head, dep = buffer, target
                    buffer = [i]
                else:
                    head, dep = target, buffer
                    stack.append([i])
                    stack.append(dep)
                    buffer = None
            A[i, i] = True
            for p in head + dep + between:
                A[i, p] = True
            trace.append(("compose", list(head), list(dep), list(between)))
            continue
        if it.kind is Kind.ROOT:
            stack.append([i])
        elif it.kind is Kind.TOKEN:
            if it.sub > 0:
                (buffer if buf else stack[-1]).append(i)
            elif buf:
                if buffer is not None:
                    stack.append(buffer)
                buffer = [i]
            else:
                stack.append([i])
        elif it.kind is Kind.POP:
            if not stack:
                raise StackUnderflow(f"row {i}: POP on an empty stack")
            stack.pop()
        ent = [list(g) for g in stack] + ([list(buffer)] if buffer is not None else [])
        popstack = it.kind is Kind.POP
        if popstack:
            A[i, i] = True
        for g in ent:
            for p in g:
                A[i, p] = True
        trace.append(("stack", ent, popstack))
    return A, trace


def build_relpos(system: System | str, items: Sequence[ExpandedItem], trace) -> np.ndarray:
    T = len(items)
    R = np.zeros((T, T), dtype=np.int16)
    for i, row in enumerate(trace):
        if row[0] == "compose":
            _, head, dep, between = row
            R[i, i] = SELF
            for p in dep + between:
                R[i, p] = -1
            for p in head:
                R[i, p] = 0
        else:
            _, ent, popstack = row
            top = len(ent) - 1
            for e, grp in enumerate(ent):
                for p in grp:
                    R[i, p] = -(top - e)
            if popstack:
                R[i, i] = SELF
    return R


def build_bundle(system: System | str, items: Sequence[ExpandedItem]) -> MaskBundle:
    A, trace = build_masks(system, items)
    R = build_relpos(system, items, trace)
    return MaskBundle(A, R, list(items), [it.form for it in items])


def fold_bundle(system: System | str, items: Sequence[ExpandedItem]) -> MaskBundle:
    """Same bundle as :func:`build_bundle`, assembled row by row with :func:`step`."""
    T = len(items)
    A = np.zeros((T, T), dtype=bool)
    R = np.zeros((T, T), dtype=np.int16)
    state = MaskerState()
    for i, it in enumerate(items):
        state, attend, rel = step(system, state, it)
        for j in attend:
            A[i, j] = True
            R[i, j] = rel[j]
    return MaskBundle(A, R, list(items), [it.form for it in items])


def causal_bundle(items: Sequence[ExpandedItem]) -> MaskBundle:
    """Plain causal mask with R = i - j (the unstructured baseline)."""
    T = len(items)
    A = np.tril(np.ones((T, T), dtype=bool))
    idx = np.arange(T)
    R = np.where(A, idx[:, None] - idx[None, :], 0).astype(np.int16)
    return MaskBundle(A, R, list(items), [it.form for it in items])


def causal_buckets(T: int, K: int = DEFAULT_K) -> np.ndarray:
    idx = np.arange(T)
    return np.clip(idx[:, None] - idx[None, :], 0, K + 3)


def sentence_bundle(system: System | str, seq: Sequence[Transition],
                    vocab: Vocabulary | None = None) -> MaskBundle:
    return build_bundle(system, expand(system, seq, vocab))


# ---------------------------------------------------------------- export

def export_record(bundle: MaskBundle, classmap: ClassMap, K: int = 127) -> dict:
    bits = np.packbits(bundle.A.astype(np.uint8).ravel())
    R = np.clip(bundle.R, -min(K, 128), min(K, 127)).astype(np.int8)
    return {
        "T": bundle.T,
        "A": bits.tobytes().hex(),
        "R": R.ravel().tolist(),
        "prediction_positions": bundle.prediction_positions,
        "target_ids": bundle.target_ids(classmap),
    }


def import_record(rec: dict) -> tuple[np.ndarray, np.ndarray]:
    T = rec["T"]
    bits = np.frombuffer(bytes.fromhex(rec["A"]), dtype=np.uint8)
    A = np.unpackbits(bits)[: T * T].reshape(T, T).astype(bool)
    R = np.asarray(rec["R"], dtype=np.int8).reshape(T, T)
    return A, R


def export_jsonl(bundle: MaskBundle, classmap: ClassMap) -> str:
    return json.dumps(export_record(bundle, classmap), separators=(",", ":"))


def debug_table(bundle: MaskBundle, vocab: Vocabulary | None = None,
                system: System | str = System.ARC_STANDARD) -> str:
    swift = System.parse(system) is System.ARC_SWIFT
    rows = [("i", "Input", "Attn. Mask", "Prediction")]
    for i, it in enumerate(bundle.items):
        rows.append((str(i), it.input_label(), it.form.value,
                     target_label(it.target, vocab, swift) if it.predicts else "-"))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    return "\n".join(" | ".join(r[c].ljust(widths[c]) for c in range(4)).rstrip() for r in rows)
