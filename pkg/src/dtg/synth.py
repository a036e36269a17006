"""A small English-like agreement grammar with gold dependency trees.

Subjects may carry a prepositional distractor ("the manager to the side of
the architects"), and the main verb agrees with the subject in number. Every
template fixes its heads explicitly, so the trees are gold by construction.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .treebank import DepTree, Vocabulary, make_token

NOUNS = [("manager", "managers"), ("architect", "architects"), ("author", "authors"),
         ("pilot", "pilots"), ("senator", "senators"), ("farmer", "farmers"),
         ("doctor", "doctors"), ("teacher", "teachers"), ("student", "students"),
         ("dog", "dogs"), ("officer", "officers"), ("painter", "painters")]
INF_VERBS = [("likes", "like"), ("wants", "want"), ("hopes", "hope"), ("hates", "hate")]
TR_VERBS = [("sees", "see"), ("admires", "admire"), ("knows", "know"), ("meets", "meet")]
INFINITIVES = ["gamble", "swim", "travel", "sing", "dance", "work"]
ADJS = ["old", "young", "tall", "quiet", "clever", "happy"]
DETS = {False: ["the", "a", "this", "every"], True: ["the", "some", "these", "many"]}
PREPS = ["near", "behind", "beside", "with"]


def lexicon() -> list[str]:
    forms = {"to", "side", "of", "."}
    for pair in NOUNS + INF_VERBS + TR_VERBS:
        forms.update(pair)
    forms.update(INFINITIVES, ADJS, PREPS, DETS[False], DETS[True])
    return sorted(forms)


def lexicon_vocab() -> Vocabulary:
    return Vocabulary(lexicon())


class _Builder:
    def __init__(self):
        self.words: list[str] = []
        self.heads: list[int] = []

    def add(self, word: str, head: int = -1) -> int:
        self.words.append(word)
        self.heads.append(head)
        return len(self.words)

    def attach(self, dep: int, head: int) -> None:
        self.heads[dep - 1] = head


def _noun_phrase(b: _Builder, plural: bool, rng: random.Random, adj_p: float = 0.3) -> int:
    det = b.add(rng.choice(DETS[plural]))
    adj = b.add(rng.choice(ADJS)) if rng.random() < adj_p else None
    noun = b.add(NOUNS[rng.randrange(len(NOUNS))][plural])
    b.attach(det, noun)
    if adj is not None:
        b.attach(adj, noun)
    return noun


@dataclass(frozen=True)
class AgreementItem:
    words: tuple
    heads: tuple
    verb_index: int          # 1-based position of the agreeing verb
    plural: bool
    attractor: bool          # distractor noun differs in number from the subject
    flipped: tuple           # same sentence with the verb's number flipped

    def tree(self, vocab: Vocabulary | None = None) -> DepTree:
        return DepTree.from_forms(self.words, self.heads, vocab)

    def flipped_tree(self, vocab: Vocabulary | None = None) -> DepTree:
        return DepTree.from_forms(self.flipped, self.heads, vocab)


def generate(rng: random.Random, plural: bool | None = None, pp_p: float = 0.6,
             period_p: float = 0.5, distractor_plural: bool | None = None) -> AgreementItem:
    if plural is None:
        plural = rng.random() < 0.5
    b = _Builder()
    subj = _noun_phrase(b, plural, rng)
    attractor = False
    if rng.random() < pp_p:
        dplural = rng.random() < 0.5 if distractor_plural is None else distractor_plural
        attractor = dplural != plural
        if rng.random() < 0.35:
            to = b.add("to", subj)
            the = b.add("the")
            side = b.add("side", to)
            b.attach(the, side)
            of = b.add("of", side)
            pn = _noun_phrase(b, dplural, rng)
            b.attach(pn, of)
        else:
            prep = b.add(rng.choice(PREPS), subj)
            pn = _noun_phrase(b, dplural, rng)
            b.attach(pn, prep)
    transitive = rng.random() < 0.5
    pair = rng.choice(TR_VERBS if transitive else INF_VERBS)
    verb = b.add(pair[plural], 0)
    b.attach(subj, verb)
    if transitive:
        obj = _noun_phrase(b, rng.random() < 0.5, rng)
        b.attach(obj, verb)
    else:
        to = b.add("to")
        inf = b.add(rng.choice(INFINITIVES), verb)
        b.attach(to, inf)
    if rng.random() < period_p:
        b.add(".", verb)
    flipped = list(b.words)
    flipped[verb - 1] = pair[not plural]
    return AgreementItem(tuple(b.words), tuple(b.heads), verb, plural, attractor, tuple(flipped))


def treebank(n: int, seed: int, vocab: Vocabulary | None = None) -> list[DepTree]:
    rng = random.Random(seed)
    return [generate(rng).tree(vocab) for _ in range(n)]


def agreement_pairs(n: int, seed: int, pp_p: float = 1.0) -> list[AgreementItem]:
    """``n`` items in singular/plural twins that share every lexical choice but number.

    The twins counterbalance the suite, so a model with a fixed preference
    for one verb form scores exactly half on each twin.
    """
    rng = random.Random(seed)
    out = []
    while len(out) < n:
        sub = rng.getrandbits(64)
        out.append(generate(random.Random(sub), plural=False, pp_p=pp_p))
        if len(out) < n:
            out.append(generate(random.Random(sub), plural=True, pp_p=pp_p))
    return out


def attractor_example() -> tuple[AgreementItem, AgreementItem]:
    """The distractor example "the manager to the side of the architects likes to gamble"."""
    words = ("the", "manager", "to", "the", "side", "of", "the", "architects", "likes", "to", "gamble")
    heads = (2, 9, 2, 5, 3, 5, 8, 6, 0, 11, 9)
    good = AgreementItem(words, heads, 9, False, True, words[:8] + ("like",) + words[9:])
    bad = AgreementItem(good.flipped, heads, 9, False, True, words)
    return good, bad


def sentences_to_text(items) -> str:
    return "".join(" ".join(it.words) + "\n" for it in items)


def tokens(words, vocab: Vocabulary | None = None):
    return tuple(make_token(w, vocab) for w in words)
