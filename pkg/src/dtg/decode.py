"""Constrained sampling, word-synchronous beam search and tree marginals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .attnmask import (ROOT_ITEM, ExpandedItem, Form, Kind, MaskerState, bucket_of, step,
                       transition_items)
from .errors import BeamExhausted, EmptyProposal, NoLegalTransition, NonProjective
from .model import Cache, DTGModel, item_features, score_joint
from .transitions import (END, GEN, ParserState, System, Transition, _apply, initial_state,
                          legal_moves, replay)
from .treebank import (END_ID, NUM_RESERVED, UNK_ID, DepTree, Token, Vocabulary,
                       enumerate_projective_trees, is_projective, random_projective_tree)


def logsumexp(xs: Sequence[float]) -> float:
    xs = list(xs)
    if not xs:
        return float("-inf")
    m = max(xs)
    if m == float("-inf"):
        return m
    return m + math.log(sum(math.exp(x - m) for x in xs))


# ---------------------------------------------------------------- hypotheses

@dataclass
class Hyp:
    pstate: ParserState = field(default_factory=initial_state)
    mstate: MaskerState = field(default_factory=MaskerState)
    cols: list = field(default_factory=list)     # cache column of each own position
    logp: float = 0.0
    seq: list = field(default_factory=list)      # transitions
    key: tuple = ()                              # class ids, for tie-breaking
    words: list = field(default_factory=lambda: [None])
    queue: list = field(default_factory=list)    # items still to feed
    lp: np.ndarray | None = None                 # log-probs after the last fed item
    cache: object = None                         # model cache holding this hypothesis' columns
    row: int = 0                                 # row of that cache
    done: bool = False

    @property
    def n_words(self) -> int:
        return len(self.words) - 1

    def child(self, t: Transition, cls: int, lp: float, system: System) -> "Hyp":
        move = t.move
        pstate, arc = _apply(system, self.pstate, move)
        words = self.words + [t.token] if t.kind == GEN else self.words
        items = transition_items(system, t, arc, words)
        return Hyp(pstate, self.mstate, self.cols, self.logp + lp, self.seq + [t],
                   self.key + (cls,), words, list(items), None, self.cache, self.row)


class Feeder:
    """Runs hypotheses through the model one expanded item per column."""

    def __init__(self, model: DTGModel):
        self.model = model
        self.system = System.parse(model.cfg.system)
        self.K = model.cfg.rel_k
        self.causal = model.cfg.mask_mode == "causal"
        p = next(model.parameters())
        self.dtype, self.device = p.dtype, p.device

    def start(self, hyps: list[Hyp]) -> None:
        cache = self.model.new_cache(1)
        for h in hyps:
            h.queue = [ROOT_ITEM]
            h.cache, h.row = cache, 0
        self.feed(hyps)

    def _gather(self, hyps: list[Hyp]):
        caches = {id(h.cache): h.cache for h in hyps}
        if len(caches) == 1:
            return hyps[0].cache.select([h.row for h in hyps])
        C = max(c.cols for c in caches.values())
        ks, vs = [], []
        for layer in range(len(hyps[0].cache.k)):
            rows_k, rows_v = [], []
            for h in hyps:
                k = h.cache.k[layer][h.row]
                v = h.cache.v[layer][h.row]
                pad = C - k.shape[1]
                if pad:
                    k = torch.nn.functional.pad(k, (0, 0, 0, pad))
                    v = torch.nn.functional.pad(v, (0, 0, 0, pad))
                rows_k.append(k)
                rows_v.append(v)
            ks.append(torch.stack(rows_k))
            vs.append(torch.stack(rows_v))
        return Cache(ks, vs)

    def feed(self, hyps: list[Hyp]) -> None:
        """Feed every queued item of every hypothesis."""
        if not hyps:
            return
        cache = self._gather(hyps)
        for h in hyps:
            h.cols = list(h.cols)
        with torch.no_grad():
            while any(h.queue for h in hyps):
                C = cache.cols
                feats = np.zeros((len(hyps), 5), dtype=np.int64)
                allowed = np.zeros((len(hyps), C + 1), dtype=bool)
                buckets = np.zeros((len(hyps), C + 1), dtype=np.int64)
                allowed[:, C] = True
                fed = []
                for b, h in enumerate(hyps):
                    if not h.queue:
                        continue
                    it = h.queue.pop(0)
                    i = h.mstate.t
                    h.mstate, attend, rel = step(self.system, h.mstate, it)
                    feats[b] = item_features(it)
                    if self.causal:
                        for j, c in enumerate(h.cols):
                            allowed[b, c] = True
                            buckets[b, c] = min(i - j, self.K + 3)
                    else:
                        allowed[b, C] = i in attend
                        for j in attend:
                            c = C if j == i else h.cols[j]
                            allowed[b, c] = True
                            buckets[b, c] = bucket_of(it.form, rel[j], self.K)
                    h.cols.append(C)
                    fed.append((b, h, it))
                logits, cache = self.model.step(cache, torch.from_numpy(feats).to(self.device),
                                                torch.from_numpy(allowed).to(self.device),
                                                torch.from_numpy(buckets).to(self.device))
                lps = torch.log_softmax(logits.double(), dim=-1).cpu().numpy()
                for b, h, it in fed:
                    if not it.predicts:
                        continue
                    if it.target is not None and it.target[0] == "SUB":
                        h.logp += float(lps[b, it.target[1]])
                    h.lp = lps[b]
        for i, h in enumerate(hyps):
            h.cache, h.row = cache, i


def _lexical_mask(model: DTGModel) -> np.ndarray:
    m = np.zeros(model.classmap.n_classes, dtype=bool)
    m[NUM_RESERVED:model.cfg.vocab_size] = True
    m[UNK_ID] = False
    return m


def _move_transition(move, cls: int, vocab: Vocabulary | None) -> Transition:
    kind, k = move
    if kind == GEN:
        form = vocab.form(cls) if vocab is not None else f"<{cls}>"
        return Transition(GEN, Token(form, (cls,)))
    return Transition(kind, k=k)


# ---------------------------------------------------------------- sampling

@dataclass
class Sample:
    tree: DepTree
    seq: list
    logp: float


def constrained_sample(model: DTGModel, vocab: Vocabulary | None, max_words: int,
                       temperature: float = 1.0, seed: int = 0, n: int = 1,
                       batch_size: int = 256) -> list[Sample]:
    """Draw ``n`` sentences with trees, never leaving the legal transition space."""
    model.eval()
    system = System.parse(model.cfg.system)
    cm = model.classmap
    lexical = _lexical_mask(model)
    rng = np.random.default_rng(seed)
    feeder = Feeder(model)
    out: list[Sample] = []
    for start in range(0, n, batch_size):
        live = [Hyp() for _ in range(min(batch_size, n - start))]
        feeder.start(live)
        while live:
            nxt = []
            for h in live:
                moves = legal_moves(system, h.pstate, words_left=max_words - h.n_words,
                                    canonical=True, max_k=cm.max_k)
                if not moves:
                    raise NoLegalTransition(f"no legal move after {len(h.seq)} transitions")
                allowed = np.zeros(cm.n_classes, dtype=bool)
                cls_move = {}
                for mv in moves:
                    if mv[0] == GEN:
                        allowed |= lexical
                    else:
                        c = cm.move_class(mv)
                        allowed[c] = True
                        cls_move[c] = mv
                lp = np.where(allowed, h.lp, -np.inf)
                if temperature <= 0:
                    c = int(np.argmax(lp))
                else:
                    z = lp / temperature
                    z = z - z.max()
                    p = np.exp(z)
                    p /= p.sum()
                    c = int(rng.choice(len(p), p=p))
                mv = cls_move.get(c, (GEN, None))
                if mv[0] == END:
                    h.logp += float(h.lp[c])
                    h.done = True
                    toks = tuple(t.token for t in h.seq if t.kind == GEN)
                    out.append(Sample(DepTree(toks, h.pstate.heads), h.seq, h.logp))
                    continue
                child = h.child(_move_transition(mv, c, vocab), c, float(h.lp[c]), system)
                nxt.append(child)
            feeder.feed(nxt)
            live = nxt
    return out


def post_check(system: System | str, seq: Sequence[Transition], max_words: int | None = None) -> DepTree:
    """Replay ``seq`` checking every step against the legality sets."""
    system = System.parse(system)
    s = initial_state()
    for i, t in enumerate(seq):
        left = None if max_words is None else max_words - s.n_generated
        if t.move not in legal_moves(system, s, words_left=left):
            raise NoLegalTransition(f"transition {i} ({t}) is not legal")
        s, _ = _apply(system, s, t.move)
    tree = replay(system, seq)
    if not is_projective(tree.heads):
        raise NonProjective("sampled tree is not projective")
    return tree


# ---------------------------------------------------------------- beam search

@dataclass
class BeamResult:
    surprisals: list
    end_term: float
    logp: float                 # log-sum-exp over completed hypotheses
    prefix_logz: list           # log-sum-exp of the beam after each word, index 0 is the start
    best_tree: DepTree | None
    best_seq: list
    completed: list = field(default_factory=list)  # (logp, tree) for every complete hypothesis


def _prune(hyps: list[Hyp], size: int) -> list[Hyp]:
    hyps.sort(key=lambda h: (-h.logp, h.key))
    return hyps[:size]


def beam_search(model: DTGModel, tokens: Sequence[Token], beam_size: int,
                word_beam: int | None = None) -> BeamResult:
    """Word-synchronous beam search over legal transition sequences for ``tokens``."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    model.eval()
    word_beam = word_beam or beam_size
    system = System.parse(model.cfg.system)
    cm = model.classmap
    n = len(tokens)
    cap = 2 * n + 4
    feeder = Feeder(model)
    beam = [Hyp()]
    feeder.start(beam)
    logz = [logsumexp(h.logp for h in beam)]

    def moves_of(h: Hyp, left: int):
        return sorted(legal_moves(system, h.pstate, words_left=left, exact=True,
                                  canonical=True, max_k=cm.max_k), key=lambda m: (m[0], m[1] or 0))

    for t in range(1, n + 1):
        tok = tokens[t - 1]
        gen = Transition(GEN, tok)
        frontier = beam
        done: list[Hyp] = []
        steps = 0
        while frontier:
            structural = []
            for h in frontier:
                for mv in moves_of(h, n - h.n_words):
                    if mv[0] == GEN:
                        c = tok.subtokens[0]
                        done.append(h.child(gen, c, float(h.lp[c]), system))
                    elif mv[0] != END:
                        c = cm.move_class(mv)
                        structural.append(h.child(Transition(mv[0], k=mv[1]), c, float(h.lp[c]), system))
            steps += 1
            if steps > cap:
                break
            frontier = _prune(structural, beam_size)
            feeder.feed(frontier)
        beam = _prune(done, word_beam)
        if not beam:
            raise BeamExhausted(f"no hypothesis reached word {t}")
        feeder.feed(beam)
        logz.append(logsumexp(h.logp for h in beam))

    completed: list[Hyp] = []
    frontier = beam
    steps = 0
    while frontier:
        structural = []
        for h in frontier:
            for mv in moves_of(h, 0):
                if mv[0] == END:
                    c = END_ID
                    fin = replace(h, logp=h.logp + float(h.lp[c]), key=h.key + (c,), done=True)
                    completed.append(fin)
                else:
                    c = cm.move_class(mv)
                    structural.append(h.child(Transition(mv[0], k=mv[1]), c, float(h.lp[c]), system))
        steps += 1
        if steps > cap:
            break
        frontier = _prune(structural, beam_size)
        feeder.feed(frontier)
    if not completed:
        raise BeamExhausted("no hypothesis reached <END>")
    total = logsumexp(h.logp for h in completed)
    surprisals = [logz[i - 1] - logz[i] for i in range(1, n + 1)]
    end_term = logz[n] - total
    completed.sort(key=lambda h: (-h.logp, h.key))
    best = completed[0]
    results = [(h.logp, replay(system, h.seq)) for h in completed]
    return BeamResult(surprisals, end_term, total, logz, results[0][1], best.seq, results)


# ---------------------------------------------------------------- proposals and marginals

SOURCES = ("enumeration", "rollout", "perturb", "file", "beam")


@dataclass
class ProposalSet:
    trees: list
    source: str = "enumeration"

    def __post_init__(self):
        if not self.trees:
            raise EmptyProposal("proposal set is empty")
        forms = self.trees[0].forms
        seen = set()
        for t in self.trees:
            if t.forms != forms:
                raise ValueError("proposal trees cover different sentences")
            if t.heads in seen:
                raise ValueError(f"duplicate proposal tree {list(t.heads)}")
            seen.add(t.heads)

    def __len__(self) -> int:
        return len(self.trees)


def enumeration_proposals(tokens: Sequence[Token], cap: int = 100_000) -> ProposalSet:
    skel = enumerate_projective_trees(len(tokens), cap)
    return ProposalSet([DepTree(tuple(tokens), t.heads) for t in skel], "enumeration")


def rollout_proposals(tokens: Sequence[Token], count: int, seed: int) -> ProposalSet:
    """Up to ``count`` distinct uniformly drawn trees over ``tokens``."""
    n = len(tokens)
    out, seen = [], set()
    for attempt in range(count * 20):
        heads = random_projective_tree(n, seed * 1_000_003 + attempt).heads
        if heads not in seen:
            seen.add(heads)
            out.append(DepTree(tuple(tokens), heads))
            if len(out) == count:
                break
    return ProposalSet(out, "rollout")


def perturb_tree(heads: Sequence[int], rng, max_moves: int = 3) -> tuple[int, ...]:
    """Reattach 1..max_moves random tokens, keeping a valid projective tree."""
    from .treebank import check_tree
    h = list(heads)
    n = len(h)
    moves = rng.randint(1, max_moves)
    for _ in range(moves):
        for _ in range(50):
            d = rng.randint(1, n)
            new = rng.randint(0, n)
            if new == d or new == h[d - 1]:
                continue
            cand = h.copy()
            cand[d - 1] = new
            try:
                check_tree(cand)
            except Exception:
                continue
            if is_projective(cand):
                h = cand
                break
    return tuple(h)


def perturb_proposals(gold: DepTree, count: int, seed: int) -> ProposalSet:
    """The gold tree plus ``count - 1`` distinct perturbations of it, shuffled."""
    import random
    rng = random.Random(seed)
    seen = {gold.heads}
    out = [gold]
    for _ in range(count * 50):
        if len(out) == count:
            break
        h = perturb_tree(gold.heads, rng)
        if h not in seen:
            seen.add(h)
            out.append(gold.with_heads(h))
    rng.shuffle(out)
    return ProposalSet(out, "perturb")


def beam_proposals(model: DTGModel, tokens: Sequence[Token], beam_size: int, count: int) -> ProposalSet:
    res = beam_search(model, tokens, beam_size)
    out, seen = [], set()
    for _, t in res.completed:
        if t.heads not in seen:
            seen.add(t.heads)
            out.append(DepTree(tuple(tokens), t.heads))
        if len(out) == count:
            break
    return ProposalSet(out, "beam")


def read_proposal_file(stream, vocab: Vocabulary | None = None) -> list[ProposalSet]:
    """CoNLL blocks; consecutive blocks over the same words form one proposal set."""
    from .treebank import make_token, read_blocks, validate_block
    sets: list[list[DepTree]] = []
    last_forms = last_k = None
    for raw in read_blocks(stream):
        heads = validate_block(raw)
        k = None
        for c in raw.comments:
            parts = c.lstrip("#").strip().split()
            if len(parts) >= 2 and parts[0] == "tree" and parts[1].isdigit():
                k = int(parts[1])
        forms = tuple(raw.forms)
        restart = k is not None and last_k is not None and k <= last_k  # numbering starts over
        if restart or forms != last_forms or not sets:
            sets.append([])
        toks = tuple(make_token(f, vocab) for f in forms)
        tree = DepTree(toks, heads)
        if tree.heads not in {t.heads for t in sets[-1]}:
            sets[-1].append(tree)
        last_forms, last_k = forms, k
    return [ProposalSet(s, "file") for s in sets]


def marginal_logprob(model: DTGModel, proposal: ProposalSet | Sequence[DepTree]) -> float:
    """log of the summed joint probability over the proposal trees (a lower bound on log p(x))."""
    trees = proposal.trees if isinstance(proposal, ProposalSet) else list(proposal)
    if not trees:
        raise EmptyProposal("proposal set is empty")
    return logsumexp(score_joint(model, trees))


def rerank(model: DTGModel, proposal: ProposalSet | Sequence[DepTree]):
    """Highest-scoring proposal; returns ``(index, tree, scores)``. Ties go to the earliest."""
    trees = proposal.trees if isinstance(proposal, ProposalSet) else list(proposal)
    if not trees:
        raise EmptyProposal("proposal set is empty")
    scores = score_joint(model, trees)
    best = max(range(len(trees)), key=lambda i: (scores[i], -i))
    return best, trees[best], scores
