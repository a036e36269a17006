"""Corpus-level metrics: perplexity bound, minimal pairs, surprisal suites, UAS."""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

from .decode import (ProposalSet, beam_proposals, beam_search, enumeration_proposals,
                     marginal_logprob, perturb_proposals, rerank, rollout_proposals)
from .errors import EmptyCorpus, IndexOutOfSentence, LengthMismatch
from .model import DTGModel
from .treebank import DepTree, Token, Vocabulary, make_token


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    metric: str
    value: float
    breakdown: list = field(default_factory=list)
    fingerprint: str = ""
    notes: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{self.metric}: {self.value:.6f}"]
        for row in self.breakdown:
            lines.append("  " + "  ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
        lines.append("")
        lines.append(f"metric={self.metric}")
        lines.append(f"value={self.value!r}")
        for k, v in self.notes.items():
            lines.append(f"{k}={v}")
        if self.fingerprint:
            lines.append(f"fingerprint={self.fingerprint}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- proposals

Proposer = Callable[[Sequence[Token], "tuple | None", int], ProposalSet]


def make_proposer(source: str, model: DTGModel | None = None, *, count: int = 20, seed: int = 0,
                  cap: int = 100_000, beam_size: int = 20,
                  file_sets: Iterable[ProposalSet] = ()) -> Proposer:
    """Proposal sets keyed by (tokens, gold heads or None, item index)."""
    by_forms = {ps.trees[0].forms: ps for ps in file_sets}

    def propose(tokens, heads, key):
        tokens = tuple(tokens)
        if source == "enumeration":
            return enumeration_proposals(tokens, cap)
        if source == "rollout":
            return rollout_proposals(tokens, count, seed * 7919 + key)
        if source == "perturb":
            if heads is None:
                raise ValueError("perturb proposals need a gold tree")
            return perturb_proposals(DepTree(tokens, heads), count, seed * 7919 + key)
        if source == "beam":
            return beam_proposals(model, tokens, beam_size, count)
        if source == "file":
            forms = tuple(t.form for t in tokens)
            if forms not in by_forms:
                raise KeyError(f"no proposals for {' '.join(forms)!r}")
            ps = by_forms[forms]
            return ProposalSet([DepTree(tokens, t.heads) for t in ps.trees], "file")
        raise ValueError(f"unknown proposal source {source!r}")

    return propose


# ---------------------------------------------------------------- perplexity

def perplexity(model: DTGModel, trees: Sequence[DepTree], proposer: Proposer) -> EvalReport:
    """exp(-sum of marginal lower bounds / number of words); <END> is not counted as a word."""
    if not trees:
        raise EmptyCorpus("no sentences")
    total, words, rows = 0.0, 0, []
    for i, t in enumerate(trees):
        ps = proposer(t.tokens, t.heads, i)
        lp = marginal_logprob(model, ps)
        total += lp
        words += t.n
        rows.append({"sentence": i, "words": t.n, "logp": lp, "proposals": len(ps)})
    ppl = math.exp(-total / words)
    return EvalReport("perplexity", ppl, rows, notes={"words": words, "logp": total,
                                                     "denominator": "words excluding <END>"})


def uniform_perplexity(lengths: Sequence[int], n_classes: int, tree_counts: Sequence[int],
                       predictions: Sequence[int]) -> float:
    """Perplexity of a model that is uniform over ``n_classes`` at every prediction."""
    num = sum(p * math.log(n_classes) - math.log(c) for p, c in zip(predictions, tree_counts))
    return math.exp(num / sum(lengths))


# ---------------------------------------------------------------- minimal pairs

@dataclass(frozen=True)
class MinimalPair:
    good: tuple
    bad: tuple
    tag: str
    heads: tuple | None = None   # shared gold tree when known

    def __post_init__(self):
        if not self.tag:
            raise ValueError("minimal pair needs a tag")


def read_pairs(stream: TextIO) -> list[MinimalPair]:
    out = []
    for ln, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ValueError(f"pairs line {ln}: expected tag, good, bad[, heads]")
        heads = tuple(int(h) for h in parts[3].split()) if len(parts) == 4 else None
        out.append(MinimalPair(tuple(parts[1].split()), tuple(parts[2].split()), parts[0], heads))
    return out


def write_pairs(pairs: Iterable[MinimalPair]) -> str:
    lines = []
    for p in pairs:
        cols = [p.tag, " ".join(p.good), " ".join(p.bad)]
        if p.heads is not None:
            cols.append(" ".join(map(str, p.heads)))
        lines.append("\t".join(cols))
    return "".join(l + "\n" for l in lines)


def minimal_pairs(model: DTGModel, pairs: Sequence[MinimalPair], proposer: Proposer,
                  vocab: Vocabulary | None = None) -> EvalReport:
    """Fraction of pairs whose grammatical member gets the higher marginal; ties count half."""
    if not pairs:
        raise EmptyCorpus("no pairs")
    rows, score = [], 0.0
    by_tag: dict = {}
    for i, p in enumerate(pairs):
        good = tuple(make_token(w, vocab) for w in p.good)
        bad = tuple(make_token(w, vocab) for w in p.bad)
        lg = marginal_logprob(model, proposer(good, p.heads, i))
        lb = marginal_logprob(model, proposer(bad, p.heads, i))
        s = 1.0 if lg > lb else 0.5 if lg == lb else 0.0
        score += s
        by_tag.setdefault(p.tag, []).append(s)
        rows.append({"pair": i, "tag": p.tag, "good": lg, "bad": lb, "score": s})
    notes = {f"accuracy[{t}]": sum(v) / len(v) for t, v in sorted(by_tag.items())}
    return EvalReport("minimal_pair_accuracy", score / len(pairs), rows, notes=notes)


# ---------------------------------------------------------------- surprisal suites

_TERM = re.compile(r"s\(\s*([^,\s)]+)\s*,\s*(-?\d+)\s*\)")
_OPS = (">=", "<=", ">", "<")


@dataclass(frozen=True)
class SurprisalTest:
    tag: str
    lhs: tuple    # ((sentence id, 1-based word index), ...)
    op: str
    rhs: tuple
    text: str = ""

    def refs(self):
        return self.lhs + self.rhs


def parse_expression(expr: str, tag: str = "test") -> SurprisalTest:
    for op in _OPS:
        if op in expr:
            left, right = expr.split(op, 1)
            break
    else:
        raise ValueError(f"no comparison in {expr!r}")

    def side(s: str):
        terms = []
        for part in s.split("+"):
            m = _TERM.fullmatch(part.strip())
            if not m:
                raise ValueError(f"bad term {part.strip()!r} in {expr!r}")
            terms.append((m.group(1), int(m.group(2))))
        return tuple(terms)

    return SurprisalTest(tag, side(left), op, side(right), expr.strip())


def read_suite(stream: TextIO) -> tuple[dict, list[SurprisalTest]]:
    """Lines ``sent<TAB>id<TAB>text`` and ``test<TAB>tag<TAB>expression``."""
    sents: dict = {}
    tests = []
    for ln, line in enumerate(stream, 1):
        line = line.rstrip("\r\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("sent", "test"):
            raise ValueError(f"suite line {ln}: expected sent/test with two fields")
        if parts[0] == "sent":
            sents[parts[1]] = tuple(parts[2].split())
        else:
            tests.append(parse_expression(parts[2], parts[1]))
    return sents, tests


def check_refs(sents: dict, tests: Sequence[SurprisalTest]) -> None:
    for t in tests:
        for sid, idx in t.refs():
            if sid not in sents:
                raise IndexOutOfSentence(f"{t.text}: unknown sentence {sid!r}")
            if not 1 <= idx <= len(sents[sid]):
                raise IndexOutOfSentence(f"{t.text}: word {idx} outside sentence {sid!r}")


def evaluate_test(t: SurprisalTest, surprisals: dict) -> tuple[bool, float, float]:
    lhs = sum(surprisals[sid][idx - 1] for sid, idx in t.lhs)
    rhs = sum(surprisals[sid][idx - 1] for sid, idx in t.rhs)
    ok = {">": lhs > rhs, "<": lhs < rhs, ">=": lhs >= rhs, "<=": lhs <= rhs}[t.op]
    return ok, lhs, rhs


def sentence_surprisals(model: DTGModel, sents: dict, beam_size: int, vocab: Vocabulary | None = None,
                        word_beam: int | None = None) -> dict:
    out = {}
    for sid, words in sents.items():
        toks = tuple(make_token(w, vocab) for w in words)
        out[sid] = beam_search(model, toks, beam_size, word_beam).surprisals
    return out


def surprisal_suite(model: DTGModel, sents: dict, tests: Sequence[SurprisalTest], beam_size: int,
                    vocab: Vocabulary | None = None, surprisals: dict | None = None) -> EvalReport:
    """Per-tag accuracy of the inequalities and their macro average."""
    if not tests:
        raise EmptyCorpus("no tests")
    check_refs(sents, tests)
    if surprisals is None:
        used = {sid for t in tests for sid, _ in t.refs()}
        surprisals = sentence_surprisals(model, {s: sents[s] for s in sents if s in used}, beam_size, vocab)
    rows, by_tag = [], {}
    for t in tests:
        ok, lhs, rhs = evaluate_test(t, surprisals)
        by_tag.setdefault(t.tag, []).append(ok)
        rows.append({"tag": t.tag, "test": t.text, "lhs": lhs, "rhs": rhs, "pass": ok})
    acc = {tag: sum(v) / len(v) for tag, v in sorted(by_tag.items())}
    macro = sum(acc.values()) / len(acc)
    notes = {f"accuracy[{t}]": a for t, a in acc.items()}
    notes["beam_size"] = beam_size
    return EvalReport("surprisal_suite_macro", macro, rows, notes=notes)


def write_surprisals(surprisals: dict, sents: dict) -> str:
    lines = []
    for sid, vals in surprisals.items():
        for i, v in enumerate(vals, 1):
            lines.append(f"{sid}\t{i}\t{sents[sid][i - 1]}\t{v:.6f}")
    return "".join(l + "\n" for l in lines)


# ---------------------------------------------------------------- UAS and reranking

def _heads(x) -> tuple:
    return tuple(x.heads) if isinstance(x, DepTree) else tuple(x)


def uas(predicted: Sequence, gold: Sequence[DepTree], ignore_forms: frozenset = frozenset()) -> float:
    """Token-weighted unlabeled attachment score.

    Predictions may be trees or bare head sequences (which need not form a tree).
    """
    if len(predicted) != len(gold):
        raise LengthMismatch(f"{len(predicted)} predicted vs {len(gold)} gold sentences")
    right = total = 0
    for p, g in zip(predicted, gold):
        ph = _heads(p)
        if len(ph) != g.n:
            raise LengthMismatch(f"sentence lengths {len(ph)} vs {g.n}")
        for i in range(g.n):
            if g.tokens[i].form in ignore_forms:
                continue
            total += 1
            right += ph[i] == g.heads[i]
    if total == 0:
        raise EmptyCorpus("no scorable tokens")
    return right / total


def rerank_eval(model: DTGModel, gold: Sequence[DepTree], proposer: Proposer) -> EvalReport:
    """UAS of reranked proposals against the mean UAS of a uniformly random pick."""
    if not gold:
        raise EmptyCorpus("no sentences")
    picked, rows = [], []
    base_right = 0.0
    words = 0
    for i, g in enumerate(gold):
        ps = proposer(g.tokens, g.heads, i)
        _, best, _ = rerank(model, ps)
        picked.append(best)
        mean_right = sum(sum(a == b for a, b in zip(t.heads, g.heads)) for t in ps.trees) / len(ps)
        base_right += mean_right
        words += g.n
        rows.append({"sentence": i, "proposals": len(ps),
                     "uas": sum(a == b for a, b in zip(best.heads, g.heads)) / g.n})
    score = uas(picked, gold)
    baseline = base_right / words
    return EvalReport("reranked_uas", score, rows, notes={"random_pick_uas": baseline,
                                                          "gain_points": 100 * (score - baseline)})


# ---------------------------------------------------------------- arc-representation ablation

ARC_VARIANTS = ("w", "arc", "w+arc")


@dataclass
class AblationRow:
    variant: str
    ppl: float
    pairs: float
    final_loss: float
    seconds: float


def arc_ablation(train_trees: Sequence[DepTree], dev_trees: Sequence[DepTree],
                 pairs: Sequence[MinimalPair], vocab: Vocabulary, base_cfg, tc,
                 proposer: Proposer, variants: Sequence[str] = ARC_VARIANTS) -> list[AblationRow]:
    """Train one model per arc representation with everything else held fixed."""
    from dataclasses import replace
    from .model import build_model, train
    rows = []
    for v in variants:
        model = build_model(replace(base_cfg, arc_repr=v))
        res = train(model, train_trees, tc)
        ppl = perplexity(model, dev_trees, proposer).value
        acc = minimal_pairs(model, pairs, proposer, vocab).value
        rows.append(AblationRow(v, ppl, acc, res.losses[-1] if res.losses else float("nan"), res.seconds))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    lines = ["Model   | PPL (lower) | Pairs (higher)", "--------+-------------+---------------"]
    for r in rows:
        lines.append(f"{r.variant:<7} | {r.ppl:11.3f} | {100 * r.pairs:13.1f}")
    return "\n".join(lines) + "\n"
