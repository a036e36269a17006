"""End-to-end acceptance checks, one test per criterion.

A pass/fail line per criterion is printed in the terminal summary.
"""
import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import EXAMPLE_HEADS, EXAMPLE_WORDS
from dtg import synth
from dtg.attnmask import Form, MaskerState, build_bundle, debug_table, expand, fold_bundle, step
from dtg.decode import beam_search, constrained_sample, enumeration_proposals, logsumexp, marginal_logprob, post_check
from dtg.evalharness import (ARC_VARIANTS, MinimalPair, ablation_table, arc_ablation, make_proposer, minimal_pairs,
                             rerank_eval)
from dtg.model import ModelConfig, TrainConfig, build_model, make_batch, nll, score_joint, sentence_bundles, train
from dtg.transitions import System, extract_oracle, replay
from dtg.treebank import DepTree, Vocabulary, enumerate_projective_trees, is_projective, make_token, random_projective_tree
from oracles import PlainDecoder, reference_masks, expand_types

SYSTEMS = [s.value for s in System]

STANDARD_TABLE = [
    ("<ROOT>", "STACK", "GEN(There)"), ("There", "STACK", "GEN(is)"), ("is", "STACK", "LEFTARC"),
    ("LEFTARC + is", "COMPOSE", "-"), ("LEFTARC2 + is", "STACK", "GEN(a)"), ("a", "STACK", "GEN(difference)"),
    ("difference", "STACK", "LEFTARC"), ("LEFTARC + difference", "COMPOSE", "-"),
    ("LEFTARC2 + difference", "STACK", "RIGHTARC"), ("RIGHTARC + is", "COMPOSE", "-"),
    ("RIGHTARC2 + is", "STACK", "RIGHTARC"), ("RIGHTARC + <ROOT>", "COMPOSE", "-"),
    ("RIGHTARC2 + <ROOT>", "STACK", "<END>"),
]


def report(num, msg):
    print(f"criterion {num}: {msg}")


def test_criterion_1_oracle_round_trip():
    t0 = time.time()
    checked = 0
    for system in SYSTEMS:
        for n in range(1, 7):
            for t in enumerate_projective_trees(n):
                assert replay(system, extract_oracle(system, t)).heads == t.heads
                checked += 1
    elapsed = time.time() - t0
    report(1, f"{checked} round trips in {elapsed:.1f}s")
    assert elapsed < 120


def test_criterion_2_hybrid_equals_standard():
    trees = [t for n in range(1, 7) for t in enumerate_projective_trees(n)]
    rng = random.Random(2)
    trees += [random_projective_tree(rng.randint(1, 30), rng.getrandbits(32)) for _ in range(1000)]
    same = sum(extract_oracle("arc-hybrid", t) == extract_oracle("arc-standard", t) for t in trees)
    report(2, f"{same}/{len(trees)} identical")
    assert same == len(trees)


def test_criterion_3_mask_golden():
    tree = DepTree.from_forms(EXAMPLE_WORDS, EXAMPLE_HEADS)
    seq = extract_oracle("arc-standard", tree)
    b = build_bundle("arc-standard", expand("arc-standard", seq))
    rows = [tuple(c.strip() for c in line.split("|"))[1:] for line in debug_table(b).splitlines()[1:]]
    assert rows == STANDARD_TABLE
    assert b.A.shape == (13, 13)
    assert np.array_equal(b.A, reference_masks(expand_types(seq)))
    report(3, "13-row table and A matrix match")


def test_criterion_4_mask_properties():
    t0 = time.time()
    for seed in range(1000):
        tree = random_projective_tree(1 + seed % 30, seed)
        for system in SYSTEMS:
            items = expand(system, extract_oracle(system, tree))
            b = build_bundle(system, items)
            A = b.A
            assert not np.triu(A, 1).any()
            f = fold_bundle(system, items)
            assert np.array_equal(A, f.A) and np.array_equal(b.R, f.R)
            state = MaskerState()
            for i, it in enumerate(items):
                before = state.masked
                state, attend, _ = step(system, state, it)
                assert not (attend & before) and before <= state.masked
                if system == "arc-standard" and it.form is Form.COMPOSE:
                    assert A[i].sum() == 3
    elapsed = time.time() - t0
    report(4, f"1000 trees x {len(SYSTEMS)} systems in {elapsed:.1f}s")
    assert elapsed < 60


def test_criterion_5_txl_reduction():
    worst = 0.0
    for seed in range(3):
        m = build_model(ModelConfig(layers=2, heads=2, dim=16, ff=32, vocab_size=20, dropout=0.0, seed=seed,
                                    mask_mode="causal")).double()
        with torch.no_grad():
            for blk in m.blocks:
                blk.rel.zero_()
        rng = random.Random(seed)
        n = rng.randint(1, 12)
        tree = DepTree.from_forms([f"w{rng.randint(0, 9)}" for _ in range(n)], random_projective_tree(n, seed).heads,
                                  Vocabulary([f"w{i}" for i in range(16)]))
        b = make_batch(sentence_bundles(m.cfg.system, [tree]), m.classmap, m.cfg.rel_k, "causal")
        with torch.no_grad():
            got = m(b)[0]
            want = PlainDecoder(m)(m.embed(b.tok, b.sym, b.head, b.kk, b.typ))[0]
        worst = max(worst, ((got - want).abs() / want.abs().clamp(min=1e-300)).max().item())
    report(5, f"max relative error {worst:.2e}")
    assert worst < 1e-6


def test_criterion_6_gradient_check():
    t0 = time.time()
    vocab = Vocabulary(list("abcdefg"))
    m = build_model(ModelConfig(layers=2, heads=2, dim=16, ff=32, vocab_size=len(vocab), dropout=0.0, seed=1)).double()
    with torch.no_grad():
        for e in (m.tok_emb, m.arc_emb, m.k_emb):
            e.weight.normal_(0.0, 1.0)
    rng = random.Random(6)
    trees = []
    for i in range(3):
        n = rng.randint(2, 6)
        trees.append(DepTree.from_forms([rng.choice("abcdefg") for _ in range(n)],
                                        random_projective_tree(n, i).heads, vocab))
    b = make_batch(sentence_bundles(m.cfg.system, trees), m.classmap, m.cfg.rel_k)
    params = list(m.parameters())
    grads = torch.autograd.grad(nll(m(b), b.targets)[0], params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for g, p in zip(grads, params)]
    sizes = [p.numel() for p in params]
    h, ok, total = 1e-3, 0, 500
    for _ in range(total):
        pi = rng.choices(range(len(params)), weights=sizes)[0]
        p = params[pi]
        idx = tuple(rng.randrange(s) for s in p.shape)
        old = p.data[idx].item()
        with torch.no_grad():
            p.data[idx] = old + h
            lp = nll(m(b), b.targets)[0].item()
            p.data[idx] = old - h
            lm = nll(m(b), b.targets)[0].item()
            p.data[idx] = old
        num, ana = (lp - lm) / (2 * h), grads[pi][idx].item()
        denom = max(abs(num), abs(ana))
        ok += denom == 0 or abs(num - ana) / denom < 1e-4 or abs(num - ana) < 1e-10
    elapsed = time.time() - t0
    report(6, f"{ok}/{total} coordinates within 1e-4 in {elapsed:.1f}s")
    assert ok >= 0.99 * total and elapsed < 300


def test_criterion_7_exact_marginalization():
    vocab = Vocabulary(list("abcd"))
    worst_enum = worst_beam = 0.0
    for system in SYSTEMS:
        m = build_model(ModelConfig(layers=2, heads=2, dim=16, ff=32, vocab_size=len(vocab), dropout=0.0,
                                    system=system, seed=7)).double().eval()
        rng = random.Random(7)
        for n in range(1, 5):
            for _ in range(3):
                toks = tuple(make_token(rng.choice("abcd"), vocab) for _ in range(n))
                trees = [DepTree(toks, t.heads) for t in enumerate_projective_trees(n)]
                brute = math.log(sum(math.exp(s) for s in score_joint(m, trees)))
                enum = marginal_logprob(m, enumeration_proposals(toks))
                beam = beam_search(m, toks, beam_size=100_000).logp
                worst_enum = max(worst_enum, abs(enum - brute))
                worst_beam = max(worst_beam, abs(beam - brute))
    report(7, f"enumeration error {worst_enum:.1e}, exact beam error {worst_beam:.1e}")
    assert worst_enum < 1e-6 and worst_beam < 1e-6


def test_criterion_8_surprisal_telescoping():
    vocab = synth.lexicon_vocab()
    worst, count = 0.0, 0
    for system in SYSTEMS:
        m = build_model(ModelConfig(layers=2, heads=2, dim=32, ff=64, vocab_size=len(vocab), dropout=0.0, seed=8,
                                    system=system)).double()
        for tree in synth.treebank(8, 8, vocab):
            for beam in (1, 10, 50):
                res = beam_search(m, tree.tokens, beam)
                worst = max(worst, abs(sum(res.surprisals) + res.end_term + res.logp))
                count += 1
    report(8, f"max telescoping gap {worst:.1e} over {count} searches")
    assert worst < 1e-9


@pytest.fixture(scope="module")
def agreement_setup():
    vocab = synth.lexicon_vocab()
    cfg = ModelConfig(layers=4, heads=4, dim=128, ff=512, vocab_size=len(vocab), dropout=0.1, seed=9)
    train_trees = synth.treebank(5000, 9, vocab)
    pairs = [MinimalPair(it.words, it.flipped, "agreement_attractor" if it.attractor else "agreement_plain", it.heads)
             for it in synth.agreement_pairs(200, 909)]
    baseline_pairs = [MinimalPair(it.words, it.flipped, "baseline", it.heads)
                      for it in synth.agreement_pairs(1000, 919)]
    rerank_gold = synth.treebank(200, 929, vocab)
    return vocab, cfg, train_trees, pairs, baseline_pairs, rerank_gold


@pytest.mark.slow
def test_criterion_9_desk_scale_learning(agreement_setup):
    vocab, cfg, train_trees, pairs, baseline_pairs, rerank_gold = agreement_setup
    proposer = make_proposer("perturb", count=20, seed=9)
    untrained = build_model(cfg).double()
    base = minimal_pairs(untrained, baseline_pairs, proposer, vocab).value
    model = build_model(cfg)
    t0 = time.time()
    res = train(model, train_trees, TrainConfig(steps=300, batch_size=32, lr=1e-3, warmup=100, log_every=0, seed=9))
    minutes = (time.time() - t0) / 60
    model = model.double().eval()
    acc = minimal_pairs(model, pairs, proposer, vocab).value
    rr = rerank_eval(model, rerank_gold, proposer)
    gain = rr.notes["gain_points"]
    report(9, f"untrained pairs {base:.3f}, trained pairs {acc:.3f}, reranked UAS {rr.value:.3f} vs random "
              f"{rr.notes['random_pick_uas']:.3f} (+{gain:.1f} points), training {minutes:.1f} min, "
              f"final loss {res.losses[-1]:.3f}")
    assert abs(base - 0.5) <= 0.05
    assert minutes <= 30
    assert acc > 0.9
    assert gain >= 5


def test_criterion_10_arc_ablation():
    vocab = synth.lexicon_vocab()
    base = ModelConfig(layers=2, heads=2, dim=32, ff=64, vocab_size=len(vocab), dropout=0.0, seed=10)
    train_trees = synth.treebank(300, 10, vocab)
    dev = synth.treebank(20, 1010, vocab)
    pairs = [MinimalPair(it.words, it.flipped, "agreement", it.heads) for it in synth.agreement_pairs(20, 1020)]
    rows = arc_ablation(train_trees, dev, pairs, vocab, base,
                        TrainConfig(steps=30, batch_size=16, lr=3e-3, warmup=5, log_every=0),
                        make_proposer("perturb", count=5, seed=10))
    table = ablation_table(rows)
    print(table)
    assert [r.variant for r in rows] == list(ARC_VARIANTS)
    assert all(math.isfinite(r.ppl) and 0 <= r.pairs <= 1 for r in rows)
    assert table.splitlines()[0].startswith("Model")
    # additive degeneracies: without word embeddings w+arc is arc; without arc embeddings it is w
    b = make_batch(sentence_bundles("arc-standard", dev[:4]), build_model(base).classmap, base.rel_k)
    models = {v: build_model(replace(base, arc_repr=v)) for v in ARC_VARIANTS}
    with torch.no_grad():
        models["w+arc"].tok_emb.weight.zero_()
        models["arc"].tok_emb.weight.zero_()
        assert torch.equal(models["w+arc"](b), models["arc"](b))
        fresh = {v: build_model(replace(base, arc_repr=v)) for v in ("w+arc", "w")}
        for mm in fresh.values():
            mm.arc_emb.weight.zero_()
            mm.k_emb.weight.zero_()
        assert torch.equal(fresh["w+arc"](b), fresh["w"](b))
    report(10, "ablation ran for " + ", ".join(ARC_VARIANTS))


def test_criterion_11_generation_validity():
    vocab = synth.lexicon_vocab()
    t0 = time.time()
    valid = total = 0
    for system in SYSTEMS:
        m = build_model(ModelConfig(layers=2, heads=2, dim=32, ff=64, vocab_size=len(vocab), dropout=0.0,
                                    system=system, seed=11))
        k = 10_000 if system == "arc-standard" else 1000
        for s in constrained_sample(m, vocab, max_words=20, seed=11, n=k):
            total += 1
            tree = post_check(system, s.seq, max_words=20)
            valid += tree.heads == s.tree.heads and is_projective(tree.heads) and s.seq[0].kind == "GEN"
    report(11, f"{valid}/{total} samples valid in {time.time() - t0:.1f}s")
    assert valid == total
