"""Command-line entry point: ``dtg <command> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
Options may also come from ``--config FILE`` (key=value lines, keys spelled
like the long flags); anything given on the command line wins.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import logging
import os
import random
import sys

from .errors import DTGError

log = logging.getLogger("dtg")

OUTPUT_ENV = "DTG_OUTPUT_DIR"
_NOT_HASHED = {"config", "jobs", "func", "command", "output", "verbose"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def derive_seed(seed: int, label: str) -> int:
    """Independent seed for a named random stream."""
    h = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(h[:4], "little")


def config_fingerprint(args: argparse.Namespace) -> str:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_HASHED}
    resolved["command"] = args.command
    blob = json.dumps(resolved, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def resolve_path(path: str) -> str:
    base = os.environ.get(OUTPUT_ENV)
    if base and path != "-" and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


@contextlib.contextmanager
def _open_in(path: str):
    if path == "-":
        yield sys.stdin
    else:
        with open(path, encoding="utf-8") as fh:
            yield fh


@contextlib.contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
        sys.stdout.flush()
    else:
        path = resolve_path(path)
        d = os.path.dirname(path)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yield fh


def _announce(args) -> None:
    print(f"# fingerprint={args.fingerprint}", file=sys.stderr)


# ---------------------------------------------------------------- helpers

def _read_trees(path: str, vocab=None, strict: bool = False):
    from .treebank import parse_conllu
    with _open_in(path) as fh:
        return parse_conllu(fh, vocab=vocab, strict=strict)


def _load(args):
    from .model import load_checkpoint
    ckpt = load_checkpoint(args.checkpoint)
    return ckpt.model.double(), ckpt.vocab


def _proposer(args, model, vocab):
    from .decode import read_proposal_file
    from .evalharness import make_proposer
    sets = ()
    if args.proposals == "file":
        if not args.proposal_file:
            raise UsageError("--proposals file needs --proposal-file")
        with _open_in(args.proposal_file) as fh:
            sets = read_proposal_file(fh, vocab)
    return make_proposer(args.proposals, model, count=args.count, seed=derive_seed(args.seed, "proposals"),
                         cap=args.cap, beam_size=args.beam_size, file_sets=sets)


def _write_report(args, report) -> None:
    report.fingerprint = args.fingerprint
    with _open_out(args.output) as out:
        out.write(report.to_text())


# ---------------------------------------------------------------- commands

def cmd_oracle(args) -> int:
    from .transitions import extract_oracle, format_transitions
    corpus = _read_trees(args.input, strict=True)
    with _open_out(args.output) as out:
        for t in corpus.sentences:
            out.write(format_transitions(extract_oracle(args.system, t), args.system) + "\n")
    return 0


def _read_transition_lines(path: str, system, vocab=None):
    from .transitions import parse_transitions
    seqs = []
    with _open_in(path) as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                seqs.append(parse_transitions(line, system, vocab))
    return seqs


def cmd_replay(args) -> int:
    from .transitions import replay
    from .treebank import format_conllu
    seqs = _read_transition_lines(args.input, args.system)
    with _open_out(args.output) as out:
        for seq in seqs:
            out.write(format_conllu(replay(args.system, seq)) + "\n")
    return 0


def _looks_like_transitions(path: str) -> tuple[bool, str]:
    with _open_in(path) as fh:
        text = fh.read()
    first = next((l for l in text.splitlines() if l.strip() and not l.startswith("#")), "")
    return first.split()[0].startswith("GEN:") if first.split() else False, text


def cmd_mask(args) -> int:
    from .attnmask import ClassMap, debug_table, export_jsonl, sentence_bundle
    from .transitions import extract_oracle, parse_transitions
    from .treebank import Vocabulary, parse_conllu
    is_seq, text = _looks_like_transitions(args.input)
    if args.input_format == "transitions" or (args.input_format == "auto" and is_seq):
        lines = [l for l in text.splitlines() if l.strip() and not l.startswith("#")]
        forms = {t.token.form for l in lines for t in parse_transitions(l, args.system) if t.token}
        vocab = Vocabulary(sorted(forms))
        seqs = [parse_transitions(l, args.system, vocab) for l in lines]
    else:
        corpus = parse_conllu(io.StringIO(text), strict=True)
        vocab = corpus.vocabulary
        seqs = [extract_oracle(args.system, t) for t in corpus.sentences]
    cm = ClassMap(len(vocab), args.system)
    with _open_out(args.output) as out:
        for seq in seqs:
            bundle = sentence_bundle(args.system, seq, vocab)
            if args.debug_table:
                out.write(debug_table(bundle, vocab, args.system) + "\n\n")
            else:
                out.write(export_jsonl(bundle, cm) + "\n")
    return 0


def _model_config(args, vocab_size: int):
    from .model import ModelConfig
    return ModelConfig(layers=args.layers, heads=args.heads, dim=args.dim, ff=args.ff,
                       vocab_size=vocab_size, rel_k=args.rel_k, arc_repr=args.arc_repr,
                       dropout=args.dropout, seed=derive_seed(args.seed, "init"), system=args.system,
                       max_k=args.max_k, mask_mode=args.mask_mode)


def _train_config(args):
    from .model import TrainConfig
    return TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, warmup=args.warmup,
                       emb_mult=args.emb_mult, weight_decay=args.weight_decay, optimizer=args.optimizer,
                       clip=args.clip, seed=derive_seed(args.seed, "batches"), log_every=args.log_every,
                       checkpoint_every=args.checkpoint_every, time_limit=args.time_limit)


def _training_data(args):
    from . import synth
    from .treebank import parse_conllu
    if args.train:
        with _open_in(args.train) as fh:
            corpus = parse_conllu(fh, min_freq=args.min_freq)
        return corpus.sentences, corpus.vocabulary
    vocab = synth.lexicon_vocab()
    return synth.treebank(args.synthetic, derive_seed(args.seed, "synth"), vocab), vocab


def cmd_train(args) -> int:
    from .model import build_model, load_checkpoint, restore_optimizer, train
    tc = _train_config(args)
    path = resolve_path(args.checkpoint)
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    if args.resume:
        ckpt = load_checkpoint(path)
        model, vocab = ckpt.model, ckpt.vocab
        trees, _ = _training_data(args)
        from .treebank import DepTree
        trees = [DepTree.from_forms(t.forms, t.heads, vocab) for t in trees]
        opt, sched = restore_optimizer(ckpt, tc)
        res = train(model, trees, tc, checkpoint_path=path, vocab=vocab, optimizer=opt,
                    scheduler=sched, start_step=ckpt.step)
    else:
        trees, vocab = _training_data(args)
        model = build_model(_model_config(args, len(vocab)))
        res = train(model, trees, tc, checkpoint_path=path, vocab=vocab)
    tail = res.losses[-min(50, len(res.losses)):] if res.losses else [float("nan")]
    print(f"steps={res.steps}", file=sys.stderr)
    print(f"final_loss={sum(tail) / len(tail):.6f}", file=sys.stderr)
    print(f"seconds={res.seconds:.1f}", file=sys.stderr)
    print(f"checkpoint={path}", file=sys.stderr)
    with open(path + ".fingerprint", "w", encoding="utf-8") as fh:
        fh.write(args.fingerprint + "\n")
    return 0


def cmd_sample(args) -> int:
    from .decode import constrained_sample, post_check
    from .transitions import format_transitions
    from .treebank import format_conllu
    model, vocab = _load(args)
    samples = constrained_sample(model, vocab, args.max_words, args.temperature,
                                 derive_seed(args.seed, "sample"), args.count)
    system = model.cfg.system
    with _open_out(args.output) as out:
        for i, s in enumerate(samples):
            post_check(system, s.seq, args.max_words)
            comments = [f"sample = {i}", f"text = {' '.join(s.tree.forms)}",
                        f"logp = {s.logp:.6f}", f"transitions = {format_transitions(s.seq, system)}"]
            out.write(format_conllu(s.tree, comments) + "\n")
    return 0


def cmd_score(args) -> int:
    from .model import score_joint
    model, vocab = _load(args)
    corpus = _read_trees(args.input, vocab=vocab, strict=True)
    scores = score_joint(model, corpus.sentences)
    with _open_out(args.output) as out:
        for i, (t, s) in enumerate(zip(corpus.sentences, scores)):
            out.write(f"{i}\t{s:.6f}\t{' '.join(t.forms)}\n")
    return 0


def cmd_ppl(args) -> int:
    from .evalharness import perplexity
    model, vocab = _load(args)
    corpus = _read_trees(args.input, vocab=vocab, strict=True)
    report = perplexity(model, corpus.sentences, _proposer(args, model, vocab))
    report.notes["proposals"] = args.proposals
    _write_report(args, report)
    return 0


def cmd_pairs(args) -> int:
    from .evalharness import minimal_pairs, read_pairs
    model, vocab = _load(args)
    with _open_in(args.input) as fh:
        pairs = read_pairs(fh)
    report = minimal_pairs(model, pairs, _proposer(args, model, vocab), vocab)
    report.notes["proposals"] = args.proposals
    _write_report(args, report)
    return 0


def cmd_surprisal(args) -> int:
    from .evalharness import read_suite, sentence_surprisals, surprisal_suite, check_refs, write_surprisals
    model, vocab = _load(args)
    with _open_in(args.input) as fh:
        sents, tests = read_suite(fh)
    check_refs(sents, tests)
    surps = sentence_surprisals(model, sents, args.beam_size, vocab, args.word_beam)
    if args.surprisals:
        with _open_out(args.surprisals) as out:
            out.write(write_surprisals(surps, sents))
    if tests:
        _write_report(args, surprisal_suite(model, sents, tests, args.beam_size, vocab, surps))
    return 0


def cmd_rerank(args) -> int:
    from .decode import rerank
    from .evalharness import rerank_eval
    from .treebank import format_conllu
    model, vocab = _load(args)
    corpus = _read_trees(args.input, vocab=vocab, strict=True)
    proposer = _proposer(args, model, vocab)
    if args.trees:
        with _open_out(args.trees) as out:
            for i, g in enumerate(corpus.sentences):
                idx, best, scores = rerank(model, proposer(g.tokens, g.heads, i))
                out.write(format_conllu(best, [f"proposal = {idx}", f"logp = {scores[idx]:.6f}"]) + "\n")
    _write_report(args, rerank_eval(model, corpus.sentences, proposer))
    return 0


def cmd_enumerate(args) -> int:
    from .treebank import count_projective_trees, enumerate_projective_trees, format_conllu
    with _open_out(args.output) as out:
        if args.count_only:
            out.write(f"{count_projective_trees(args.n)}\n")
            return 0
        for k, t in enumerate(enumerate_projective_trees(args.n, args.cap)):
            if args.format == "conllu":
                out.write(format_conllu(t, [f"tree {k}"]) + "\n")
            else:
                out.write(" ".join(map(str, t.heads)) + "\n")
    return 0


def cmd_synth(args) -> int:
    from . import synth
    from .evalharness import MinimalPair, write_pairs
    from .treebank import write_conllu
    seed = derive_seed(args.seed, "synth")
    with _open_out(args.output) as out:
        if args.kind == "treebank":
            write_conllu(synth.treebank(args.count, seed, synth.lexicon_vocab()), out)
        elif args.kind == "pairs":
            items = synth.agreement_pairs(args.count, seed)
            tag = lambda it: "agreement_attractor" if it.attractor else "agreement_plain"
            out.write(write_pairs(MinimalPair(it.words, it.flipped, tag(it), it.heads) for it in items))
        else:
            good, bad = synth.attractor_example()
            v = good.verb_index
            out.write(f"sent\tgood\t{' '.join(good.words)}\n")
            out.write(f"sent\tbad\t{' '.join(bad.words)}\n")
            out.write(f"test\tagreement\ts(bad,{v}) > s(good,{v})\n")
    return 0


def cmd_ablation(args) -> int:
    from . import synth
    from .evalharness import MinimalPair, ablation_table, arc_ablation, make_proposer
    vocab = synth.lexicon_vocab()
    trees = synth.treebank(args.synthetic, derive_seed(args.seed, "synth"), vocab)
    dev = synth.treebank(args.dev, derive_seed(args.seed, "dev"), vocab)
    items = synth.agreement_pairs(args.pairs, derive_seed(args.seed, "pairs"))
    pairs = [MinimalPair(it.words, it.flipped, "agreement", it.heads) for it in items]
    proposer = make_proposer("perturb", count=args.count, seed=derive_seed(args.seed, "proposals"))
    rows = arc_ablation(trees, dev, pairs, vocab, _model_config(args, len(vocab)), _train_config(args), proposer)
    with _open_out(args.output) as out:
        out.write(ablation_table(rows))
        out.write(f"\nfingerprint={args.fingerprint}\n")
        for r in rows:
            out.write(f"ppl[{r.variant}]={r.ppl!r}\npairs[{r.variant}]={r.pairs!r}\n")
    return 0


# ---------------------------------------------------------------- parser

SYSTEMS = ("arc-standard", "arc-eager", "arc-hybrid", "arc-swift")
PROPOSALS = ("enumeration", "rollout", "perturb", "beam", "file")


def _common(p) -> None:
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="cap on worker threads")
    p.add_argument("--output", default="-", help=f"output file ('-' is stdout; relative paths go under ${OUTPUT_ENV})")
    p.add_argument("--verbose", action="store_true")


def _system(p) -> None:
    p.add_argument("--system", default="arc-standard", choices=SYSTEMS)


def _model_flags(p) -> None:
    _system(p)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--ff", type=int, default=512)
    p.add_argument("--rel-k", type=int, default=16)
    p.add_argument("--arc-repr", default="w+arc", choices=("w+arc", "arc", "w"))
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-k", type=int, default=32)
    p.add_argument("--mask-mode", default="stack", choices=("stack", "causal"))
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--emb-mult", type=float, default=2.0)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--optimizer", default="adamw", choices=("adamw", "sgd"))
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--time-limit", type=float, default=0.0, help="seconds, 0 for none")


def _eval_flags(p, default_source: str) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-")
    p.add_argument("--proposals", default=default_source, choices=PROPOSALS)
    p.add_argument("--proposal-file")
    p.add_argument("--count", type=int, default=20, help="proposal trees per sentence")
    p.add_argument("--cap", type=int, default=100_000, help="enumeration cap")
    p.add_argument("--beam-size", type=int, default=20)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dtg", description="Dependency transformer grammars.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("oracle", help="treebank to oracle transition lines")
    _common(p); _system(p)
    p.add_argument("--input", default="-")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("replay", help="transition lines to a treebank")
    _common(p); _system(p)
    p.add_argument("--input", default="-")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("mask", help="dump attention masks and relative positions")
    _common(p); _system(p)
    p.add_argument("--input", default="-")
    p.add_argument("--input-format", default="auto", choices=("auto", "conllu", "transitions"))
    p.add_argument("--debug-table", action="store_true", help="print the expanded item table")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a model")
    _common(p); _model_flags(p)
    p.add_argument("--train", help="CoNLL treebank; omitted means the synthetic grammar")
    p.add_argument("--synthetic", type=int, default=5000, help="synthetic sentences when --train is absent")
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="constrained generation")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--max-words", type=int, default=20)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("score", help="joint log-probability of each tree")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ppl", help="perplexity upper bound")
    _common(p); _eval_flags(p, "rollout")
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("pairs", help="minimal-pair accuracy")
    _common(p); _eval_flags(p, "rollout")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("surprisal", help="beam-search surprisals and inequality suites")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-")
    p.add_argument("--beam-size", type=int, default=50)
    p.add_argument("--word-beam", type=int)
    p.add_argument("--surprisals", help="also write per-word surprisals here")
    p.set_defaults(func=cmd_surprisal)

    p = sub.add_parser("rerank", help="rerank proposal trees and report UAS")
    _common(p); _eval_flags(p, "perturb")
    p.add_argument("--trees", help="also write the chosen trees here")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("enumerate", help="all projective trees over n words")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--cap", type=int, default=100_000)
    p.add_argument("--count-only", action="store_true")
    p.add_argument("--format", default="heads", choices=("heads", "conllu"))
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("synth", help="synthetic agreement grammar data")
    _common(p)
    p.add_argument("--kind", default="treebank", choices=("treebank", "pairs", "suite"))
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablation", help="arc-representation ablation on the synthetic grammar")
    _common(p); _model_flags(p)
    p.add_argument("--synthetic", type=int, default=5000)
    p.add_argument("--dev", type=int, default=200)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_ablation)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = ap.parse_args(argv)
    if not args.config:
        return args
    from .model import read_config_text
    with open(args.config, encoding="utf-8") as fh:
        conf = read_config_text(fh.read())
    sub = ap._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in conf.items():
        dest = k.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"dtg {args.command}: unknown config key {k!r}")
        action = known[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = v.lower() in ("1", "true", "yes", "on")
        else:
            if action.choices is not None and v not in action.choices:
                raise UsageError(f"dtg {args.command}: config {k}={v!r} not in {sorted(action.choices)}")
            defaults[dest] = action.type(v) if action.type else v
        action.required = False
    sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except OSError as e:
        print(f"dtg: cannot read config: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    random.seed(derive_seed(args.seed, "global"))
    try:
        import torch
        torch.set_num_threads(max(1, args.jobs))
        torch.manual_seed(derive_seed(args.seed, "torch"))
    except ImportError:  # pragma: no cover
        pass
    args.fingerprint = config_fingerprint(args)
    _announce(args)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dtg {args.command}: {e}", file=sys.stderr)
        return 1
    except (DTGError, ValueError, KeyError, OSError) as e:
        print(f"dtg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
