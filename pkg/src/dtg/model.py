"""Transformer decoder over expanded transition sequences.

Attention is restricted by the stack/compose masks and biased by a learned
per-head scalar for each relative-position bucket. With ``mask_mode="causal"``
the same network becomes an ordinary causal decoder over the transition
sequence, with buckets given by clipped distance.
"""
from __future__ import annotations

import io
import json
import logging
import math
import random
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attnmask import (DEFAULT_K, ClassMap, ExpandedItem, Form, Kind, MaskBundle, build_bundle,
                       causal_buckets, expand, n_buckets)
from .errors import Divergence, OutOfVocab, ShapeMismatch
from .transitions import System, Transition, extract_oracle
from .treebank import NUM_RESERVED, DepTree, Vocabulary

log = logging.getLogger(__name__)

IGNORE = -100


class ArcRepr(str, Enum):
    W_PLUS_ARC = "w+arc"
    ARC_ONLY = "arc"
    W_ONLY = "w"

    @classmethod
    def parse(cls, value) -> "ArcRepr":
        if isinstance(value, ArcRepr):
            return value
        v = str(value).strip().lower()
        aliases = {"w_plus_arc": cls.W_PLUS_ARC, "arc_only": cls.ARC_ONLY, "w_only": cls.W_ONLY}
        if v in aliases:
            return aliases[v]
        return cls(v)


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    dim: int = 128
    ff: int = 512
    vocab_size: int = NUM_RESERVED
    rel_k: int = DEFAULT_K
    arc_repr: str = "w+arc"
    dropout: float = 0.1
    seed: int = 0
    system: str = "arc-standard"
    max_k: int = 32
    mask_mode: str = "stack"

    def __post_init__(self):
        self.arc_repr = ArcRepr.parse(self.arc_repr).value
        self.system = System.parse(self.system).value
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.vocab_size < NUM_RESERVED:
            raise ValueError("vocab_size must cover the reserved block")
        if self.mask_mode not in ("stack", "causal"):
            raise ValueError(f"mask_mode must be stack or causal, got {self.mask_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in names:
                raise ValueError(f"unknown model config key {k!r}")
            kw[k] = v
        return cls(**kw)

    @classmethod
    def coerce(cls, d: dict) -> "ModelConfig":
        """Build from string values, e.g. parsed key=value text."""
        kw = {}
        defaults = cls()
        for k, v in d.items():
            cur = getattr(defaults, k, None)
            if cur is None and k not in {f.name for f in fields(cls)}:
                raise ValueError(f"unknown model config key {k!r}")
            kw[k] = type(cur)(v) if isinstance(v, str) and not isinstance(cur, str) else v
        return cls(**kw)


def read_config_text(text: str) -> dict:
    """``key=value`` lines; '#' starts a comment."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_config_text(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


# ---------------------------------------------------------------- batching

TYPE_TOKEN, TYPE_ARC, TYPE_POP = 0, 1, 2


def item_features(it: ExpandedItem) -> tuple[int, int, int, int, int]:
    """(token id, arc symbol id, head id, k index, item type)."""
    if it.kind in (Kind.ROOT, Kind.TOKEN):
        return it.token_id, 0, 0, 0, TYPE_TOKEN
    if it.kind is Kind.POP:
        return 0, it.token_id, 0, 0, TYPE_POP
    return 0, it.token_id, it.head_id or 0, (it.k or 1) - 1, TYPE_ARC


@dataclass
class Batch:
    tok: torch.Tensor       # [B, T] long
    sym: torch.Tensor
    head: torch.Tensor
    kk: torch.Tensor
    typ: torch.Tensor
    allowed: torch.Tensor   # [B, T, T] bool
    buckets: torch.Tensor   # [B, T, T] long
    targets: torch.Tensor   # [B, T] long, IGNORE where nothing is predicted
    lengths: list

    @property
    def size(self) -> int:
        return self.tok.shape[0]


def make_batch(bundles: Sequence[MaskBundle], classmap: ClassMap, K: int = DEFAULT_K,
               mask_mode: str = "stack") -> Batch:
    B = len(bundles)
    T = max(b.T for b in bundles)
    feats = np.zeros((5, B, T), dtype=np.int64)
    allowed = np.zeros((B, T, T), dtype=bool)
    buckets = np.zeros((B, T, T), dtype=np.int64)
    targets = np.full((B, T), IGNORE, dtype=np.int64)
    idx = np.arange(T)
    allowed[:, idx, idx] = True  # padding rows attend to themselves only
    for b, bun in enumerate(bundles):
        t = bun.T
        for i, it in enumerate(bun.items):
            feats[:, b, i] = item_features(it)
        if mask_mode == "causal":
            allowed[b, :t, :t] = np.tril(np.ones((t, t), dtype=bool))
            buckets[b, :t, :t] = causal_buckets(t, K)
        else:
            allowed[b, :t, :t] = bun.A
            buckets[b, :t, :t] = bun.buckets(K)
        for p, c in zip(bun.prediction_positions, bun.target_ids(classmap)):
            if c >= classmap.n_classes:
                raise OutOfVocab(f"target class {c} outside {classmap.n_classes} classes")
            targets[b, p] = c
    if feats[[0, 2]].max(initial=0) >= classmap.vocab_size:
        raise OutOfVocab("token id outside the model vocabulary")
    tt = torch.from_numpy
    return Batch(tt(feats[0]), tt(feats[1]), tt(feats[2]), tt(feats[3]), tt(feats[4]),
                 tt(allowed), tt(buckets), tt(targets), [b.T for b in bundles])


# ---------------------------------------------------------------- network

class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, nb: int):
        super().__init__()
        self.h = cfg.heads
        self.dh = cfg.dim // cfg.heads
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.qkv = nn.Linear(cfg.dim, 3 * cfg.dim)
        self.proj = nn.Linear(cfg.dim, cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ff1 = nn.Linear(cfg.dim, cfg.ff)
        self.ff2 = nn.Linear(cfg.ff, cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.rel = nn.Parameter(torch.zeros(nb, cfg.heads))

    def _split(self, x):
        B, T, _ = x.shape
        q, k, v = self.qkv(x).split(self.h * self.dh, dim=-1)
        shape = (B, T, self.h, self.dh)
        return (q.view(shape).transpose(1, 2), k.view(shape).transpose(1, 2),
                v.view(shape).transpose(1, 2))

    def _attend(self, q, k, v, allowed, buckets):
        # q [B,H,Tq,dh], k/v [B,H,Tk,dh], allowed/buckets [B,Tq,Tk]
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        scores = scores + self.rel[buckets].permute(0, 3, 1, 2)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        w = self.drop(torch.softmax(scores, dim=-1))
        out = (w @ v).transpose(1, 2).reshape(q.shape[0], q.shape[2], -1)
        return self.drop(self.proj(out)), w

    def forward(self, x, allowed, buckets):
        q, k, v = self._split(self.ln1(x))
        a, _ = self._attend(q, k, v, allowed, buckets)
        x = x + a
        return x + self.drop(self.ff2(self.drop(F.gelu(self.ff1(self.ln2(x))))))

    def step(self, x, kc, vc, allowed, buckets):
        q, k, v = self._split(self.ln1(x))
        kc = torch.cat([kc, k], dim=2)
        vc = torch.cat([vc, v], dim=2)
        a, _ = self._attend(q, kc, vc, allowed[:, None, :], buckets[:, None, :])
        x = x + a
        x = x + self.drop(self.ff2(self.drop(F.gelu(self.ff1(self.ln2(x))))))
        return x, kc, vc


@dataclass
class Cache:
    k: list
    v: list

    @property
    def cols(self) -> int:
        return self.k[0].shape[2]

    @property
    def size(self) -> int:
        return self.k[0].shape[0]

    def select(self, index) -> "Cache":
        index = torch.as_tensor(index, dtype=torch.long)
        return Cache([t.index_select(0, index) for t in self.k], [t.index_select(0, index) for t in self.v])


class DTGModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.classmap = ClassMap(cfg.vocab_size, cfg.system, cfg.max_k)
        self.arc_repr = ArcRepr.parse(cfg.arc_repr)
        self.swift = System.parse(cfg.system) is System.ARC_SWIFT
        nb = n_buckets(cfg.rel_k)
        g = torch.Generator().manual_seed(cfg.seed)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.arc_emb = nn.Embedding(NUM_RESERVED, cfg.dim)
        self.k_emb = nn.Embedding(max(cfg.max_k, 1), cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg, nb) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.out = nn.Linear(cfg.dim, self.classmap.n_classes)
        self.drop = nn.Dropout(cfg.dropout)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Embedding)):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * 0.02)
                if isinstance(m, nn.Linear):
                    m.bias.zero_()

    def embedding_parameters(self) -> list:
        return [self.tok_emb.weight, self.arc_emb.weight, self.k_emb.weight]

    def zero_output(self):
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    def embed(self, tok, sym, head, kk, typ):
        t = self.tok_emb(tok)
        s = self.arc_emb(sym)
        if self.swift:
            s = s + self.k_emb(kk)
        h = self.tok_emb(head)
        if self.arc_repr is ArcRepr.W_PLUS_ARC:
            arc = s + h
        elif self.arc_repr is ArcRepr.ARC_ONLY:
            arc = s
        else:
            arc = h
        pop = self.arc_emb(sym)
        typ = typ[..., None]
        return torch.where(typ == TYPE_TOKEN, t, torch.where(typ == TYPE_ARC, arc, pop))

    def forward(self, batch: Batch, return_hidden: bool = False):
        B, T = batch.tok.shape
        if batch.allowed.shape != (B, T, T) or batch.buckets.shape != (B, T, T):
            raise ShapeMismatch(f"mask shape {tuple(batch.allowed.shape)} vs items {(B, T)}")
        x = self.drop(self.embed(batch.tok, batch.sym, batch.head, batch.kk, batch.typ))
        for blk in self.blocks:
            x = blk(x, batch.allowed, batch.buckets)
        x = self.ln_f(x)
        logits = self.out(x)
        return (logits, x) if return_hidden else logits

    def new_cache(self, batch_size: int) -> Cache:
        p = self.out.weight
        shape = (batch_size, self.cfg.heads, 0, self.cfg.dim // self.cfg.heads)
        return Cache([p.new_zeros(shape) for _ in self.blocks], [p.new_zeros(shape) for _ in self.blocks])

    def step(self, cache: Cache, feats: torch.Tensor, allowed: torch.Tensor, buckets: torch.Tensor):
        """Append one column: ``feats`` [B,5], ``allowed``/``buckets`` [B, cols+1]."""
        if allowed.shape != (cache.size, cache.cols + 1):
            raise ShapeMismatch(f"row mask {tuple(allowed.shape)} vs cache {(cache.size, cache.cols)}")
        f = feats[:, :, None]
        x = self.drop(self.embed(f[:, 0], f[:, 1], f[:, 2], f[:, 3], f[:, 4]))
        ks, vs = [], []
        for blk, kc, vc in zip(self.blocks, cache.k, cache.v):
            x, kc, vc = blk.step(x, kc, vc, allowed, buckets)
            ks.append(kc)
            vs.append(vc)
        return self.out(self.ln_f(x))[:, 0], Cache(ks, vs)


def build_model(cfg: ModelConfig) -> DTGModel:
    torch.manual_seed(cfg.seed)
    return DTGModel(cfg)


# ---------------------------------------------------------------- loss and scoring

def nll(logits: torch.Tensor, targets: torch.Tensor):
    """Mean NLL over prediction positions (float64) and the per-position values."""
    lp = torch.log_softmax(logits.double(), dim=-1)
    mask = targets != IGNORE
    safe = targets.clamp(min=0)
    per = -lp.gather(-1, safe[..., None])[..., 0] * mask
    count = mask.sum()
    mean = per.sum() / count.clamp(min=1)
    return mean, per


def sentence_bundles(system, trees: Sequence[DepTree]) -> list[MaskBundle]:
    return [build_bundle(system, expand(system, extract_oracle(system, t))) for t in trees]


def sequence_logprobs(model: DTGModel, bundles: Sequence[MaskBundle], batch_size: int = 64) -> list[float]:
    """Sum of log-probabilities at prediction positions, one per bundle."""
    out = []
    was = model.training
    model.eval()
    with torch.no_grad():
        for s in range(0, len(bundles), batch_size):
            chunk = bundles[s:s + batch_size]
            batch = make_batch(chunk, model.classmap, model.cfg.rel_k, model.cfg.mask_mode)
            _, per = nll(model(batch), batch.targets)
            out.extend((-per.sum(-1)).tolist())
    model.train(was)
    return out


def score_joint(model: DTGModel, trees: Sequence[DepTree], batch_size: int = 64) -> list[float]:
    """log p(x, y) for each tree (the sentence is the tree's tokens)."""
    return sequence_logprobs(model, sentence_bundles(model.cfg.system, trees), batch_size)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 3e-4
    warmup: int = 1000
    emb_mult: float = 2.0
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    time_limit: float = 0.0  # seconds; 0 means none


def make_optimizer(model: DTGModel, tc: TrainConfig):
    emb = model.embedding_parameters()
    emb_ids = {id(p) for p in emb}
    rest = [p for p in model.parameters() if id(p) not in emb_ids]
    groups = [{"params": rest, "lr": tc.lr, "name": "main"},
              {"params": emb, "lr": tc.lr * tc.emb_mult, "name": "embedding"}]
    if tc.optimizer == "adamw":
        opt = torch.optim.AdamW(groups, lr=tc.lr, weight_decay=tc.weight_decay)
    elif tc.optimizer == "sgd":
        opt = torch.optim.SGD(groups, lr=tc.lr)
    else:
        raise ValueError(f"unknown optimizer {tc.optimizer!r}")

    def factor(step: int) -> float:
        if tc.warmup > 0 and step < tc.warmup:
            return (step + 1) / tc.warmup
        span = max(1, tc.steps - tc.warmup)
        prog = min(1.0, (step - tc.warmup) / span)
        return 0.5 * (1 + math.cos(math.pi * prog))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, factor)
    return opt, sched


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def _batch_indices(n: int, batch_size: int, seed: int):
    """Endless stream of index batches over reshuffled epochs."""
    rng = random.Random(seed)
    order: list[int] = []
    while True:
        while len(order) < batch_size:
            more = list(range(n))
            rng.shuffle(more)
            order.extend(more)
        yield order[:batch_size]
        order = order[batch_size:]


def train(model: DTGModel, trees: Sequence[DepTree], tc: TrainConfig, *,
          checkpoint_path: str | None = None, vocab: Vocabulary | None = None,
          callback: Callable[[int, float], None] | None = None, optimizer=None,
          scheduler=None, start_step: int = 0) -> TrainResult:
    system = model.cfg.system
    bundles = sentence_bundles(system, trees)
    if optimizer is None:
        optimizer, scheduler = make_optimizer(model, tc)
    torch.manual_seed(tc.seed + start_step)
    batches = _batch_indices(len(bundles), tc.batch_size, tc.seed)
    for _ in range(start_step):  # resume where the interrupted run left off
        next(batches)
    res = TrainResult()
    t0 = time.time()
    model.train()
    step = start_step
    while step < tc.steps:
        idx = next(batches)
        batch = make_batch([bundles[i] for i in idx], model.classmap, model.cfg.rel_k, model.cfg.mask_mode)
        loss, _ = nll(model(batch), batch.targets)
        if not torch.isfinite(loss):
            if checkpoint_path:
                save_checkpoint(checkpoint_path + ".diverged.npz", model, vocab, optimizer, step)
            raise Divergence(f"loss became {loss.item()} at step {step}")
        optimizer.zero_grad()
        loss.backward()
        if tc.clip and tc.clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), tc.clip)
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        step += 1
        res.losses.append(loss.item())
        if callback is not None:
            callback(step, loss.item())
        if tc.log_every and step % tc.log_every == 0:
            log.info("step %d loss %.4f", step, float(np.mean(res.losses[-tc.log_every:])))
        if checkpoint_path and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, vocab, optimizer, step)
        if tc.time_limit and time.time() - t0 > tc.time_limit:
            log.info("time limit reached after %d steps", step)
            break
    model.eval()
    res.steps = step
    res.seconds = time.time() - t0
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, vocab, optimizer, step)
    return res


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: DTGModel
    vocab: Vocabulary
    step: int = 0
    optim_state: dict | None = None

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg


def _json_blob(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, model: DTGModel, vocab: Vocabulary | None, optimizer=None, step: int = 0) -> None:
    blobs = {
        "config": _json_blob(model.cfg.to_dict()),
        "vocab": _json_blob(vocab.lexical_forms if vocab is not None else []),
        "step": np.asarray([step], dtype="<i8"),
    }
    for name, t in model.state_dict().items():
        blobs[f"param/{name}"] = t.detach().cpu().numpy().astype("<f4")
    if optimizer is not None:
        sd = optimizer.state_dict()
        meta = {"param_groups": sd["param_groups"], "keys": []}
        for pid, st in sd["state"].items():
            for key, val in st.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                blobs[f"optim/{pid}/{key}"] = arr.astype("<f4")
                meta["keys"].append([pid, key])
        blobs["optim_meta"] = _json_blob(meta)
    buf = io.BytesIO()
    np.savez(buf, **blobs)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        cfg = ModelConfig.from_dict(json.loads(z["config"].tobytes().decode("utf-8")))
        vocab = Vocabulary(json.loads(z["vocab"].tobytes().decode("utf-8")))
        model = DTGModel(cfg)
        state = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
        model.load_state_dict(state)
        model.eval()
        optim = None
        if "optim_meta" in z.files:
            meta = json.loads(z["optim_meta"].tobytes().decode("utf-8"))
            st: dict = {}
            for pid, key in meta["keys"]:
                arr = torch.from_numpy(z[f"optim/{pid}/{key}"].copy())
                st.setdefault(int(pid), {})[key] = arr
            optim = {"state": st, "param_groups": meta["param_groups"]}
        step = int(z["step"][0])
    return Checkpoint(model, vocab, step, optim)


def restore_optimizer(ckpt: Checkpoint, tc: TrainConfig):
    opt, sched = make_optimizer(ckpt.model, tc)
    if ckpt.optim_state is not None:
        opt.load_state_dict(ckpt.optim_state)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # fast-forwarding the schedule without optimizer steps
        for _ in range(ckpt.step):
            sched.step()
    return opt, sched
