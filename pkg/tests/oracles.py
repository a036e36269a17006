"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch
import torch.nn.functional as F


def is_tree(heads) -> bool:
    """Single root, every token reaches 0 without revisiting a node."""
    n = len(heads)
    if sum(1 for h in heads if h == 0) != 1:
        return False
    for i in range(1, n + 1):
        seen, v = set(), i
        while v != 0:
            if v in seen or not 0 <= heads[v - 1] <= n:
                return False
            seen.add(v)
            v = heads[v - 1]
    return True


def crossing_free(heads) -> bool:
    """Projectivity as: no two arcs cross, and no arc covers the root's ROOT arc."""
    arcs = [(min(h, d), max(h, d)) for d, h in enumerate(heads, 1)]
    for (a, b), (c, d) in itertools.combinations(arcs, 2):
        if a < c < b < d or c < a < d < b:
            return False
    return True


def all_head_assignments(n):
    return itertools.product(range(n + 1), repeat=n)


def brute_force_trees(n):
    return sorted(h for h in all_head_assignments(n)
                  if all(h[i] != i + 1 for i in range(n)) and is_tree(h) and crossing_free(h))


def chi_square_sf(stat: float, dof: int) -> float:
    """Upper tail of the chi-square distribution (regularized gamma, series)."""
    a, x = dof / 2.0, stat / 2.0
    if x <= 0:
        return 1.0
    term = total = 1.0 / a
    k = a
    while term > 1e-15 * total:
        k += 1
        term *= x / k
        total += term
    lower = total * math.exp(-x + a * math.log(x) - math.lgamma(a))
    return max(0.0, 1.0 - lower)


def expand_types(seq):
    """Duplicate arc transitions into the arc and arc-2 item types."""
    out = ["ROOT"]
    for t in seq:
        if t.kind == "GEN":
            out.append("GEN")
        elif t.kind == "LA":
            out += ["LEFTARC", "LEFTARC2"]
        elif t.kind == "RA":
            out += ["RIGHTARC", "RIGHTARC2"]
        else:
            raise ValueError(t.kind)
    return out


def reference_masks(types):
    """Reference compose/stack masker written directly over item types."""
    T = len(types)
    A = np.zeros((T, T), dtype=bool)
    S = []
    for i in range(T):
        if types[i] in ("LEFTARC", "RIGHTARC"):
            A[i, i] = 1
            l = S.pop()
            r = S.pop()
            A[i, l] = 1
            A[i, r] = 1
            S.append(i)
        else:
            if types[i] not in ("LEFTARC2", "RIGHTARC2"):
                S.append(i)
            for j in S:
                A[i, j] = 1
    return A


class PlainDecoder:
    """Ordinary pre-LN causal transformer evaluated from another model's weights."""

    def __init__(self, m):
        self.m = m

    def __call__(self, x):
        m = self.m
        T = x.shape[1]
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
        for blk in m.blocks:
            h = F.layer_norm(x, (x.shape[-1],), blk.ln1.weight, blk.ln1.bias)
            qkv = h @ blk.qkv.weight.T + blk.qkv.bias
            d = x.shape[-1]
            q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
            H = m.cfg.heads
            dh = d // H
            heads = []
            for a in range(H):
                sl = slice(a * dh, (a + 1) * dh)
                s = q[..., sl] @ k[..., sl].transpose(-1, -2) / math.sqrt(dh)
                s = s.masked_fill(~causal, float("-inf"))
                heads.append(torch.softmax(s, -1) @ v[..., sl])
            att = torch.cat(heads, -1) @ blk.proj.weight.T + blk.proj.bias
            x = x + att
            h = F.layer_norm(x, (d,), blk.ln2.weight, blk.ln2.bias)
            x = x + F.gelu(h @ blk.ff1.weight.T + blk.ff1.bias) @ blk.ff2.weight.T + blk.ff2.bias
        x = F.layer_norm(x, (x.shape[-1],), m.ln_f.weight, m.ln_f.bias)
        return x @ m.out.weight.T + m.out.bias
