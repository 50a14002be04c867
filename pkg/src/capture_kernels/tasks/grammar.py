"""Critical CNF grammars: construction, exact-length sampling, CYK recognition.

Rule weights are branching probabilities: a variable rewrites to ``B C``
with the binary weight and to a terminal with the remaining mass.  Binary
weights are rescaled so the mean-offspring matrix has spectral radius 1,
which makes the branching process critical.

Exact-length sampling uses inside weights ``W[A, l]``, the probability that
``A`` derives a string of length ``l``.  Sampling rules and split points
proportional to ``p(A -> B C) W[B, k] W[C, l - k]`` draws from the grammar's
own tree distribution conditioned on the length.  For a critical grammar
the tree depth then grows like ``sqrt(T)``.  ``split="uniform"`` draws the
split point uniformly among the feasible ones instead.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .. import _backend
from ..errors import DegenerateGrammar, UnsatisfiableLength
from .base import TaskInstance

N_VARS = 20
N_TERMS = 16


@dataclass
class GrammarSpec:
    n_vars: int
    n_terms: int
    binary: np.ndarray  # (R, 3) int: A, B, C
    binary_w: np.ndarray  # (R,)
    terminal: np.ndarray  # (Q, 2) int: A, a
    terminal_w: np.ndarray  # (Q,)
    start: int = 0
    adversarial: int | None = None
    spectral_radius: float = float("nan")
    seed: object = None

    def transition_matrix(self):
        """``M[A, B]``: expected number of ``B`` children of an ``A`` node."""
        m = np.zeros((self.n_vars, self.n_vars))
        for (a, b, c), w in zip(self.binary, self.binary_w):
            m[a, b] += w
            m[a, c] += w
        return m

    def term_mask(self):
        mask = np.zeros((self.n_terms, self.n_vars), dtype=bool)
        for a, t in self.terminal:
            mask[t, a] = True
        return mask

    def validate(self):
        for name, arr, lo, hi in (("binary", self.binary, 0, self.n_vars),
                                  ("terminal lhs", self.terminal[:, :1], 0, self.n_vars),
                                  ("terminal rhs", self.terminal[:, 1:], 0, self.n_terms)):
            if arr.size and (arr.min() < lo or arr.max() >= hi):
                raise DegenerateGrammar(f"{name} index out of range")
        has_bin = set(self.binary[:, 0].tolist())
        has_term = set(self.terminal[:, 0].tolist())
        for v in range(self.n_vars):
            # the start symbol may go without S -> a (then no length-1 strings exist)
            if v not in has_bin or (v not in has_term and v != self.start):
                raise DegenerateGrammar(f"variable {v} lacks a binary or terminal production")
        if self.adversarial is not None and np.isin(self.binary[:, 1:], self.adversarial).any():
            raise DegenerateGrammar("adversarial variable appears on a right-hand side")
        return self

    def to_dict(self):
        return {
            "n_vars": self.n_vars, "n_terms": self.n_terms,
            "binary": self.binary.tolist(), "binary_w": self.binary_w.tolist(),
            "terminal": self.terminal.tolist(), "terminal_w": self.terminal_w.tolist(),
            "start": self.start, "adversarial": self.adversarial,
            "spectral_radius": self.spectral_radius, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        g = cls(int(d["n_vars"]), int(d["n_terms"]),
                np.asarray(d["binary"], dtype=np.int64).reshape(-1, 3),
                np.asarray(d["binary_w"], dtype=np.float64),
                np.asarray(d["terminal"], dtype=np.int64).reshape(-1, 2),
                np.asarray(d["terminal_w"], dtype=np.float64),
                int(d.get("start", 0)), d.get("adversarial"),
                float(d.get("spectral_radius", float("nan"))), d.get("seed"))
        return g.validate()


def save_grammar(g: GrammarSpec, path):
    with open(path, "w") as fh:
        json.dump(g.to_dict(), fh, indent=1)


def load_grammar(path) -> GrammarSpec:
    with open(path) as fh:
        return GrammarSpec.from_dict(json.load(fh))


def spectral_radius(m):
    return float(np.abs(np.linalg.eigvals(m)).max())


def build_grammar(seed, n_vars=N_VARS, n_terms=N_TERMS, n_binary=2, max_terminal=2,
                  reserve_adversarial=True) -> GrammarSpec:
    """Random critical CNF grammar.

    Each variable gets ``n_binary`` binary rules and 1..``max_terminal``
    terminal rules.  With ``reserve_adversarial`` the last variable never
    occurs on a right-hand side.
    """
    rng = np.random.default_rng(seed)
    adv = n_vars - 1 if reserve_adversarial else None
    rhs_pool = n_vars - 1 if reserve_adversarial else n_vars
    for _ in range(100):
        binary, bw, terminal, tw = [], [], [], []
        for a in range(n_vars):
            pairs = set()
            while len(pairs) < n_binary:
                pairs.add((int(rng.integers(rhs_pool)), int(rng.integers(rhs_pool))))
            for b, c in sorted(pairs):
                binary.append((a, b, c))
                bw.append(rng.uniform(0.5, 1.5))
            k = int(rng.integers(1, max_terminal + 1))
            for t in rng.choice(n_terms, size=k, replace=False):
                terminal.append((a, int(t)))
                tw.append(rng.uniform(0.5, 1.5))
        g = GrammarSpec(n_vars, n_terms, np.array(binary, dtype=np.int64), np.array(bw),
                        np.array(terminal, dtype=np.int64), np.array(tw),
                        start=0, adversarial=adv, seed=seed)
        rho = spectral_radius(g.transition_matrix())
        g.binary_w = g.binary_w / rho
        mass = np.zeros(n_vars)
        np.add.at(mass, g.binary[:, 0], g.binary_w)
        if mass.max() >= 0.95:
            continue  # some variable would have (almost) no terminal mass left
        # terminal rules share the leftover mass in proportion to their raw weights
        tot = np.zeros(n_vars)
        np.add.at(tot, g.terminal[:, 0], g.terminal_w)
        g.terminal_w = g.terminal_w / tot[g.terminal[:, 0]] * (1.0 - mass[g.terminal[:, 0]])
        g.spectral_radius = spectral_radius(g.transition_matrix())
        return g.validate()
    raise DegenerateGrammar("could not build a grammar with positive terminal mass")


# ---------------------------------------------------------------------------
# inside weights and sampling

def inside_weights(g: GrammarSpec, max_len: int):
    """``W[A, l]`` = probability that ``A`` derives a string of length ``l``."""
    w = np.zeros((g.n_vars, max_len + 1))
    np.add.at(w[:, 1], g.terminal[:, 0], g.terminal_w)
    a, b, c = g.binary.T
    for length in range(2, max_len + 1):
        # sum_k W[B, k] W[C, l - k] for every rule
        conv = np.einsum("rk,rk->r", w[b, 1:length], w[c, length - 1:0:-1])
        np.add.at(w[:, length], a, g.binary_w * conv)
    return w


class _Sampler:
    def __init__(self, g: GrammarSpec, max_len: int, split: str = "inside"):
        if split not in ("inside", "uniform"):
            raise ValueError("split must be 'inside' or 'uniform'")
        self.g = g
        self.split = split
        self.w = inside_weights(g, max_len)
        self.rules_of = [np.flatnonzero(g.binary[:, 0] == v) for v in range(g.n_vars)]
        self.terms_of = [np.flatnonzero(g.terminal[:, 0] == v) for v in range(g.n_vars)]

    def feasible(self, var, length):
        return self.w[var, length] > 0

    def sample(self, var, length, rng):
        """Tree ``[var, terminal]`` or ``[var, left, right]`` deriving exactly ``length`` symbols."""
        if not self.feasible(var, length):
            raise UnsatisfiableLength(f"variable {var} cannot derive length {length}")
        g = self.g
        if length == 1:
            idx = self.terms_of[var]
            p = g.terminal_w[idx] / g.terminal_w[idx].sum()
            r = idx[rng.choice(len(idx), p=p)]
            return [int(var), int(g.terminal[r, 1])]
        rules = self.rules_of[var]
        ks = np.arange(1, length)
        b, c = g.binary[rules, 1], g.binary[rules, 2]
        joint = self.w[b][:, ks] * self.w[c][:, length - ks]  # (rules, splits)
        if self.split == "inside":
            flat = (g.binary_w[rules, None] * joint).ravel()
            ri, ki = divmod(int(rng.choice(flat.size, p=flat / flat.sum())), len(ks))
        else:
            feas = np.flatnonzero((joint > 0).any(axis=0))
            ki = int(rng.choice(feas))
            wr = g.binary_w[rules] * (joint[:, ki] > 0)
            ri = int(rng.choice(len(rules), p=wr / wr.sum()))
        k = int(ks[ki])
        return [int(var), self.sample(int(b[ri]), k, rng),
                self.sample(int(c[ri]), length - k, rng)]


def tree_yield(tree):
    out = []
    stack = [tree]
    while stack:
        node = stack.pop()
        if len(node) == 2:
            out.append(node[1])
        else:
            stack.append(node[2])
            stack.append(node[1])
    return out


def tree_depth(tree):
    """Number of edges on the longest root-to-leaf path (terminal leaf included)."""
    if len(tree) == 2:
        return 1
    return 1 + max(tree_depth(tree[1]), tree_depth(tree[2]))


def _nodes(tree):
    """``(node, start, length)`` for every node, pre-order."""
    out = []

    def walk(node, start):
        if len(node) == 2:
            out.append((node, start, 1))
            return 1
        slot = len(out)
        out.append(None)
        left = walk(node[1], start)
        right = walk(node[2], start + left)
        out[slot] = (node, start, left + right)
        return left + right

    walk(tree, 0)
    return out


_SAMPLERS: dict = {}


def _sampler_for(g, length, split):
    key = (id(g), split)
    s = _SAMPLERS.get(key)
    if s is None or s.w.shape[1] <= length or s.g is not g:
        s = _Sampler(g, max(length, 16), split)
        _SAMPLERS[key] = s
    return s


def sample_tree(g: GrammarSpec, T: int, rng, var=None, split="inside"):
    return _sampler_for(g, T, split).sample(g.start if var is None else var, T, rng)


def gen_cfg(g: GrammarSpec, T: int, rng, positive=True, split="inside",
            max_tries=200) -> TaskInstance:
    """String of exact length ``T``: in the language, or an adversarial negative.

    Negatives take a positive tree, pick a log-uniform length scale, and regrow
    the subtree at the node whose span is closest to it from the adversarial
    variable (same span length); strings that still parse are rejected.
    """
    if T < 1:
        raise UnsatisfiableLength("T must be >= 1")
    smp = _sampler_for(g, T, split)
    if not smp.feasible(g.start, T):
        raise UnsatisfiableLength(f"start symbol derives no string of length {T}")
    if positive:
        tree = smp.sample(g.start, T, rng)
        tokens = tree_yield(tree)
        payload = {"tokens": tokens, "tree": tree, "grammar_seed": g.seed}
        return TaskInstance("cfg", T, payload, 1)
    if g.adversarial is None:
        raise UnsatisfiableLength("grammar has no adversarial variable")
    for _ in range(max_tries):
        tree = smp.sample(g.start, T, rng)
        scale = math.exp(rng.uniform(0.0, math.log(T))) if T > 1 else 1.0
        nodes = [n for n in _nodes(tree) if smp.feasible(g.adversarial, n[2])]
        if not nodes:
            continue
        lengths = np.array([n[2] for n in nodes], dtype=float)
        gap = np.abs(np.log(lengths) - math.log(scale))
        cand = np.flatnonzero(gap == gap.min())
        _, start, length = nodes[int(rng.choice(cand))]
        sub = smp.sample(g.adversarial, length, rng)
        tokens = tree_yield(tree)
        tokens[start:start + length] = tree_yield(sub)
        if not cyk_oracle(g, tokens):
            payload = {"tokens": tokens, "grammar_seed": g.seed,
                       "substituted": [int(start), int(length)]}
            return TaskInstance("cfg", T, payload, 0)
    raise UnsatisfiableLength(f"no adversarial negative of length {T} after {max_tries} tries")


def cyk_chart(g: GrammarSpec, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    return _backend.cyk_chart(tokens, g.term_mask(), g.binary, g.n_vars)


def cyk_oracle(g: GrammarSpec, tokens) -> bool:
    """Exact membership of ``tokens`` in the language of ``g``."""
    tokens = list(tokens)
    if not tokens:
        return False
    if min(tokens) < 0 or max(tokens) >= g.n_terms:
        return False
    chart = cyk_chart(g, tokens)
    return bool(chart[0, len(tokens), g.start])
