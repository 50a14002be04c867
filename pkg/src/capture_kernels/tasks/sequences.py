"""Induction-head, sorting and string-matching generators and their oracles."""
from __future__ import annotations

import math

import numpy as np

from ..errors import NotPermutation, TooShort
from .base import TaskInstance

ALPHABET = 26


def replace_trigger(tokens, trigger, vocab_size):
    """Replace every occurrence of ``trigger`` with the next id (mod vocab)."""
    tokens = np.array(tokens, dtype=np.int64)
    tokens[tokens == trigger] = (trigger + 1) % vocab_size
    return tokens


def gen_induction(T, rng, vocab_size=1024, i_k=None, trigger=None) -> TaskInstance:
    """Random sequence with a trigger token at ``i_k`` and at ``T-1`` only.

    The label is the token that follows the first trigger.
    """
    if T < 4:
        raise TooShort("induction needs T >= 4")
    tokens = rng.integers(0, vocab_size, T)
    if trigger is None:
        trigger = int(rng.integers(0, vocab_size))
    tokens = replace_trigger(tokens, trigger, vocab_size)
    if i_k is None:
        i_k = int(rng.integers(0, math.ceil(T / 2)))
    if not 0 <= i_k < math.ceil(T / 2):
        raise ValueError("i_k must lie in [0, ceil(T/2))")
    tokens[i_k] = trigger
    tokens[T - 1] = trigger
    payload = {"tokens": tokens.tolist(), "trigger": int(trigger), "i_k": int(i_k),
               "vocab_size": int(vocab_size)}
    return TaskInstance("induction", T, payload, induction_oracle(payload))


def induction_oracle(payload):
    tokens = payload["tokens"]
    trig = tokens[-1]
    hits = [i for i, t in enumerate(tokens[:-1]) if t == trig]
    if len(hits) != 1:
        raise ValueError(f"expected exactly one earlier trigger, found {len(hits)}")
    return int(tokens[hits[0] + 1])


def gen_sort(T, rng, vocab_size=100) -> TaskInstance:
    """``[u, SEP, s]`` with ``s`` the nondecreasing rearrangement of ``u``.

    ``SEP`` is token id ``vocab_size``; the loss mask covers SEP and ``s``.
    """
    if T < 1:
        raise TooShort("sort needs T >= 1")
    if vocab_size not in (100, 200, 300):
        raise ValueError("vocab_size must be 100, 200 or 300")
    u = rng.integers(0, vocab_size, T)
    s = np.sort(u, kind="stable")
    tokens = np.concatenate([u, [vocab_size], s])
    mask = np.concatenate([np.zeros(T, dtype=int), np.ones(T + 1, dtype=int)])
    payload = {"u": u.tolist(), "tokens": tokens.tolist(), "loss_mask": mask.tolist(),
               "vocab_size": int(vocab_size)}
    return TaskInstance("sort", T, payload, s.tolist())


def sort_oracle(payload):
    return sorted(payload["u"])


def sort_score(rho, u=None) -> float:
    """Total descent ``sum_a (rho_a - rho_{a+1})_+``; zero iff ``rho`` is sorted."""
    rho = np.asarray(rho)
    if u is not None and sorted(np.asarray(u).tolist()) != sorted(rho.tolist()):
        raise NotPermutation("rho is not a rearrangement of u")
    if rho.size < 2:
        return 0.0
    return float(np.clip(rho[:-1] - rho[1:], 0, None).sum())


def find_matches(seq, pattern):
    """Start indices of full occurrences of ``pattern`` (naive scan)."""
    m = len(pattern)
    return [i for i in range(len(seq) - m + 1) if list(seq[i:i + m]) == list(pattern)]


def find_near_misses(seq, pattern):
    """Windows agreeing with ``pattern`` in exactly ``len(pattern) - 1`` places."""
    m = len(pattern)
    out = []
    for i in range(len(seq) - m + 1):
        agree = sum(int(seq[i + j] == pattern[j]) for j in range(m))
        if agree == m - 1:
            out.append(i)
    return out


def _break_matches(seq, pattern, rng):
    while True:
        hits = find_matches(seq, pattern)
        if not hits:
            return seq
        i = hits[0] + int(rng.integers(0, len(pattern)))
        seq[i] = (seq[i] + 1 + int(rng.integers(0, ALPHABET - 1))) % ALPHABET


def gen_string_match(T, rng, pattern=None, positive=True) -> TaskInstance:
    """Random length-``T`` sequence over 26 symbols, then ``SEP`` and the pattern.

    Positives contain the pattern; negatives contain no occurrence but at least
    one near-miss that agrees in two of the three places.  The stored label is
    the classification target (1 if the pattern occurs).
    """
    if T < 3:
        raise TooShort("string matching needs T >= 3")
    if pattern is None:
        pattern = rng.integers(0, ALPHABET, 3).tolist()
    pattern = [int(p) for p in pattern]
    if len(pattern) != 3 or not all(0 <= p < ALPHABET for p in pattern):
        raise ValueError("pattern must be 3 symbols in [0, 26)")
    while True:
        seq = rng.integers(0, ALPHABET, T)
        pos = int(rng.integers(0, T - 2))
        if positive:
            seq[pos:pos + 3] = pattern
        else:
            seq = _break_matches(seq, pattern, rng)
            miss = list(pattern)
            j = int(rng.integers(0, 3))
            miss[j] = (miss[j] + 1 + int(rng.integers(0, ALPHABET - 1))) % ALPHABET
            seq[pos:pos + 3] = miss
        ok = bool(find_matches(seq, pattern)) if positive else (
            not find_matches(seq, pattern) and bool(find_near_misses(seq, pattern)))
        if ok:
            break
    tokens = seq.tolist() + [ALPHABET] + pattern
    payload = {"seq": seq.tolist(), "pattern": pattern, "tokens": tokens}
    return TaskInstance("string_match", T, payload, string_match_oracle(payload))


def string_match_oracle(payload):
    return int(bool(find_matches(payload["seq"], payload["pattern"])))
