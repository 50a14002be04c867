"""Fixed random embeddings for task instances.

Sequence tokens map to rows of a seeded Gaussian codebook normalised to
squared norm ``d`` (unit norm under the ``x . y / d`` inner product used by
the kernels); positions enter either additively (sinusoidal) or as a rotation
of coordinate pairs (rotary).  Graph nodes are their coordinates followed by
source and target indicator channels.
"""
from __future__ import annotations

import numpy as np

from ..errors import CapacityExceeded
from .base import TaskInstance

PE_MODES = ("none", "sinusoidal", "rotary")
# codebook sizes including the SEP token where the task has one
VOCAB = {"string_match": 27, "cfg": 16}


def codebook(vocab_size, d, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(vocab_size, d)))
    c = rng.standard_normal((vocab_size, d))
    return c * np.sqrt(d) / np.linalg.norm(c, axis=1, keepdims=True)


def sinusoidal(T, d, base=10000.0):
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / base ** (2 * (i // 2) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def rotary(x, base=10000.0):
    """Rotate coordinate pairs ``(2i, 2i+1)`` of row ``t`` by ``t * base^(-2i/d)``."""
    T, d = x.shape
    half = d // 2
    freq = base ** (-2.0 * np.arange(half) / d)
    ang = np.arange(T)[:, None] * freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = x.copy()
    even, odd = x[:, 0:2 * half:2], x[:, 1:2 * half:2]
    out[:, 0:2 * half:2] = even * cos - odd * sin
    out[:, 1:2 * half:2] = even * sin + odd * cos
    return out


def embed_tokens(tokens, vocab_size, d, pe_mode="rotary", seed=0, rope_base=10000.0):
    if pe_mode not in PE_MODES:
        raise ValueError(f"pe_mode must be one of {PE_MODES}")
    if d < 2 or (pe_mode == "rotary" and d % 2):
        raise CapacityExceeded("sequence embeddings need d >= 2 (even for rotary)")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise CapacityExceeded("token id outside the codebook")
    x = codebook(vocab_size, d, seed)[tokens]
    if pe_mode == "sinusoidal":
        x = x + sinusoidal(len(tokens), d, rope_base)
    elif pe_mode == "rotary":
        x = rotary(x, rope_base)
    return x


def embed_graph(points, d, source=0, target=None):
    pts = np.asarray(points, dtype=np.float64)
    T, dim = pts.shape
    if d < dim + 2:
        raise CapacityExceeded(f"graph embeddings need d >= {dim + 2}")
    target = T - 1 if target is None else target
    x = np.zeros((T, d))
    x[:, :dim] = pts
    x[source, dim] = 1.0
    x[target, dim + 1] = 1.0
    return x


def embed_instance(inst: TaskInstance, d, pe_mode="rotary", seed=0, rope_base=10000.0):
    """``len x d`` embedding of an instance (graphs ignore ``pe_mode``)."""
    if inst.kind in ("spp", "mincut"):
        return embed_graph(inst.payload["points"], d)
    if inst.kind == "induction":
        vocab = inst.payload["vocab_size"]
    elif inst.kind == "sort":
        vocab = inst.payload["vocab_size"] + 1
    else:
        vocab = VOCAB[inst.kind]
    return embed_tokens(inst.payload["tokens"], vocab, d, pe_mode, seed, rope_base)
