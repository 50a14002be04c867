"""JSON-lines datasets with an embedding sidecar, and oracle re-verification."""
from __future__ import annotations

import json
import math

import numpy as np

from .. import matrix_io
from .base import GENERATOR_VERSION, TaskInstance
from .grammar import build_grammar, cyk_oracle
from .graphs import graph_from_points, mincut_oracle, spp_label, spp_oracle
from .sequences import induction_oracle, sort_oracle, string_match_oracle

_GRAMMARS: dict = {}


def _grammar(seed):
    if seed not in _GRAMMARS:
        _GRAMMARS[seed] = build_grammar(seed)
    return _GRAMMARS[seed]


def oracle_label(kind, payload, T=None):
    """Recompute the ground-truth label of a payload from scratch."""
    if kind == "induction":
        return induction_oracle(payload)
    if kind == "sort":
        return sort_oracle(payload)
    if kind == "string_match":
        return string_match_oracle(payload)
    if kind == "cfg":
        return int(cyk_oracle(_grammar(payload["grammar_seed"]), payload["tokens"]))
    if kind == "spp":
        g = graph_from_points(payload["points"], payload["radius"])
        return spp_label(spp_oracle(g), len(payload["points"]), payload.get("label_mode", "regression"))
    if kind == "mincut":
        return mincut_oracle(graph_from_points(payload["points"], payload["radius"], directed=True))
    raise ValueError(f"unknown kind {kind!r}")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return x


def write_dataset(path, instances, embeddings_path=None):
    """One JSON record per line; embeddings (if given) go to a matrix container."""
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(_jsonable(inst.to_record()), sort_keys=True) + "\n")
    if embeddings_path is not None:
        matrix_io.write_matrices(embeddings_path, [(inst.embedding, None) for inst in instances])


def read_dataset(path, embeddings_path=None):
    with open(path) as fh:
        insts = [TaskInstance.from_record(json.loads(line)) for line in fh if line.strip()]
    if embeddings_path is not None:
        mats = matrix_io.read_matrices(embeddings_path)
        if len(mats) != len(insts):
            raise ValueError("embedding sidecar does not match the dataset length")
        for inst, (m, _) in zip(insts, mats):
            inst.embedding = m
    return insts


def verify_dataset(path):
    """Re-run oracles on every line; returns a list of ``(line_number, message)`` failures."""
    failures = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec.get("generator_version") != GENERATOR_VERSION:
                    failures.append((lineno, f"generator version {rec.get('generator_version')}"))
                    continue
                want = _jsonable(oracle_label(rec["kind"], rec["payload"], rec["T"]))
                if want != rec["label"]:
                    failures.append((lineno, f"label {rec['label']!r} != oracle {want!r}"))
            except Exception as exc:  # malformed record
                failures.append((lineno, f"{type(exc).__name__}: {exc}"))
    return failures
