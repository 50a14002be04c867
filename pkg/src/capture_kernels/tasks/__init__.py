"""Task generators, embeddings and exact oracles."""
from .base import GENERATOR_VERSION, KINDS, TaskInstance
from .dataset import oracle_label, read_dataset, verify_dataset, write_dataset
from .embedding import codebook, embed_instance
from .grammar import (GrammarSpec, build_grammar, cyk_oracle, gen_cfg, load_grammar,
                      save_grammar, tree_depth)
from .graphs import GeoGraph, gen_mincut, gen_rgg, gen_spp, mincut_oracle, spp_oracle
from .sequences import gen_induction, gen_sort, gen_string_match, sort_score


def generate(kind, T, rng, positive=None, grammar=None, **params):
    """Dispatch to the generator for ``kind``.

    ``positive`` selects the class for string matching and CFG (random if
    ``None``); ``grammar`` is required for CFG.
    """
    if positive is None and kind in ("string_match", "cfg"):
        positive = bool(rng.integers(0, 2))
    if kind == "induction":
        return gen_induction(T, rng, **params)
    if kind == "sort":
        return gen_sort(T, rng, **params)
    if kind == "string_match":
        return gen_string_match(T, rng, positive=positive, **params)
    if kind == "cfg":
        if grammar is None:
            raise ValueError("cfg generation needs a grammar")
        return gen_cfg(grammar, T, rng, positive=positive, **params)
    if kind == "spp":
        return gen_spp(T, rng, **params)
    if kind == "mincut":
        return gen_mincut(T, rng, **params)
    raise ValueError(f"unknown task kind {kind!r}")


__all__ = [
    "GENERATOR_VERSION", "KINDS", "TaskInstance", "GeoGraph", "GrammarSpec",
    "build_grammar", "codebook", "cyk_oracle", "embed_instance", "gen_cfg", "gen_induction",
    "gen_mincut", "gen_rgg", "gen_sort", "gen_spp", "gen_string_match", "generate",
    "load_grammar", "mincut_oracle", "oracle_label", "read_dataset", "save_grammar",
    "sort_score", "spp_oracle", "tree_depth", "verify_dataset", "write_dataset",
]
