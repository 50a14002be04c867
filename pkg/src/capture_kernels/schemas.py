"""JSON schemas for experiment configs and harness outputs."""

CONFIG_VERSION = 1

KERNEL_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["fcn", "transformer"]},
        "depth": {"type": "integer", "minimum": 1},
        "sigma_w": {"type": "number", "minimum": 0},
        "sigma_b": {"type": "number", "minimum": 0},
        "activation": {"enum": ["relu", "gelu"]},
        "mode": {"enum": ["nngp", "ntk"]},
        "n_mc": {"type": "integer", "minimum": 1},
        "kappa_rel": {"type": "number", "exclusiveMinimum": 0},
        "ln_epsilon": {"type": "number", "minimum": 0, "maximum": 0.01},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "capture experiment",
    "type": "object",
    "required": ["version", "task", "delta", "T0", "T_grid", "seed"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "name": {"type": "string"},
        "task": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["induction", "sort", "string_match", "cfg", "spp", "mincut"]},
                "params": {"type": "object"},
                "d": {"type": "integer", "minimum": 2},
                "pe_mode": {"enum": ["none", "sinusoidal", "rotary"]},
                "embed_seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "T0": {"type": "integer", "minimum": 1},
        "T_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "P0_max": {"type": "integer", "minimum": 0},
        "adapt_cap": {"type": "integer", "minimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "n_eval": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "kernel": KERNEL_SCHEMA,
        "learner": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["kernel", "scripted"]},
                "C": {"type": "number", "minimum": 0},
                "P0": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "thresholds": {
            "type": "object",
            "properties": {
                "r2_min": {"type": "number"},
                "kappa_min": {"type": "number"},
                "aic_margin": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

FIT_SCHEMA = {
    "type": "object",
    "required": ["C", "r2", "kappa", "A", "aic_log", "aic_power", "verdict", "T0", "P0",
                 "stage1_budget_exhausted", "n_points"],
    "properties": {
        "C": {"type": ["number", "null"]},
        "r2": {"type": ["number", "null"]},
        "kappa": {"type": ["number", "null"]},
        "A": {"type": ["number", "null"]},
        "aic_log": {"type": ["number", "null"]},
        "aic_power": {"type": ["number", "null"]},
        "verdict": {"enum": ["capture", "non_capture", "inconclusive"]},
        "T0": {"type": "integer"},
        "P0": {"type": "integer"},
        "stage1_budget_exhausted": {"type": "boolean"},
        "n_points": {"type": "integer"},
    },
}

CURVE_COLUMNS = ["T", "P", "error", "stderr", "flags"]
