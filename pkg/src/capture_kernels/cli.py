"""``capture-kernels`` command line: gen, kernel, capture, selftest.

Exit codes: 0 success (including runs with flagged points), 2 configuration
error, 3 generator error, 4 numerical failure.  Errors are printed to stderr
as one JSON object.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, matrix_io
from .errors import ConfigError, GeneratorError, NumericalError, ShapeMismatch

EXIT_OK, EXIT_CONFIG, EXIT_GENERATOR, EXIT_NUMERICAL = 0, 2, 3, 4


def _num(x):
    x = float(x)
    return "inf" if math.isinf(x) else ("nan" if math.isnan(x) else x)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _out_root(path):
    # CAPTURE_KERNELS_OUT prefixes relative output paths
    root = os.environ.get("CAPTURE_KERNELS_OUT")
    return os.path.join(root, path) if root and not os.path.isabs(path) else path


def _write_manifest(path, args_hash, seed, outputs, started):
    manifest = {"config_hash": args_hash, "master_seed": seed, "versions": {
        "capture_kernels": __version__, "numpy": np.__version__},
        "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "outputs": outputs}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_params(items):
    params = {}
    for item in items or []:
        key, _, raw = item.partition("=")
        if not key or not _:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


# ---------------------------------------------------------------------------
# gen

def cmd_gen(args):
    from .tasks import (build_grammar, embed_instance, generate, load_grammar, verify_dataset,
                        write_dataset)
    out = _out_root(args.out)
    if args.task is None:
        if not args.verify:
            raise ConfigError("gen needs --task (or --verify on an existing dataset)")
        return _verify(out, verify_dataset)
    if args.t is None:
        raise ConfigError("gen needs --t")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    params = _parse_params(args.param)
    grammar = None
    if args.task == "cfg":
        grammar = load_grammar(args.grammar) if args.grammar else build_grammar(args.grammar_seed)
    instances = []
    for i in range(args.count):
        rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(i,)))
        inst = generate(args.task, args.t, rng, grammar=grammar, **params)
        inst.seed = [args.seed, i]
        inst.embedding = embed_instance(inst, args.d, args.pe_mode, args.embed_seed)
        instances.append(inst)
    emb = args.embeddings or out + ".kmat"
    write_dataset(out, instances, emb)
    args_doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    args_hash = hashlib.sha256(json.dumps(args_doc, sort_keys=True).encode()).hexdigest()
    _write_manifest(out + ".manifest.json", args_hash, args.seed,
                    {"dataset": out, "embeddings": emb}, started)
    report = {"written": args.count, "dataset": out, "embeddings": emb}
    if args.verify:
        code = _verify(out, verify_dataset, quiet=True)
        report["verified"] = code == EXIT_OK
        if code != EXIT_OK:
            return code
    _emit(report)
    return EXIT_OK


def _verify(path, verify_dataset, quiet=False):
    failures = verify_dataset(path)
    if failures:
        _error("VerificationFailed", f"{len(failures)} record(s) disagree with the oracle",
               failures=[{"line": ln, "message": msg} for ln, msg in failures])
        return EXIT_GENERATOR
    if not quiet:
        _emit({"verified": True, "dataset": path})
    return EXIT_OK


# ---------------------------------------------------------------------------
# kernel

def _load_input(path, index):
    if path.endswith(".npy"):
        x = np.load(path)
    else:
        mats = matrix_io.read_matrices(path)
        if not 0 <= index < len(mats):
            raise ShapeMismatch(f"{path} has {len(mats)} record(s); index {index} out of range")
        x = mats[index][0]
    if x.ndim != 2:
        raise ShapeMismatch(f"{path}: expected a T x d matrix")
    return x


def cmd_kernel(args):
    from .kernel_propagation import BlockParams, McConfig, propagate_state
    x1 = _load_input(args.x1, args.index1)
    x2 = _load_input(args.x2 or args.x1, args.index1 if args.index2 is None else args.index2)
    params = BlockParams(sigma_w=args.sigma_w, sigma_b=args.sigma_b, activation=args.activation)
    mc = McConfig(n_mc=args.n_mc, seed=args.seed, workers=args.workers, symmetric=True)
    state = propagate_state(x1, x2, args.depth, params, mc, mode=args.mode)
    kind = "theta" if args.mode == "ntk" else "sigma"
    mat, se = state.block(kind, "12"), state.se(kind, "12")
    if not np.all(np.isfinite(mat)):
        raise NumericalError("kernel matrix has non-finite entries")
    out = _out_root(args.out)
    matrix_io.write_matrix(out, mat, np.where(np.isfinite(se), se, np.finfo(float).max))
    report = {"readout": _num(mat[-1, -1]), "stderr": _num(se[-1, -1]), "matrix": out,
              "shape": list(mat.shape), "mode": args.mode, "n_mc": args.n_mc, "depth": args.depth,
              "flags": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else _num(v))
                        for k, v in state.flags.items()}}
    if mat.shape[0] == mat.shape[1]:
        report["symmetric"] = bool(np.allclose(mat, mat.T, rtol=1e-12, atol=1e-14))
        report["min_eigenvalue"] = float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())
    if args.flops:
        from .finite_width import flop_count
        d_k = args.d_k or args.d_model // args.heads
        report["flops"] = flop_count(args.depth, args.heads, args.d_model, d_k, x1.shape[0])
    if args.validate_finite:
        report["finite_width"] = _validate_finite(x1, x2, args, state)
    _emit(report)
    return EXIT_OK


def _validate_finite(x1, x2, args, state):
    from .finite_width import FiniteDims, empirical_covariance
    if args.mode != "nngp":
        raise ConfigError("--validate-finite compares NNGP covariances; use --mode nngp")
    dims = FiniteDims(d_in=x1.shape[1], d_model=args.d_model, n_heads=args.heads,
                      n_layers=args.depth, d_k=args.d_k, sigma_w=args.sigma_w,
                      sigma_b=args.sigma_b, activation=args.activation)
    emp = empirical_covariance(x1, x2, dims, args.draws, args.seed, "post_mlp")
    gap = np.abs(state.sigma12 - emp.matrix)
    band = np.sqrt(state.se("sigma", "12") ** 2 + emp.stderr ** 2)
    return {"max_abs_gap": float(gap.max()), "max_z": _num((gap / band).max()),
            "d_model": args.d_model, "heads": args.heads, "draws": args.draws}


# ---------------------------------------------------------------------------
# capture / selftest

def cmd_capture(args):
    from .capture_harness import load_config, run_capture
    cfg, cfg_hash = load_config(args.config)
    if args.workers is not None:
        cfg["workers"] = args.workers
    out = _out_root(args.out)
    fit = run_capture(cfg, out, cfg_hash, resume=not args.fresh, stop_after=args.stop_after)
    if fit is None:
        _emit({"stopped": True, "out": out})
    else:
        _emit({"verdict": fit["verdict"], "C": fit["C"], "r2": fit["r2"], "out": out})
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest
    results = run_selftest(seed=args.seed, suites=args.suite or None, mutate=args.mutate)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.seconds:.1f}s): {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_NUMERICAL if failed else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="capture-kernels", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--backend", choices=["numba", "numpy"], help="override the kernel backend")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a task dataset")
    g.add_argument("--task", choices=["induction", "sort", "string_match", "cfg", "spp", "mincut"])
    g.add_argument("--t", type=int, help="instance size T")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="JSON-lines output path")
    g.add_argument("--embeddings", help="matrix container path (default: OUT.kmat)")
    g.add_argument("--d", type=int, default=16, help="embedding width")
    g.add_argument("--pe-mode", default="rotary", choices=["none", "sinusoidal", "rotary"])
    g.add_argument("--embed-seed", type=int, default=0)
    g.add_argument("--grammar", help="grammar JSON file (cfg)")
    g.add_argument("--grammar-seed", type=int, default=0)
    g.add_argument("--param", action="append", help="generator parameter key=value")
    g.add_argument("--verify", action="store_true", help="re-run the oracles on OUT")
    g.set_defaults(func=cmd_gen)

    k = sub.add_parser("kernel", help="infinite-width kernel between two inputs")
    k.add_argument("x1", help="input matrix (.kmat container or .npy)")
    k.add_argument("x2", nargs="?", help="second input (default: x1)")
    k.add_argument("--index1", type=int, default=0)
    k.add_argument("--index2", type=int, default=None)
    k.add_argument("--depth", type=int, default=1)
    k.add_argument("--mode", choices=["nngp", "ntk"], default="nngp")
    k.add_argument("--n-mc", type=int, default=4096)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--workers", type=int, default=1)
    k.add_argument("--sigma-w", type=float, default=1.0)
    k.add_argument("--sigma-b", type=float, default=0.0)
    k.add_argument("--activation", choices=["relu", "gelu"], default="relu")
    k.add_argument("--out", default="kernel.kmat")
    k.add_argument("--flops", action="store_true", help="report finite-width forward FLOPs")
    k.add_argument("--validate-finite", action="store_true",
                   help="compare with the finite-width empirical covariance")
    k.add_argument("--d-model", type=int, default=256)
    k.add_argument("--heads", type=int, default=16)
    k.add_argument("--d-k", type=int, default=None)
    k.add_argument("--draws", type=int, default=500)
    k.set_defaults(func=cmd_kernel)

    c = sub.add_parser("capture", help="run a capture experiment from a config file")
    c.add_argument("config")
    c.add_argument("--out", default="capture_out")
    c.add_argument("--workers", type=int, default=None)
    c.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    c.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_capture)

    s = sub.add_parser("selftest", help="run the built-in consistency suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--suite", action="append", help="run only the named suite(s)")
    s.add_argument("--mutate", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)
    return p


def _error(kind, message, **extra):
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True),
          file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.backend:
        from ._backend import set_backend
        set_backend(args.backend)
    try:
        return args.func(args)
    except ConfigError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_CONFIG
    except GeneratorError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_GENERATOR
    except (NumericalError, ShapeMismatch, ValueError, np.linalg.LinAlgError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
