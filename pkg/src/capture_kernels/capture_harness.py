"""Two-stage capture experiments: stage-1 fit, size sweep, log-budget fit.

A run trains an initial predictor at size ``T0`` until its held-out error
drops below ``delta``.  It then walks an increasing grid of sizes and, at
each size, adds adaptation samples (sizes uniform on ``[T_prev, T]``) until
the error at ``T`` is below ``delta`` again.  The cumulative number of
adaptation samples ``P(T)`` is fit by ``C log(T / T0)`` and compared with a
power law to decide between capture, non-capture and inconclusive.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import yaml
from jsonschema import Draft202012Validator
from scipy import optimize, stats

from . import __version__
from .errors import BudgetExhausted, ConfigError, TooFewPoints, TooFewReps
from .kernel_propagation import BlockParams, McConfig
from .kernel_regression import (FittedPredictor, KernelConfig, decode_classes, fit, one_hot,
                                predict_batch, two_step_adapt)
from .schemas import CONFIG_SCHEMA, CURVE_COLUMNS, FIT_SCHEMA
from .tasks import build_grammar, embed_instance, generate
from .tasks.embedding import embed_tokens

# seed-stream stages
STAGE1_TRAIN, STAGE1_EVAL, ADAPT_TRAIN, ADAPT_EVAL = range(4)

DEFAULTS = {
    "name": "capture",
    "P0_max": 512,
    "adapt_cap": 512,
    "batch": 8,
    "n_eval": 512,
    "workers": 1,
    "kernel": {},
    "learner": {"type": "kernel"},
    "thresholds": {},
}
KERNEL_DEFAULTS = {"kind": "fcn", "depth": 2, "sigma_w": 1.4142135623730951, "sigma_b": 0.1,
                   "activation": "relu", "mode": "nngp", "n_mc": 256, "kappa_rel": 1e-3,
                   "ln_epsilon": 1e-5}
THRESHOLD_DEFAULTS = {"r2_min": 0.9, "kappa_min": 0.5, "aic_margin": 2.0}
TASK_DEFAULTS = {"params": {}, "d": 16, "pe_mode": "rotary", "embed_seed": 0}


# ---------------------------------------------------------------------------
# config

def validate_config(cfg: dict) -> dict:
    """Schema-check a raw config and fill in defaults; raises :class:`ConfigError`."""
    errors = sorted(Draft202012Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}")
    out = {**DEFAULTS, **cfg}
    out["kernel"] = {**KERNEL_DEFAULTS, **cfg.get("kernel", {})}
    out["thresholds"] = {**THRESHOLD_DEFAULTS, **cfg.get("thresholds", {})}
    out["task"] = {**TASK_DEFAULTS, **cfg["task"]}
    out["learner"] = {**DEFAULTS["learner"], **cfg.get("learner", {})}
    grid = out["T_grid"]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("config invalid at T_grid: must be strictly increasing")
    if grid[0] < out["T0"]:
        raise ConfigError("config invalid at T_grid: first size must be >= T0")
    return out


def load_config(path) -> tuple[dict, str]:
    """Read a YAML or JSON config; returns ``(config, sha256 of file bytes)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        cfg = yaml.safe_load(raw.decode())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config invalid at <root>: expected a mapping")
    return validate_config(cfg), hashlib.sha256(raw).hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# instance streams

def _rng(seed, stage, grid_idx, i):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage, grid_idx, i)))


class TaskStream:
    """Deterministic instances keyed by ``(stage, grid_idx, i)``."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.kind = cfg["task"]["kind"]
        self.params = dict(cfg["task"]["params"])
        self.grammar = None
        if self.kind == "cfg":
            self.grammar = build_grammar(self.params.pop("grammar_seed", 0))

    def make(self, stage, grid_idx, i, T=None, T_range=None):
        rng = _rng(self.cfg["seed"], stage, grid_idx, i)
        if T is None:
            T = int(rng.integers(T_range[0], T_range[1] + 1))
        params = dict(self.params)
        return generate(self.kind, T, rng, grammar=self.grammar, **params), rng


# ---------------------------------------------------------------------------
# learners

class KernelLearner:
    """Kernel ridge predictor over embedded instances, with task-specific readout."""

    def __init__(self, cfg):
        self.cfg = cfg
        k = cfg["kernel"]
        task = cfg["task"]
        self.kind = task["kind"]
        self.d = task["d"]
        self.pe_mode = task["pe_mode"]
        self.embed_seed = task["embed_seed"]
        params = BlockParams(sigma_w=k["sigma_w"], sigma_b=k["sigma_b"],
                             activation=k["activation"], ln_epsilon=k["ln_epsilon"])
        max_t = max(cfg["T_grid"])
        self.kernel = KernelConfig(kind=k["kind"], depth=k["depth"], params=params,
                                   mc=McConfig(n_mc=k["n_mc"], seed=cfg["seed"]), mode=k["mode"],
                                   fcn_length=token_length(self.kind, max_t),
                                   workers=cfg["workers"])
        self.kappa_rel = k["kappa_rel"]
        self.n_classes = n_classes(self.kind, cfg["task"]["params"], max_t)

    def encode(self, inst, rng=None):
        """``(embedding, target)``; sorting uses one teacher-forced suffix position."""
        if self.kind == "sort":
            T = inst.T
            j = int(inst.meta.setdefault("position", int(rng.integers(0, T)) if rng is not None else 0))
            tokens = inst.payload["tokens"][:T + 1 + j]
            target = inst.payload["tokens"][T + 1 + j]
            x = embed_tokens(tokens, inst.payload["vocab_size"] + 1, self.d, self.pe_mode,
                             self.embed_seed)
            return x, target
        return embed_instance(inst, self.d, self.pe_mode, self.embed_seed), inst.label

    def _targets(self, labels):
        if self.n_classes is None:
            return np.asarray(labels, dtype=np.float64)
        return one_hot(labels, self.n_classes)

    def fit_initial(self, data):
        xs = [x for x, _ in data]
        if not xs:
            width = () if self.n_classes is None else (self.n_classes,)
            return FittedPredictor([], np.zeros((0,) + width), 0.0, self.kernel)
        return fit(xs, self._targets([y for _, y in data]), self.kernel, kappa_rel=self.kappa_rel)

    def adapt(self, f1, data):
        xs = [x for x, _ in data]
        y = self._targets([y for _, y in data]) if data else None
        return two_step_adapt(f1, xs, y, kappa_rel=self.kappa_rel)

    def error(self, model, data):
        pred, _ = predict_batch(model, [x for x, _ in data])
        labels = np.asarray([y for _, y in data])
        if self.n_classes is None:
            return float(np.mean(np.rint(pred) != labels))
        cls, _ = decode_classes(pred)
        return float(np.mean(cls != labels))


class ScriptedLearner:
    """Synthetic learner: error is below any ``delta`` exactly when enough samples were seen.

    Stage 1 needs ``P0`` samples; at size ``T`` the adapted model needs
    ``ceil(C log(T / T0))`` cumulative adaptation samples.
    """

    def __init__(self, cfg):
        self.C = float(cfg["learner"].get("C", 5.0))
        self.P0 = int(cfg["learner"].get("P0", 8))
        self.T0 = cfg["T0"]
        self.delta = cfg["delta"]

    def encode(self, inst, rng=None):
        return inst.T, inst.label

    def fit_initial(self, data):
        return ("initial", len(data), 0)

    def adapt(self, f1, data):
        return ("adapted", f1[1], len(data))

    def required(self, T):
        return max(0, math.ceil(self.C * math.log(T / self.T0) - 1e-9))

    def error(self, model, data):
        T = data[0][0]
        ok = model[1] >= self.P0 and model[2] >= self.required(T)
        return 0.0 if ok else 1.0


def make_learner(cfg):
    return ScriptedLearner(cfg) if cfg["learner"]["type"] == "scripted" else KernelLearner(cfg)


def token_length(kind, T):
    """Embedded length of an instance of size ``T`` (upper bound for sorting)."""
    return {"sort": 2 * T + 1, "string_match": T + 4}.get(kind, T)


def n_classes(kind, params, max_t):
    if kind == "induction":
        return int(params.get("vocab_size", 1024))
    if kind == "sort":
        return int(params.get("vocab_size", 100))
    if kind in ("string_match", "cfg"):
        return 2
    return None  # spp / mincut: regression on the integer value


def wilson(errors, n, z=1.96):
    """``(center, half_width / z)`` of the Wilson score interval for ``errors / n``."""
    p = errors / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return center, half / z


# ---------------------------------------------------------------------------
# stages

@dataclass
class StageResult:
    model: object
    samples: int
    error: float
    stderr: float
    budget_exhausted: bool


def _grow(fit_fn, err_fn, pool_fn, start, cap, batch, delta):
    """Add samples in batches until ``err_fn < delta``; refine inside the last batch.

    ``pool_fn(n)`` returns the first ``n`` new samples.  Returns
    ``(model, n_used, error, exhausted)``.
    """
    n = start
    model = fit_fn(pool_fn(n))
    err = err_fn(model)
    if err < delta:
        return model, n, err, False
    prev = n
    while n < cap:
        n = min(n + batch, cap)
        model = fit_fn(pool_fn(n))
        err = err_fn(model)
        if err < delta:
            lo, hi = prev, n  # err(lo) >= delta > err(hi)
            best = (model, n, err)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                m = fit_fn(pool_fn(mid))
                e = err_fn(m)
                if e < delta:
                    hi, best = mid, (m, mid, e)
                else:
                    lo = mid
            return best[0], best[1], best[2], False
        prev = n
    return model, n, err, True


class CaptureRun:
    """Stateful driver for one experiment (stage 1, then the size sweep)."""

    def __init__(self, cfg, learner=None):
        self.cfg = cfg
        self.stream = TaskStream(cfg)
        self.learner = learner if learner is not None else make_learner(cfg)
        self._train = []
        self._adapt = []  # encoded adaptation samples, cumulative
        self._adapt_keys = []

    def _encoded(self, stage, grid_idx, i, T=None, T_range=None):
        inst, rng = self.stream.make(stage, grid_idx, i, T, T_range)
        return self.learner.encode(inst, rng)

    def _eval_set(self, stage, grid_idx, T):
        return [self._encoded(stage, grid_idx, i, T=T) for i in range(self.cfg["n_eval"])]

    def stage1(self) -> StageResult:
        cfg = self.cfg
        T0 = cfg["T0"]
        evals = self._eval_set(STAGE1_EVAL, 0, T0)

        def pool(n):
            while len(self._train) < n:
                self._train.append(self._encoded(STAGE1_TRAIN, 0, len(self._train), T=T0))
            return self._train[:n]

        cap = cfg["P0_max"]
        start = min(cfg["batch"], cap)
        model, n, err, exhausted = _grow(self.learner.fit_initial,
                                         lambda m: self.learner.error(m, evals),
                                         pool, start, cap, cfg["batch"], cfg["delta"])
        self.f1 = model
        self.P0 = n
        _, se = wilson(err * len(evals), len(evals))
        return StageResult(model, n, err, se, exhausted)

    def adapt_step(self, grid_idx, T, T_prev) -> StageResult:
        """Grow the cumulative adaptation set until the error at ``T`` is below delta."""
        cfg = self.cfg
        evals = self._eval_set(ADAPT_EVAL, grid_idx, T)
        base = len(self._adapt)
        fresh = []

        def pool(n):
            while len(fresh) < n:
                i = len(fresh)
                fresh.append(self._encoded(ADAPT_TRAIN, grid_idx, i, T_range=(T_prev, T)))
            return self._adapt + fresh[:n]

        model, n, err, exhausted = _grow(lambda d: self.learner.adapt(self.f1, d),
                                         lambda m: self.learner.error(m, evals),
                                         pool, 0, cfg["adapt_cap"], cfg["batch"], cfg["delta"])
        self._adapt.extend(fresh[:n])
        self._adapt_keys.append([grid_idx, n])
        _, se = wilson(err * len(evals), len(evals))
        assert len(self._adapt) == base + n
        return StageResult(model, n, err, se, exhausted)

    def restore(self, adapt_keys, T_list):
        """Rebuild the cumulative adaptation set from checkpointed keys."""
        T_prev = self.cfg["T0"]
        for (grid_idx, n), T in zip(adapt_keys, T_list):
            for i in range(n):
                self._adapt.append(self._encoded(ADAPT_TRAIN, grid_idx, i, T_range=(T_prev, T)))
            self._adapt_keys.append([grid_idx, n])
            T_prev = T


def stage1_train(cfg, learner=None):
    """Stage-1 fit at ``T0``: returns ``(model, P0)``; raises :class:`BudgetExhausted` on cap."""
    run = CaptureRun(cfg, learner)
    res = run.stage1()
    if res.budget_exhausted:
        raise BudgetExhausted(f"stage 1 error {res.error:.3f} >= delta after {res.samples} samples")
    return res.model, res.samples


def adapt_step(run: CaptureRun, grid_idx, T, T_prev):
    """One grid point of the sweep: returns ``(model, samples_used, error)``."""
    res = run.adapt_step(grid_idx, T, T_prev)
    if res.budget_exhausted:
        raise BudgetExhausted(f"adaptation at T={T} exhausted its cap")
    return res.model, res.samples, res.error


# ---------------------------------------------------------------------------
# fitting and verdicts

def fit_log_curve(points, T0):
    """Least-squares ``C`` for ``P = C log(T/T0)`` and its ``r^2``.

    ``points`` are ``(T, P)`` pairs (extra fields ignored).
    """
    if len(points) < 3:
        raise TooFewPoints("need at least 3 points")
    T = np.array([p[0] for p in points], dtype=float)
    P = np.array([p[1] for p in points], dtype=float)
    ell = np.log(T / T0)
    denom = float(ell @ ell)
    C = float(P @ ell / denom) if denom > 0 else 0.0
    return C, _r2(P, C * ell)


def _r2(P, fitted):
    ss_res = float(np.sum((P - fitted) ** 2))
    ss_tot = float(np.sum((P - P.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res <= 1e-12 * max(1.0, float(P @ P)) else 0.0
    return 1.0 - ss_res / ss_tot


def fit_power_curve(points, T0, kappa_max=5.0):
    """``P = A (T/T0)^kappa`` by bounded search on ``kappa`` (``A`` in closed form)."""
    T = np.array([p[0] for p in points], dtype=float)
    P = np.array([p[1] for p in points], dtype=float)
    x = T / T0

    def amp(k):
        xk = x ** k
        return float(P @ xk / (xk @ xk))

    def sse(k):
        return float(np.sum((P - amp(k) * x ** k) ** 2))

    grid = np.linspace(0.0, kappa_max, 101)
    k0 = grid[int(np.argmin([sse(k) for k in grid]))]
    lo, hi = max(0.0, k0 - kappa_max / 100), min(kappa_max, k0 + kappa_max / 100)
    res = optimize.minimize_scalar(sse, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-10})
    k = float(res.x) if res.fun <= sse(k0) else float(k0)
    return amp(k), k, sse(k)


def _aic(sse, n, k, scale):
    floor = 1e-12 * max(scale, 1.0)
    return n * math.log(max(sse, floor) / n) + 2 * k


@dataclass
class CurveFit:
    C: float | None
    r2: float | None
    A: float | None
    kappa: float | None
    aic_log: float | None
    aic_power: float | None
    verdict: str


def classify_capture(points, T0, thresholds=None, flags=False) -> CurveFit:
    """Capture / non-capture / inconclusive from a budget curve.

    Non-capture: the power law wins by more than ``aic_margin`` AIC units with
    exponent ``>= kappa_min``.  Capture: otherwise, when the log fit has
    ``r^2 >= r2_min`` and no point exhausted its budget.
    """
    th = {**THRESHOLD_DEFAULTS, **(thresholds or {})}
    if len(points) < 3:
        return CurveFit(None, None, None, None, None, None, "inconclusive")
    C, r2 = fit_log_curve(points, T0)
    T = np.array([p[0] for p in points], dtype=float)
    P = np.array([p[1] for p in points], dtype=float)
    n = len(P)
    scale = float(P @ P)
    sse_log = float(np.sum((P - C * np.log(T / T0)) ** 2))
    A, kappa, sse_pow = fit_power_curve(points, T0)
    aic_log = _aic(sse_log, n, 1, scale)
    aic_pow = _aic(sse_pow, n, 2, scale)
    if aic_pow + th["aic_margin"] < aic_log and kappa >= th["kappa_min"]:
        verdict = "non_capture"
    elif r2 >= th["r2_min"] and not flags:
        verdict = "capture"
    else:
        verdict = "inconclusive"
    return CurveFit(C, r2, A, kappa, aic_log, aic_pow, verdict)


def synthetic_series(kind, T0, T_grid, rng, C=7.0, sigma=0.5, switch=None, tail_ratio=1.8):
    """Calibration budget series: ``log``, ``linear`` or ``mixed``.

    ``mixed`` follows ``C log(T/T0)`` up to ``switch`` (default: median size)
    and then grows linearly; the linear part reaches ``tail_ratio`` times the
    log part at the largest size.
    """
    T = np.asarray(T_grid, dtype=float)
    ell = np.log(T / T0)
    if kind == "log":
        P = C * ell
    elif kind == "linear":
        P = C * T / T0
    elif kind == "mixed":
        switch = float(np.median(T)) if switch is None else float(switch)
        head = C * math.log(switch / T0)
        slope = tail_ratio * head / (T[-1] - switch)
        P = C * np.minimum(ell, math.log(switch / T0)) + slope * np.clip(T - switch, 0, None)
    else:
        raise ValueError(f"unknown series kind {kind!r}")
    return list(zip(T.tolist(), (P + sigma * rng.standard_normal(len(T))).tolist()))


def verdict_stability(kind, T0, T_grid, seeds, **kw):
    """Fraction of seeds whose verdict differs from the majority verdict."""
    verdicts = [classify_capture(synthetic_series(kind, T0, T_grid, np.random.default_rng(s), **kw),
                                 T0).verdict for s in seeds]
    values, counts = np.unique(verdicts, return_counts=True)
    return 1.0 - counts.max() / len(verdicts), values[np.argmax(counts)]


# ---------------------------------------------------------------------------
# MC error sweep

@dataclass
class SweepResult:
    slope: float
    slope_stderr: float
    ci: tuple
    intercept: float
    n_grid: list
    stds: list


def mc_error_sweep(estimator, n_grid, repetitions, seed=0, level=0.95) -> SweepResult:
    """Regress ``log std`` of ``estimator(n, seed)`` on ``log n``.

    ``estimator`` must be a function of the sample count and a seed; each
    grid value is repeated ``repetitions`` times with distinct seeds.
    """
    if repetitions < 3:
        raise TooFewReps("need at least 3 repetitions")
    if len(n_grid) < 2:
        raise TooFewPoints("need at least 2 grid values")
    ss = np.random.SeedSequence(seed)
    stds = []
    for gi, n in enumerate(n_grid):
        vals = []
        for r in range(repetitions):
            child = int(np.random.SeedSequence(ss.entropy, spawn_key=(gi, r)).generate_state(1)[0])
            vals.append(float(estimator(int(n), child)))
        stds.append(float(np.std(vals, ddof=1)))
    lx, ly = np.log(np.asarray(n_grid, float)), np.log(np.asarray(stds))
    lr = stats.linregress(lx, ly)
    tcrit = stats.t.ppf(0.5 + level / 2, len(n_grid) - 2) if len(n_grid) > 2 else float("inf")
    ci = (lr.slope - tcrit * lr.stderr, lr.slope + tcrit * lr.stderr)
    return SweepResult(float(lr.slope), float(lr.stderr), ci, float(lr.intercept),
                       list(map(int, n_grid)), stds)


def kernel_readout_estimator(x1, x2, depth=1, params=None, mode="nngp", antithetic=False):
    """Estimator ``(n_mc, seed) -> kernel readout`` for :func:`mc_error_sweep`."""
    from .kernel_propagation import propagate_transformer
    params = params or BlockParams()

    def est(n, seed):
        mc = McConfig(n_mc=n, seed=seed, antithetic=antithetic)
        return propagate_transformer(x1, x2, depth, params, mc, mode=mode).value

    return est


# ---------------------------------------------------------------------------
# full run with checkpointing

def _versions():
    import numba
    import scipy
    return {"capture_kernels": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def _point_row(p):
    return [p["T"], p["P"], repr(float(p["error"])), repr(float(p["stderr"])), ";".join(p["flags"])]


def write_curve_csv(path, points):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for p in points:
        w.writerow(_point_row(p))
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_curve_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"T": int(r["T"]), "P": int(r["P"]), "error": float(r["error"]),
             "stderr": float(r["stderr"]), "flags": [f for f in r["flags"].split(";") if f]}
            for r in rows]


def _atomic_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run_capture(cfg, out_dir, cfg_hash=None, learner=None, stop_after=None, resume=True):
    """Run (or resume) a full sweep; writes ``curve.csv``, ``fit.json``, ``manifest.json``.

    A checkpoint is written after every grid point.  ``stop_after`` halts after
    that many grid points (used to test resumption).  Returns the fit dict, or
    ``None`` if stopped early.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg_hash = cfg_hash or config_hash(cfg)
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    run = CaptureRun(cfg, learner)
    state = None
    if resume and os.path.exists(ckpt_path):
        with open(ckpt_path) as fh:
            state = json.load(fh)
        if state.get("config_hash") != cfg_hash:
            raise ConfigError("checkpoint belongs to a different config")
    if state is None:
        s1 = run.stage1()
        state = {"config_hash": cfg_hash, "P0": s1.samples, "stage1_error": s1.error,
                 "stage1_budget_exhausted": s1.budget_exhausted, "points": [], "adapt_keys": [],
                 "next": 0}
        _atomic_json(ckpt_path, state)
    else:
        # stage 1 is deterministic: refit on the same P0 samples
        T0 = cfg["T0"]
        run._train = [run._encoded(STAGE1_TRAIN, 0, i, T=T0) for i in range(state["P0"])]
        run.f1 = run.learner.fit_initial(run._train)
        run.P0 = state["P0"]
        run.restore(state["adapt_keys"], [p["T"] for p in state["points"]])
    grid = cfg["T_grid"]
    done_now = 0
    for gi in range(state["next"], len(grid)):
        if stop_after is not None and done_now >= stop_after:
            return None
        T = grid[gi]
        T_prev = grid[gi - 1] if gi > 0 else cfg["T0"]
        res = run.adapt_step(gi, T, T_prev)
        flags = []
        if res.budget_exhausted:
            flags.append("budget_exhausted")
        if state["stage1_budget_exhausted"] and gi == 0:
            flags.append("stage1_budget_exhausted")
        prev_p = state["points"][-1]["P"] if state["points"] else 0
        state["points"].append({"T": T, "P": prev_p + res.samples, "error": res.error,
                                "stderr": res.stderr, "flags": flags})
        state["adapt_keys"] = [list(k) for k in run._adapt_keys]
        state["next"] = gi + 1
        _atomic_json(ckpt_path, state)
        done_now += 1
    pts = state["points"]
    any_flag = state["stage1_budget_exhausted"] or any(p["flags"] for p in pts)
    cf = classify_capture([(p["T"], p["P"]) for p in pts], cfg["T0"], cfg["thresholds"], any_flag)
    fit_doc = {"C": cf.C, "r2": cf.r2, "kappa": cf.kappa, "A": cf.A, "aic_log": cf.aic_log,
               "aic_power": cf.aic_power, "verdict": cf.verdict, "T0": cfg["T0"],
               "P0": state["P0"], "stage1_budget_exhausted": state["stage1_budget_exhausted"],
               "n_points": len(pts)}
    curve_path = os.path.join(out_dir, "curve.csv")
    fit_path = os.path.join(out_dir, "fit.json")
    write_curve_csv(curve_path, pts)
    _atomic_json(fit_path, fit_doc)
    manifest = {"config_hash": cfg_hash, "master_seed": cfg["seed"], "versions": _versions(),
                "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                "outputs": {"curve": curve_path, "fit": fit_path}}
    _atomic_json(os.path.join(out_dir, "manifest.json"), manifest)
    return fit_doc


def validate_outputs(out_dir):
    """Check ``fit.json`` against its schema and ``curve.csv`` for shape and ranges."""
    from jsonschema import validate
    with open(os.path.join(out_dir, "fit.json")) as fh:
        validate(json.load(fh), FIT_SCHEMA)
    with open(os.path.join(out_dir, "curve.csv"), newline="") as fh:
        header = next(csv.reader(fh))
    if header != CURVE_COLUMNS:
        raise ValueError(f"curve.csv header {header} != {CURVE_COLUMNS}")
    pts = read_curve_csv(os.path.join(out_dir, "curve.csv"))
    for a, b in zip(pts, pts[1:]):
        if b["P"] < a["P"]:
            raise ValueError("cumulative P decreased")
    for p in pts:
        if not 0.0 <= p["error"] <= 1.0:
            raise ValueError("error outside [0, 1]")
    return pts
