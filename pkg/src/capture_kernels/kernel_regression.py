"""Kernel ridge prediction and the two-stage (fit, then residual-fit) protocol."""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import NotFinite, ShapeMismatch, StageViolation
from .kernel_propagation import BlockParams, McConfig, fcn_kernel_matrix, propagate_transformer

FORMAT_VERSION = 1
# one-hot targets: distinct classes are 1 apart in max-metric
ONE_HOT_DELTA = 1.0


@dataclass(frozen=True)
class KernelConfig:
    """Which kernel to evaluate between two embedded inputs.

    ``kind="fcn"`` flattens inputs after right-aligning them in a window of
    ``fcn_length`` tokens (zero-padded on the left) so that inputs of different
    lengths share one feature space.  ``kind="transformer"`` runs the MC
    propagation; pair seeds are derived from the input contents so that the
    kernel is a deterministic function of the pair.
    """

    kind: str = "fcn"
    depth: int = 2
    params: BlockParams = field(default_factory=BlockParams)
    mc: McConfig = field(default_factory=McConfig)
    mode: str = "nngp"
    pe: str = "none"
    fcn_length: int | None = None
    workers: int = 1

    def __post_init__(self):
        if self.kind not in ("fcn", "transformer"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["params"] = BlockParams(**d.get("params", {}))
        d["mc"] = McConfig(**d.get("mc", {}))
        return cls(**d)


@dataclass
class Gram:
    matrix: np.ndarray
    stderr: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise NotFinite("Gram matrix has non-finite entries")


def content_hash(x) -> str:
    x = np.ascontiguousarray(x, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(x.shape).encode())
    h.update(x.tobytes())
    return h.hexdigest()


def _pad_right_aligned(x, length):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] > length:
        raise ShapeMismatch(f"input length {x.shape[0]} exceeds fcn_length {length}")
    out = np.zeros((length, x.shape[1]))
    out[length - x.shape[0]:] = x
    return out


def _fcn_block(xs1, xs2, cfg: KernelConfig):
    length = cfg.fcn_length or max(np.shape(x)[0] for x in list(xs1) + list(xs2))
    a = [_pad_right_aligned(x, length) for x in xs1]
    b = [_pad_right_aligned(x, length) for x in xs2]
    k = fcn_kernel_matrix(a, b, cfg.depth, cfg.params)
    return k, np.zeros_like(k)


def _pair_seed(base, h1, h2):
    lo, hi = sorted((h1, h2))
    digest = hashlib.sha256(f"{base}:{lo}:{hi}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def transformer_kernel(x1, x2, cfg: KernelConfig):
    """``(value, stderr)`` of the MC transformer kernel at the readout entry."""
    h1, h2 = content_hash(x1), content_hash(x2)
    if h2 < h1:
        x1, x2 = x2, x1
    mc = McConfig(n_mc=cfg.mc.n_mc, seed=_pair_seed(cfg.mc.seed, h1, h2),
                  antithetic=cfg.mc.antithetic, workers=cfg.mc.workers,
                  symmetric=cfg.mc.symmetric)
    r = propagate_transformer(x1, x2, cfg.depth, cfg.params, mc, mode=cfg.mode, pe=cfg.pe)
    return r.value, r.stderr


def kernel_block(xs1, xs2, cfg: KernelConfig, symmetric=False):
    """Kernel matrix between two lists of embedded inputs, with stderr."""
    if cfg.kind == "fcn":
        return _fcn_block(xs1, xs2, cfg)
    n1, n2 = len(xs1), len(xs2)
    pairs = [(i, j) for i in range(n1) for j in range(n2) if not symmetric or j >= i]
    k = np.zeros((n1, n2))
    se = np.zeros((n1, n2))

    def run(ij):
        return transformer_kernel(xs1[ij[0]], xs2[ij[1]], cfg)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            vals = list(ex.map(run, pairs))
    else:
        vals = [run(p) for p in pairs]
    for (i, j), (v, s) in zip(pairs, vals):
        k[i, j], se[i, j] = v, s
        if symmetric:
            k[j, i], se[j, i] = v, s
    return k, se


def assemble_gram(data, cfg: KernelConfig) -> Gram:
    """``P x P`` Gram over embedded inputs (upper triangle computed, mirrored)."""
    xs = [np.asarray(x, dtype=np.float64) for x in data]
    if not xs:
        raise ValueError("need at least one input")
    k, se = kernel_block(xs, xs, cfg, symmetric=True)
    return Gram(0.5 * (k + k.T), se)


def ridge_solve(g, y, kappa, clip_eigen=False):
    """``alpha = (K + kappa I)^{-1} y`` via Cholesky; ``y`` may have several columns."""
    k = g.matrix if isinstance(g, Gram) else np.asarray(g, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(y))):
        raise NotFinite("non-finite Gram or targets")
    if k.shape[0] != k.shape[1] or y.shape[0] != k.shape[0]:
        raise ShapeMismatch("Gram must be P x P and y must have P rows")
    k = 0.5 * (k + k.T)
    if clip_eigen:
        w, v = np.linalg.eigh(k)
        k = (v * np.clip(w, 0.0, None)) @ v.T
    a = k + kappa * np.eye(k.shape[0])
    try:
        alpha = linalg.cho_solve(linalg.cho_factor(a, lower=True), y)
    except linalg.LinAlgError:
        # MC Gram indefinite beyond kappa: symmetric indefinite solve
        alpha = linalg.solve(a, y, assume_a="sym")
    if not np.all(np.isfinite(alpha)):
        raise NotFinite("ridge solution is not finite")
    return alpha


@dataclass
class FittedPredictor:
    train_inputs: list
    alpha: np.ndarray
    kappa: float
    kernel_config: KernelConfig
    stage: str = "initial"
    parent: "FittedPredictor | None" = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape[0] != len(self.train_inputs):
            raise ShapeMismatch("alpha length must equal the number of training inputs")
        if self.stage not in ("initial", "adapted"):
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def alpha_max(self) -> float:
        return float(np.abs(self.alpha).max()) if self.alpha.size else 0.0

    @property
    def n_outputs(self):
        return 1 if self.alpha.ndim == 1 else self.alpha.shape[1]


def fit(train_inputs, labels, cfg: KernelConfig, kappa=None, kappa_rel=1e-3) -> FittedPredictor:
    """Single-stage ridge fit; ``kappa`` defaults to ``kappa_rel`` times the mean Gram diagonal."""
    xs = [np.asarray(x, dtype=np.float64) for x in train_inputs]
    g = assemble_gram(xs, cfg)
    if kappa is None:
        kappa = kappa_rel * max(float(np.mean(np.diag(g.matrix))), 1e-12)
    alpha = ridge_solve(g, labels, kappa)
    return FittedPredictor(xs, alpha, float(kappa), cfg)


def predict_batch(f: FittedPredictor, xs):
    """Predictions (and propagated stderr) for a list of inputs."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    if f.train_inputs:
        k, se = kernel_block(xs, f.train_inputs, f.kernel_config)
        pred = k @ f.alpha
        var = (se ** 2) @ (f.alpha ** 2)
    else:
        shape = (len(xs),) if f.alpha.ndim == 1 else (len(xs), f.alpha.shape[1])
        pred, var = np.zeros(shape), np.zeros(shape)
    if f.parent is not None:
        p0, s0 = predict_batch(f.parent, xs)
        pred = pred + p0
        var = var + s0 ** 2
    return pred, np.sqrt(var)


def predict(f: FittedPredictor, x):
    """``sum_nu alpha_nu K(x, X_nu)`` plus its MC standard error."""
    p, s = predict_batch(f, [x])
    return p[0], s[0]


def two_step_adapt(f1: FittedPredictor, new_data, new_labels, kappa=None,
                   kappa_rel=1e-3) -> FittedPredictor:
    """Fit a second predictor to the residuals of ``f1`` on new data; return the sum."""
    if f1.stage != "initial":
        raise StageViolation("two_step_adapt requires a first-stage predictor")
    xs = [np.asarray(x, dtype=np.float64) for x in new_data]
    y = np.asarray(new_labels, dtype=np.float64)
    if len(xs) == 0:
        return FittedPredictor([], np.zeros((0,) + f1.alpha.shape[1:]), f1.kappa,
                               f1.kernel_config, stage="adapted", parent=f1)
    base, _ = predict_batch(f1, xs)
    resid = y - base
    g = assemble_gram(xs, f1.kernel_config)
    if kappa is None:
        kappa = kappa_rel * max(float(np.mean(np.diag(g.matrix))), 1e-12)
    alpha = ridge_solve(g, resid, kappa)
    return FittedPredictor(xs, alpha, float(kappa), f1.kernel_config, stage="adapted", parent=f1)


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def decode_classes(pred):
    """Argmax decoding with the logit margin (top minus runner-up)."""
    pred = np.atleast_2d(pred)
    order = np.sort(pred, axis=1)
    margin = order[:, -1] - (order[:, -2] if pred.shape[1] > 1 else 0.0)
    return np.argmax(pred, axis=1), margin


# ---------------------------------------------------------------------------
# persistence

def _to_doc(f: FittedPredictor):
    return {
        "stage": f.stage,
        "kappa": f.kappa,
        "alpha": f.alpha.tolist(),
        "inputs": [content_hash(x) for x in f.train_inputs],
        "kernel_config": f.kernel_config.to_dict(),
        "parent": None if f.parent is None else _to_doc(f.parent),
    }


def save_predictor(f: FittedPredictor, path):
    doc = {"format": "capture-kernels/predictor", "version": FORMAT_VERSION, "predictor": _to_doc(f)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_predictor(path, resolve: Callable[[str], np.ndarray] | dict) -> FittedPredictor:
    """Rebuild a predictor; ``resolve`` maps an input content hash to its array."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported predictor version {doc.get('version')}")
    lookup = resolve.__getitem__ if isinstance(resolve, dict) else resolve

    def build(d):
        xs = []
        for h in d["inputs"]:
            x = np.asarray(lookup(h), dtype=np.float64)
            if content_hash(x) != h:
                raise ValueError(f"input for hash {h[:12]} does not match its content")
            xs.append(x)
        parent = None if d["parent"] is None else build(d["parent"])
        alpha = np.asarray(d["alpha"], dtype=np.float64)
        if alpha.size == 0 and alpha.ndim == 1 and parent is not None and parent.alpha.ndim == 2:
            alpha = alpha.reshape(0, parent.alpha.shape[1])
        return FittedPredictor(xs, alpha, d["kappa"], KernelConfig.from_dict(d["kernel_config"]),
                               d["stage"], parent)

    return build(doc["predictor"])
