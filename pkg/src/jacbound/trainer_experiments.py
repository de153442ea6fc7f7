"""Desk-scale training and the experiment drivers that emit figure data as CSV.

Everything is seeded through ``numpy.random.default_rng`` with structured
seeds ``[seed, tag, ...]`` so independent runs never share a stream.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .capacity_bounds import capacity_terms_sec5, layer_norm_report
from .errors import DivergenceError, ValidationError
from .margin_loss import LabeledDataset, margins
from .relu_network import (
    ConvCirculant,
    Dense,
    NetworkSpec,
    WidthChange,
    backprop,
    forward_batch,
    jacobian_stats,
    layer_lipschitz,
    params_of,
    with_params,
)
from .structured_operators import FilterBank, WidthOp, orthonormalize_filters

INIT_SCHEMES = ("gaussian_scaled", "orthogonal_filters")
OBJECTIVES = ("cross_entropy", "ramp_surrogate")
CONSTRAINTS = ("none", "unit_norm", "orthonormal")

# seed tags keep streams for different purposes apart
_TAG_INIT, _TAG_SHUFFLE, _TAG_DATA = 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    """Architecture and optimizer settings.

    ``arch`` is a list of layer descriptors, each a dict with a ``type`` key:
    ``{"type": "dense", "out": 32}``, ``{"type": "conv", "k": 9, "s": 3, "n": 3}``,
    ``{"type": "avg_pool" | "max_pool" | "padding", "s": 2}`` or
    ``{"type": "one_by_one_conv", "coeffs": [...]}``.
    """

    arch: Tuple[dict, ...]
    init: str = "gaussian_scaled"
    lr: float = 0.05
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    objective: str = "cross_entropy"
    filter_scale: float = 1.0
    constraint: str = "none"
    gamma: float = 1.0
    jac_subsample: int = 200
    record_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "arch", tuple(dict(a) for a in self.arch))
        if self.init not in INIT_SCHEMES:
            raise ValidationError(f"init must be one of {INIT_SCHEMES}")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if self.constraint not in CONSTRAINTS:
            raise ValidationError(f"constraint must be one of {CONSTRAINTS}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("lr and epochs must be nonnegative, batch_size positive")
        if self.filter_scale < 0 or not self.gamma > 0:
            raise ValidationError("filter_scale must be nonnegative and gamma positive")
        if not self.arch:
            raise ValidationError("empty architecture")


def dense_arch(depth: int, width: int, n_class: int) -> Tuple[dict, ...]:
    """``depth`` dense layers: ``depth - 1`` hidden layers of ``width`` then the class layer."""
    if depth < 1:
        raise ValidationError("depth must be >= 1")
    return tuple([{"type": "dense", "out": width}] * (depth - 1) + [{"type": "dense", "out": n_class}])


def cnn_arch(depth: int, k: int, s: int, n: int, pool: int) -> Tuple[dict, ...]:
    return tuple([{"type": "conv", "k": k, "s": s, "n": n}] * depth + [{"type": "avg_pool", "s": pool}])


# ---------------------------------------------------------------------------
# initialization


def init_network(cfg: TrainConfig, p0: int) -> NetworkSpec:
    """Random network for ``cfg.arch`` on inputs of dimension ``p0``.

    ``gaussian_scaled`` draws weights with variance ``2 / fan_in``; conv layers
    under ``orthogonal_filters`` start from orthonormal filters.  Every weight is
    then multiplied by ``cfg.filter_scale``.
    """
    layers = []
    p = p0
    c = cfg.filter_scale
    for d, spec in enumerate(cfg.arch, start=1):
        kind = spec["type"]
        rng = np.random.default_rng([cfg.seed, _TAG_INIT, d])
        if kind == "dense":
            out = int(spec["out"])
            W = rng.normal(0.0, math.sqrt(2.0 / p), size=(out, p))
            layers.append(Dense(c * W))
            p = out
        elif kind == "conv":
            k, s, n = int(spec["k"]), int(spec["s"]), int(spec["n"])
            if cfg.init == "orthogonal_filters":
                F = orthonormalize_filters(n, k, int(rng.integers(2**31)), s).filters
            else:
                F = rng.normal(0.0, math.sqrt(2.0 / k), size=(n, k))
            layer = ConvCirculant(FilterBank(c * F, s), p)
            layers.append(layer)
            p = layer.out_dim
        else:
            op = WidthOp(kind, p, int(spec.get("s", 1)), spec.get("coeffs"))
            layers.append(WidthChange(op))
            p = op.out_dim
    return NetworkSpec(tuple(layers))


def conv_shape(net: NetworkSpec) -> Tuple[int, List[int]]:
    """Common filter length and per-layer filter counts of a pure conv net."""
    ks, ns = set(), []
    for layer in net.layers:
        if isinstance(layer, Dense):
            raise ValidationError("expected convolution layers only")
        if isinstance(layer, ConvCirculant):
            ks.add(layer.bank.k)
            ns.append(layer.bank.n)
    if len(ks) != 1:
        raise ValidationError("conv layers must share one filter length")
    return ks.pop(), ns


# ---------------------------------------------------------------------------
# training


def _objective(out: np.ndarray, labels: np.ndarray, cfg: TrainConfig):
    """Mean loss over the batch and its gradient with respect to the outputs."""
    b = out.shape[0]
    rows = np.arange(b)
    if cfg.objective == "cross_entropy":
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
        loss = -float(np.mean(logp[rows, labels]))
        G = np.exp(logp)
        G[rows, labels] -= 1.0
        return loss, G / b
    nu = margins(out, labels)
    loss = float(np.mean(np.clip(1.0 - nu / cfg.gamma, 0.0, 1.0)))
    slope = np.where((nu >= 0) & (nu <= cfg.gamma), -1.0 / cfg.gamma, 0.0) / b
    masked = out.copy()
    masked[rows, labels] = -np.inf
    rival = np.argmax(masked, axis=1)
    G = np.zeros_like(out)
    G[rows, labels] += slope
    G[rows, rival] -= slope
    return loss, G


def project_filters(F: np.ndarray, constraint: str, scale: float) -> np.ndarray:
    """Rescale each filter to norm ``scale``, or replace the bank by its scaled polar factor."""
    if constraint == "unit_norm":
        nrm = np.linalg.norm(F, axis=1, keepdims=True)
        return np.where(nrm > 0, F * (scale / np.where(nrm > 0, nrm, 1.0)), F)
    if constraint == "orthonormal":
        U, _, Vt = np.linalg.svd(F, full_matrices=False)
        return scale * (U @ Vt)
    return F


def accuracy(net: NetworkSpec, data: LabeledDataset) -> float:
    out = forward_batch(net, data.inputs).output
    return float(np.mean(np.argmax(out, axis=1) == data.labels))


def network_summary(net: NetworkSpec, X: np.ndarray, seed: int = 0) -> Tuple[float, float]:
    """``(B^{Jac}_{1:D}, prod_d ||layer_d||)`` on the inputs ``X``."""
    st = jacobian_stats(net, X, seed=seed, leave_one=False)
    prod = float(np.prod([layer_lipschitz(layer, seed=seed) for layer in net.layers]))
    return st.agg_full, prod


def _jac_inputs(data: LabeledDataset, cfg: TrainConfig) -> np.ndarray:
    return data.inputs[: min(cfg.jac_subsample, data.m)]


def sgd_train(
    net: NetworkSpec, data: LabeledDataset, cfg: TrainConfig, test: Optional[LabeledDataset] = None
):
    """Minibatch SGD; returns ``(net, history)`` with one history row per recorded epoch.

    History rows hold epoch, mean loss, train/test accuracy, the product of
    layer norms and ``B^{Jac}_{1:D}`` on the first ``cfg.jac_subsample``
    training inputs.
    """
    if not np.all(np.isfinite(data.inputs)):
        raise ValidationError("training data must be finite")
    params = params_of(net)
    history: List[dict] = []
    Xj = _jac_inputs(data, cfg)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, _TAG_SHUFFLE, epoch]).permutation(data.m)
        total = 0.0
        for start in range(0, data.m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tr = forward_batch(net, data.inputs[idx])
            loss, G = _objective(tr.output, data.labels[idx], cfg)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", state=net, history=history)
            total += loss * idx.size
            grads = backprop(net, tr, G)
            new = []
            for layer, p, g in zip(net.layers, params, grads):
                if p is None:
                    new.append(None)
                elif isinstance(p, tuple):
                    new.append(tuple(x - cfg.lr * gx for x, gx in zip(p, g)))
                elif isinstance(layer, ConvCirculant):
                    new.append(project_filters(p - cfg.lr * g, cfg.constraint, cfg.filter_scale))
                else:
                    new.append(p - cfg.lr * g)
            if not all(_finite(p) for p in new):
                raise DivergenceError(f"non-finite weights at epoch {epoch}", state=net, history=history)
            params = new
            net = with_params(net, params)
        if epoch % cfg.record_every == 0 or epoch == cfg.epochs:
            bjac, prod = network_summary(net, Xj, cfg.seed)
            history.append(
                {
                    "epoch": epoch,
                    "loss": total / data.m,
                    "train_acc": accuracy(net, data),
                    "test_acc": accuracy(net, test) if test is not None else float("nan"),
                    "prod_spectral": prod,
                    "b_jac": bjac,
                }
            )
    return net, history


def _finite(p) -> bool:
    if p is None:
        return True
    if isinstance(p, tuple):
        return all(np.all(np.isfinite(x)) for x in p)
    return bool(np.all(np.isfinite(p)))


# ---------------------------------------------------------------------------
# data


def synth_dataset(
    p0: int, n_class: int, m_train: int, m_test: int, seed: int, R: float = 1.0, sep: float = 1.0
) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    """Gaussian class-mean mixture, rescaled so the largest input norm is exactly ``R``.

    Labels cycle through the classes before a seeded shuffle, so classes are
    balanced to within one sample.  Returns ``(train, test)``; ``test`` is
    ``None`` when ``m_test == 0``.
    """
    m = m_train + m_test
    if m_train < 1 or m_test < 0 or n_class < 2 or p0 < 1 or not R > 0:
        raise ValidationError("invalid synthetic dataset parameters")
    rng = np.random.default_rng([seed, _TAG_DATA])
    means = sep * rng.normal(size=(n_class, p0))
    labels = rng.permutation(np.arange(m) % n_class)
    X = means[labels] + rng.normal(size=(m, p0))
    X *= R / np.max(np.linalg.norm(X, axis=1))
    train = LabeledDataset(X[:m_train], labels[:m_train], n_class, R)
    test = LabeledDataset(X[m_train:], labels[m_train:], n_class, R) if m_test else None
    return train, test


def train_test_split(data: LabeledDataset, seed: int, frac: float = 0.8):
    """Seeded shuffle then an ``frac`` / ``1 - frac`` split."""
    order = np.random.default_rng([seed, _TAG_SHUFFLE, 0]).permutation(data.m)
    cut = max(1, int(round(frac * data.m)))
    test = data.subset(order[cut:]) if cut < data.m else None
    return data.subset(order[:cut]), test


# ---------------------------------------------------------------------------
# experiments


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


FIG1A_HEADER = ("bound_name", "value", "log10_value")
FIG1B_HEADER = ("scale", "train_acc", "test_acc", "gap")
FIG1C_HEADER = ("depth", "b_jac", "prod_spectral", "log_b_jac", "log_prod_spectral", "log_d", "log_d2")
FIG2_HEADER = ("init", "b_jac", "prod_spectral", "log10_b_jac", "log10_prod_spectral")


def experiment_fig1a(cfg: TrainConfig, train: LabeledDataset, test: Optional[LabeledDataset] = None):
    """Train one CNN and tabulate the four capacity terms.  Returns ``(csv_text, terms, net, history)``."""
    net = init_network(cfg, train.dim)
    net, hist = sgd_train(net, train, cfg, test)
    k, n_list = conv_shape(net)
    terms = capacity_terms_sec5(layer_norm_report(net, seed=cfg.seed), k, n_list)
    rows = [(name, v, math.log10(v)) for name, v in terms.items()]
    return to_csv(FIG1A_HEADER, rows), terms, net, hist


def experiment_fig1b(scale_list: Sequence[float], cfg: TrainConfig, train: LabeledDataset, test: LabeledDataset):
    """Train under each filter-norm scale with projection onto that norm."""
    if test is None:
        raise ValidationError("fig1b needs a test split")
    constraint = cfg.constraint if cfg.constraint != "none" else "unit_norm"
    rows = []
    for c in scale_list:
        run = replace(cfg, filter_scale=float(c), constraint=constraint)
        net = init_network(run, train.dim)
        net = with_params(net, [project_filters(p, constraint, c) if isinstance(layer, ConvCirculant) else p
                                for layer, p in zip(net.layers, params_of(net))])
        net, _ = sgd_train(net, train, run, test)
        tr, te = accuracy(net, train), accuracy(net, test)
        rows.append((float(c), tr, te, tr - te))
    return to_csv(FIG1B_HEADER, rows), rows


def experiment_fig1c(depth_list: Sequence[int], cfg: TrainConfig, train: LabeledDataset, width: int = 32):
    """Depth sweep of dense nets of fixed ``width``; ``cfg.arch`` is replaced per depth."""
    rows = []
    for D in depth_list:
        run = replace(cfg, arch=dense_arch(int(D), width, train.n_class))
        net = init_network(run, train.dim)
        net, _ = sgd_train(net, train, run)
        bjac, prod = network_summary(net, _jac_inputs(train, run), run.seed)
        rows.append((int(D), bjac, prod, math.log(bjac), math.log(prod), math.log(D), 2 * math.log(D)))
    return to_csv(FIG1C_HEADER, rows), rows


def experiment_fig2(cfg: TrainConfig, train: LabeledDataset, n_inits: int, train_epochs: int = 0):
    """Distribution of ``B^{Jac}_{1:D}`` and the norm product over random initializations."""
    if n_inits < 1:
        raise ValidationError("n_inits must be >= 1")
    rows = []
    for i in range(n_inits):
        run = replace(cfg, seed=int(np.random.default_rng([cfg.seed, 4, i]).integers(2**31)), epochs=train_epochs)
        net = init_network(run, train.dim)
        if train_epochs:
            net, _ = sgd_train(net, train, run)
        bjac, prod = network_summary(net, _jac_inputs(train, run), run.seed)
        rows.append((i, bjac, prod, math.log10(bjac), math.log10(prod)))
    return to_csv(FIG2_HEADER, rows), rows


def history_csv(history: Sequence[dict]) -> str:
    header = ("epoch", "loss", "train_acc", "test_acc", "prod_spectral", "b_jac")
    return to_csv(header, [[h[k] for k in header] for h in history])


def linear_fit(x, y) -> Tuple[float, float]:
    """Least-squares slope and coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


# ---------------------------------------------------------------------------
# desk-scale defaults shared by the CLI and the acceptance suite

DESK_M = 2000
DESK_R = 30.0
FIG1B_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)
FIG1C_DEPTHS = (2, 4, 6, 8, 10)


def desk_cnn_setup(seed: int = 0):
    """Six stride-3 conv layers of three orthonormal length-9 filters at width 60, avg-pooled to 10 classes."""
    train, test = synth_dataset(60, 10, int(0.8 * DESK_M), DESK_M - int(0.8 * DESK_M), seed, R=DESK_R)
    cfg = TrainConfig(
        arch=cnn_arch(6, 9, 3, 3, 6),
        init="orthogonal_filters",
        constraint="orthonormal",
        lr=0.2,
        epochs=30,
        batch_size=64,
        seed=seed,
    )
    return cfg, train, test


def desk_dense_setup(seed: int = 0, depth: int = 2):
    """Width-32 dense nets on a 32-dimensional 10-class mixture."""
    train, test = synth_dataset(32, 10, int(0.8 * DESK_M), DESK_M - int(0.8 * DESK_M), seed, R=DESK_R)
    cfg = TrainConfig(arch=dense_arch(depth, 32, 10), lr=0.01, epochs=10, batch_size=64, seed=seed)
    return cfg, train, test
