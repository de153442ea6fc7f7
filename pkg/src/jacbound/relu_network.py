"""Bias-free ReLU networks: forward traces, local Jacobians and their norms.

Layers are numbered ``1..D`` in list order.  A ReLU at exactly zero is treated
as inactive (mask 0), which keeps ``f(x) = J_{1:D}^x x`` exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError, RejectedInputError, ValidationError
from .linalg_core import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    NormEstimate,
    as_matrix,
    balanced_factorize,
    power_iteration,
    spectral_norm,
    start_vector,
)
from .structured_operators import (
    FilterBank,
    WidthOp,
    certified_norm,
    conv_weight,
    max_pool_select,
    width_op_matrix,
)


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    W: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "W", as_matrix(self.W, "W"))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def matrix(self) -> np.ndarray:
        return self.W


@dataclass(frozen=True)
class ConvCirculant:
    bank: FilterBank
    p_prev: int
    W: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "W", conv_weight(self.bank, self.p_prev))

    @property
    def in_dim(self) -> int:
        return self.p_prev

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def matrix(self) -> np.ndarray:
        return self.W


@dataclass(frozen=True)
class WidthChange:
    """Linear width change applied without an activation.

    ``sigma(W_{d+1} T_d x)`` is expressed as a ``WidthChange`` followed by the
    next weight layer.
    """

    op: WidthOp
    T: Optional[np.ndarray] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        T = None if self.op.kind == "max_pool" else width_op_matrix(self.op)
        object.__setattr__(self, "T", T)

    @property
    def in_dim(self) -> int:
        return self.op.p

    @property
    def out_dim(self) -> int:
        return self.op.out_dim


@dataclass(frozen=True)
class ResNetBlock:
    """``x -> relu(V relu(U x) + x)`` with ``U: q x p`` and ``V: p x q``."""

    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = as_matrix(self.U, "U")
        V = as_matrix(self.V, "V")
        if V.shape[1] != U.shape[0] or V.shape[0] != U.shape[1]:
            raise DimensionMismatchError(
                f"ResNet block needs V (p x q) and U (q x p), got V {V.shape}, U {U.shape}"
            )
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)

    @property
    def in_dim(self) -> int:
        return self.U.shape[1]

    @property
    def out_dim(self) -> int:
        return self.V.shape[0]


Layer = Union[Dense, ConvCirculant, WidthChange, ResNetBlock]
WEIGHT_LAYERS = (Dense, ConvCirculant)


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("a network needs at least one layer")
        for d in range(1, len(layers)):
            if layers[d].in_dim != layers[d - 1].out_dim:
                raise DimensionMismatchError(
                    f"layer {d + 1} expects input dim {layers[d].in_dim}, "
                    f"layer {d} produces {layers[d - 1].out_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def dims(self) -> List[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]


def dense_net(weights: Sequence) -> NetworkSpec:
    return NetworkSpec(tuple(Dense(W) for W in weights))


# ---------------------------------------------------------------------------
# forward traces


@dataclass
class LayerTrace:
    """Activations of one layer for a batch (rows are samples).

    ``mask`` is the ReLU mask of the layer output; ResNet blocks also carry the
    inner pre-activation and mask.  Max-pool layers carry the selected indices.
    """

    inputs: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    mask: Optional[np.ndarray] = None
    inner_pre: Optional[np.ndarray] = None
    inner_mask: Optional[np.ndarray] = None
    select: Optional[np.ndarray] = None


@dataclass
class ActivationTrace:
    layers: List[LayerTrace]

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1].post

    def single(self, row: int = 0) -> "ActivationTrace":
        """Slice out one sample of a batched trace."""
        out = []
        for t in self.layers:
            out.append(
                LayerTrace(
                    **{
                        k: (None if v is None else v[row : row + 1])
                        for k, v in vars(t).items()
                    }
                )
            )
        return ActivationTrace(out)


def _relu_mask(pre):
    return (pre > 0.0).astype(np.float64)


def _forward_layer(layer: Layer, X: np.ndarray) -> LayerTrace:
    if isinstance(layer, WEIGHT_LAYERS):
        pre = X @ layer.matrix().T
        mask = _relu_mask(pre)
        return LayerTrace(X, pre, pre * mask, mask)
    if isinstance(layer, ResNetBlock):
        inner_pre = X @ layer.U.T
        inner_mask = _relu_mask(inner_pre)
        pre = (inner_pre * inner_mask) @ layer.V.T + X
        mask = _relu_mask(pre)
        return LayerTrace(X, pre, pre * mask, mask, inner_pre, inner_mask)
    if isinstance(layer, WidthChange):
        if layer.op.kind == "max_pool":
            sel = np.stack([max_pool_select(row, layer.op.s, layer.op.signed) for row in X])
            out = np.take_along_axis(X, sel, axis=1)
            return LayerTrace(X, out, out, select=sel)
        out = X @ layer.T.T
        return LayerTrace(X, out, out)
    raise ValidationError(f"unknown layer type {type(layer).__name__}")


def forward_batch(net: NetworkSpec, X) -> ActivationTrace:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise DimensionMismatchError(f"expected inputs of dim {net.input_dim}, got shape {X.shape}")
    traces = []
    for layer in net.layers:
        t = _forward_layer(layer, X)
        traces.append(t)
        X = t.post
    return ActivationTrace(traces)


def forward(net: NetworkSpec, x) -> ActivationTrace:
    """Trace of a single input; every array in the trace has a leading axis of 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("forward expects a single input vector")
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("input has non-finite entries")
    return forward_batch(net, x[None, :])


def predict(net: NetworkSpec, X) -> np.ndarray:
    return forward_batch(net, np.atleast_2d(X)).output


# ---------------------------------------------------------------------------
# local linear maps with frozen masks


def _apply_fwd(layer: Layer, t: LayerTrace, V: np.ndarray) -> np.ndarray:
    if isinstance(layer, WEIGHT_LAYERS):
        return t.mask * (V @ layer.matrix().T)
    if isinstance(layer, ResNetBlock):
        inner = t.inner_mask * (V @ layer.U.T)
        return t.mask * (inner @ layer.V.T + V)
    if t.select is not None:
        return np.take_along_axis(V, t.select, axis=1)
    return V @ layer.T.T


def _apply_rev(layer: Layer, t: LayerTrace, G: np.ndarray) -> np.ndarray:
    if isinstance(layer, WEIGHT_LAYERS):
        return (t.mask * G) @ layer.matrix()
    if isinstance(layer, ResNetBlock):
        g = t.mask * G
        return (t.inner_mask * (g @ layer.V)) @ layer.U + g
    if t.select is not None:
        out = np.zeros((G.shape[0], layer.in_dim))
        np.put_along_axis(out, t.select, G, axis=1)
        return out
    return G @ layer.T


def _local_matrix(layer: Layer, t: LayerTrace) -> np.ndarray:
    """Local Jacobian of one layer for a single-sample trace."""
    if isinstance(layer, WEIGHT_LAYERS):
        return t.mask[0][:, None] * layer.matrix()
    if isinstance(layer, ResNetBlock):
        inner = layer.V @ (t.inner_mask[0][:, None] * layer.U)
        return t.mask[0][:, None] * (inner + np.eye(layer.in_dim))
    if t.select is not None:
        T = np.zeros((layer.out_dim, layer.in_dim))
        T[np.arange(layer.out_dim), t.select[0]] = 1.0
        return T
    return layer.T


def _check_range(net: NetworkSpec, i: int, j: int) -> None:
    D = net.depth
    if not (1 <= i <= D + 1 and 0 <= j <= D):
        raise ValidationError(f"layer range {i}:{j} outside 1..{D}")


def jacobian_explicit(net: NetworkSpec, x, i: int, j: int, trace: Optional[ActivationTrace] = None):
    """Materialized ``J_{i:j}^x``; the identity on layer ``i``'s input when ``i > j``."""
    _check_range(net, i, j)
    dims = net.dims()
    if i > j:
        return np.eye(dims[i - 1])
    tr = trace if trace is not None else forward(net, x)
    J = np.eye(dims[i - 1])
    for d in range(i, j + 1):
        J = _local_matrix(net.layers[d - 1], tr.layers[d - 1]) @ J
    return J


def jacobian_op_norm(
    net: NetworkSpec,
    x,
    i: int,
    j: int,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    trace: Optional[ActivationTrace] = None,
) -> NormEstimate:
    """``||J_{i:j}^x||_2`` by power iteration on Jacobian-vector products; ``J`` is never formed."""
    _check_range(net, i, j)
    if i > j:
        return NormEstimate(1.0, 0, True, tol)
    tr = trace if trace is not None else forward(net, x)
    layers = net.layers[i - 1 : j]
    traces = tr.layers[i - 1 : j]

    def mv(v):
        v = v[None, :]
        for layer, t in zip(layers, traces):
            v = _apply_fwd(layer, t, v)
        return v[0]

    def rmv(u):
        u = u[None, :]
        for layer, t in zip(reversed(layers), reversed(traces)):
            u = _apply_rev(layer, t, u)
        return u[0]

    return power_iteration(mv, rmv, net.dims()[i - 1], tol, max_iter, seed)


def batched_jacobian_norms(
    net: NetworkSpec,
    trace: ActivationTrace,
    i: int,
    j: int,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """``||J_{i:j}^x||_2`` for every row of a batched trace, matrix-free.

    Runs one power iteration per sample in lockstep with the same stopping
    rule as :func:`jacbound.linalg_core.power_iteration`.  Returns
    ``(values, converged)`` arrays.
    """
    _check_range(net, i, j)
    b = trace.layers[0].inputs.shape[0]
    if i > j:
        return np.ones(b), np.ones(b, dtype=bool)
    layers = net.layers[i - 1 : j]
    traces = trace.layers[i - 1 : j]
    n = net.dims()[i - 1]
    V = np.tile(start_vector(n, seed), (b, 1))
    values = np.zeros(b)
    done = np.zeros(b, dtype=bool)
    lam_prev = np.full(b, np.nan)
    delta_prev = np.full(b, np.nan)
    active = np.arange(b)
    for it in range(1, max_iter + 1):
        sub = [_slice_trace(t, active) for t in traces]
        U = V[active]
        for layer, t in zip(layers, sub):
            U = _apply_fwd(layer, t, U)
        lam = np.einsum("ij,ij->i", U, U)
        G = U
        for layer, t in zip(reversed(layers), reversed(sub)):
            G = _apply_rev(layer, t, G)
        gn = np.linalg.norm(G, axis=1)
        values[active] = np.sqrt(lam)
        finish = (gn == 0.0) | (lam == 0.0)
        lp = lam_prev[active]
        dp = delta_prev[active]
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.abs(lam - lp) / lam
            rho = np.where(np.isnan(dp) | (dp == 0), 0.0, np.minimum(delta / dp, 0.999))
            tail = delta * rho / (1.0 - rho)
        has_prev = ~np.isnan(lp)
        finish |= has_prev & ((delta == 0.0) | ((delta < tol) & (tail < tol)))
        safe = np.where(gn > 0, gn, 1.0)
        V[active] = G / safe[:, None]
        lam_prev[active] = lam
        delta_prev[active] = np.where(has_prev, delta, np.nan)
        done[active[finish]] = True
        active = active[~finish]
        if active.size == 0:
            break
    return values, done


def _slice_trace(t: LayerTrace, rows: np.ndarray) -> LayerTrace:
    return LayerTrace(**{k: (None if v is None else v[rows]) for k, v in vars(t).items()})


# ---------------------------------------------------------------------------
# dataset-level statistics


def layer_lipschitz(layer: Layer, tol: float = DEFAULT_TOL, seed: int = 0) -> float:
    """Global Lipschitz bound of one layer: ``||W||_2``, ``||T||_2`` or ``1 + ||V|| ||U||``."""
    if isinstance(layer, WEIGHT_LAYERS):
        return spectral_norm(layer.matrix(), tol, 100 * DEFAULT_MAX_ITER, seed).value
    if isinstance(layer, WidthChange):
        return certified_norm(layer.op)
    v = spectral_norm(layer.V, tol, 100 * DEFAULT_MAX_ITER, seed).value
    u = spectral_norm(layer.U, tol, 100 * DEFAULT_MAX_ITER, seed).value
    return 1.0 + v * u


@dataclass
class JacobianStats:
    """Per-input Jacobian norms and their dataset maxima.

    ``prefix[x, d-1]`` is ``B^{Jac,x}_{1:(d-1)}`` and ``suffix[x, d-1]`` is
    ``B^{Jac,x}_{(d+1):D}``; ``leave_one`` is their product.
    """

    full: np.ndarray
    prefix: np.ndarray
    suffix: np.ndarray
    agg_full: float
    argmax_full: int
    agg_leave_one: float
    argmax_leave_one: Tuple[int, int]
    prod_spectral: float
    layer_norms: List[float]
    converged: bool
    ranges: dict = field(default_factory=dict)

    @property
    def leave_one(self) -> np.ndarray:
        return self.prefix * self.suffix

    def to_dict(self) -> dict:
        return {
            "per_input": {
                "full": self.full.tolist(),
                "prefix": self.prefix.tolist(),
                "suffix": self.suffix.tolist(),
                "leave_one": self.leave_one.tolist(),
            },
            "agg_full": self.agg_full,
            "argmax_full": self.argmax_full,
            "agg_leave_one": self.agg_leave_one,
            "argmax_leave_one": {"input": self.argmax_leave_one[0], "layer": self.argmax_leave_one[1]},
            "prod_spectral": self.prod_spectral,
            "layer_norms": list(self.layer_norms),
            "converged": self.converged,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }


def jacobian_stats(
    net: NetworkSpec,
    X,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
    max_iter: int = 10 * DEFAULT_MAX_ITER,
    ranges: Sequence[Tuple[int, int]] = (),
    leave_one: bool = True,
) -> JacobianStats:
    """Jacobian norms over a dataset ``X`` (rows are inputs).

    Maxima are reduced in dataset order; ties keep the lowest index.
    """
    X = np.asarray(getattr(X, "inputs", X), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("jacobian_stats needs a nonempty dataset")
    D = net.depth
    tr = forward_batch(net, X)
    conv_all = True
    full, ok = batched_jacobian_norms(net, tr, 1, D, tol, seed, max_iter)
    conv_all &= bool(ok.all())
    m = X.shape[0]
    prefix = np.ones((m, D))
    suffix = np.ones((m, D))
    if leave_one:
        for d in range(1, D + 1):
            if d > 1:
                prefix[:, d - 1], ok = batched_jacobian_norms(net, tr, 1, d - 1, tol, seed, max_iter)
                conv_all &= bool(ok.all())
            if d < D:
                suffix[:, d - 1], ok = batched_jacobian_norms(net, tr, d + 1, D, tol, seed, max_iter)
                conv_all &= bool(ok.all())
    lo = prefix * suffix
    flat = int(np.argmax(lo))  # row-major: dataset index first, then layer
    norms = [layer_lipschitz(layer, tol, seed) for layer in net.layers]
    extra = {}
    for (i, j) in ranges:
        vals, ok = batched_jacobian_norms(net, tr, i, j, tol, seed, max_iter)
        conv_all &= bool(ok.all())
        extra[f"{i}:{j}"] = vals
    return JacobianStats(
        full=full,
        prefix=prefix,
        suffix=suffix,
        agg_full=float(full[int(np.argmax(full))]),
        argmax_full=int(np.argmax(full)),
        agg_leave_one=float(lo.ravel()[flat]),
        argmax_leave_one=(flat // D, flat % D + 1),
        prod_spectral=float(np.prod(norms)),
        layer_norms=norms,
        converged=conv_all,
        ranges=extra,
    )


# ---------------------------------------------------------------------------
# parameter-Lipschitz certificates


class LipschitzCertificate(NamedTuple):
    bound: float
    actual: float
    jac_estimate: float
    jac_endpoints: float
    terms: List[dict]


def _split_points(a, c, t0, t1):
    """Parameters in ``(t0, t1)`` where some coordinate of ``a + t c`` crosses zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        roots = -a / c
    roots = roots[np.isfinite(roots) & (roots > t0) & (roots < t1)]
    return np.unique(roots)


def _split(pieces, pre_fn):
    """Refine affine pieces so the sign pattern of ``pre_fn`` is constant on each."""
    out = []
    for (t0, t1, A, B, M) in pieces:
        pa, pc = pre_fn(A, B)
        cuts = np.concatenate([[t0], _split_points(pa, pc, t0, t1), [t1]])
        for s0, s1 in zip(cuts[:-1], cuts[1:]):
            if s1 > s0:
                out.append((s0, s1, A, B, M))
    return out


def segment_lipschitz(layers: Sequence[Layer], z0, z1) -> float:
    """Largest local Jacobian norm of ``layers`` along the segment ``[z0, z1]``.

    The segment is cut at every ReLU switching point, so the result is the
    exact Lipschitz constant of the (piecewise-linear) map restricted to the
    segment.  Supports Dense and ResNet layers.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if not layers:
        return 1.0
    pieces = [(0.0, 1.0, z0, z1 - z0, np.eye(z0.size))]
    for layer in layers:
        if isinstance(layer, WEIGHT_LAYERS):
            W = layer.matrix()
            pieces = _split(pieces, lambda A, B: (W @ A, W @ B))
            new = []
            for (t0, t1, A, B, M) in pieces:
                tm = 0.5 * (t0 + t1)
                mask = _relu_mask(W @ (A + tm * B))
                new.append((t0, t1, mask * (W @ A), mask * (W @ B), (mask[:, None] * W) @ M))
            pieces = new
        elif isinstance(layer, ResNetBlock):
            U, V = layer.U, layer.V
            pieces = _split(pieces, lambda A, B: (U @ A, U @ B))
            stage = []
            for (t0, t1, A, B, M) in pieces:
                tm = 0.5 * (t0 + t1)
                mi = _relu_mask(U @ (A + tm * B))
                L = V @ (mi[:, None] * U) + np.eye(U.shape[1])
                stage.append((t0, t1, A, B, M, L))
            new = []
            for (t0, t1, A, B, M, L) in stage:
                for (s0, s1, _, _, _) in _split([(t0, t1, A, B, M)], lambda A_, B_: (L @ A_, L @ B_)):
                    tm = 0.5 * (s0 + s1)
                    mo = _relu_mask(L @ (A + tm * B))
                    new.append((s0, s1, mo * (L @ A), mo * (L @ B), (mo[:, None] * L) @ M))
            pieces = new
        else:
            raise ValidationError("segment_lipschitz supports Dense and ResNet layers only")
    return max(float(np.linalg.norm(M, 2)) for (_, _, _, _, M) in pieces)


def _check_same_arch(netA: NetworkSpec, netB: NetworkSpec, kinds) -> None:
    if netA.depth != netB.depth:
        raise ValidationError("networks differ in depth")
    for a, b in zip(netA.layers, netB.layers):
        if not isinstance(a, kinds) or type(a) is not type(b):
            raise ValidationError("architecture mismatch")
        if (a.in_dim, a.out_dim) != (b.in_dim, b.out_dim):
            raise ValidationError("architecture mismatch in layer dimensions")
        if isinstance(a, ResNetBlock) and a.U.shape != b.U.shape:
            raise ValidationError("architecture mismatch in ResNet inner width")


def _padded_factors(W: np.ndarray, r: int):
    if not np.any(W):
        return np.zeros((W.shape[0], r)), np.zeros((W.shape[1], r))
    U, V = balanced_factorize(W)
    pad = r - U.shape[1]
    return np.pad(U, ((0, 0), (0, pad))), np.pad(V, ((0, 0), (0, pad)))


def _rank_or_zero(W):
    from .linalg_core import numeric_rank

    return numeric_rank(W) if np.any(W) else 0


def param_lipschitz_bound(
    netA: NetworkSpec, netB: NetworkSpec, x, tol: float = DEFAULT_TOL, seed: int = 0
) -> LipschitzCertificate:
    """Bound ``||f(A, x) - f(B, x)||_2`` through balanced factors of each weight.

    ``bound = B * ||x|| * sqrt(2D) * max_d ||W_d||^{1/2} * sqrt(sum ||dU||_F^2 + ||dV||_F^2)``
    where ``B`` is the largest product of the prefix Jacobian norm of ``B`` and
    the Lipschitz constant of the suffix of ``A`` along each telescoping
    segment, and the max over ``||W_d||`` ranges over both networks.
    """
    _check_same_arch(netA, netB, (Dense,))
    x = np.asarray(x, dtype=np.float64)
    D = netA.depth
    diff_sq = 0.0
    root = 0.0
    for la, lb in zip(netA.layers, netB.layers):
        Wa, Wb = la.W, lb.W
        r = max(_rank_or_zero(Wa), _rank_or_zero(Wb))
        if r:
            Ua, Va = _padded_factors(Wa, r)
            Ub, Vb = _padded_factors(Wb, r)
            diff_sq += float(np.sum((Ua - Ub) ** 2) + np.sum((Va - Vb) ** 2))
        root = max(root, float(np.linalg.norm(Wa, 2)) ** 0.5, float(np.linalg.norm(Wb, 2)) ** 0.5)
    trB = forward(netB, x)
    yA = forward(netA, x).output[0]
    actual = float(np.linalg.norm(yA - trB.output[0]))
    terms = []
    h = x
    for d in range(1, D + 1):
        P = float(np.linalg.norm(jacobian_explicit(netB, x, 1, d - 1, trB), 2))
        z_tilde = np.maximum(netB.layers[d - 1].W @ h, 0.0)
        z = np.maximum(netA.layers[d - 1].W @ h, 0.0)
        suffix = netA.layers[d:]
        L = segment_lipschitz(suffix, z, z_tilde)
        L_end = _endpoint_norm(suffix, z)
        terms.append({"layer": d, "prefix": P, "suffix": L, "suffix_endpoint": L_end})
        h = trB.layers[d - 1].post[0]
    jac = max(t["prefix"] * t["suffix"] for t in terms)
    jac_end = max(t["prefix"] * t["suffix_endpoint"] for t in terms)
    bound = jac * float(np.linalg.norm(x)) * np.sqrt(2 * D) * root * np.sqrt(diff_sq)
    return LipschitzCertificate(float(bound), actual, float(jac), float(jac_end), terms)


def _endpoint_norm(layers, z) -> float:
    if not layers:
        return 1.0
    sub = NetworkSpec(tuple(layers))
    return float(np.linalg.norm(jacobian_explicit(sub, z, 1, sub.depth), 2))


def _resnet_block(U, V, h):
    return np.maximum(V @ np.maximum(U @ h, 0.0) + h, 0.0)


def resnet_param_lipschitz_bound(
    netA: NetworkSpec, netB: NetworkSpec, x, tol: float = DEFAULT_TOL, seed: int = 0
) -> LipschitzCertificate:
    """ResNet analogue of :func:`param_lipschitz_bound` in terms of ``U`` and ``V`` directly.

    ``bound = B * max_d(||V_d|| + ||U_d||) * ||x|| * sqrt(2D) * sqrt(sum ||dV||_F^2 + ||dU||_F^2)``
    with the max taken over both networks.
    """
    _check_same_arch(netA, netB, (ResNetBlock,))
    x = np.asarray(x, dtype=np.float64)
    D = netA.depth
    diff_sq = 0.0
    scale = 0.0
    for la, lb in zip(netA.layers, netB.layers):
        diff_sq += float(np.sum((la.U - lb.U) ** 2) + np.sum((la.V - lb.V) ** 2))
        for blk in (la, lb):
            scale = max(scale, float(np.linalg.norm(blk.V, 2) + np.linalg.norm(blk.U, 2)))
    trB = forward(netB, x)
    actual = float(np.linalg.norm(forward(netA, x).output[0] - trB.output[0]))
    terms = []
    h = x
    for d in range(1, D + 1):
        a, b = netA.layers[d - 1], netB.layers[d - 1]
        P = float(np.linalg.norm(jacobian_explicit(netB, x, 1, d - 1, trB), 2))
        z_a = _resnet_block(b.U, b.V, h)
        z_b = _resnet_block(a.U, b.V, h)
        z_c = _resnet_block(a.U, a.V, h)
        suffix = netA.layers[d:]
        L = max(segment_lipschitz(suffix, z_a, z_b), segment_lipschitz(suffix, z_b, z_c))
        terms.append({"layer": d, "prefix": P, "suffix": L, "suffix_endpoint": _endpoint_norm(suffix, z_c)})
        h = trB.layers[d - 1].post[0]
    jac = max(t["prefix"] * t["suffix"] for t in terms)
    jac_end = max(t["prefix"] * t["suffix_endpoint"] for t in terms)
    bound = jac * scale * float(np.linalg.norm(x)) * np.sqrt(2 * D) * np.sqrt(diff_sq)
    return LipschitzCertificate(float(bound), actual, float(jac), float(jac_end), terms)


# ---------------------------------------------------------------------------
# parameter gradients


def backprop(net: NetworkSpec, trace: ActivationTrace, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * f(X))`` with respect to every layer's parameters.

    Returns one entry per layer: ``dW`` for Dense, ``d filters (n x k)`` for
    ConvCirculant, ``(dU, dV)`` for ResNet blocks and ``None`` for width ops.
    Masks follow the forward rule (zero pre-activation is inactive).
    """
    from .structured_operators import conv_scatter_index

    grads: List = [None] * net.depth
    G = np.asarray(grad_out, dtype=np.float64)
    for d in range(net.depth - 1, -1, -1):
        layer, t = net.layers[d], trace.layers[d]
        if isinstance(layer, WEIGHT_LAYERS):
            Gp = G * t.mask
            dW = Gp.T @ t.inputs
            if isinstance(layer, ConvCirculant):
                b = layer.bank
                rows, cols = conv_scatter_index(b.n, b.k, b.s, layer.p_prev)
                grads[d] = dW[rows, cols].sum(axis=1)
            else:
                grads[d] = dW
            G = Gp @ layer.matrix()
        elif isinstance(layer, ResNetBlock):
            Gp = G * t.mask
            h = t.inner_pre * t.inner_mask
            dV = Gp.T @ h
            Gi = (Gp @ layer.V) * t.inner_mask
            dU = Gi.T @ t.inputs
            grads[d] = (dU, dV)
            G = Gi @ layer.U + Gp
        else:
            G = _apply_rev(layer, t, G)
    return grads


def params_of(net: NetworkSpec) -> List:
    """Trainable arrays per layer, mirroring :func:`backprop`'s layout."""
    out: List = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            out.append(layer.W)
        elif isinstance(layer, ConvCirculant):
            out.append(layer.bank.filters)
        elif isinstance(layer, ResNetBlock):
            out.append((layer.U, layer.V))
        else:
            out.append(None)
    return out


def with_params(net: NetworkSpec, params: Sequence) -> NetworkSpec:
    """Copy of ``net`` with new parameter arrays in the :func:`params_of` layout."""
    layers = []
    for layer, p in zip(net.layers, params):
        if isinstance(layer, Dense):
            layers.append(Dense(p))
        elif isinstance(layer, ConvCirculant):
            layers.append(ConvCirculant(FilterBank(np.asarray(p), layer.bank.s), layer.p_prev))
        elif isinstance(layer, ResNetBlock):
            layers.append(ResNetBlock(p[0], p[1]))
        else:
            layers.append(layer)
    return NetworkSpec(tuple(layers))
