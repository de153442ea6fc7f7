"""Closed-form capacity and generalization bounds, universal constants set to 1.

Every function takes already-measured ingredients (norm tables, Jacobian
maxima, sample size, margin) so the formulas stay auditable on their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, StructureError, ValidationError
from .linalg_core import DEFAULT_MAX_ITER, DEFAULT_TOL, frobenius_norm, numeric_rank, spectral_norm, two_one_norm
from .structured_operators import WidthOp, certified_norm

SUP_LOSS_FLOOR = 1e-6
LOG_FLOOR = 1.0
NORM_SLACK = 1e-8


@dataclass
class NormTable:
    """Per-layer norms of the weight matrices (width operators excluded)."""

    names: List[str]
    spectral: np.ndarray
    frobenius: np.ndarray
    two_one: np.ndarray
    rank: np.ndarray
    width: np.ndarray  # rows of W_d, i.e. p_d
    in_width: np.ndarray

    def __post_init__(self):
        for attr in ("spectral", "frobenius", "two_one", "rank", "width", "in_width"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=np.float64))
        if len(self.names) == 0:
            raise ValidationError("norm table needs at least one layer (D >= 1)")

    @property
    def depth(self) -> int:
        return len(self.names)

    @property
    def stable_ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.spectral > 0, self.frobenius / self.spectral, 0.0)

    @property
    def p_max(self) -> int:
        return int(max(self.width.max(), self.in_width.max()))

    @classmethod
    def from_values(cls, spectral, frobenius, two_one, rank=None, width=None, in_width=None):
        """Table built from bare norm values; used for hand evaluations."""
        spectral = np.atleast_1d(np.asarray(spectral, dtype=np.float64))
        D = spectral.size
        full = lambda v, default: np.broadcast_to(np.asarray(default if v is None else v, dtype=np.float64), (D,))
        width = full(width, 1.0)
        return cls(
            [f"layer{d + 1}" for d in range(D)],
            spectral,
            full(frobenius, 0.0).copy(),
            full(two_one, 0.0).copy(),
            full(rank, 1.0).copy(),
            width.copy(),
            full(in_width, width).copy(),
        )

    def rows_consistent(self) -> bool:
        s, f, t = self.spectral, self.frobenius, self.two_one
        return bool(np.all(s <= f + NORM_SLACK) and np.all(f <= t + NORM_SLACK))

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "name": n,
                    "spectral": float(self.spectral[i]),
                    "frobenius": float(self.frobenius[i]),
                    "two_one": float(self.two_one[i]),
                    "rank": int(self.rank[i]),
                    "width": int(self.width[i]),
                    "in_width": int(self.in_width[i]),
                    "stable_ratio": float(self.stable_ratio[i]),
                }
                for i, n in enumerate(self.names)
            ]
        }


@dataclass(frozen=True)
class JacSummary:
    """The two Jacobian maxima the bounds consume; ``JacobianStats`` also fits this shape."""

    agg_full: float
    agg_leave_one: float


def _weight_matrices(net) -> List[Tuple[str, np.ndarray]]:
    from .relu_network import ConvCirculant, Dense, ResNetBlock

    out = []
    for d, layer in enumerate(net.layers, start=1):
        if isinstance(layer, (Dense, ConvCirculant)):
            out.append((f"W{d}", layer.matrix()))
        elif isinstance(layer, ResNetBlock):
            out.append((f"U{d}", layer.U))
            out.append((f"V{d}", layer.V))
    return out


def layer_norm_report(net, tol: float = DEFAULT_TOL, seed: int = 0, rank_override: Optional[int] = None) -> NormTable:
    """Norms of every weight matrix of ``net``; ResNet blocks contribute a U and a V row."""
    mats = _weight_matrices(net)
    if not mats:
        raise ValidationError("network has no weight layers")
    spec = [spectral_norm(W, tol, 100 * DEFAULT_MAX_ITER, seed).value for _, W in mats]
    rank = [rank_override if rank_override is not None else numeric_rank(W) for _, W in mats]
    return NormTable(
        [n for n, _ in mats],
        spec,
        [frobenius_norm(W) for _, W in mats],
        [two_one_norm(W) for _, W in mats],
        rank,
        [W.shape[0] for _, W in mats],
        [W.shape[1] for _, W in mats],
    )


def width_ops_of(net) -> List[WidthOp]:
    from .relu_network import WidthChange

    return [layer.op for layer in net.layers if isinstance(layer, WidthChange)]


# ---------------------------------------------------------------------------
# shared pieces


def _check_common(m, gamma):
    if m < 1:
        raise ValidationError("m must be >= 1")
    if not gamma > 0:
        raise ValidationError("gamma must be positive")


def floored_log(c: float) -> float:
    """``max(log c, 1)``; ``c`` must be positive."""
    if not c > 0 or not math.isfinite(c):
        raise DegenerateInputError(f"C^Net must be positive and finite, got {c}")
    return max(math.log(c), LOG_FLOOR)


def sum_width_rank(norms: NormTable) -> float:
    """``sum_d p_d r_d``; equals ``D p r`` for homogeneous layers."""
    return float(np.sum(norms.width * norms.rank))


def c_net_thm1(norms: NormTable, jac, m: int, gamma: float, R: float, sup_loss: float) -> float:
    r_bar = float(np.mean(norms.rank))
    if r_bar <= 0 or jac.agg_leave_one <= 0 or norms.spectral.max() <= 0:
        raise DegenerateInputError("all-zero network: C^Net undefined")
    D = norms.depth
    num = jac.agg_leave_one * R * math.sqrt(D * m / r_bar) * float(norms.spectral.max())
    return num / (gamma * max(sup_loss, SUP_LOSS_FLOOR))


def _thm1_parts(norms, jac, m, gamma, R, sup_loss, log_c_net):
    _check_common(m, gamma)
    if sup_loss < 0:
        raise ValidationError("sup_loss must be nonnegative")
    if log_c_net is None:
        log_c_net = floored_log(c_net_thm1(norms, jac, m, gamma, R, sup_loss))
    return R * jac.agg_full / gamma, math.sqrt(sum_width_rank(norms) * log_c_net / m)


def bound_thm1(norms, jac, m, gamma, R, sup_loss, log_c_net: Optional[float] = None) -> float:
    """``R B_{1:D} sqrt(sum p_d r_d * log C^Net) / (gamma sqrt m)``.

    ``log_c_net`` freezes the logarithmic term when given.
    """
    lead, root = _thm1_parts(norms, jac, m, gamma, R, sup_loss, log_c_net)
    return lead * root


def bound_cor1(norms, jac, m, gamma, R, sup_loss, b: float, log_c_net: Optional[float] = None) -> float:
    """Bounded-loss variant: the leading factor is capped at ``b`` (``b = inf`` allowed)."""
    if not b > 0:
        raise ValidationError("b must be positive")
    lead, root = _thm1_parts(norms, jac, m, gamma, R, sup_loss, log_c_net)
    return min(lead, b) * root


# ---------------------------------------------------------------------------
# competitor bounds


def bound_neyshabur15(norms: NormTable, m: int, gamma: float) -> float:
    _check_common(m, gamma)
    return 2.0 ** norms.depth * float(np.prod(norms.frobenius)) / (gamma * math.sqrt(m))


def _ratio(num, den):
    if np.any(den <= 0):
        raise DegenerateInputError("a layer has zero spectral norm")
    return num / den


def bound_bartlett17(norms: NormTable, m: int, gamma: float, p_max: Optional[int] = None) -> float:
    _check_common(m, gamma)
    p = norms.p_max if p_max is None else p_max
    ratio = _ratio(norms.two_one, norms.spectral)
    inner = float(np.sum(ratio ** (2.0 / 3.0))) ** 1.5
    log_p = max(math.log(p), LOG_FLOOR)
    return float(np.prod(norms.spectral)) * log_p * inner / (gamma * math.sqrt(m))


def bound_neyshabur_pac(norms: NormTable, m: int, gamma: float, p_max: Optional[int] = None) -> float:
    _check_common(m, gamma)
    p = norms.p_max if p_max is None else p_max
    D = norms.depth
    ratio = _ratio(norms.frobenius, norms.spectral)
    root = math.sqrt(D * D * p * float(np.sum(ratio**2)))
    log_dp = max(math.log(D * p), LOG_FLOOR)
    return float(np.prod(norms.spectral)) * log_dp * root / (gamma * math.sqrt(m))


def golowich_branches(norms: NormTable, m: int) -> Tuple[float, float]:
    """The two terms inside the min, with ``Gamma = prod B_{d,2}``."""
    prod_fr = float(np.prod(norms.frobenius))
    gamma_cap = float(np.prod(norms.spectral))
    if prod_fr <= 0 or gamma_cap <= 0:
        raise DegenerateInputError("a layer has zero norm")
    log_term = max(math.log(prod_fr / gamma_cap), 0.0)
    return math.sqrt(log_term) / m**0.25, math.sqrt(norms.depth / m)


def bound_golowich(norms: NormTable, m: int, gamma: float) -> float:
    _check_common(m, gamma)
    left, right = golowich_branches(norms, m)
    return float(np.prod(norms.frobenius)) / gamma * min(left, right)


def capacity_terms_sec5(norms: NormTable, k: int, n_list: Sequence[int]) -> Dict[str, float]:
    """Capacity terms with the common ``R / (gamma sqrt m)`` factor dropped.

    ``Bound2`` uses ``p = max_d p_d``.
    """
    D = norms.depth
    prod2 = float(np.prod(norms.spectral))
    ratio_21 = _ratio(norms.two_one, norms.spectral)
    ratio_fr = _ratio(norms.frobenius, norms.spectral)
    p = norms.p_max
    return {
        "Ours": prod2 * math.sqrt(k * float(np.sum(n_list))),
        "Bound1": prod2 * float(np.sum(ratio_21 ** (2.0 / 3.0))) ** 1.5,
        "Bound2": prod2 * math.sqrt(D * D * p * float(np.sum(norms.width * ratio_fr**2))),
        "Bound3": float(np.prod(norms.frobenius)) * math.sqrt(D),
    }


# ---------------------------------------------------------------------------
# CNN, ResNet and width-change variants


def bound_cor2_cnn(
    k: int,
    s: int,
    n_list: Sequence[int],
    m: int,
    gamma: float,
    R: float,
    b: float = math.inf,
    sup_loss: float = 1.0,
    jac_leave_one: Optional[float] = None,
    log_c_net: Optional[float] = None,
    mixed: Optional[Tuple[int, int, int]] = None,
) -> float:
    """Orthonormal-filter CNN bound.

    ``D = len(n_list)`` convolutional layers.  ``jac_leave_one`` defaults to
    the exact product ``(k/s)^{(D-1)/2}``.  ``mixed = (D_F, p, r)`` appends
    ``D_F`` unit-spectral dense layers, replacing ``k sum n_d`` by
    ``D k^2 + D_F p r``.
    """
    _check_common(m, gamma)
    if s < 1 or k % s:
        raise StructureError(f"stride {s} must divide filter size {k}")
    D_C = len(n_list)
    if D_C < 1:
        raise ValidationError("need at least one conv layer")
    ratio = k / s
    if mixed is None:
        dof = k * float(np.sum(n_list))
        D = D_C
    else:
        D_F, p, r = mixed
        dof = D_C * k * k + D_F * p * r
        D = D_C + D_F
    if jac_leave_one is None:
        jac_leave_one = ratio ** ((D_C - 1) / 2.0)
    if log_c_net is None:
        c = jac_leave_one * R * math.sqrt(D * m / s) / (gamma * max(sup_loss, SUP_LOSS_FLOOR))
        log_c_net = floored_log(c)
    lead = min(R * ratio ** (D_C / 2.0) / gamma, b)
    return lead * math.sqrt(dof * log_c_net / m)


def table2_cnn_variants(k: int, s: int, p: int, D: int, m: int) -> Dict[str, float]:
    """Competitor rows for orthonormal-filter CNNs (``||W||_2 = sqrt(k/s)``, ``||W||_F = sqrt p``, ``||W||_{2,1} = p``)."""
    if s < 1 or k % s:
        raise StructureError(f"stride {s} must divide filter size {k}")
    rm = math.sqrt(m)
    ratio = k / s
    spectral_route = ratio ** ((D - 1) / 2.0) * math.sqrt(D**3 * p**2) / rm
    return {
        "neyshabur15": 2.0**D * p ** (D / 2.0) / rm,
        "bartlett17": spectral_route,
        "neyshabur_pac": spectral_route,
        "golowich": p ** (D / 2.0) * min(m**-0.25, math.sqrt(D / m)),
        "ours": ratio ** (D / 2.0) * math.sqrt(D * k * k) / rm,
    }


def bound_cor3_resnet(
    uv_spectral: Sequence[Tuple[float, float]],
    jac,
    m: int,
    gamma: float,
    R: float,
    p: int,
    q: int,
    b: float = math.inf,
    sup_loss: float = 1.0,
    log_c_net: Optional[float] = None,
) -> float:
    """ResNet bound; ``uv_spectral`` holds ``(||V_d||_2, ||U_d||_2)`` per block."""
    _check_common(m, gamma)
    D = len(uv_spectral)
    if D < 1:
        raise ValidationError("need at least one block")
    if log_c_net is None:
        scale = max(v + u for v, u in uv_spectral)
        c = jac.agg_leave_one * scale * R * math.sqrt(m / q) / (gamma * max(sup_loss, SUP_LOSS_FLOOR))
        log_c_net = floored_log(c)
    lead = min(R * jac.agg_full / gamma, b)
    return lead * math.sqrt(D * p * q * log_c_net / m)


def width_op_multiplier(ops: Sequence[WidthOp]) -> float:
    out = 1.0
    for op in ops:
        out *= certified_norm(op)
    return out


def dudley_erc_bound(alpha: float, L_w: float, K: float, h: float, m: int) -> float:
    """Entropy-integral ERC bound at the cut level ``alpha sqrt(h/m)``; log floored at 1."""
    for name, v in (("alpha", alpha), ("L_w", L_w), ("K", K), ("h", h), ("m", m)):
        if not v > 0:
            raise ValidationError(f"{name} must be positive")
    arg = K * L_w * math.sqrt(m) / (alpha * math.sqrt(h))
    return alpha * math.sqrt(h * max(math.log(arg), LOG_FLOOR)) / math.sqrt(m)


def gen_error_rhs(emp_risk: float, erc_value: float, m: int, delta: float) -> float:
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    if m < 1:
        raise ValidationError("m must be >= 1")
    return emp_risk + 2.0 * erc_value + 3.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * m))


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class BoundReport:
    m: int
    gamma: float
    R: float
    delta: float
    b: Optional[float]
    jac: object
    norms: NormTable
    c_net: Optional[float]
    log_c_net: Optional[float]
    values: Dict[str, float] = field(default_factory=dict)
    ingredients: Dict[str, object] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "gamma": self.gamma,
            "R": self.R,
            "delta": self.delta,
            "b": self.b,
            "constants": "all universal constants set to 1 (values hold up to universal constants)",
            "jacobian": self.jac.to_dict() if hasattr(self.jac, "to_dict") else vars(self.jac),
            "norms": self.norms.to_dict(),
            "c_net": self.c_net,
            "log_c_net": self.log_c_net,
            "values": dict(self.values),
            "ingredients": dict(self.ingredients),
            "warnings": list(self.warnings),
        }


def build_report(
    net,
    data,
    gamma: float,
    delta: float,
    b: Optional[float] = None,
    rank: Optional[int] = None,
    conv: Optional[Tuple[int, int, Sequence[int]]] = None,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> BoundReport:
    """Measure every ingredient on ``(net, data)`` and evaluate all applicable bounds.

    ``conv = (k, s, n_list)`` adds the CNN-specific terms.
    """
    from .margin_loss import empirical_ramp_risk, zero_one_error
    from .relu_network import ResNetBlock, jacobian_stats

    norms = layer_norm_report(net, tol, seed, rank)
    jac = jacobian_stats(net, data.inputs, tol, seed)
    emp, sup_loss = empirical_ramp_risk(net, data, gamma)
    m, R = data.m, data.R
    values: Dict[str, float] = {}
    ing: Dict[str, object] = {
        "empirical_ramp_risk": emp,
        "sup_loss": sup_loss,
        "sup_loss_floor": SUP_LOSS_FLOOR,
        "zero_one_error": zero_one_error(net, data),
        "sum_width_rank": sum_width_rank(norms),
        "p_max": norms.p_max,
        "B_jac_full": jac.agg_full,
        "B_jac_leave_one": jac.agg_leave_one,
        "prod_spectral": float(np.prod(norms.spectral)),
    }
    warnings: List[str] = []
    ops = width_ops_of(net)
    mult = width_op_multiplier(ops)
    ing["width_op_multiplier"] = mult
    is_resnet = all(isinstance(layer, ResNetBlock) for layer in net.layers)
    c_net = log_c = None
    if is_resnet:
        V = norms.spectral[1::2]
        U = norms.spectral[0::2]
        q = int(net.layers[0].U.shape[0])
        p = int(net.layers[0].U.shape[1])
        scale = float(np.max(V + U))
        c_net = jac.agg_leave_one * scale * R * math.sqrt(m / q) / (gamma * max(sup_loss, SUP_LOSS_FLOOR))
        log_c = floored_log(c_net)
        values["cor3_resnet"] = bound_cor3_resnet(
            list(zip(V, U)), jac, m, gamma, R, p, q, b if b is not None else math.inf, sup_loss
        )
        erc_proxy = values["cor3_resnet"]
    else:
        c_net = c_net_thm1(norms, jac, m, gamma, R, sup_loss)
        log_c = floored_log(c_net)
        values["thm1"] = bound_thm1(norms, jac, m, gamma, R, sup_loss)
        if b is not None:
            values["cor1"] = bound_cor1(norms, jac, m, gamma, R, sup_loss, b)
        if ops:
            values["thm1_width_ops"] = values["thm1"] * mult
        erc_proxy = values.get("cor1", values["thm1"])
    values["neyshabur15"] = bound_neyshabur15(norms, m, gamma)
    values["bartlett17"] = bound_bartlett17(norms, m, gamma)
    values["neyshabur_pac"] = bound_neyshabur_pac(norms, m, gamma)
    values["golowich"] = bound_golowich(norms, m, gamma)
    if golowich_branches(norms, m)[0] == 0.0:
        warnings.append("every layer has stable ratio 1; the Golowich log term vanishes")
    if conv is not None:
        k, s, n_list = conv
        for name, v in capacity_terms_sec5(norms, k, n_list).items():
            values[f"sec5_{name}"] = v
        values["cor2_cnn"] = bound_cor2_cnn(
            k, s, n_list, m, gamma, R, b if b is not None else math.inf, sup_loss, jac.agg_leave_one
        )
    values["gen_error_rhs"] = gen_error_rhs(emp, erc_proxy, m, delta)
    ing["gen_error_erc_source"] = "cor3_resnet" if is_resnet else ("cor1" if b is not None else "thm1")
    return BoundReport(m, gamma, R, delta, b, jac, norms, c_net, log_c, values, ing, warnings)
