"""Empirical Rademacher complexity of ramp-loss classes.

Exact enumeration for small finite classes, and a projected-ascent lower
estimate for spectrally constrained parametric classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from .errors import SizeError, ValidationError
from .structured_operators import FilterBank, conv_weight
from .margin_loss import LabeledDataset, margins, ramp_of_margin
from .relu_network import ConvCirculant, NetworkSpec, backprop, forward_batch, params_of, with_params

MAX_EXACT_M = 20
_CHUNK = 1 << 14


@dataclass(frozen=True)
class FiniteClass:
    members: Sequence[NetworkSpec]
    gamma: float

    def __post_init__(self):
        if len(self.members) == 0:
            raise ValidationError("a finite class needs at least one member")
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")


def loss_matrix(cls: FiniteClass, data: LabeledDataset) -> np.ndarray:
    """``G[f, i]`` = ramp loss of member ``f`` on sample ``i``."""
    rows = []
    for net in cls.members:
        out = forward_batch(net, data.inputs).output
        rows.append(ramp_of_margin(margins(out, data.labels), cls.gamma))
    return np.vstack(rows)


def erc_from_losses(G) -> float:
    """Exact ``E_eps sup_f |(1/m) sum_i eps_i G[f, i]|`` by enumerating all sign vectors."""
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    m = G.shape[1]
    if m > MAX_EXACT_M:
        raise SizeError(f"exact enumeration needs m <= {MAX_EXACT_M}, got {m}; use erc_ascent")
    total = 2**m
    bits = np.arange(m)
    acc = 0.0
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total))
        eps = 1.0 - 2.0 * ((idx[:, None] >> bits) & 1)
        acc += float(np.sum(np.max(np.abs(eps @ G.T), axis=1)))
    return acc / (m * total)


def erc_exact_finite(cls: FiniteClass, data: LabeledDataset) -> float:
    if data.m > MAX_EXACT_M:
        raise SizeError(f"exact enumeration needs m <= {MAX_EXACT_M}, got {data.m}; use erc_ascent")
    return erc_from_losses(loss_matrix(cls, data))


class AscentResult(NamedTuple):
    mean: float
    std: float
    per_draw: List[float]


def rademacher(seed: int, draw: int, m: int) -> np.ndarray:
    """Sign vector for one draw; depends only on ``(seed, draw)``."""
    rng = np.random.default_rng([seed, draw])
    return 1.0 - 2.0 * rng.integers(0, 2, size=m)


def _spectral(M: np.ndarray) -> float:
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def _norm_fns(template: NetworkSpec):
    """Per-layer map from a parameter array to the operator norm it induces."""
    fns = []
    for layer in template.layers:
        if isinstance(layer, ConvCirculant):
            s, p_prev = layer.bank.s, layer.p_prev
            fns.append(lambda f, s=s, p_prev=p_prev: _spectral(conv_weight(FilterBank(f, s), p_prev)))
        else:
            fns.append(_spectral)
    return fns


def _cap(M: np.ndarray, cap: float, norm) -> np.ndarray:
    nrm = norm(M)
    return M * (cap / nrm) if nrm > cap else M


def _project(params, base, caps, around_template: bool, norms):
    out = []
    for p, b, c, fn in zip(params, base, caps, norms):
        if p is None:
            out.append(None)
        elif isinstance(p, tuple):
            out.append(tuple(_project_one(x, y, c, around_template, _spectral) for x, y in zip(p, b)))
        else:
            out.append(_project_one(p, b, c, around_template, fn))
    return out


def _project_one(p, b, cap, around_template, norm):
    if around_template:
        return b + _cap(p - b, cap, norm)
    return _cap(p, cap, norm)


def _correlation(net, data, gamma, eps):
    tr = forward_batch(net, data.inputs)
    nu = margins(tr.output, data.labels)
    return tr, nu, float(np.dot(eps, ramp_of_margin(nu, gamma)) / data.m)


def _margin_grad(out, labels, nu, gamma, eps, m):
    """d/d(out) of ``(1/m) sum eps_i g(nu_i)`` using the closed middle-branch subgradient."""
    slope = np.where((nu >= 0) & (nu <= gamma), -1.0 / gamma, 0.0) * eps / m
    rows = np.arange(out.shape[0])
    masked = out.copy()
    masked[rows, labels] = -np.inf
    rival = np.argmax(masked, axis=1)
    G = np.zeros_like(out)
    G[rows, labels] += slope
    G[rows, rival] -= slope
    return G


def erc_ascent(
    template: NetworkSpec,
    spectral_caps: Sequence[float],
    data: LabeledDataset,
    gamma: float,
    draws: int,
    steps: int,
    step_size: float,
    seed: int,
    around_template: bool = False,
) -> AscentResult:
    """Lower estimate of the ERC of a spectral-ball class by projected subgradient ascent.

    ``spectral_caps`` gives one cap per layer (ignored for width ops).  With
    ``around_template`` the caps bound ``||W - W_template||_2`` instead of
    ``||W||_2``, so zero caps collapse the class to the template.
    Each draw keeps its best ``|correlation|`` seen, so the estimate never
    decreases with more steps.
    """
    if draws < 1:
        raise ValidationError("draws must be >= 1")
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    caps = list(spectral_caps)
    if len(caps) != template.depth:
        raise ValidationError(f"need {template.depth} caps, got {len(caps)}")
    if any(not (c > 0 or (around_template and c == 0)) for c in caps):
        raise ValidationError("spectral caps must be positive")
    base = params_of(template)
    fns = _norm_fns(template)
    start = _project(base, base, caps, around_template, fns)
    values = []
    for draw in range(draws):
        eps = rademacher(seed, draw, data.m)
        params = [None if p is None else (tuple(x.copy() for x in p) if isinstance(p, tuple) else p.copy()) for p in start]
        net = with_params(template, params)
        tr, nu, corr = _correlation(net, data, gamma, eps)
        best = abs(corr)
        for _ in range(steps):
            direction = 1.0 if corr >= 0 else -1.0
            G = direction * _margin_grad(tr.output, data.labels, nu, gamma, eps, data.m)
            grads = backprop(net, tr, G)
            for i, (p, g) in enumerate(zip(params, grads)):
                if p is None:
                    continue
                if isinstance(p, tuple):
                    params[i] = tuple(x + step_size * gx for x, gx in zip(p, g))
                else:
                    params[i] = p + step_size * g
            params = _project(params, base, caps, around_template, fns)
            net = with_params(template, params)
            tr, nu, corr = _correlation(net, data, gamma, eps)
            best = max(best, abs(corr))
        values.append(best)
    arr = np.asarray(values)
    std = float(arr.std(ddof=1)) if draws > 1 else 0.0
    return AscentResult(float(arr.mean()), std, values)
