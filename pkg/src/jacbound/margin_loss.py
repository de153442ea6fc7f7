"""Classification margins, the ramp loss and empirical risks.

Labels are 0-indexed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionMismatchError, RejectedInputError, ValidationError

R_SLACK = 1e-12


@dataclass(frozen=True)
class LabeledDataset:
    """Inputs (rows), integer labels and a certified input-norm radius ``R``.

    When ``R`` is omitted it is set to the largest observed input norm.
    """

    inputs: np.ndarray
    labels: np.ndarray
    n_class: int
    R: Optional[float] = None

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValidationError("dataset needs at least one input row")
        if not np.all(np.isfinite(X)):
            raise RejectedInputError("dataset inputs have non-finite entries")
        if y.shape != (X.shape[0],):
            raise DimensionMismatchError(f"{X.shape[0]} inputs but labels of shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValidationError("labels must be integers")
            y = y.astype(np.int64)
        if self.n_class < 2:
            raise ValidationError("need at least two classes")
        if y.min() < 0 or y.max() >= self.n_class:
            raise ValidationError(f"labels must lie in [0, {self.n_class})")
        observed = float(np.max(np.linalg.norm(X, axis=1)))
        R = observed if self.R is None else float(self.R)
        if observed > R + R_SLACK:
            raise ValidationError(f"input norm {observed} exceeds declared R={R}")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y.astype(np.int64))
        object.__setattr__(self, "R", R)

    @property
    def m(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_class, self.R)


def margin(f_out, y: int) -> float:
    f = np.asarray(f_out, dtype=np.float64)
    if f.ndim != 1 or f.size < 2:
        raise ValidationError("margin needs at least two classes")
    others = np.delete(f, y)
    return float(f[y] - others.max())


def margins(outputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise margins of a batch of network outputs."""
    F = np.asarray(outputs, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] < 2:
        raise ValidationError("margins need outputs with at least two classes")
    rows = np.arange(F.shape[0])
    true = F[rows, labels]
    masked = F.copy()
    masked[rows, labels] = -np.inf
    return true - masked.max(axis=1)


def _ramp(nu, gamma: float):
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    return np.clip(1.0 - np.asarray(nu, dtype=np.float64) / gamma, 0.0, 1.0)


def ramp_loss(f_out, y: int, gamma: float) -> float:
    return float(_ramp(margin(f_out, y), gamma))


def ramp_of_margin(nu, gamma: float):
    """Ramp loss as a function of the margin; vectorized."""
    return _ramp(nu, gamma)


def _outputs(net, data: LabeledDataset) -> np.ndarray:
    from .relu_network import forward_batch

    if net.output_dim != data.n_class:
        raise DimensionMismatchError(
            f"network has {net.output_dim} outputs, dataset has {data.n_class} classes"
        )
    return forward_batch(net, data.inputs).output


def empirical_ramp_risk(net, data: LabeledDataset, gamma: float) -> Tuple[float, float]:
    """Mean and maximum ramp loss over the dataset."""
    losses = _ramp(margins(_outputs(net, data), data.labels), gamma)
    return float(np.sum(losses) / data.m), float(losses.max())


def zero_one_error(net, data: LabeledDataset) -> float:
    pred = np.argmax(_outputs(net, data), axis=1)  # argmax keeps the lowest index on ties
    return float(np.mean(pred != data.labels))
