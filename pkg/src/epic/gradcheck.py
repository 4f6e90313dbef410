"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

ABS_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple[str, int] | None = None
    per_leaf: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    # dict-style access keeps the report usable as {max_rel_error, pass}
    def __getitem__(self, key):
        if key == "pass":
            return self.passed
        return getattr(self, key)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], leaf: Tensor, h: float) -> np.ndarray:
    flat = leaf.data.reshape(-1)
    out = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(leaf.shape)


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences for every coordinate.

    ``f`` is re-evaluated with the leaves' buffers perturbed in place, so it
    must read them at call time.
    """
    if not 0.0 < h <= 1e-3:
        raise ValueError(f"step h must lie in (0, 1e-3], got {h}")
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy()
                for leaf in leaves]

    report = GradCheckReport(max_rel_error=0.0, tol=tol, n_checked=0)
    for k, (leaf, ga) in enumerate(zip(leaves, analytic)):
        gn = numeric_grad(f, leaf, h)
        err = relative_error(ga, gn)
        name = leaf.name or f"leaf{k}"
        leaf_max = float(err.max()) if err.size else 0.0
        report.per_leaf[name] = leaf_max
        report.n_checked += err.size
        if leaf_max > report.max_rel_error:
            report.max_rel_error = leaf_max
            report.worst = (name, int(err.argmax()))
    return report
