"""Central-difference gradient oracle for graph-built scalar functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EvaluationError
from .tensor import Graph, Node, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst_param: int
    worst_index: tuple[int, ...]
    analytic: list[Tensor]
    numeric: list[Tensor]


def _evaluate(builder, values: Sequence[Tensor]) -> float:
    g = Graph()
    nodes = [g.param(v) for v in values]
    out = builder(g, nodes)
    val = float(np.asarray(out.value).reshape(()))
    if not np.isfinite(val):
        raise EvaluationError("loss is not finite")
    return val


def finite_diff_check(
    builder: Callable[[Graph, list[Node]], Node],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``builder`` against central differences.

    ``builder(graph, nodes)`` must return a scalar node; it is called once for the
    analytic pass and twice per parameter entry.  Relative error per entry is
    ``|ana - num| / max(|ana|, |num|, 1e-8)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-7, 1e-3]")
    values = [np.array(p, dtype=np.float64, copy=True) for p in params]
    for p in params:
        if np.asarray(p).dtype != np.float64:
            raise TypeError("finite_diff_check requires double-precision parameters")

    g = Graph()
    nodes = [g.param(v) for v in values]
    loss = builder(g, nodes)
    if not np.all(np.isfinite(loss.value)):
        raise EvaluationError("loss is not finite")
    grads = g.backward(loss)
    analytic = [grads[n.id] for n in nodes]

    numeric = []
    worst = (0.0, 0, ())
    for pi, v in enumerate(values):
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + step
            fp = _evaluate(builder, values)
            v[idx] = orig - step
            fm = _evaluate(builder, values)
            v[idx] = orig
            num[idx] = (fp - fm) / (2.0 * step)
            ana = analytic[pi][idx]
            rel = abs(ana - num[idx]) / max(abs(ana), abs(num[idx]), 1e-8)
            if rel > worst[0]:
                worst = (rel, pi, idx)
        numeric.append(num)
    return GradCheckReport(
        max_rel_error=worst[0],
        passed=worst[0] < tol,
        worst_param=worst[1],
        worst_index=worst[2],
        analytic=analytic,
        numeric=numeric,
    )
