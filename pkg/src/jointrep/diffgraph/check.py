"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from ..errors import NumericError
from . import graph as G
from .graph import Node


def check_gradients(
    fn: Callable[[dict[str, Node]], Node],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    atol: float = 1e-5,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max componentwise relative error between backward and central differences.

    ``fn`` maps fresh leaves (one per entry of ``point``) to a scalar node and
    must be a deterministic function of those leaves.  The relative error of a
    component is ``|a - n| / max(|a|, |n|, atol)``; ``atol`` keeps structural
    zeros (exact 0 analytically, roundoff-sized numerically) from dominating.
    With ``max_components`` only a random subset of each array is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=G.DTYPE) for k, v in point.items()}

    def evaluate(values: Mapping[str, np.ndarray], requires_grad: bool):
        leaves = {k: G.leaf(v.copy(), requires_grad=requires_grad, name=k) for k, v in values.items()}
        out = fn(leaves)
        if out.value.size != 1:
            raise ValueError(f"check_gradients needs a scalar function, got shape {out.value.shape}")
        if not np.all(np.isfinite(out.value)):
            raise NumericError("function value is not finite at the probe point")
        return leaves, out

    leaves, out = evaluate(base, True)
    if out.requires_grad:
        G.backward(out)
    analytic = {k: (np.zeros_like(v) if leaves[k].grad is None else leaves[k].grad) for k, v in base.items()}
    for k, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"analytic gradient of {k!r} is not finite")

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, arr in base.items():
        flat_idx = np.arange(arr.size)
        if max_components is not None and arr.size > max_components:
            flat_idx = rng.choice(arr.size, size=max_components, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape) if arr.ndim else ()
            plus = dict(base)
            minus = dict(base)
            plus[k] = arr.copy()
            minus[k] = arr.copy()
            plus[k][idx] += eps
            minus[k][idx] -= eps
            fp = float(evaluate(plus, False)[1].value)
            fm = float(evaluate(minus, False)[1].value)
            numeric = (fp - fm) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NumericError(f"finite difference of {k!r}{idx} is not finite")
            a = float(analytic[k][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
    return worst


def check_param_gradients(
    loss_fn: Callable[[], Node],
    stores,
    eps: float = 1e-5,
    atol: float = 1e-5,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
    numeric_fn: Callable[[], float] | None = None,
) -> float:
    """Like :func:`check_gradients` but probes the parameters of ``stores``.

    ``loss_fn`` takes no arguments and rebuilds its graph from the current
    parameter values (it must be deterministic, e.g. with frozen noise).
    Losses with stop-gradients have a backward pass that is not the
    derivative of their value; pass ``numeric_fn`` to difference a surrogate
    whose derivative at the probe point is what backward should produce.
    """
    numeric_fn = numeric_fn or (lambda: float(loss_fn().value))
    rng = rng or np.random.default_rng(0)
    stores = list(stores)
    for s in stores:
        s.zero_grad()
    out = loss_fn()
    if not np.all(np.isfinite(out.value)):
        raise NumericError("loss is not finite at the probe point")
    G.backward(out)
    worst = 0.0
    for s in stores:
        for name, node in list(s.items()):
            analytic = np.zeros_like(node.value) if node.grad is None else np.array(node.grad)
            base = node.value
            flat_idx = np.arange(base.size)
            if max_components is not None and base.size > max_components:
                flat_idx = rng.choice(base.size, size=max_components, replace=False)
            for i in flat_idx:
                idx = np.unravel_index(i, base.shape) if base.ndim else ()
                vals = []
                for sign in (1.0, -1.0):
                    probe = base.copy()
                    probe[idx] += sign * eps
                    node.value = probe
                    vals.append(float(numeric_fn()))
                node.value = base
                numeric = (vals[0] - vals[1]) / (2.0 * eps)
                if not np.isfinite(numeric):
                    raise NumericError(f"finite difference of {name!r}{idx} is not finite")
                a = float(analytic[idx])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), atol))
        s.zero_grad()
    return worst
