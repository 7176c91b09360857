"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .ops import record_branches
from .tensor import Tensor, no_grad

Params = Union[Sequence[Tensor], Mapping[str, Tensor]]


def relative_error(analytic, numeric) -> np.ndarray:
    a, g = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), 1e-8)


def grad_check(
    f: Callable[[], Tensor],
    params: Params,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    details: bool = False,
    min_eps: float = 1e-9,
):
    """Max relative error between backprop and central differences.

    ``f`` re-evaluates the scalar loss from the current values of ``params``.
    Parameter data is promoted to float64 in place first; anything else ``f``
    closes over should already be float64.  With ``max_coords`` only that many
    randomly chosen coordinates per parameter are perturbed.

    A central difference only estimates the derivative when both probes stay on
    the same smooth piece.  If either probe flips a relu, a max selection or a
    clamp relative to the unperturbed point, the step is divided by ten and the
    coordinate re-probed, down to ``min_eps``.  ``details`` adds a per-parameter
    report and the number of coordinates that needed a smaller step.
    """
    items = list(params.items()) if isinstance(params, Mapping) else [(str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        if p.data.dtype != np.float64:
            p.data = p.data.astype(np.float64)
        p.grad = None

    with record_branches() as base:
        loss = f()
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in items}

    rng = rng or np.random.default_rng(0)

    def probe(flat, i, orig, h):
        flat[i] = orig + h
        with record_branches() as up:
            fp = f().item()
        flat[i] = orig - h
        with record_branches() as down:
            fm = f().item()
        flat[i] = orig
        return (fp - fm) / (2 * h), up == base and down == base

    worst, report, shrunk = 0.0, {}, 0
    with no_grad():
        for name, p in items:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            errs = []
            for i in coords:
                orig = flat[i]
                h = eps
                numeric, smooth = probe(flat, i, orig, h)
                while not smooth and h / 10 >= min_eps:
                    h /= 10
                    numeric, smooth = probe(flat, i, orig, h)
                shrunk += h != eps
                errs.append(float(relative_error(analytic[name].reshape(-1)[i], numeric)))
            report[name] = max(errs) if errs else 0.0
            worst = max(worst, report[name])
    for _, p in items:
        p.grad = None
    if details:
        report["_coords_with_smaller_step"] = shrunk
        return worst, report
    return worst
