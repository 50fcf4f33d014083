"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-7


@dataclass
class GradCheckResult:
    ok: bool
    max_abs_err: float
    max_rel_err: float
    worst: tuple  # (input index, flat element index)


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int,
                 eps: float = STEP, elements=None) -> np.ndarray:
    """d fn / d arrays[which] by central differences, at the given flat elements."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which].reshape(-1)
    idx = range(target.size) if elements is None else elements
    out = np.zeros(target.size)
    for i in idx:
        orig = target[i]
        target[i] = orig + eps
        up = fn(*[Tensor(a) for a in base]).item()
        target[i] = orig - eps
        down = fn(*[Tensor(a) for a in base]).item()
        target[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(base[which].shape)


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    wrt: Sequence[int] | None = None, eps: float = STEP, rtol: float = RTOL,
                    atol: float = ATOL, max_elements: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare autodiff against central differences at float64.

    An element passes when ``|auto - numeric| <= atol + rtol * max(|auto|, |numeric|)``.
    ``max_elements`` checks a random subset of each input to bound runtime.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    rng = rng or np.random.default_rng(0)
    with default_dtype(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i in wrt))
                   for i, a in enumerate(arrays)]
        out = fn(*tensors)
        out.backward()
        worst = (None, None)
        max_abs = max_rel = 0.0
        ok = True
        for i in wrt:
            auto = tensors[i].grad
            auto = np.zeros(tensors[i].size) if auto is None else auto.reshape(-1)
            n = auto.size
            elements = None
            if max_elements is not None and n > max_elements:
                elements = np.sort(rng.choice(n, size=max_elements, replace=False))
            num = numeric_grad(fn, arrays, i, eps, elements).reshape(-1)
            sel = np.arange(n) if elements is None else elements
            diff = np.abs(auto[sel] - num[sel])
            scale = np.maximum(np.abs(auto[sel]), np.abs(num[sel]))
            bad = diff > atol + rtol * scale
            rel = diff / np.maximum(scale, atol)
            if rel.size and rel.max() > max_rel:
                max_rel = float(rel.max())
                worst = (i, int(sel[rel.argmax()]))
            max_abs = max(max_abs, float(diff.max()) if diff.size else 0.0)
            ok = ok and not bad.any()
    return GradCheckResult(ok, max_abs, max_rel, worst)
