"""Central finite-difference checks for analytic gradients.

The analytic gradient is computed at the working precision (float32 unless
told otherwise); the finite differences always re-evaluate the forward pass
in float64 so that the oracle is not limited by float32 round-off.
"""

from __future__ import annotations

import copy
from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor


def _relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    # floor keeps near-zero coordinates from dominating
    floor = max(1e-2 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _global_scale(grads) -> float:
    # tensors with an identically-zero true gradient (e.g. attention key bias)
    # are judged against the largest RMS gradient of the whole objective
    return max(float(np.sqrt(np.mean(np.asarray(g, dtype=np.float64) ** 2))) for g in grads)


def _probe(shape, n_points: int, rng: np.random.Generator) -> np.ndarray:
    size = int(np.prod(shape))
    return rng.choice(size, size=min(n_points, size), replace=False)


def check_function_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    n_points: int = 10,
    eps: float = 1e-4,
    dtype=np.float32,
    seed: int = 0,
) -> Dict[int, float]:
    """Return the max relative error per input index for ``fn(*inputs)``.

    The scalar objective is ``sum(fn(...) * R)`` with a fixed random ``R``.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in inputs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    out.backward(weights.astype(out.dtype))

    def objective(arrays):
        res = fn(*[Tensor(a) for a in arrays])
        return float((res.data.astype(np.float64) * weights).sum())

    grads = [t.grad if t.grad is not None else np.zeros_like(a) for t, a in zip(tensors, inputs)]
    scale = _global_scale(grads)
    report = {}
    for i, base in enumerate(inputs):
        analytic = grads[i]
        errs = []
        for flat in _probe(base.shape, n_points, rng):
            idx = np.unravel_index(flat, base.shape)
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            numeric = (objective(plus) - objective(minus)) / (2 * eps)
            errs.append(_relative_errors(np.float64(analytic[idx]), np.float64(numeric), scale))
        report[i] = float(np.max(errs))
    return report


def check_module_gradients(
    module,
    x: np.ndarray,
    forward: Callable = None,
    n_points: int = 10,
    eps: float = 1e-4,
    seed: int = 0,
) -> Dict[str, float]:
    """Max relative error for the input and every parameter of ``module``.

    ``forward(module, tensor)`` defaults to ``module(tensor)``.
    """
    forward = forward or (lambda m, t: m(t))
    rng = np.random.default_rng(seed)
    x64 = np.asarray(x, dtype=np.float64)

    module.zero_grad()
    xt = Tensor(x64.astype(np.float32), requires_grad=True)
    out = forward(module, xt)
    weights = rng.standard_normal(out.shape)
    out.backward(weights.astype(out.dtype))
    analytic = {"input": xt.grad}
    for name, p in module.named_parameters():
        analytic[name] = p.grad if p.grad is not None else np.zeros_like(p.data)

    ref = copy.deepcopy(module).astype(np.float64)
    params = dict(ref.named_parameters())

    def objective(xa):
        res = forward(ref, Tensor(xa))
        return float((res.data * weights).sum())

    scale = _global_scale(analytic.values())
    report = {}
    for name, grad in analytic.items():
        target = x64 if name == "input" else params[name].data
        errs = []
        for flat in _probe(target.shape, n_points, rng):
            idx = np.unravel_index(flat, target.shape)
            orig = target[idx]
            target[idx] = orig + eps
            f_plus = objective(x64)
            target[idx] = orig - eps
            f_minus = objective(x64)
            target[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            errs.append(_relative_errors(np.float64(grad[idx]), numeric, scale))
        report[name] = float(np.max(errs))
    return report
