"""Central finite-difference gradient oracle (64-bit, h = 1e-5).

Independent of the autodiff tape: it only calls the forward function on
perturbed numpy inputs and compares against the recorded grads.
"""

from __future__ import annotations

import numpy as np

from idt.tensor import Tensor

H = 1e-5


def numeric_grad(f, arrays: list[np.ndarray], h: float = H) -> list[np.ndarray]:
    """Central differences of scalar-valued f w.r.t. every entry of every input."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = f([x.copy() for x in arrays])
            flat[j] = orig - h
            down = f([x.copy() for x in arrays])
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build_loss, arrays: list[np.ndarray], rel_tol: float = 1e-4) -> float:
    """Compare tape gradients of build_loss against the finite-difference oracle.

    ``build_loss`` maps a list of Tensors to a scalar Tensor; ``arrays`` are the
    float64 starting values. Returns the worst relative error seen.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f(xs: list[np.ndarray]) -> float:
        ts = [Tensor(x, dtype=np.float64) for x in xs]
        return float(build_loss(ts).data)

    numeric = numeric_grad(f, arrays)
    worst = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < rel_tol, f"gradient mismatch: max rel error {worst:.3e} >= {rel_tol}"
    return worst
