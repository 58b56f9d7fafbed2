"""Finite-difference verification of analytic gradients.

The check projects the operation output onto a fixed random direction to
obtain a scalar, computes analytic gradients with one tape, then central
differences per input coordinate.  Relative error uses a
max(|analytic|, |numeric|, 1e-8) denominator.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .autograd import Tape, Tensor, mul, record_masks, reduce_sum

__all__ = ["grad_check", "grad_check_coords"]


def grad_check(fn: Callable, inputs: Sequence[Tensor], eps: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every coordinate of every input that requires a gradient is perturbed.
    Inputs must be float64; eps must lie in [1e-6, 1e-3].
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
    probe_shape = fn(*inputs).data.shape  # untracked probe-shape forward
    probe = np.random.default_rng(seed).standard_normal(probe_shape)

    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
        if not isinstance(out, Tensor):
            raise TypeError("op under test must return a Tensor")
        scalar = reduce_sum(mul(out, Tensor(probe, dtype=np.float64)))
        tape.backward(scalar)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.zero_grad()

    def objective() -> float:
        return float((fn(*inputs).data * probe).sum())

    worst = 0.0
    for t, g in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        if g is None:
            raise ValueError("op produced no gradient for a tracked input")
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = objective()
            flat[i] = orig - eps
            f_minus = objective()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


def grad_check_coords(objective: Callable[[], Tensor], params: Sequence,
                      coords: Iterable[tuple[int, int]], eps: float = 1e-5,
                      check_stability: bool = True,
                      rng: np.random.Generator | None = None,
                      max_resamples: int = 25) -> float:
    """Spot-check selected parameter coordinates of a scalar objective.

    `objective` builds the loss on its own tape each call; its returned
    tensor drives one backward pass for the analytic gradients, and the
    finite differences re-evaluate it with perturbed coordinates.
    `coords` is an iterable of (param_index, flat coordinate).  With
    `check_stability`, a coordinate whose perturbation flips any
    piecewise-linear branch (relu mask, pool argmax) between the +eps
    and -eps evaluations is resampled: the kink makes the central
    difference meaningless there, mirroring the kink-exclusion rule used
    for the raw relu check.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        (p.tensor if hasattr(p, "tensor") else p).zero_grad()
    loss = objective()
    if loss.tape is None:
        raise ValueError("objective must build its loss on a tape")
    loss.tape.backward(loss)
    grads = []
    for p in params:
        t = p.tensor if hasattr(p, "tensor") else p
        grads.append(None if t.grad is None else t.grad.copy())
        t.zero_grad()

    def flat_data(p):
        return (p.tensor.data if hasattr(p, "tensor") else p.data).reshape(-1)

    def evaluate() -> tuple[float, np.ndarray | None]:
        if not check_stability:
            return objective().item(), None
        with record_masks() as trace:
            value = objective().item()
        return value, trace.fingerprint()

    worst = 0.0
    pending = list(coords)
    resamples = 0
    while pending:
        pi, ci = pending.pop()
        flat = flat_data(params[pi])
        g = grads[pi]
        if g is None:
            raise ValueError(f"parameter {pi} received no gradient")
        analytic = g.reshape(-1)[ci]
        orig = flat[ci]
        flat[ci] = orig + eps
        f_plus, fp_plus = evaluate()
        flat[ci] = orig - eps
        f_minus, fp_minus = evaluate()
        flat[ci] = orig
        if fp_plus is not None and not np.array_equal(fp_plus, fp_minus):
            if resamples < max_resamples:
                resamples += 1
                pending.append((pi, int(rng.integers(0, flat.size))))
                continue
        numeric = (f_plus - f_minus) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
