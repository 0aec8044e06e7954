"""Central finite-difference check of tape gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __bool__(self):
        return self.passed


def gradcheck(f, t, h=1e-3, tol=1e-3, sample=None, seed=0, floor=1e-3):
    """Compare analytic gradients of scalar ``f`` against ``(f(x+h) - f(x-h)) / 2h``.

    ``t`` is a Tensor or a sequence of Tensors, passed to ``f`` positionally;
    ``f`` may ignore them and close over a network whose parameters they are.
    Tensors are promoted to float64 in place for the duration of the check.
    ``sample`` limits the number of perturbed scalars (drawn uniformly).

    Relative error per scalar is ``|a - n| / max(|a|, |n|, floor)``.
    """
    tensors = [t] if isinstance(t, Tensor) else list(t)
    saved = [(x.data, x.requires_grad, x.grad) for x in tensors]
    try:
        for x in tensors:
            x.data = x.data.astype(np.float64)
            x.requires_grad = True
            x.grad = None
        with Tape() as tape:
            y = f(*tensors)
        tape.backward(y)
        analytic = [x.grad.copy() for x in tensors]

        slots = [(i, j) for i, x in enumerate(tensors) for j in range(x.size)]
        if sample is not None and sample < len(slots):
            rng = np.random.default_rng(seed)
            pick = rng.choice(len(slots), size=sample, replace=False)
            slots = [slots[k] for k in sorted(pick)]

        max_rel = max_abs = 0.0
        for i, j in slots:
            flat = tensors[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = f(*tensors).item()
            flat[j] = orig - h
            fm = f(*tensors).item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic[i].reshape(-1)[j]
            err = abs(ana - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(ana), abs(num), floor))
    finally:
        for x, (data, rg, grad) in zip(tensors, saved):
            x.data, x.requires_grad, x.grad = data, rg, grad
    return GradcheckReport(float(max_rel), float(max_abs), len(slots), tol)
