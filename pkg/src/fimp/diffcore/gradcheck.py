"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fimp.diffcore.params import ParamStore
from fimp.diffcore.tensor import Tensor
from fimp.errors import NonFiniteError


@dataclass
class GradCheckReport:
    max_rel_error: dict  # parameter name -> worst relative error
    tol: float
    checked_coords: int

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def summary(self) -> str:
        name, err = self.worst()
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {len(self.max_rel_error)} parameters, "
                f"{self.checked_coords} coords, worst {name}: {err:.3e} (tol {self.tol:g})")


def grad_check(f, params, tol: float = 1e-4, step: float = 1e-5,
               max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar `f()` against central differences.

    `f` must be a deterministic closure over `params` (a ParamStore or a
    name->Tensor mapping) returning a scalar Tensor.  Runs in 64-bit mode
    only: perturbations of 1e-5 drown in float32 rounding.  When
    `max_coords_per_param` is set, a random coordinate subset of each
    parameter is probed (every parameter is still covered).

    Relative error is |a - n| / max(|a|, |n|, rel_floor).
    """
    if isinstance(params, ParamStore):
        items = list(params.items())
    else:
        items = list(params.items())
    for name, p in items:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ({name} is {p.data.dtype})")
        p.zero_grad()

    loss = f()
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("f must return a scalar Tensor")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("f() is non-finite")
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in items}

    rng = rng or np.random.default_rng(0)
    report: dict[str, float] = {}
    total = 0
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(num):
                raise NonFiniteError(f"finite difference non-finite at {name}[{i}]")
            ana = a_flat[i]
            err = abs(ana - num) / max(abs(ana), abs(num), rel_floor)
            worst = max(worst, err)
            total += 1
        report[name] = worst
    return GradCheckReport(report, tol, total)
