"""Finite-difference verification of tape gradients.

``gradcheck`` evaluates a scalar-valued closure twice to confirm determinism,
takes one tape backward pass, then perturbs parameter entries one at a time
and compares against central differences (f(p+eps) - f(p-eps)) / (2 eps).

Relative error per entry is |analytic - numeric| / max(1, |analytic|, |numeric|),
so it behaves like relative error for O(1) gradients and absolute error for
tiny ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    worst_entry: tuple[int, ...]
    analytic: float
    numeric: float
    entries_checked: int


@dataclass
class GradcheckReport:
    eps: float
    tol: float
    params: list[ParamReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def assert_ok(self) -> None:
        if not self.ok:
            worst = max(self.params, key=lambda p: p.max_rel_err)
            raise AssertionError(
                f"gradcheck failed: param '{worst.name}' entry {worst.worst_entry} "
                f"analytic {worst.analytic:.6e} vs numeric {worst.numeric:.6e} "
                f"(rel err {worst.max_rel_err:.3e} >= tol {self.tol:.1e})"
            )

    def summary(self) -> str:
        lines = [f"gradcheck eps={self.eps:g} tol={self.tol:g}"]
        for p in self.params:
            flag = "ok " if p.max_rel_err < self.tol else "FAIL"
            lines.append(f"  [{flag}] {p.name}: max rel err {p.max_rel_err:.3e} over {p.entries_checked} entries")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def gradcheck(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. ``params`` is (name, tensor) pairs or a dict. When ``max_entries``
    is set, a seeded random subset of entries is checked per parameter;
    otherwise every entry is.
    """
    if isinstance(params, dict):
        params = list(params.items())
    v1 = float(f().data.reshape(()))
    v2 = float(f().data.reshape(()))
    if v1 != v2:
        raise ContractError(f"gradcheck target is non-deterministic: {v1!r} != {v2!r}")

    for _, p in params:
        p.grad = None
    tape = Tape()
    with tape:
        loss = f()
    backward(loss, tape)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in params}

    rng = np.random.default_rng(seed)
    report = GradcheckReport(eps=eps, tol=tol)
    for name, p in params:
        n = p.data.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = np.arange(n)
        worst = (0.0, (0,), 0.0, 0.0)
        for i in idxs:
            orig = p.data.flat[i]  # .flat writes through any memory layout
            p.data.flat[i] = orig + eps
            f_plus = float(f().data.reshape(()))
            p.data.flat[i] = orig - eps
            f_minus = float(f().data.reshape(()))
            p.data.flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            ana = analytic[name].reshape(-1)[i]
            err = _rel_err(ana, num)
            if err >= worst[0]:
                worst = (err, np.unravel_index(i, p.data.shape), ana, num)
        report.params.append(
            ParamReport(
                name=name,
                max_rel_err=worst[0],
                worst_entry=tuple(int(k) for k in worst[1]),
                analytic=float(worst[2]),
                numeric=float(worst[3]),
                entries_checked=int(len(idxs)),
            )
        )
    return report
