"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, no_grad


class GradCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((p.name or f"param{i}", p))
    return out


def grad_check_table(f: Callable[[], Tensor], params: Iterable, eps: float = 1e-5,
                     seed: int = 0, max_entries: int | None = None) -> dict[str, float]:
    """Max relative error per parameter between backprop and central differences.

    ``f`` is a zero-argument closure returning a scalar Tensor built from
    ``params`` (a list of tensors, ``(name, tensor)`` pairs or a dict). With
    ``max_entries`` set, a seeded random subset of each parameter's entries
    is checked instead of all of them.
    """
    named = _named(params)
    rng = np.random.default_rng(seed)
    for _, p in named:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("function value is not finite")
    backward(loss)
    table = {}
    for name, p in named:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite value while perturbing {name}[{i}]")
            num = (fp - fm) / (2 * eps)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
        table[name] = worst
    for _, p in named:
        p.zero_grad()
    return table


def grad_check(f: Callable[[], Tensor], params: Iterable, eps: float = 1e-5,
               seed: int = 0, max_entries: int | None = None) -> float:
    table = grad_check_table(f, params, eps, seed, max_entries)
    return max(table.values(), default=0.0)
