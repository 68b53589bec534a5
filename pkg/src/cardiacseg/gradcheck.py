"""Finite-difference verification of tape gradients.

Central differences in float64 are the ground truth here; float32 runs
are possible but drown in rounding noise, which is why the library keeps
a switchable element type.  The error metric per coordinate is

    |analytic - numeric| / max(1, |analytic|, |numeric|)

so O(1)-scale probes are judged relatively and near-zero gradients do
not produce spurious blowups.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    coords_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"{self.name:<24s} {verdict}  max_rel_err={self.max_rel_err:.3e}"
            f"  tol={self.tolerance:.0e}  coords={self.coords_checked}"
        )


def _rel_err(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return np.abs(a - n) / denom


def check_gradient(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_coords_per_input: int = 200,
    rng: np.random.Generator | None = None,
) -> tuple[float, int]:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a pure function of its tensor arguments returning a
    scalar.  Large inputs are probed on a random coordinate subset.
    Returns (max_rel_err, coordinates checked).
    """
    rng = rng or np.random.default_rng(0)
    inputs = list(inputs)
    with Tape() as tape:
        loss = fn(*inputs)
    grads = tape.backward(loss)

    worst = 0.0
    checked = 0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = grads.get(t)
        if analytic is None:
            raise UsageError(f"input {i} requires grad but received none; is fn connected?")
        flat_idx = np.arange(t.size)
        if t.size > max_coords_per_input:
            flat_idx = rng.choice(t.size, size=max_coords_per_input, replace=False)
        base = t.data
        for j in flat_idx:
            idx = np.unravel_index(int(j), t.shape) if t.ndim else ()
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            args_p = list(inputs)
            args_p[i] = Tensor._wrap(plus, requires_grad=False)
            args_m = list(inputs)
            args_m[i] = Tensor._wrap(minus, requires_grad=False)
            f_p = fn(*args_p).item()
            f_m = fn(*args_m).item()
            numeric = (f_p - f_m) / (2.0 * h)
            worst = max(worst, float(_rel_err(np.float64(analytic[idx]), np.float64(numeric))))
            checked += 1
    return worst, checked


# ---------------------------------------------------------------------------
# named check registry (drives the `gradcheck` CLI command and the test suite)
# ---------------------------------------------------------------------------

_REGISTRY: dict[str, tuple[Callable, float]] = {}


def register(name: str, tolerance: float = 1e-5):
    """Register a builder returning (fn, inputs) for a named gradient check."""

    def deco(builder):
        if name in _REGISTRY:
            raise UsageError(f"duplicate gradient check {name!r}")
        _REGISTRY[name] = (builder, tolerance)
        return builder

    return deco


def registered_checks() -> list[str]:
    return sorted(_REGISTRY)


def run_check(name: str, dtype=np.float64, seed: int = 0) -> GradCheckResult:
    if name not in _REGISTRY:
        raise UsageError(f"unknown gradient check {name!r}; known: {', '.join(registered_checks())}")
    builder, tol = _REGISTRY[name]
    rng = np.random.default_rng(seed)
    fn, inputs = builder(rng, np.dtype(dtype))
    err, coords = check_gradient(fn, inputs, rng=rng)
    return GradCheckResult(name=name, max_rel_err=err, tolerance=tol, coords_checked=coords)


def run_all(dtype=np.float64, seed: int = 0) -> list[GradCheckResult]:
    # import registers the standard checks on first use
    from . import gradcheck_suite  # noqa: F401

    return [run_check(name, dtype=dtype, seed=seed) for name in registered_checks()]
