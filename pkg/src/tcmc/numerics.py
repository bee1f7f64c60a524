"""Shared f32 primitives: payload evaluation and order-fixed reductions.

Every scalar operation here is an IEEE-754 single-precision elementwise op
(or a fixed composition of them), so evaluating over a whole array, a slice,
or one element at a time produces bit-identical values per element. That
property is what lets structural passes re-partition work while the
interpreter contract stays bit-exact; tests/test_interp.py pins it.

Reductions fold in ascending index order. numpy's own reductions use
pairwise summation, which is faster but order-different, so they are never
used on the interpreter path (the float64 test oracles may use them).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import mathlib
from .ir import Payload

F32 = np.float32


def _rsqrt_exact(x):
    # two correctly-rounded ops; the exact-mode definition of rsqrt
    return np.divide(F32(1.0), np.sqrt(x))


_UNARY = {
    "neg": np.negative,
    "exp": np.exp,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "rsqrt": _rsqrt_exact,
}

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max2": np.maximum,
}


def apply_unary(kind: str, x, param=None):
    if kind == "exp_approx":
        return mathlib.exp_approx(x, degree=param or 6)
    if kind == "tanh_approx":
        return mathlib.tanh_approx(x, degree=param or 6)
    if kind == "rsqrt_fast":
        return mathlib.inv_sqrt_fast(x, iters=param or 1)
    return _UNARY[kind](x)


def apply_binary(kind: str, a, b):
    return _BINARY[kind](a, b)


def eval_payload(p: Payload, args: Sequence[np.ndarray]):
    """Evaluate a payload tree over f32 arrays (vectorized, f32 throughout)."""
    if p.kind == "arg":
        return args[p.index]
    if p.kind == "const":
        return F32(p.value)
    if len(p.args) == 1:
        return apply_unary(p.kind, eval_payload(p.args[0], args), p.param)
    return apply_binary(p.kind, eval_payload(p.args[0], args), eval_payload(p.args[1], args))


_COMBINE = {"sum": np.add, "max": np.maximum}


def ordered_fold(values: np.ndarray, axes: Sequence[int], kind: str, init: float) -> np.ndarray:
    """Fold `values` over `axes` in ascending index order, starting from init.

    Equivalent to visiting the reduced coordinates lexicographically per
    output point, which fixes the fp accumulation order.
    """
    axes = tuple(axes)
    keep = [d for d in range(values.ndim) if d not in axes]
    moved = np.transpose(values, keep + list(axes))
    par_shape = moved.shape[: len(keep)]
    flat = moved.reshape(par_shape + (-1,))
    fn = _COMBINE[kind]
    acc = np.full(par_shape, F32(init), dtype=np.float32)
    for k in range(flat.shape[-1]):
        acc = fn(acc, flat[..., k])
    return acc
