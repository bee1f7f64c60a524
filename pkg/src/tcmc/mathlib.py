"""Fast f32 approximations of transcendentals and the payload rewrite pass.

exp uses range reduction e^x = e^eps * 2^n with n = rint(x / ln 2), a
Cody-Waite two-constant reduction for eps, a Horner-evaluated Taylor
polynomial for e^eps, and ldexp for the 2^n scaling. rsqrt is the bit-level
initial guess refined by Newton-Raphson steps. tanh is built on the exp
approximation via tanh(x) = 1 - 2/(e^{2x} + 1), with an expm1-style path
near zero (where the subtraction e^{2x} - 1 would lose relative accuracy)
and hard saturation to +/-1 beyond |x| > 10.

All ops are IEEE f32 elementwise, so results are deterministic and identical
for scalar and array calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Union

import numpy as np

from .ir import (
    AsyncExecuteOp, ForallOp, ForOp, GenericOp, IfOp, KernelProgram, Op, Payload,
)

_F32 = np.float32

# Cody-Waite split of ln 2: LN2_HI is exactly representable with trailing
# zero bits, so n * LN2_HI is exact for |n| <= 256.
_LN2_HI = _F32(0.693359375)
_LN2_LO = _F32(-2.12194440e-4)
_INV_LN2 = _F32(1.4426950408889634)

# Beyond these, eps would leave the reduced range; f32 exp is inf/0 anyway.
_EXP_OVER = _F32(89.0)
_EXP_UNDER = _F32(-105.0)

_EXP_COEFS = {d: tuple(_F32(1.0 / math.factorial(k)) for k in range(d + 1)) for d in range(2, 13)}


def _as_f32_array(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float32)
    return arr, np.ndim(x) == 0


def _exp_core(x: np.ndarray, degree: int) -> np.ndarray:
    coefs = _EXP_COEFS[degree]
    n = np.rint(x * _INV_LN2)
    n = np.clip(n, -151.0, 129.0)
    eps = (x - n * _LN2_HI) - n * _LN2_LO
    poly = np.full_like(eps, coefs[degree])
    for k in range(degree - 1, -1, -1):
        poly = poly * eps + coefs[k]
    with np.errstate(over="ignore"):
        out = np.ldexp(poly, n.astype(np.int32))
    return np.where(x > _EXP_OVER, _F32(np.inf), np.where(x < _EXP_UNDER, _F32(0.0), out))


def exp_approx(x, degree: int = 6):
    """Approximate e^x; relative error <= 1e-6 on [-10, 10] at degree 6."""
    if degree < 2:
        raise ValueError("exp_approx: degree must be >= 2")
    arr, scalar = _as_f32_array(x)
    out = _exp_core(arr, degree)
    return _F32(out[()]) if scalar else out


def _expm1_core(x: np.ndarray, degree: int) -> np.ndarray:
    # e^x - 1 for |x| <= ln2/2, computed without the cancelling +1.
    coefs = _EXP_COEFS[degree]
    inner = np.full_like(x, coefs[degree])
    for k in range(degree - 1, 0, -1):
        inner = inner * x + coefs[k]
    return x * inner


def inv_sqrt_fast(x, iters: int = 1):
    """Bit-trick 1/sqrt(x) with `iters` Newton refinements.

    Relative error <= 2e-3 at one iteration, <= 5e-6 at two, over
    [2^-20, 2^20]. Raises on x <= 0.
    """
    if iters < 1:
        raise ValueError("inv_sqrt_fast: iters must be >= 1")
    arr, scalar = _as_f32_array(x)
    if np.any(arr <= 0.0):
        raise ValueError("inv_sqrt_fast: domain error, x must be > 0")
    i = arr.view(np.int32)
    y = (np.int32(0x5F3759DF) - (i >> 1)).view(np.float32)
    half_x = _F32(0.5) * arr
    for _ in range(iters):
        y = y * (_F32(1.5) - half_x * y * y)
    return _F32(y[()]) if scalar else y


_TANH_SMALL = _F32(0.17)  # inside the n == 0 band of the exp reduction
_TANH_SAT = _F32(10.0)


def tanh_approx(x, degree: int = 6):
    """Approximate tanh; relative error <= 1e-5 on [-5, 5], saturates beyond |x| > 10."""
    arr, scalar = _as_f32_array(x)
    t2 = _F32(2.0) * arr
    with np.errstate(invalid="ignore"):
        big = _exp_core(np.where(np.abs(arr) > _TANH_SAT, _F32(0.0), t2), degree)
        via_exp = _F32(1.0) - _F32(2.0) / (big + _F32(1.0))
    u = _expm1_core(t2, degree)
    near = u / (u + _F32(2.0))
    out = np.where(np.abs(arr) <= _TANH_SMALL, near, via_exp)
    out = np.where(arr > _TANH_SAT, _F32(1.0), out)
    out = np.where(arr < -_TANH_SAT, _F32(-1.0), out)
    return _F32(out[()]) if scalar else out


# ---------------------------------------------------------------------------
# Payload expansion pass
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApproxPolicy:
    mode: Literal["exact", "approx"] = "exact"
    ops: frozenset[str] = frozenset({"exp", "tanh", "rsqrt"})
    exp_degree: int = 6
    rsqrt_iters: int = 1

    def __post_init__(self):
        if self.exp_degree < 2:
            raise ValueError("ApproxPolicy: exp degree must be >= 2")
        if self.rsqrt_iters not in (1, 2):
            raise ValueError("ApproxPolicy: rsqrt iterations must be 1 or 2")
        unknown = self.ops - {"exp", "tanh", "rsqrt"}
        if unknown:
            raise ValueError(f"ApproxPolicy: unknown ops {sorted(unknown)}")


def _rewrite_payload(p: Payload, policy: ApproxPolicy) -> Payload:
    args = tuple(_rewrite_payload(a, policy) for a in p.args)
    if p.kind == "exp" and "exp" in policy.ops:
        return Payload("exp_approx", args, param=policy.exp_degree)
    if p.kind == "tanh" and "tanh" in policy.ops:
        return Payload("tanh_approx", args, param=policy.exp_degree)
    if p.kind == "rsqrt" and "rsqrt" in policy.ops:
        return Payload("rsqrt_fast", args, param=policy.rsqrt_iters)
    if args != p.args:
        return replace(p, args=args)
    return p


def _rewrite_ops(ops: tuple[Op, ...], policy: ApproxPolicy) -> tuple[Op, ...]:
    out = []
    for op in ops:
        if isinstance(op, GenericOp):
            out.append(replace(op, payloads=tuple(_rewrite_payload(p, policy) for p in op.payloads)))
        elif isinstance(op, (ForOp, ForallOp, IfOp, AsyncExecuteOp)):
            out.append(replace(op, body=_rewrite_ops(op.body, policy)))
        else:
            out.append(op)
    return tuple(out)


def expand_math_ops(program: KernelProgram, policy: ApproxPolicy) -> KernelProgram:
    """Rewrite exp/tanh/rsqrt payload nodes to their approximated evaluators."""
    if policy.mode == "exact":
        return program
    return replace(program, ops=_rewrite_ops(program.ops, policy), stage="math-approx")
