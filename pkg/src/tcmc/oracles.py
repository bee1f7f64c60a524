"""Independent oracles and generators backing the differential test suite.

Everything here deliberately avoids the interpreter's code paths: formula
oracles evaluate the kernels' definitions in float64 (numpy reductions,
pairwise order) and round once at the end; the structural walkers re-derive
tile and thread slice geometry straight from the IR. Pipeline-vs-oracle
comparisons therefore use a reltol (1e-6), while pipeline-vs-pipeline
comparisons stay bit-exact.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from . import ir
from .ir import (
    AffineIndexMap, AsyncExecuteOp, DmaWaitOp, ExtractSliceOp, ForallOp, ForOp,
    GenericOp, IfOp, InsertSliceOp, KernelProgram, Op, Payload, Reduction, TensorDecl,
)

# ---------------------------------------------------------------------------
# Formula oracles (float64, rounded once)
# ---------------------------------------------------------------------------

GELU_CUBIC = 0.044715
GELU_SQRT_2_OVER_PI = 0.7978845608028654
RMSNORM_EPSILON = 1e-6
EXPSERIES_TERMS = 20


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rmsnorm(x: np.ndarray, g: np.ndarray, eps: float) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return (x / rms) * g


def _expseries(x: np.ndarray) -> np.ndarray:
    t = 1.0 + x * (1.0 / EXPSERIES_TERMS)
    for k in range(EXPSERIES_TERMS - 1, 1, -1):
        t = 1.0 + x * t * (1.0 / k)
    return 1.0 + x * t


def oracle_eval(kernel_name: str, inputs: Mapping[str, np.ndarray],
                eps: float = RMSNORM_EPSILON) -> dict[str, np.ndarray]:
    """Double-precision evaluation of a shipped kernel's defining formula."""
    f64 = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    if kernel_name == "softmax":
        out = _softmax(f64["x"])
    elif kernel_name == "gelu":
        out = _gelu(f64["x"])
    elif kernel_name == "silu":
        out = _silu(f64["x"])
    elif kernel_name == "rmsnorm":
        out = _rmsnorm(f64["x"], f64["g"], eps)
    elif kernel_name == "expseries":
        out = _expseries(f64["x"])
    elif kernel_name == "vecadd2d":
        out = f64["a"] + f64["b"]
    else:
        raise KeyError(f"unknown kernel {kernel_name!r}")
    return {"y": out.astype(np.float32)}


# ---------------------------------------------------------------------------
# Random program generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomProgramSpec:
    seed: int
    min_len: int = 1
    max_len: int = 5
    shapes: tuple[tuple[int, ...], ...] = ((16,), (8, 16), (127, 513))
    reduction_prob: float = 0.3


_EW_UNARY = ("neg", "tanh", "exp")
_EW_BINARY = ("add", "sub", "mul", "max2")


def gen_random_program(spec: RandomProgramSpec) -> KernelProgram:
    """Seed-deterministic elementwise/reduction chain; always verifies."""
    rng = random.Random(spec.seed)
    shape = spec.shapes[rng.randrange(len(spec.shapes))]
    length = rng.randint(spec.min_len, spec.max_len)
    decls = [TensorDecl("in0", shape, "f32", "ddr", "input")]
    ops: list[Op] = []
    cur, cur_shape = "in0", shape
    n_in, n_tmp = 1, 0
    for k in range(length):
        last = k == length - 1
        rank = len(cur_shape)
        out_name = "out" if last else f"tmp{n_tmp}"
        reduce_now = rank >= 1 and rng.random() < spec.reduction_prob and cur_shape[-1] > 1
        if reduce_now:
            axis = rank - 1
            out_shape = cur_shape[:axis] or (1,)
            kind = rng.choice(("sum", "max"))
            out_map = AffineIndexMap(tuple(range(axis)) or (None,))
            ops.append(GenericOp(
                name=f"r{k}", domain=cur_shape, inputs=(cur,), outputs=(out_name,),
                maps=(AffineIndexMap.identity(rank), out_map),
                iterators=("parallel",) * axis + ("reduction",),
                payloads=(Payload.arg(0),),
                reductions=(Reduction.sum() if kind == "sum" else Reduction.max(),),
            ))
            cur_shape = out_shape
        else:
            choice = rng.random()
            if choice < 0.4:
                payload = Payload.unary(rng.choice(_EW_UNARY), Payload.arg(0))
                inputs = (cur,)
            elif choice < 0.7:
                payload = Payload.binary(rng.choice(_EW_BINARY), Payload.arg(0),
                                         Payload.const(rng.uniform(-1.0, 1.0)))
                inputs = (cur,)
            else:
                extra = f"in{n_in}"
                n_in += 1
                decls.append(TensorDecl(extra, cur_shape, "f32", "ddr", "input"))
                payload = Payload.binary(rng.choice(_EW_BINARY), Payload.arg(0), Payload.arg(1))
                inputs = (cur, extra)
            rank = len(cur_shape)
            ops.append(GenericOp(
                name=f"e{k}", domain=cur_shape, inputs=inputs, outputs=(out_name,),
                maps=tuple(AffineIndexMap.identity(rank) for _ in inputs)
                + (AffineIndexMap.identity(rank),),
                iterators=("parallel",) * rank,
                payloads=(payload,),
            ))
        decls.append(TensorDecl(out_name, cur_shape, "f32", "ddr",
                                "output" if last else "temp"))
        if not last:
            cur = out_name
            n_tmp += 1
    program = KernelProgram(f"random_{spec.seed}", tuple(decls), tuple(ops), "lowered")
    report = ir.verify(program)
    assert report.ok, f"generator produced invalid program:\n{report}"
    return program


def random_inputs_for(program: KernelProgram, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {d.name: rng.uniform(-1.0, 1.0, size=d.shape).astype(np.float32)
            for d in program.inputs()}


# ---------------------------------------------------------------------------
# Structural walkers (geometry oracles)
# ---------------------------------------------------------------------------


def tile_partition(extent: int, tile: int) -> list[tuple[int, int]]:
    """Reference (offset, size) partition: min(t, n - o) clamping."""
    return [(o, min(tile, extent - o)) for o in range(0, extent, tile)]


def enumerate_tiles(program: KernelProgram) -> dict[str, list[tuple[tuple[int, ...], tuple[int, ...]]]]:
    """Per tiled loop (keyed by loop var), the evaluated (offsets, sizes) of
    its first operand slice at every iteration."""
    out: dict[str, list] = {}

    def walk(ops, env):
        for op in ops:
            if isinstance(op, ForOp) and "tiled_generic" in op.annotations:
                first_slice = next((o for o in op.body if isinstance(o, ExtractSliceOp)), None)
                rec = out.setdefault(op.var, [])
                for i in range(ir.eval_extent(op.lb, env), ir.eval_extent(op.ub, env),
                               ir.eval_extent(op.step, env)):
                    env2 = dict(env)
                    env2[op.var] = i
                    if first_slice is not None:
                        rec.append((
                            tuple(ir.eval_extent(o, env2) for o in first_slice.offsets),
                            tuple(ir.eval_extent(s, env2) for s in first_slice.sizes),
                        ))
                    walk(op.body, env2)
            elif isinstance(op, ForOp):
                for i in range(ir.eval_extent(op.lb, env), ir.eval_extent(op.ub, env),
                               ir.eval_extent(op.step, env)):
                    env2 = dict(env)
                    env2[op.var] = i
                    walk(op.body, env2)
            elif isinstance(op, (IfOp, ForallOp, AsyncExecuteOp)):
                pass  # tile loops of interest sit above these

    walk(program.ops, {})
    return out


def thread_write_intervals(program: KernelProgram) -> dict[str, list[list[list]]]:
    """Write regions of forall thread bodies, one entry per forall execution.

    Keyed by the forall var; each execution is a list of per-thread bodies,
    each body a list of (dest, offsets, sizes). The intervals let tests check
    the race-freedom contract: distinct thread bodies must write pairwise
    disjoint regions of every shared buffer.
    """
    results: dict[str, list[list[list]]] = {}

    def eval_pred(pred, env) -> bool:
        if isinstance(pred, ir.CmpPred):
            return ir._CMP_FNS[pred.op](ir.eval_extent(pred.lhs, env),
                                        ir.eval_extent(pred.rhs, env))
        raise ValueError("toggle predicates not expected under forall bodies")

    def collect(ops, env, sink):
        for op in ops:
            if isinstance(op, InsertSliceOp):
                offs = tuple(ir.eval_extent(o, env) for o in op.offsets)
                sizes = tuple(ir.eval_extent(s, env) for s in op.sizes)
                sink.append((op.dest, offs, sizes))
            elif isinstance(op, IfOp):
                if eval_pred(op.pred, env):
                    collect(op.body, env, sink)
            elif isinstance(op, ForOp):
                for i in range(ir.eval_extent(op.lb, env), ir.eval_extent(op.ub, env),
                               ir.eval_extent(op.step, env)):
                    env2 = dict(env)
                    env2[op.var] = i
                    collect(op.body, env2, sink)
            elif isinstance(op, AsyncExecuteOp):
                collect(op.body, env, sink)

    def walk(ops, env):
        for op in ops:
            if isinstance(op, ForallOp):
                per_thread = []
                for t in range(op.threads):
                    env2 = dict(env)
                    env2[op.var] = t
                    sink: list = []
                    collect(op.body, env2, sink)
                    per_thread.append(sink)
                results.setdefault(op.var, []).append(per_thread)
            elif isinstance(op, ForOp):
                for i in range(ir.eval_extent(op.lb, env), ir.eval_extent(op.ub, env),
                               ir.eval_extent(op.step, env)):
                    env2 = dict(env)
                    env2[op.var] = i
                    walk(op.body, env2)
            elif isinstance(op, (IfOp, AsyncExecuteOp)):
                walk(op.body, env)

    walk(program.ops, {})
    return results


def regions_disjoint(bodies: list[list[tuple[str, tuple[int, ...], tuple[int, ...]]]]) -> bool:
    """True when no two thread bodies write overlapping regions of a buffer."""
    for i in range(len(bodies)):
        for j in range(i + 1, len(bodies)):
            for dest_a, off_a, sz_a in bodies[i]:
                for dest_b, off_b, sz_b in bodies[j]:
                    if dest_a != dest_b:
                        continue
                    overlap = all(
                        off_a[d] < off_b[d] + sz_b[d] and off_b[d] < off_a[d] + sz_a[d]
                        for d in range(len(off_a)))
                    if overlap:
                        return False
    return True


def remove_first_wait(program: KernelProgram) -> KernelProgram:
    """Mutation fixture: drop the first dma_wait so the hazard checker fires."""
    removed = [False]

    def rebuild(ops):
        out = []
        for op in ops:
            if isinstance(op, DmaWaitOp) and not removed[0]:
                removed[0] = True
                continue
            if isinstance(op, (ForOp, ForallOp, IfOp, AsyncExecuteOp)):
                op = replace(op, body=rebuild(op.body))
            out.append(op)
        return tuple(out)

    ops = rebuild(program.ops)
    if not removed[0]:
        raise ValueError("program has no dma_wait to remove")
    return program.with_ops(ops, stage=program.stage + "-mutated")
