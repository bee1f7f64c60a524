"""Structured tensor IR: types, ops, verifier, and the deterministic printer.

Position in the stack:

    kernel DSL  ->  frontend lowering  ->  [this IR]  ->  passes  ->  interpreter / cost model

The IR is value-oriented and immutable: every node is a frozen dataclass,
programs are shared read-only, and passes build new programs instead of
mutating. Buffers are referenced by name; definitions are lexical (a name
defined in a block is visible to later ops in that block and to nested
blocks). Index arithmetic inside loops uses a small expression language
(`Extent`) so tile offsets and clamped remainder sizes stay symbolic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Literal, Optional, Union

import numpy as np

# ---------------------------------------------------------------------------
# Index expressions
# ---------------------------------------------------------------------------

# Static extents are plain ints; dynamic ones are IVar/IBin trees.


@dataclass(frozen=True, slots=True)
class IVar:
    name: str


@dataclass(frozen=True, slots=True)
class IBin:
    op: Literal["add", "sub", "mul", "floordiv", "min", "max"]
    lhs: "Extent"
    rhs: "Extent"


Extent = Union[int, IVar, IBin]


def ix_add(a: Extent, b: Extent) -> Extent:
    if isinstance(a, int) and isinstance(b, int):
        return a + b
    if b == 0:
        return a
    if a == 0:
        return b
    return IBin("add", a, b)


def ix_sub(a: Extent, b: Extent) -> Extent:
    if isinstance(a, int) and isinstance(b, int):
        return a - b
    if b == 0:
        return a
    return IBin("sub", a, b)


def ix_mul(a: Extent, b: Extent) -> Extent:
    if isinstance(a, int) and isinstance(b, int):
        return a * b
    if a == 1:
        return b
    if b == 1:
        return a
    return IBin("mul", a, b)


def ix_floordiv(a: Extent, b: Extent) -> Extent:
    if isinstance(a, int) and isinstance(b, int):
        return a // b
    if b == 1:
        return a
    return IBin("floordiv", a, b)


def ix_min(a: Extent, b: Extent) -> Extent:
    if isinstance(a, int) and isinstance(b, int):
        return min(a, b)
    if a == b:
        return a
    return IBin("min", a, b)


def ix_max(a: Extent, b: Extent) -> Extent:
    if isinstance(a, int) and isinstance(b, int):
        return max(a, b)
    if a == b:
        return a
    return IBin("max", a, b)


_IBIN_FNS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "floordiv": lambda a, b: a // b,
    "min": min,
    "max": max,
}


def eval_extent(e: Extent, env: dict[str, int]) -> int:
    if isinstance(e, int):
        return e
    if isinstance(e, IVar):
        try:
            return env[e.name]
        except KeyError:
            raise KeyError(f"unbound index variable {e.name}") from None
    return _IBIN_FNS[e.op](eval_extent(e.lhs, env), eval_extent(e.rhs, env))


def substitute_extent(e: Extent, mapping: dict[str, Extent]) -> Extent:
    if isinstance(e, int):
        return e
    if isinstance(e, IVar):
        return mapping.get(e.name, e)
    ctor = {"add": ix_add, "sub": ix_sub, "mul": ix_mul,
            "floordiv": ix_floordiv, "min": ix_min, "max": ix_max}[e.op]
    return ctor(substitute_extent(e.lhs, mapping), substitute_extent(e.rhs, mapping))


def extent_bounds(e: Extent, ranges: dict[str, tuple[int, int]]) -> Optional[tuple[int, int]]:
    """Inclusive interval bound of `e` given per-variable (lo, hi) ranges.

    Returns None when a variable has no known range.
    """
    if isinstance(e, int):
        return (e, e)
    if isinstance(e, IVar):
        return ranges.get(e.name)
    lb = extent_bounds(e.lhs, ranges)
    rb = extent_bounds(e.rhs, ranges)
    if lb is None or rb is None:
        return None
    if e.op == "add":
        return (lb[0] + rb[0], lb[1] + rb[1])
    if e.op == "sub":
        return (lb[0] - rb[1], lb[1] - rb[0])
    if e.op == "mul":
        c = [a * b for a in lb for b in rb]
        return (min(c), max(c))
    if e.op == "floordiv":
        if rb[0] <= 0:
            return None
        c = [a // b for a in lb for b in rb]
        return (min(c), max(c))
    if e.op == "min":
        return (min(lb[0], rb[0]), min(lb[1], rb[1]))
    return (max(lb[0], rb[0]), max(lb[1], rb[1]))


def extent_upper(e: Extent, ranges: dict[str, tuple[int, int]] | None = None) -> Optional[int]:
    b = extent_bounds(e, ranges or {})
    return None if b is None else b[1]


def extent_divisible(e: Extent, w: int, divisible_vars: frozenset[str]) -> bool:
    """Conservatively decide whether `e` is always a multiple of `w`.

    `divisible_vars` names loop variables whose value is known to be a
    multiple of `w` (lower bound and step both divisible).
    """
    if w == 1:
        return True
    if isinstance(e, int):
        return e % w == 0
    if isinstance(e, IVar):
        return e.name in divisible_vars
    l = extent_divisible(e.lhs, w, divisible_vars)
    r = extent_divisible(e.rhs, w, divisible_vars)
    if e.op in ("add", "sub", "min", "max"):
        return l and r
    if e.op == "mul":
        return l or r
    return False


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------

_CMP_FNS = {
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}


@dataclass(frozen=True, slots=True)
class CmpPred:
    op: Literal["lt", "le", "eq", "ne", "gt", "ge"]
    lhs: Extent
    rhs: Extent


@dataclass(frozen=True, slots=True)
class TogglePred:
    """True when the toggle cell currently holds `value` (the load_toggle read)."""
    cell: str
    value: bool


Pred = Union[CmpPred, TogglePred]


# ---------------------------------------------------------------------------
# Scalar payload expressions
# ---------------------------------------------------------------------------

PAYLOAD_BINARY = ("add", "sub", "mul", "div", "max2")
PAYLOAD_UNARY = ("neg", "exp", "tanh", "sqrt", "rsqrt",
                 "exp_approx", "tanh_approx", "rsqrt_fast")


@dataclass(frozen=True)
class Payload:
    """Scalar expression tree evaluated at each iteration-domain point.

    Leaves are `arg(i)` (the i-th input operand's element) and `const(v)`
    (an f32 immediate). The *_approx kinds carry a `param` (Taylor degree
    or Newton iteration count) and are produced by the math expansion pass.
    """

    kind: str
    args: tuple["Payload", ...] = ()
    value: Optional[float] = None
    index: Optional[int] = None
    param: Optional[int] = None

    @staticmethod
    def arg(i: int) -> "Payload":
        return Payload("arg", index=i)

    @staticmethod
    def const(v: float) -> "Payload":
        return Payload("const", value=float(np.float32(v)))

    @staticmethod
    def unary(kind: str, a: "Payload", param: Optional[int] = None) -> "Payload":
        assert kind in PAYLOAD_UNARY, kind
        return Payload(kind, (a,), param=param)

    @staticmethod
    def binary(kind: str, a: "Payload", b: "Payload") -> "Payload":
        assert kind in PAYLOAD_BINARY, kind
        return Payload(kind, (a, b))

    def walk(self) -> Iterator["Payload"]:
        yield self
        for a in self.args:
            yield from a.walk()

    def max_arg_index(self) -> int:
        best = -1
        for n in self.walk():
            if n.kind == "arg":
                best = max(best, n.index)
        return best

    def map_args(self, remap: dict[int, int]) -> "Payload":
        if self.kind == "arg":
            return Payload.arg(remap[self.index])
        if not self.args:
            return self
        return replace(self, args=tuple(a.map_args(remap) for a in self.args))

    def substitute_arg(self, index: int, expr: "Payload") -> "Payload":
        if self.kind == "arg":
            return expr if self.index == index else self
        if not self.args:
            return self
        return replace(self, args=tuple(a.substitute_arg(index, expr) for a in self.args))


# ---------------------------------------------------------------------------
# Maps, decls, reductions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AffineIndexMap:
    """Projection/permutation map from the iteration domain into an operand.

    results[j] names the domain dimension indexing operand dimension j, or
    None for a broadcast dimension (the operand extent there must be 1 and
    index 0 is used).
    """

    results: tuple[Optional[int], ...]

    @staticmethod
    def identity(rank: int) -> "AffineIndexMap":
        return AffineIndexMap(tuple(range(rank)))

    @property
    def rank(self) -> int:
        return len(self.results)

    def used_dims(self) -> tuple[int, ...]:
        return tuple(r for r in self.results if r is not None)


@dataclass(frozen=True, slots=True)
class Reduction:
    kind: Literal["sum", "max"]
    init: float

    @staticmethod
    def sum() -> "Reduction":
        return Reduction("sum", 0.0)

    @staticmethod
    def max() -> "Reduction":
        return Reduction("max", -math.inf)


@dataclass(frozen=True, slots=True)
class TensorDecl:
    name: str
    shape: tuple[int, ...]
    dtype: Literal["f32", "f16"] = "f32"  # f16 is a narrow-storage flag; compute is f32
    space: Literal["ddr", "tcm"] = "ddr"
    role: Literal["input", "output", "temp"] = "temp"


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenericOp:
    """Structured op: iteration domain + per-operand maps + scalar payload.

    maps has one entry per operand, inputs first then outputs. payloads has
    one entry per output; for outputs over a domain with reduction dims the
    matching `reductions` entry gives the combinator and its init value (the
    payload computes the per-point update that the combinator folds in
    ascending index order).
    """

    name: str
    domain: tuple[Extent, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    maps: tuple[AffineIndexMap, ...]
    iterators: tuple[Literal["parallel", "reduction"], ...]
    payloads: tuple[Payload, ...]
    reductions: tuple[Optional[Reduction], ...] = ()
    annotations: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.reductions:
            object.__setattr__(self, "reductions", (None,) * len(self.outputs))

    def input_maps(self) -> tuple[AffineIndexMap, ...]:
        return self.maps[: len(self.inputs)]

    def output_maps(self) -> tuple[AffineIndexMap, ...]:
        return self.maps[len(self.inputs):]

    def reduction_dims(self) -> tuple[int, ...]:
        return tuple(i for i, it in enumerate(self.iterators) if it == "reduction")

    def is_all_parallel(self) -> bool:
        return all(it == "parallel" for it in self.iterators)

    def domain_points_upper(self, ranges: dict[str, tuple[int, int]] | None = None) -> Optional[int]:
        total = 1
        for e in self.domain:
            u = extent_upper(e, ranges)
            if u is None:
                return None
            total *= u
        return total


@dataclass(frozen=True)
class ForOp:
    var: str
    lb: Extent
    ub: Extent
    step: Extent
    body: tuple["Op", ...]
    iter_args: tuple[str, ...] = ()  # accepted for structural fidelity; must stay empty
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ForallOp:
    var: str
    threads: int
    body: tuple["Op", ...]
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class IfOp:
    pred: Pred
    body: tuple["Op", ...]
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ExtractSliceOp:
    result: str
    source: str
    offsets: tuple[Extent, ...]
    sizes: tuple[Extent, ...]
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class InsertSliceOp:
    source: str
    dest: str
    offsets: tuple[Extent, ...]
    sizes: tuple[Extent, ...]
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class CopyOp:
    source: str
    dest: str
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AllocOp:
    result: str
    sizes: tuple[Extent, ...]
    space: Literal["ddr", "tcm"] = "tcm"
    narrow: bool = False
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class DeallocOp:
    target: str
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class DmaStartOp:
    """Non-blocking transfer; data becomes visible in dest only at dma_wait(tag)."""

    tag: str
    source: str
    src_offsets: tuple[Extent, ...]
    dest: str
    dst_offsets: tuple[Extent, ...]
    sizes: tuple[Extent, ...]
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class DmaWaitOp:
    tag: str
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AsyncGroupOp:
    group: str
    size: Extent
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AsyncExecuteOp:
    token: str
    body: tuple["Op", ...]
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AddToGroupOp:
    group: str
    token: str
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class AwaitAllOp:
    group: str
    annotations: frozenset[str] = frozenset()


@dataclass(frozen=True)
class StoreToggleOp:
    cell: str
    value: Optional[bool]  # None flips the current value
    annotations: frozenset[str] = frozenset()


Op = Union[
    GenericOp, ForOp, ForallOp, IfOp, ExtractSliceOp, InsertSliceOp, CopyOp,
    AllocOp, DeallocOp, DmaStartOp, DmaWaitOp, AsyncGroupOp, AsyncExecuteOp,
    AddToGroupOp, AwaitAllOp, StoreToggleOp,
]

_BODY_OPS = (ForOp, ForallOp, IfOp, AsyncExecuteOp)


@dataclass(frozen=True)
class KernelProgram:
    name: str
    decls: tuple[TensorDecl, ...]
    ops: tuple[Op, ...]
    stage: str = "initial"

    def decl(self, name: str) -> Optional[TensorDecl]:
        for d in self.decls:
            if d.name == name:
                return d
        return None

    def inputs(self) -> tuple[TensorDecl, ...]:
        return tuple(d for d in self.decls if d.role == "input")

    def outputs(self) -> tuple[TensorDecl, ...]:
        return tuple(d for d in self.decls if d.role == "output")

    def with_ops(self, ops: tuple[Op, ...], stage: Optional[str] = None) -> "KernelProgram":
        return replace(self, ops=ops, stage=stage or self.stage)


def walk_ops(ops: tuple[Op, ...], path: str = "ops") -> Iterator[tuple[Op, str]]:
    for i, op in enumerate(ops):
        where = f"{path}[{i}]"
        yield op, where
        if isinstance(op, _BODY_OPS):
            yield from walk_ops(op.body, where + ".body")


def count_ops(program: KernelProgram, predicate: Callable[[Op], bool]) -> int:
    return sum(1 for op, _ in walk_ops(program.ops) if predicate(op))


def annotation_value(annotations: frozenset[str], key: str) -> Optional[str]:
    """Value of a `key=value` annotation, or None."""
    prefix = key + "="
    for a in sorted(annotations):
        if a.startswith(prefix):
            return a[len(prefix):]
    return None


def vector_width(annotations: frozenset[str]) -> Optional[int]:
    """Width W of a `vectorized(W)` annotation, or None."""
    for a in annotations:
        if a.startswith("vectorized(") and a.endswith(")"):
            return int(a[len("vectorized("):-1])
    return None


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Violation:
    where: str
    rule: str
    message: str


@dataclass(frozen=True)
class VerifyReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "verify: ok"
        lines = [f"verify: {len(self.violations)} violation(s)"]
        lines += [f"  [{v.rule}] {v.where}: {v.message}" for v in self.violations]
        return "\n".join(lines)


class _Scope:
    """Lexical environment: buffer shapes, index vars, toggles, tokens, groups."""

    def __init__(self, parent: Optional["_Scope"] = None):
        self.parent = parent
        self.buffers: dict[str, tuple[Extent, ...]] = {}
        self.ivars: set[str] = set()
        self.spaces: dict[str, str] = {}

    def lookup(self, name: str) -> Optional[tuple[Extent, ...]]:
        s = self
        while s is not None:
            if name in s.buffers:
                return s.buffers[name]
            s = s.parent
        return None

    def space_of(self, name: str) -> Optional[str]:
        s = self
        while s is not None:
            if name in s.spaces:
                return s.spaces[name]
            s = s.parent
        return None

    def has_ivar(self, name: str) -> bool:
        s = self
        while s is not None:
            if name in s.ivars:
                return True
            s = s.parent
        return False

    def define(self, name: str, shape: tuple[Extent, ...], space: str) -> bool:
        if self.lookup(name) is not None:
            return False
        self.buffers[name] = shape
        self.spaces[name] = space
        return True


def _extent_vars(e: Extent) -> set[str]:
    if isinstance(e, int):
        return set()
    if isinstance(e, IVar):
        return {e.name}
    return _extent_vars(e.lhs) | _extent_vars(e.rhs)


class _Verifier:
    def __init__(self, program: KernelProgram, tcm_bytes: Optional[int]):
        self.program = program
        self.tcm_bytes = tcm_bytes
        self.violations: list[Violation] = []
        self.toggles: set[str] = set()
        self.live_tcm = 0
        self.max_live_tcm = 0
        self.tcm_counted: dict[str, int] = {}
        self.var_ranges: dict[str, tuple[int, int]] = {}

    def fail(self, where: str, rule: str, message: str) -> None:
        self.violations.append(Violation(where, rule, message))

    # -- helpers ------------------------------------------------------------

    def check_extents_defined(self, where: str, exts: tuple[Extent, ...], scope: _Scope) -> None:
        for e in exts:
            for v in _extent_vars(e):
                if not scope.has_ivar(v):
                    self.fail(where, "unbound-index", f"index variable %{v} not in scope")

    def static_shape(self, shape: tuple[Extent, ...]) -> Optional[tuple[int, ...]]:
        if all(isinstance(e, int) for e in shape):
            return tuple(shape)  # type: ignore[return-value]
        return None

    def buffer_bytes_upper(self, shape: tuple[Extent, ...]) -> Optional[int]:
        total = 4
        for e in shape:
            u = extent_upper(e, self.var_ranges)
            if u is None:
                return None
            total *= u
        return total

    # -- generic ------------------------------------------------------------

    def check_generic(self, op: GenericOp, where: str, scope: _Scope) -> None:
        n_operands = len(op.inputs) + len(op.outputs)
        if len(op.maps) != n_operands:
            self.fail(where, "operand/map arity",
                      f"generic @{op.name} has {n_operands} operands but {len(op.maps)} maps")
            return
        if len(op.iterators) != len(op.domain):
            self.fail(where, "iterator arity",
                      f"generic @{op.name} has {len(op.domain)} domain dims but {len(op.iterators)} iterators")
            return
        if len(op.payloads) != len(op.outputs):
            self.fail(where, "payload arity",
                      f"generic @{op.name} needs one payload per output")
            return
        if len(op.reductions) != len(op.outputs):
            self.fail(where, "reduction arity",
                      f"generic @{op.name} needs one reduction slot per output")
            return
        for e in op.domain:
            if isinstance(e, int) and e < 1:
                self.fail(where, "domain extent", f"generic @{op.name} domain extent {e} < 1")
        self.check_extents_defined(where, op.domain, scope)

        red_dims = set(op.reduction_dims())
        par_dims = [d for d in range(len(op.domain)) if d not in red_dims]
        rank = len(op.domain)

        for oi, (name, m) in enumerate(zip(op.inputs + op.outputs, op.maps)):
            shape = scope.lookup(name)
            if shape is None:
                self.fail(where, "undefined-buffer", f"generic @{op.name} references undefined %{name}")
                continue
            if name in op.inputs and name in op.outputs:
                self.fail(where, "in-place", f"generic @{op.name} uses %{name} as both input and output")
            if m.rank != len(shape):
                self.fail(where, "map rank", f"generic @{op.name} map for %{name} has rank {m.rank}, operand rank {len(shape)}")
                continue
            seen: set[int] = set()
            for j, r in enumerate(m.results):
                if r is None:
                    ext = shape[j]
                    if isinstance(ext, int) and ext != 1:
                        self.fail(where, "broadcast extent",
                                  f"generic @{op.name}: broadcast dim {j} of %{name} has extent {ext} != 1")
                    continue
                if r < 0 or r >= rank:
                    self.fail(where, "map result", f"generic @{op.name}: map result d{r} out of range")
                    continue
                if r in seen:
                    self.fail(where, "map repeat", f"generic @{op.name}: domain dim d{r} repeats in map for %{name}")
                seen.add(r)
                de = op.domain[r]
                ext = shape[j]
                if isinstance(de, int) and isinstance(ext, int) and de > ext:
                    self.fail(where, "map bounds",
                              f"generic @{op.name}: domain d{r}={de} exceeds %{name} dim {j} extent {ext}")
            is_output = oi >= len(op.inputs)
            if is_output:
                used = set(m.used_dims())
                if used & red_dims:
                    self.fail(where, "reduction escapes",
                              f"generic @{op.name}: reduction dim appears in output map of %{name}")
                missing = [d for d in par_dims if d not in used]
                if missing:
                    self.fail(where, "output coverage",
                              f"generic @{op.name}: parallel dims {missing} missing from output map of %{name}")

        for pi, (payload, red) in enumerate(zip(op.payloads, op.reductions)):
            if payload.max_arg_index() >= len(op.inputs):
                self.fail(where, "payload args",
                          f"generic @{op.name}: payload {pi} references arg{payload.max_arg_index()}, "
                          f"only {len(op.inputs)} inputs")
            if red_dims and red is None:
                self.fail(where, "missing combinator",
                          f"generic @{op.name}: reduction domain but output {pi} has no combinator")
            if not red_dims and red is not None:
                self.fail(where, "spurious combinator",
                          f"generic @{op.name}: combinator on all-parallel output {pi}")

    # -- structured ops -----------------------------------------------------

    def check_slice(self, where: str, source: str, offsets, sizes, scope: _Scope) -> None:
        shape = scope.lookup(source)
        if shape is None:
            self.fail(where, "undefined-buffer", f"slice references undefined %{source}")
            return
        if len(offsets) != len(shape) or len(sizes) != len(shape):
            self.fail(where, "slice rank", f"slice of %{source}: rank mismatch")
            return
        self.check_extents_defined(where, tuple(offsets) + tuple(sizes), scope)
        for j, (o, s, ext) in enumerate(zip(offsets, sizes, shape)):
            ob = extent_bounds(o, self.var_ranges)
            sb = extent_bounds(s, self.var_ranges)
            eb = extent_bounds(ext, self.var_ranges)
            # report only definite overflow: even the smallest corner is out
            if ob and sb and eb and ob[0] + sb[0] > eb[1]:
                self.fail(where, "slice bounds",
                          f"slice of %{source} dim {j}: offset+size exceeds extent")
            if isinstance(s, int) and s < 1:
                self.fail(where, "slice size", f"slice of %{source} dim {j}: size {s} < 1")

    def walk_block(self, ops: tuple[Op, ...], scope: _Scope, path: str) -> None:
        allocs_here: dict[str, str] = {}
        deallocs_here: set[str] = set()
        tokens_pending: Optional[str] = None
        groups_here: dict[str, int] = {}

        for i, op in enumerate(ops):
            where = f"{path}[{i}]"
            if tokens_pending is not None and not isinstance(op, AddToGroupOp):
                self.fail(where, "token discipline",
                          f"token %{tokens_pending} not added to a group immediately")
                tokens_pending = None

            if isinstance(op, GenericOp):
                self.check_generic(op, where, scope)
            elif isinstance(op, ForOp):
                if op.iter_args:
                    self.fail(where, "iter-args", "non-empty iter_args unsupported")
                self.check_extents_defined(where, (op.lb, op.ub, op.step), scope)
                child = _Scope(scope)
                child.ivars.add(op.var)
                lb = extent_bounds(op.lb, self.var_ranges)
                ub = extent_bounds(op.ub, self.var_ranges)
                saved = self.var_ranges.get(op.var)
                if lb and ub:
                    self.var_ranges[op.var] = (lb[0], max(lb[0], ub[1] - 1))
                self.walk_block(op.body, child, where + ".body")
                if saved is not None:
                    self.var_ranges[op.var] = saved
                else:
                    self.var_ranges.pop(op.var, None)
            elif isinstance(op, ForallOp):
                if op.threads < 1:
                    self.fail(where, "thread count", f"forall threads {op.threads} < 1")
                child = _Scope(scope)
                child.ivars.add(op.var)
                saved = self.var_ranges.get(op.var)
                self.var_ranges[op.var] = (0, op.threads - 1)
                self.walk_block(op.body, child, where + ".body")
                if saved is not None:
                    self.var_ranges[op.var] = saved
                else:
                    self.var_ranges.pop(op.var, None)
            elif isinstance(op, IfOp):
                if isinstance(op.pred, CmpPred):
                    self.check_extents_defined(where, (op.pred.lhs, op.pred.rhs), scope)
                elif isinstance(op.pred, TogglePred) and op.pred.cell not in self.toggles:
                    self.fail(where, "toggle before store", f"toggle %{op.pred.cell} read before any store")
                self.walk_block(op.body, _Scope(scope), where + ".body")
            elif isinstance(op, AsyncExecuteOp):
                self.walk_block(op.body, _Scope(scope), where + ".body")
                tokens_pending = op.token
            elif isinstance(op, ExtractSliceOp):
                self.check_slice(where, op.source, op.offsets, op.sizes, scope)
                space = scope.space_of(op.source) or "ddr"
                if not scope.define(op.result, tuple(op.sizes), space):
                    self.fail(where, "redefinition", f"%{op.result} already defined")
            elif isinstance(op, InsertSliceOp):
                if scope.lookup(op.source) is None:
                    self.fail(where, "undefined-buffer", f"insert_slice source %{op.source} undefined")
                self.check_slice(where, op.dest, op.offsets, op.sizes, scope)
            elif isinstance(op, CopyOp):
                for n in (op.source, op.dest):
                    if scope.lookup(n) is None:
                        self.fail(where, "undefined-buffer", f"copy references undefined %{n}")
                src, dst = scope.lookup(op.source), scope.lookup(op.dest)
                if src and dst:
                    ss, ds = self.static_shape(src), self.static_shape(dst)
                    if ss and ds and ss != ds:
                        self.fail(where, "copy shape", f"copy %{op.source}->%{op.dest}: {ss} vs {ds}")
            elif isinstance(op, AllocOp):
                self.check_extents_defined(where, op.sizes, scope)
                if not scope.define(op.result, tuple(op.sizes), op.space):
                    self.fail(where, "redefinition", f"%{op.result} already defined")
                allocs_here[op.result] = where
                if op.space == "tcm":
                    b = self.buffer_bytes_upper(op.sizes)
                    if b is not None:
                        if op.narrow:
                            b //= 2
                        self.tcm_counted[op.result] = b
                        self.live_tcm += b
                        self.max_live_tcm = max(self.max_live_tcm, self.live_tcm)
            elif isinstance(op, DeallocOp):
                if op.target not in allocs_here:
                    self.fail(where, "dealloc pairing",
                              f"dealloc %{op.target} without alloc in the same block")
                elif op.target in deallocs_here:
                    self.fail(where, "double dealloc", f"%{op.target} deallocated twice")
                else:
                    deallocs_here.add(op.target)
                    self.live_tcm -= self.tcm_counted.pop(op.target, 0)
            elif isinstance(op, DmaStartOp):
                for n in (op.source, op.dest):
                    if scope.lookup(n) is None:
                        self.fail(where, "undefined-buffer", f"dma_start references undefined %{n}")
                if scope.lookup(op.tag) is None:
                    self.fail(where, "undefined-buffer", f"dma tag %{op.tag} undefined")
            elif isinstance(op, DmaWaitOp):
                if scope.lookup(op.tag) is None:
                    self.fail(where, "undefined-buffer", f"dma tag %{op.tag} undefined")
            elif isinstance(op, AsyncGroupOp):
                groups_here[op.group] = 0
            elif isinstance(op, AddToGroupOp):
                if tokens_pending != op.token:
                    self.fail(where, "token discipline",
                              f"add_to_group of %{op.token} does not follow its async_execute")
                tokens_pending = None
            elif isinstance(op, AwaitAllOp):
                if op.group in groups_here:
                    groups_here[op.group] += 1
                else:
                    self.fail(where, "group scope", f"await_all on %{op.group}: group not created in this block")
            elif isinstance(op, StoreToggleOp):
                if op.value is None and op.cell not in self.toggles:
                    self.fail(where, "toggle before store", f"toggle %{op.cell} flipped before any store")
                self.toggles.add(op.cell)

        if tokens_pending is not None:
            self.fail(path, "token discipline", f"token %{tokens_pending} never added to a group")
        for name, w in allocs_here.items():
            if name not in deallocs_here:
                self.fail(w, "alloc pairing", f"alloc %{name} has no dealloc in its block")
        for g, awaited in groups_here.items():
            if awaited != 1:
                self.fail(path, "group discipline", f"group %{g} awaited {awaited} times (want 1)")

    def run(self) -> VerifyReport:
        scope = _Scope()
        seen: set[str] = set()
        for d in self.program.decls:
            if d.name in seen:
                self.fail("decls", "duplicate decl", f"tensor %{d.name} declared twice")
            seen.add(d.name)
            if not d.shape or any(e < 1 for e in d.shape):
                self.fail("decls", "decl shape", f"tensor %{d.name} has invalid shape {d.shape}")
            scope.define(d.name, d.shape, d.space)
            if d.space == "tcm":
                b = self.buffer_bytes_upper(d.shape)
                if b is not None:
                    self.live_tcm += b
                    self.max_live_tcm = max(self.max_live_tcm, self.live_tcm)
        self.walk_block(self.program.ops, scope, "ops")
        if self.tcm_bytes is not None and self.max_live_tcm > self.tcm_bytes:
            self.fail("program", "tcm budget",
                      f"peak live TCM {self.max_live_tcm} bytes exceeds budget {self.tcm_bytes}")
        return VerifyReport(tuple(self.violations))


def verify(program: KernelProgram, *, tcm_bytes: Optional[int] = None) -> VerifyReport:
    """Structural verification; violations are data, not exceptions."""
    return _Verifier(program, tcm_bytes).run()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def fmt_f32(v: float) -> str:
    f = np.float32(v)
    if np.isinf(f):
        return "inf" if f > 0 else "-inf"
    if np.isnan(f):
        return "nan"
    return np.format_float_positional(f, unique=True, trim="0")


def print_extent(e: Extent) -> str:
    if isinstance(e, int):
        return str(e)
    if isinstance(e, IVar):
        return "%" + e.name
    l, r = print_extent(e.lhs), print_extent(e.rhs)
    if e.op in ("min", "max"):
        return f"{e.op}({l}, {r})"
    sym = {"add": "+", "sub": "-", "mul": "*", "floordiv": "//"}[e.op]
    return f"({l} {sym} {r})"


def print_pred(p: Pred) -> str:
    if isinstance(p, CmpPred):
        sym = {"lt": "<", "le": "<=", "eq": "==", "ne": "!=", "gt": ">", "ge": ">="}[p.op]
        return f"{print_extent(p.lhs)} {sym} {print_extent(p.rhs)}"
    want = "ping" if p.value else "pong"
    return f"load_toggle %{p.cell} == {want}"


def print_payload(p: Payload) -> str:
    if p.kind == "arg":
        return f"a{p.index}"
    if p.kind == "const":
        return fmt_f32(p.value)
    inner = ", ".join(print_payload(a) for a in p.args)
    if p.param is not None:
        return f"{p.kind}[{p.param}]({inner})"
    return f"{p.kind}({inner})"


def _print_map(m: AffineIndexMap) -> str:
    return "(" + ", ".join("_" if r is None else f"d{r}" for r in m.results) + ")"


def _ann(annotations: frozenset[str]) -> str:
    if not annotations:
        return ""
    return " {" + ", ".join(sorted(annotations)) + "}"


def _exts(es) -> str:
    return "[" + ", ".join(print_extent(e) for e in es) + "]"


def _print_op(op: Op, out: list[str], indent: int) -> None:
    pad = "  " * indent
    if isinstance(op, GenericOp):
        head = (f"{pad}generic @{op.name} domain={_exts(op.domain)} "
                f"iters=[{', '.join(op.iterators)}]{_ann(op.annotations)}")
        out.append(head)
        ins = " ".join(f"%{n}: {_print_map(m)}" for n, m in zip(op.inputs, op.input_maps()))
        outs = " ".join(f"%{n}: {_print_map(m)}" for n, m in zip(op.outputs, op.output_maps()))
        out.append(f"{pad}    ins({ins}) outs({outs})")
        for payload, red in zip(op.payloads, op.reductions):
            if red is None:
                out.append(f"{pad}    yield {print_payload(payload)}")
            else:
                out.append(f"{pad}    reduce {red.kind} init={fmt_f32(red.init)} of {print_payload(payload)}")
    elif isinstance(op, ForOp):
        out.append(f"{pad}for %{op.var} = {print_extent(op.lb)} to {print_extent(op.ub)} "
                   f"step {print_extent(op.step)}{_ann(op.annotations)} {{")
        for o in op.body:
            _print_op(o, out, indent + 1)
        out.append(pad + "}")
    elif isinstance(op, ForallOp):
        out.append(f"{pad}forall %{op.var} in {op.threads}{_ann(op.annotations)} {{")
        for o in op.body:
            _print_op(o, out, indent + 1)
        out.append(pad + "}")
    elif isinstance(op, IfOp):
        out.append(f"{pad}if ({print_pred(op.pred)}){_ann(op.annotations)} {{")
        for o in op.body:
            _print_op(o, out, indent + 1)
        out.append(pad + "}")
    elif isinstance(op, ExtractSliceOp):
        out.append(f"{pad}%{op.result} = extract_slice %{op.source}{_exts(op.offsets)}{_exts(op.sizes)}"
                   f"{_ann(op.annotations)}")
    elif isinstance(op, InsertSliceOp):
        out.append(f"{pad}insert_slice %{op.source} -> %{op.dest}{_exts(op.offsets)}{_exts(op.sizes)}"
                   f"{_ann(op.annotations)}")
    elif isinstance(op, CopyOp):
        out.append(f"{pad}copy %{op.source} -> %{op.dest}{_ann(op.annotations)}")
    elif isinstance(op, AllocOp):
        narrow = " narrow" if op.narrow else ""
        out.append(f"{pad}%{op.result} = alloc f32{_exts(op.sizes)} @{op.space}{narrow}{_ann(op.annotations)}")
    elif isinstance(op, DeallocOp):
        out.append(f"{pad}dealloc %{op.target}{_ann(op.annotations)}")
    elif isinstance(op, DmaStartOp):
        out.append(f"{pad}dma_start tag=%{op.tag} %{op.source}{_exts(op.src_offsets)} -> "
                   f"%{op.dest}{_exts(op.dst_offsets)} sizes={_exts(op.sizes)}{_ann(op.annotations)}")
    elif isinstance(op, DmaWaitOp):
        out.append(f"{pad}dma_wait tag=%{op.tag}{_ann(op.annotations)}")
    elif isinstance(op, AsyncGroupOp):
        out.append(f"{pad}%{op.group} = async_group size={print_extent(op.size)}{_ann(op.annotations)}")
    elif isinstance(op, AsyncExecuteOp):
        out.append(f"{pad}%{op.token} = async_execute{_ann(op.annotations)} {{")
        for o in op.body:
            _print_op(o, out, indent + 1)
        out.append(pad + "}")
    elif isinstance(op, AddToGroupOp):
        out.append(f"{pad}add_to_group %{op.group}, %{op.token}{_ann(op.annotations)}")
    elif isinstance(op, AwaitAllOp):
        out.append(f"{pad}await_all %{op.group}{_ann(op.annotations)}")
    elif isinstance(op, StoreToggleOp):
        val = "flip" if op.value is None else ("ping" if op.value else "pong")
        out.append(f"{pad}store_toggle %{op.cell} = {val}{_ann(op.annotations)}")
    else:  # pragma: no cover
        raise TypeError(f"unknown op {type(op)}")


def print_ir(program: KernelProgram) -> str:
    """Deterministic textual dump; byte-identical for equal programs."""
    out = [f"program @{program.name} stage={program.stage} {{"]
    for d in program.decls:
        dims = "x".join(str(e) for e in d.shape)
        out.append(f"  tensor %{d.name}: {d.dtype}[{dims}] @{d.space} role={d.role}")
    for op in program.ops:
        _print_op(op, out, 1)
    out.append("}")
    return "\n".join(out) + "\n"
