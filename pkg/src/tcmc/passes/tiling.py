"""Tiling for the DDR/TCM memory hierarchy, plus innermost vectorization.

Tiling rewrites each top-level generic with parallel dims into a loop nest
over tiles: extract a slice of every operand, stage inputs into TCM through
an alloc+copy triplet, compute on the TCM tiles, and write results back with
insert_slice. Remainder tiles clamp to min(t, extent - offset). Reduction
dims are never tiled, which keeps the fp accumulation order of every
reduction intact (the bit-exactness contract).

Vectorization marks generics whose innermost dim is parallel with
`vectorized(W)`. When W does not divide the innermost extent the generic is
restructured into a width-multiple main part plus a scalar epilogue so the
annotation never lies about full groups; per-element evaluation order is
unchanged either way.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .. import ir
from ..ir import (
    AffineIndexMap, AllocOp, CopyOp, DeallocOp, Extent, ExtractSliceOp, ForOp,
    GenericOp, IfOp, InsertSliceOp, IVar, KernelProgram, Op, CmpPred,
    ix_add, ix_floordiv, ix_min, ix_mul, ix_sub,
)
from .common import NameAllocator, PassError


@dataclass(frozen=True)
class TileSpec:
    """Per-dimension tile sizes (0 = keep whole); reduction dims must be 0."""

    sizes: tuple[int, ...]
    interchange: Optional[tuple[int, ...]] = None
    target_space: str = "tcm"


def _elem_bytes(dtype: str) -> int:
    return 2 if dtype == "f16" else 4


def default_tile_sizes(generic: GenericOp, program: KernelProgram, tcm_bytes: int) -> Optional[TileSpec]:
    """Largest power-of-two tile of the outermost parallel dim such that a
    ping+pong pair of all operand tiles fits in half the TCM."""
    par = [d for d, it in enumerate(generic.iterators) if it == "parallel"]
    if not par:
        return None
    dim = par[0]
    extent = generic.domain[dim]
    assert isinstance(extent, int)
    fixed = 0
    per_t = 0
    for name, m in zip(generic.inputs + generic.outputs, generic.maps):
        decl = program.decl(name)
        eb = _elem_bytes(decl.dtype) if decl else 4
        other = eb
        tiled = False
        for j, r in enumerate(m.results):
            ext = decl.shape[j] if decl else 1
            if r == dim:
                tiled = True
            else:
                other *= ext
        if tiled:
            per_t += other
        else:
            fixed += other
    budget = tcm_bytes // 4 - fixed
    if per_t == 0:
        return None
    t_max = budget // per_t
    if t_max < 1:
        raise PassError(
            f"@{generic.name}: no tile of dim d{dim} fits the TCM budget ({tcm_bytes} bytes)")
    t = 1
    while t * 2 <= t_max:
        t *= 2
    t = min(t, extent)
    sizes = [0] * len(generic.domain)
    sizes[dim] = t
    return TileSpec(tuple(sizes))


def _tile_one(generic: GenericOp, spec: TileSpec, program: KernelProgram,
              names: NameAllocator, tcm_bytes: Optional[int]) -> Op:
    rank = len(generic.domain)
    if len(spec.sizes) != rank:
        raise PassError(f"@{generic.name}: tile spec rank {len(spec.sizes)} != domain rank {rank}")
    tiled_dims = [d for d, t in enumerate(spec.sizes) if t > 0]
    for d in tiled_dims:
        if generic.iterators[d] == "reduction":
            raise PassError(f"@{generic.name}: cannot tile reduction dim d{d}")
        if not isinstance(generic.domain[d], int):
            raise PassError(f"@{generic.name}: dynamic extent cannot be tiled")
    if not tiled_dims:
        raise PassError(f"@{generic.name}: tile spec selects no dims")

    loop_vars = {d: names.fresh("i") for d in tiled_dims}
    tile_size = {d: ix_min(spec.sizes[d], ix_sub(generic.domain[d], IVar(loop_vars[d])))
                 for d in tiled_dims}

    def slice_of(decl_shape, m: AffineIndexMap):
        offsets, sizes = [], []
        for j, r in enumerate(m.results):
            if r in loop_vars:
                offsets.append(IVar(loop_vars[r]))
                sizes.append(tile_size[r])
            elif r is None:
                offsets.append(0)
                sizes.append(1)
            else:
                offsets.append(0)
                sizes.append(decl_shape[j])
        return tuple(offsets), tuple(sizes)

    body: list[Op] = []
    live_tile_bytes = 0
    new_inputs: list[str] = []
    deallocs: list[Op] = []
    for name, m in zip(generic.inputs, generic.input_maps()):
        decl = program.decl(name)
        shape = decl.shape if decl else ()
        offsets, sizes = slice_of(shape, m)
        view = names.fresh("s")
        tile = names.fresh("t")
        narrow = bool(decl and decl.dtype == "f16")
        body.append(ExtractSliceOp(view, name, offsets, sizes))
        body.append(AllocOp(tile, sizes, spec.target_space, narrow=narrow))
        body.append(CopyOp(view, tile))
        deallocs.append(DeallocOp(tile))
        new_inputs.append(tile)
        b = _tile_set_bytes(sizes, narrow)
        if b is not None:
            live_tile_bytes += b

    inner_domain = tuple(tile_size.get(d, generic.domain[d]) for d in range(rank))
    new_outputs: list[str] = []
    writebacks: list[Op] = []
    for name, m in zip(generic.outputs, generic.output_maps()):
        decl = program.decl(name)
        shape = decl.shape if decl else ()
        offsets, sizes = slice_of(shape, m)
        otile = names.fresh("o")
        narrow = bool(decl and decl.dtype == "f16")
        body.append(AllocOp(otile, sizes, spec.target_space, narrow=narrow))
        writebacks.append(InsertSliceOp(otile, name, offsets, sizes))
        deallocs.append(DeallocOp(otile))
        new_outputs.append(otile)
        b = _tile_set_bytes(sizes, narrow)
        if b is not None:
            live_tile_bytes += b

    if tcm_bytes is not None and live_tile_bytes > tcm_bytes:
        raise PassError(
            f"@{generic.name}: live tile set of {live_tile_bytes} bytes exceeds "
            f"TCM budget {tcm_bytes}")

    inner = replace(generic, domain=inner_domain, inputs=tuple(new_inputs),
                    outputs=tuple(new_outputs))
    body.append(inner)
    body.extend(writebacks)
    body.extend(deallocs)

    order = list(tiled_dims)
    if spec.interchange is not None:
        if sorted(spec.interchange) != list(range(len(tiled_dims))):
            raise PassError(f"@{generic.name}: interchange must permute the {len(tiled_dims)} tiled dims")
        order = [tiled_dims[k] for k in spec.interchange]

    annotations = frozenset({"tiled_generic", "all_parallel"})
    loop: Op = None
    inner_ops = tuple(body)
    for d in reversed(order):
        loop = ForOp(loop_vars[d], 0, generic.domain[d], spec.sizes[d], inner_ops,
                     annotations=annotations)
        inner_ops = (loop,)
    return loop


def _tile_set_bytes(sizes, narrow: bool) -> Optional[int]:
    total = 2 if narrow else 4
    for s in sizes:
        u = _const_upper(s)
        if u is None:
            return None
        total *= u
    return total


def _const_upper(e: Extent) -> Optional[int]:
    if isinstance(e, int):
        return e
    if isinstance(e, ir.IBin) and e.op == "min":
        lo = _const_upper(e.lhs)
        hi = _const_upper(e.rhs)
        cands = [c for c in (lo, hi) if c is not None]
        return min(cands) if cands else None
    return None


def tile_generic(
    program: KernelProgram,
    tile_sizes: Optional[tuple[int, ...]] = None,
    interchange: Optional[tuple[int, ...]] = None,
    tcm_bytes: int = 8 * 1024 * 1024,
) -> KernelProgram:
    """Tile every top-level generic with parallel dims over DDR -> TCM tiles.

    `tile_sizes` applies to generics whose rank matches its length; all other
    generics fall back to the default sizing policy. Generics with no
    parallel dims are left untouched.
    """
    names = NameAllocator(program)
    new_ops: list[Op] = []
    for op in program.ops:
        if not isinstance(op, GenericOp):
            new_ops.append(op)
            continue
        spec: Optional[TileSpec] = None
        if tile_sizes is not None and len(tile_sizes) == len(op.domain):
            sizes = list(tile_sizes)
            for d, t in enumerate(sizes):
                if t > 0 and op.iterators[d] == "reduction":
                    raise PassError(f"@{op.name}: cannot tile reduction dim d{d}")
                if t < 0:
                    raise PassError(f"@{op.name}: negative tile size")
            if any(t > 0 for t in sizes):
                spec = TileSpec(tuple(sizes), interchange)
        if spec is None:
            spec = default_tile_sizes(op, program, tcm_bytes)
            if spec is not None and interchange is not None and len(
                    [t for t in spec.sizes if t > 0]) == len(interchange):
                spec = replace(spec, interchange=interchange)
        if spec is None:
            new_ops.append(op)
            continue
        new_ops.append(_tile_one(op, spec, program, names, tcm_bytes))
    return program.with_ops(tuple(new_ops), stage="tiled")


# ---------------------------------------------------------------------------
# Vectorization
# ---------------------------------------------------------------------------


class _BufInfo:
    def __init__(self, program: KernelProgram):
        self.shapes: dict[str, tuple[Extent, ...]] = {d.name: d.shape for d in program.decls}
        self.spaces: dict[str, str] = {d.name: d.space for d in program.decls}

    def learn(self, op: Op) -> None:
        if isinstance(op, AllocOp):
            self.shapes[op.result] = op.sizes
            self.spaces[op.result] = op.space
        elif isinstance(op, ExtractSliceOp):
            self.shapes[op.result] = op.sizes
            self.spaces[op.result] = self.spaces.get(op.source, "ddr")


def _vectorize_generic(g: GenericOp, width: int, names: NameAllocator,
                       info: _BufInfo, div_vars: frozenset[str]) -> tuple[Op, ...]:
    last = len(g.domain) - 1
    if g.iterators[last] != "parallel":
        return (g,)
    if ir.vector_width(g.annotations) is not None:
        return (g,)
    n = g.domain[last]
    if width == 1 or ir.extent_divisible(n, width, div_vars):
        return (replace(g, annotations=g.annotations | {f"vectorized({width})"}),)

    main = ix_mul(ix_floordiv(n, width), width)
    rem = ix_sub(n, main)

    def part(offset: Extent, size: Extent, tag: str) -> list[Op]:
        ops: list[Op] = []
        sub_inputs, sub_outputs = [], []
        inserts: list[Op] = []
        deallocs: list[Op] = []
        for name, m in zip(g.inputs, g.input_maps()):
            if last in m.used_dims():
                shape = info.shapes.get(name, ())
                offs = [0] * len(shape)
                szs = list(shape)
                j = m.results.index(last)
                offs[j] = offset
                szs[j] = size
                view = names.fresh("v")
                ops.append(ExtractSliceOp(view, name, tuple(offs), tuple(szs)))
                info.shapes[view] = tuple(szs)
                info.spaces[view] = info.spaces.get(name, "ddr")
                sub_inputs.append(view)
            else:
                sub_inputs.append(name)
        for name, m in zip(g.outputs, g.output_maps()):
            shape = info.shapes.get(name, ())
            offs = [0] * len(shape)
            szs = list(shape)
            j = m.results.index(last)
            offs[j] = offset
            szs[j] = size
            space = info.spaces.get(name, "ddr")
            sub = names.fresh("w")
            ops.append(AllocOp(sub, tuple(szs), space))
            info.shapes[sub] = tuple(szs)
            info.spaces[sub] = space
            inserts.append(InsertSliceOp(sub, name, tuple(offs), tuple(szs)))
            deallocs.append(DeallocOp(sub))
            sub_outputs.append(sub)
        dom = g.domain[:last] + (size,)
        ann = g.annotations | ({f"vectorized({width})"} if tag == "main" else {"vec_epilogue"})
        ops.append(replace(g, name=f"{g.name}_{tag}", domain=dom,
                           inputs=tuple(sub_inputs), outputs=tuple(sub_outputs),
                           annotations=ann))
        ops.extend(inserts)
        ops.extend(deallocs)
        return ops

    out: list[Op] = []
    if isinstance(main, int):
        if main > 0:
            out.extend(part(0, main, "main"))
        if isinstance(rem, int) and rem > 0:
            out.extend(part(main, rem, "epi"))
    else:
        out.append(IfOp(CmpPred("lt", 0, main), tuple(part(0, main, "main"))))
        out.append(IfOp(CmpPred("lt", main, n), tuple(part(main, rem, "epi"))))
    return tuple(out)


def _vectorize_block(ops: tuple[Op, ...], width: int, names: NameAllocator,
                     info: _BufInfo, div_vars: frozenset[str]) -> tuple[Op, ...]:
    out: list[Op] = []
    for op in ops:
        if isinstance(op, GenericOp):
            out.extend(_vectorize_generic(op, width, names, info, div_vars))
            continue
        info.learn(op)
        if isinstance(op, ForOp):
            child_div = div_vars
            if (ir.extent_divisible(op.lb, width, div_vars)
                    and ir.extent_divisible(op.step, width, div_vars)):
                child_div = div_vars | {op.var}
            out.append(replace(op, body=_vectorize_block(op.body, width, names, info, child_div)))
        elif isinstance(op, (ir.ForallOp, IfOp, ir.AsyncExecuteOp)):
            out.append(replace(op, body=_vectorize_block(op.body, width, names, info, div_vars)))
        else:
            out.append(op)
    return tuple(out)


def vectorize_innermost(program: KernelProgram, width: int) -> KernelProgram:
    """Mark or restructure generics for W-wide execution of the innermost dim.

    Generics whose innermost dim is a reduction are skipped. The cost model
    reads the `vectorized(W)` annotation to scale compute throughput.
    """
    if width < 1:
        raise PassError(f"vector width must be >= 1, got {width}")
    names = NameAllocator(program)
    info = _BufInfo(program)
    ops = _vectorize_block(program.ops, width, names, info, frozenset())
    return program.with_ops(ops, stage="vectorized")
