"""Analytic cycle cost model over staged programs.

The simulator walks a program's schedule concretely (loops iterate, guards
evaluate, toggles flip) but accounts time analytically instead of emulating
instructions:

- data movement (copy / insert_slice across memory spaces, dma_start) costs
  latency + bytes/bandwidth; dma_wait itself is free;
- a generic costs points * payload-cycles, divided by W for `vectorized(W)`
  regions (doubled again for narrow/f16 data), and multiplied by the window
  miss factor when its operand footprint exceeds the per-context data window
  (the model of the single-thread locality cliff: splitting work across
  contexts shrinks per-context footprints);
- async bodies are packed greedily onto num_hvx_contexts contexts, each
  async_execute charges spawn cycles and await_all a barrier;
- a double-buffered loop overlaps its prologue+prefetch transfers with its
  compute: loop time = max(prefetch transfer, compute side) + serial stores.
  Everything else serializes.

The report decomposes total cycles into compute, transfer, and overhead;
overlapped_cycles is the concurrency saving compute + transfer + overhead
- total, and m = transfer / (transfer + compute).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from . import ir
from .ir import (
    AllocOp, AsyncExecuteOp, AsyncGroupOp, AddToGroupOp, AwaitAllOp, CopyOp,
    DeallocOp, DmaStartOp, DmaWaitOp, ExtractSliceOp, ForallOp, ForOp,
    GenericOp, IfOp, InsertSliceOp, KernelProgram, Op, StoreToggleOp,
)

DEFAULT_OP_CYCLES: dict[str, float] = {
    "arg": 0.0, "const": 0.0,
    "add": 1.0, "sub": 1.0, "mul": 1.0, "neg": 1.0, "max2": 1.0,
    "div": 4.0,
    "exp": 12.0, "tanh": 12.0, "sqrt": 6.0, "rsqrt": 6.0,
    "exp_approx": 6.0, "tanh_approx": 8.0, "rsqrt_fast": 3.0,
}


@dataclass
class MachineConfig:
    dma_bandwidth_bytes_per_cycle: float = 64.0
    dma_latency_cycles: float = 512.0
    num_hvx_contexts: int = 4
    thread_spawn_cycles: float = 1750.0
    barrier_cycles: float = 1500.0
    tcm_bytes: int = 8 * 1024 * 1024
    compute_window_bytes: int = 131072
    window_miss_factor: float = 3.0
    scalar_op_cycles: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_OP_CYCLES))

    def __post_init__(self):
        if self.dma_bandwidth_bytes_per_cycle <= 0 or self.num_hvx_contexts < 1:
            raise ValueError("MachineConfig: bandwidth and contexts must be positive")
        if min(self.dma_latency_cycles, self.thread_spawn_cycles, self.barrier_cycles) < 0:
            raise ValueError("MachineConfig: negative overhead cycles")
        if self.tcm_bytes < 1 or self.compute_window_bytes < 1 or self.window_miss_factor < 1:
            raise ValueError("MachineConfig: capacities and miss factor must be >= 1")

    def op_cost(self, kind: str) -> float:
        return self.scalar_op_cycles.get(kind, 1.0)

    def to_text(self) -> str:
        lines = [
            f"dma_bandwidth_bytes_per_cycle = {self.dma_bandwidth_bytes_per_cycle:g}",
            f"dma_latency_cycles = {self.dma_latency_cycles:g}",
            f"num_hvx_contexts = {self.num_hvx_contexts}",
            f"thread_spawn_cycles = {self.thread_spawn_cycles:g}",
            f"barrier_cycles = {self.barrier_cycles:g}",
            f"tcm_bytes = {self.tcm_bytes}",
            f"compute_window_bytes = {self.compute_window_bytes}",
            f"window_miss_factor = {self.window_miss_factor:g}",
        ]
        for k in sorted(self.scalar_op_cycles):
            lines.append(f"op.{k} = {self.scalar_op_cycles[k]:g}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "MachineConfig":
        cfg = MachineConfig()
        ops = dict(DEFAULT_OP_CYCLES)
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"machine config line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key.startswith("op."):
                ops[key[3:]] = float(val)
            elif key in ("num_hvx_contexts", "tcm_bytes", "compute_window_bytes"):
                setattr(cfg, key, int(val))
            elif hasattr(cfg, key):
                setattr(cfg, key, float(val))
            else:
                raise ValueError(f"machine config line {lineno}: unknown key {key!r}")
        cfg.scalar_op_cycles = ops
        cfg.__post_init__()
        return cfg


@dataclass(frozen=True)
class TimingReport:
    total_cycles: float
    compute_cycles: float
    transfer_cycles: float
    overlapped_cycles: float
    overhead_cycles: float

    @property
    def memory_fraction(self) -> float:
        denom = self.transfer_cycles + self.compute_cycles
        return self.transfer_cycles / denom if denom > 0 else 0.0


def ideal_overlap_speedup(m: float) -> float:
    """Perfect-overlap double-buffering speedup: 1 / max(m, 1 - m)."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"memory fraction m={m} outside [0, 1]")
    return 1.0 / max(m, 1.0 - m)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


class _Buf:
    __slots__ = ("shape", "space", "narrow")

    def __init__(self, shape, space, narrow=False):
        self.shape = shape
        self.space = space
        self.narrow = narrow

    @property
    def bytes(self) -> float:
        b = 2 if self.narrow else 4
        return float(math.prod(self.shape) * b)


@dataclass
class _Acc:
    time: float = 0.0
    compute: float = 0.0
    transfer: float = 0.0
    overhead: float = 0.0
    prefetch: float = 0.0  # transfer pooled for overlap inside a db loop

    def add(self, other: "_Acc") -> None:
        self.time += other.time
        self.compute += other.compute
        self.transfer += other.transfer
        self.overhead += other.overhead
        self.prefetch += other.prefetch


class _Group:
    __slots__ = ("bodies",)

    def __init__(self):
        self.bodies: list[_Acc] = []


class SimulationError(Exception):
    pass


class _Sim:
    def __init__(self, program: KernelProgram, config: MachineConfig):
        self.program = program
        self.cfg = config
        self.toggles: dict[str, bool] = {}
        self.groups: dict[str, _Group] = {}
        self.pending_token: dict[str, _Acc] = {}
        self.prologue_pool: dict[str, float] = {}

    # -- environment -------------------------------------------------------

    def transfer_cost(self, bytes_: float) -> float:
        return self.cfg.dma_latency_cycles + bytes_ / self.cfg.dma_bandwidth_bytes_per_cycle

    def slice_bytes(self, sizes, env, narrow: bool) -> float:
        n = 1
        for s in sizes:
            n *= ir.eval_extent(s, env)
        return float(n * (2 if narrow else 4))

    def generic_cost(self, op: GenericOp, env, buffers) -> float:
        points = 1
        for e in op.domain:
            points *= ir.eval_extent(e, env)
        cost = 0.0
        for payload, red in zip(op.payloads, op.reductions):
            for node in payload.walk():
                cost += self.cfg.op_cost(node.kind)
            if red is not None:
                cost += self.cfg.op_cost("add" if red.kind == "sum" else "max2")
        width = ir.vector_width(op.annotations) or 1
        narrow = any(buffers[n].narrow for n in op.inputs + op.outputs if n in buffers)
        if narrow:
            width *= 2
        footprint = sum(buffers[n].bytes for n in op.inputs + op.outputs if n in buffers)
        factor = self.cfg.window_miss_factor if footprint > self.cfg.compute_window_bytes else 1.0
        return points * cost * factor / width

    # -- walk ----------------------------------------------------------------

    def run(self) -> TimingReport:
        buffers = {d.name: _Buf(d.shape, d.space, d.dtype == "f16") for d in self.program.decls}
        acc = self.walk_block(self.program.ops, {}, buffers, in_prefetch=False)
        total = acc.time
        overlapped = acc.compute + acc.transfer + acc.overhead - total
        return TimingReport(total, acc.compute, acc.transfer, overlapped, acc.overhead)

    def walk_block(self, ops, env, buffers, in_prefetch: bool) -> _Acc:
        acc = _Acc()
        for op in ops:
            self.walk_op(op, env, buffers, acc, in_prefetch)
        return acc

    def _move(self, acc: _Acc, bytes_: float, in_prefetch: bool) -> None:
        c = self.transfer_cost(bytes_)
        acc.transfer += c
        if in_prefetch:
            acc.prefetch += c
        else:
            acc.time += c

    def walk_op(self, op: Op, env, buffers, acc: _Acc, in_prefetch: bool) -> None:
        cfg = self.cfg
        if isinstance(op, GenericOp):
            c = self.generic_cost(op, env, buffers)
            acc.compute += c
            acc.time += c
        elif isinstance(op, ForOp):
            gid = ir.annotation_value(op.annotations, "db_generic")
            lb = ir.eval_extent(op.lb, env)
            ub = ir.eval_extent(op.ub, env)
            step = ir.eval_extent(op.step, env)
            body_acc = _Acc()
            for i in range(lb, ub, step):
                child_env = dict(env)
                child_env[op.var] = i
                body_acc.add(self.walk_block(op.body, child_env, dict(buffers), in_prefetch))
            if gid is not None:
                # double-buffered loop: prologue + prefetch transfers overlap
                # the compute side; stores and overheads already in .time
                pool = body_acc.prefetch + self.prologue_pool.pop(gid, 0.0)
                acc.compute += body_acc.compute
                acc.transfer += body_acc.transfer
                acc.overhead += body_acc.overhead
                acc.time += max(pool, body_acc.time)
            else:
                acc.add(body_acc)
        elif isinstance(op, ForallOp):
            for t in range(op.threads):
                child_env = dict(env)
                child_env[op.var] = t
                acc.add(self.walk_block(op.body, child_env, dict(buffers), in_prefetch))
        elif isinstance(op, IfOp):
            if not self.eval_pred(op.pred, env):
                return
            prologue = "db_prologue" in op.annotations
            prefetching = in_prefetch or prologue or "db_prefetch" in op.annotations
            inner = self.walk_block(op.body, env, dict(buffers), prefetching)
            if prologue:
                gid = ir.annotation_value(op.annotations, "db_generic")
                self.prologue_pool[gid] = self.prologue_pool.get(gid, 0.0) + inner.prefetch
                inner.prefetch = 0.0
            acc.add(inner)
        elif isinstance(op, ExtractSliceOp):
            src = buffers[op.source]
            shape = tuple(ir.eval_extent(s, env) for s in op.sizes)
            buffers[op.result] = _Buf(shape, src.space, src.narrow)
        elif isinstance(op, AllocOp):
            shape = tuple(ir.eval_extent(s, env) for s in op.sizes)
            buffers[op.result] = _Buf(shape, op.space, op.narrow)
        elif isinstance(op, DeallocOp):
            buffers.pop(op.target, None)
        elif isinstance(op, CopyOp):
            src, dst = buffers[op.source], buffers[op.dest]
            if src.space != dst.space:
                self._move(acc, min(src.bytes, dst.bytes), in_prefetch)
        elif isinstance(op, InsertSliceOp):
            src, dst = buffers[op.source], buffers[op.dest]
            if src.space != dst.space:
                self._move(acc, self.slice_bytes(op.sizes, env, src.narrow), in_prefetch)
        elif isinstance(op, DmaStartOp):
            src = buffers[op.source]
            self._move(acc, self.slice_bytes(op.sizes, env, src.narrow), in_prefetch)
        elif isinstance(op, DmaWaitOp):
            pass  # blocking is folded into the db loop's max()
        elif isinstance(op, AsyncGroupOp):
            self.groups[op.group] = _Group()
        elif isinstance(op, AsyncExecuteOp):
            body = self.walk_block(op.body, dict(env), dict(buffers), in_prefetch)
            self.pending_token[op.token] = body
            acc.time += cfg.thread_spawn_cycles
            acc.overhead += cfg.thread_spawn_cycles
        elif isinstance(op, AddToGroupOp):
            body = self.pending_token.pop(op.token, None)
            if body is None:
                raise SimulationError(f"token %{op.token} not issued")
            self.groups[op.group].bodies.append(body)
        elif isinstance(op, AwaitAllOp):
            group = self.groups.pop(op.group, None)
            if group is None:
                raise SimulationError(f"await on unknown group %{op.group}")
            free = [0.0] * cfg.num_hvx_contexts
            for body in group.bodies:
                k = min(range(len(free)), key=lambda i: (free[i], i))
                free[k] += body.time
                acc.compute += body.compute
                acc.transfer += body.transfer
                acc.overhead += body.overhead
                acc.prefetch += body.prefetch
            acc.time += max(free) + cfg.barrier_cycles
            acc.overhead += cfg.barrier_cycles
        elif isinstance(op, StoreToggleOp):
            if op.value is None:
                self.toggles[op.cell] = not self.toggles[op.cell]
            else:
                self.toggles[op.cell] = op.value
        # remaining ops are free

    def eval_pred(self, pred, env) -> bool:
        if isinstance(pred, ir.CmpPred):
            return ir._CMP_FNS[pred.op](ir.eval_extent(pred.lhs, env),
                                        ir.eval_extent(pred.rhs, env))
        return self.toggles[pred.cell] == pred.value


def simulate(program: KernelProgram, config: MachineConfig) -> TimingReport:
    """Deterministic analytic timing of a staged program's schedule."""
    return _Sim(program, config).run()


def zero_overhead_config(bandwidth: float = 4.0) -> MachineConfig:
    """Config for overlap-law studies: no latency, spawn, barrier, or window penalty."""
    return MachineConfig(
        dma_bandwidth_bytes_per_cycle=bandwidth,
        dma_latency_cycles=0.0,
        thread_spawn_cycles=0.0,
        barrier_cycles=0.0,
        compute_window_bytes=1 << 60,
        window_miss_factor=1.0,
    )


# ---------------------------------------------------------------------------
# Synthetic overlap probe (memory fraction m directly controllable)
# ---------------------------------------------------------------------------


def overlap_probe(m: float, n_tiles: int = 8, tile_elems: int = 1024,
                  ) -> tuple[KernelProgram, MachineConfig]:
    """Single-buffered normal-form loop whose simulated m equals `m`.

    Transfer per tile is tile bytes / bandwidth; compute is one mul per point
    (zero at m = 1). At m = 0 the input is TCM-resident and there is nothing
    to overlap, so the db passes are a no-op by construction.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"m={m} outside [0, 1]")
    total = n_tiles * tile_elems
    repeats = 0 if m >= 1.0 else 1
    payload = ir.Payload.arg(0)
    for _ in range(repeats):
        payload = ir.Payload.binary("mul", payload, ir.Payload.arg(0))
    compute_per_tile = float(repeats * tile_elems)
    if m <= 0.0:
        bandwidth = 4.0  # irrelevant: no transfers exist
    elif m >= 1.0:
        bandwidth = 4.0  # transfer = tile bytes / 4 per tile, compute = 0
    else:
        transfer_per_tile = compute_per_tile * m / (1.0 - m)
        bandwidth = tile_elems * 4.0 / transfer_per_tile
    cfg = zero_overhead_config(bandwidth)

    x_space = "tcm" if m <= 0.0 else "ddr"
    decls = (
        ir.TensorDecl("x", (total,), "f32", x_space, "input"),
        ir.TensorDecl("out", (total,), "f32", "tcm", "output"),
    )
    i = ir.IVar("i")
    sizes = (tile_elems,)
    offsets = (i,)
    if m <= 0.0:
        body: tuple[ir.Op, ...] = (
            ExtractSliceOp("s", "x", offsets, sizes),
            AllocOp("o", sizes, "tcm"),
            GenericOp("probe", (tile_elems,), ("s",), ("o",),
                      (ir.AffineIndexMap.identity(1), ir.AffineIndexMap.identity(1)),
                      ("parallel",), (payload,)),
            InsertSliceOp("o", "out", offsets, sizes),
            DeallocOp("o"),
        )
    else:
        body = (
            ExtractSliceOp("s", "x", offsets, sizes),
            AllocOp("b", sizes, "tcm"),
            CopyOp("s", "b"),
            AllocOp("o", sizes, "tcm"),
            GenericOp("probe", (tile_elems,), ("b",), ("o",),
                      (ir.AffineIndexMap.identity(1), ir.AffineIndexMap.identity(1)),
                      ("parallel",), (payload,)),
            InsertSliceOp("o", "out", offsets, sizes),
            DeallocOp("b"),
            DeallocOp("o"),
        )
    loop = ForOp("i", 0, total, tile_elems, body,
                 annotations=frozenset({"tiled_generic", "all_parallel"}))
    program = KernelProgram("overlap_probe", decls, (loop,), stage="tiled")
    return program, cfg


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("kernel", "size", "passes", "cycles", "compute", "transfer",
               "overhead", "m", "speedup")

PASS_LADDERS: dict[str, tuple[str, ...]] = {
    "scalar": ("fuse", "tile"),
    "vec": ("fuse", "tile", "vectorize"),
    "vec_db": ("fuse", "tile", "vectorize", "db"),
    "vec_mt": ("fuse", "tile", "vectorize", "mt", "async"),
    "vec_mt_db": ("fuse", "tile", "vectorize", "mt", "async", "db"),
}

SIZE_SWEEP = (8192, 16384, 32768, 65536, 131072, 262144, 524288, 1048576)


def _row(kernel: str, size, passes: str, rep: TimingReport, baseline: Optional[float]) -> dict:
    speedup = (baseline / rep.total_cycles) if baseline else 1.0
    return {
        "kernel": kernel, "size": size, "passes": passes,
        "cycles": f"{rep.total_cycles:.6g}", "compute": f"{rep.compute_cycles:.6g}",
        "transfer": f"{rep.transfer_cycles:.6g}", "overhead": f"{rep.overhead_cycles:.6g}",
        "m": f"{rep.memory_fraction:.6g}", "speedup": f"{speedup:.6g}",
    }


def sweep(kernel_path: Optional[str], config: MachineConfig, axis: str,
          sizes: Iterable[int] = SIZE_SWEEP,
          ladders: Iterable[str] = ("scalar", "vec", "vec_mt", "vec_mt_db"),
          m_points: Iterable[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
          dims: Optional[dict[str, int]] = None) -> list[dict]:
    """Emit CSV rows for one sweep axis: size (ST vs MT), passes, or memory_fraction."""
    from . import pipeline
    from .passes import db_dma, db_structural

    rows: list[dict] = []
    if axis == "memory_fraction":
        for m in m_points:
            prog, cfg = overlap_probe(m)
            base = simulate(prog, cfg)
            db1 = db_structural(prog)
            db = db_dma(db1) if db1 is not prog else db1
            rep = simulate(db, cfg)
            rows.append(_row("overlap_probe", f"{m:g}", "db", rep, base.total_cycles))
        return rows

    if kernel_path is None:
        raise ValueError(f"sweep axis {axis!r} needs a kernel file")
    name = pipeline.kernel_name(kernel_path)

    if axis == "size":
        # ST vs forced MT at every size, mirroring the measured crossover runs
        for size in sizes:
            st = pipeline.build_staged(kernel_path, PASS_LADDERS["vec"], {"N": size}, config)
            mt = pipeline.build_staged(kernel_path, PASS_LADDERS["vec_mt"], {"N": size}, config,
                                       mt_threshold=1)
            st_rep = simulate(st, config)
            mt_rep = simulate(mt, config)
            rows.append(_row(name, size, "vec", st_rep, st_rep.total_cycles))
            rows.append(_row(name, size, "vec_mt", mt_rep, st_rep.total_cycles))
        return rows

    if axis == "passes":
        baseline: Optional[float] = None
        size_label = "x".join(str(v) for v in dims.values()) if dims else "default"
        for ladder in ladders:
            passes = PASS_LADDERS[ladder]
            prog = pipeline.build_staged(kernel_path, passes, dims, config)
            rep = simulate(prog, config)
            if baseline is None:
                baseline = rep.total_cycles
            rows.append(_row(name, size_label, ladder, rep, baseline))
        return rows

    raise ValueError(f"unknown sweep axis {axis!r}")
