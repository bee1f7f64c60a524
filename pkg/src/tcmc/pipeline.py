"""Pass-pipeline driver: composition, stage dumps, differential verification.

The pipeline is a composition of passes applied in user order (dependency
checked): fuse, tile, vectorize, mt, async, db, math-approx. With
verification on, the program is interpreted after every pass and compared
against the stage-0 interpretation: bit-exact for structural passes, within
reltol 1e-4 from the math expansion onward (its documented accuracy
contract).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import interp, ir, perf
from .frontend import KernelAst, infer_dims_from_inputs, lower_to_generics, parse_kernel
from .mathlib import ApproxPolicy, expand_math_ops
from .passes import (
    DistributionPolicy, PassError, ProfitabilityHeuristic, db_dma, db_structural,
    form_async_threads, form_virtual_threads, fuse_elementwise, tile_generic,
    vectorize_innermost,
)

PASS_ORDER = ("fuse", "tile", "vectorize", "mt", "async", "db", "math-approx")

# Unbound dimension symbols fall back to the reference benchmark sizes.
DEFAULT_DIMS = {"N": 1048576, "R": 127, "C": 513}

MATH_RELTOL = 1e-4


class SpecError(Exception):
    """Invalid pipeline specification (unknown pass, broken dependency)."""


class VerifyFailure(Exception):
    def __init__(self, stage: str, report: interp.CompareReport):
        super().__init__(f"verification failed after {stage}: {report}")
        self.stage = stage
        self.report = report


@dataclass
class PipelineOptions:
    tile_sizes: Optional[tuple[int, ...]] = None
    interchange: Optional[tuple[int, ...]] = None
    vector_width: int = 32
    threads: int = 4
    dist_kind: str = "block"
    dist_chunk: int = 1
    mt_threshold: int = 32768
    exp_degree: int = 6
    rsqrt_iters: int = 1
    db_stage1_only: bool = False
    machine: perf.MachineConfig = field(default_factory=perf.MachineConfig)


@dataclass(frozen=True)
class PipelineSpec:
    passes: tuple[str, ...]
    options: PipelineOptions
    verify_mode: Union[str, tuple[str, float]] = "off"  # off | bitexact | ("reltol", tau)


def validate_passes(passes: Sequence[str]) -> tuple[str, ...]:
    passes = tuple(passes)
    for p in passes:
        if p not in PASS_ORDER:
            raise SpecError(f"unknown pass {p!r} (choose from {', '.join(PASS_ORDER)})")
    if len(set(passes)) != len(passes):
        raise SpecError("duplicate pass in pipeline")
    idx = [PASS_ORDER.index(p) for p in passes]
    if idx != sorted(idx):
        raise SpecError(f"pass order must respect dependencies: {' < '.join(PASS_ORDER)}")
    if "db" in passes and "tile" not in passes:
        raise SpecError("db requires tile")
    if "async" in passes and "mt" not in passes:
        raise SpecError("async requires mt")
    return passes


def apply_pass(name: str, program: ir.KernelProgram, opts: PipelineOptions) -> ir.KernelProgram:
    if name == "fuse":
        return fuse_elementwise(program)
    if name == "tile":
        return tile_generic(program, opts.tile_sizes, opts.interchange,
                            tcm_bytes=opts.machine.tcm_bytes)
    if name == "vectorize":
        return vectorize_innermost(program, opts.vector_width)
    if name == "mt":
        policy = DistributionPolicy(opts.dist_kind, opts.threads, opts.dist_chunk)
        return form_virtual_threads(program, policy, ProfitabilityHeuristic(opts.mt_threshold))
    if name == "async":
        return form_async_threads(program)
    if name == "db":
        staged = db_structural(program)
        if opts.db_stage1_only or staged is program:
            return staged
        return db_dma(staged)
    if name == "math-approx":
        policy = ApproxPolicy("approx", exp_degree=opts.exp_degree,
                              rsqrt_iters=opts.rsqrt_iters)
        return expand_math_ops(program, policy)
    raise SpecError(f"unknown pass {name!r}")


@dataclass
class StageResult:
    name: str
    program: ir.KernelProgram
    compare: Optional[interp.CompareReport] = None


@dataclass
class PipelineResult:
    kernel: str
    stages: list[StageResult]
    outputs: Optional[dict[str, np.ndarray]]
    dump_files: list[Path]

    @property
    def final(self) -> ir.KernelProgram:
        return self.stages[-1].program


def kernel_name(path: Union[str, Path]) -> str:
    return Path(path).stem


def _read_source(source: Union[str, Path]) -> str:
    p = Path(source)
    if p.suffix == ".tk" or p.exists():
        return p.read_text()
    return str(source)


def resolve_kernel(source: Union[str, Path],
                   dims: Optional[Mapping[str, int]] = None,
                   inputs: Optional[Mapping[str, np.ndarray]] = None) -> tuple[KernelAst, dict]:
    ast = parse_kernel(_read_source(source))
    bound: dict[str, int] = {}
    if inputs:
        bound.update(infer_dims_from_inputs(ast, inputs))
    if dims:
        bound.update(dims)
    for p in ast.params:
        for d in p.dims:
            if isinstance(d, str) and d not in bound:
                if d not in DEFAULT_DIMS:
                    raise SpecError(f"dimension symbol {d!r} unbound; pass --shape {d}=<int>")
                bound[d] = DEFAULT_DIMS[d]
    return ast, bound


def random_inputs(program: ir.KernelProgram, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic inputs for differential verification (range safe for exp)."""
    rng = np.random.default_rng(seed)
    out = {}
    for d in program.inputs():
        out[d.name] = (rng.standard_normal(d.shape) * 2.0).astype(np.float32)
    return out


def run_pipeline(
    source: Union[str, Path],
    spec: PipelineSpec,
    inputs: Optional[Mapping[str, np.ndarray]] = None,
    dims: Optional[Mapping[str, int]] = None,
    dump_dir: Optional[Union[str, Path]] = None,
    seed: int = 0,
) -> PipelineResult:
    """Lower, run the pass list in order, dump stages, verify differentially.

    Raises ParseError, SpecError, PassError, or VerifyFailure; the CLI maps
    each to a distinct exit code.
    """
    passes = validate_passes(spec.passes)
    ast, bound = resolve_kernel(source, dims, inputs)
    program = lower_to_generics(ast, bound)
    structural = ir.verify(program, tcm_bytes=spec.options.machine.tcm_bytes)
    if not structural.ok:
        raise PassError(f"input program does not verify:\n{structural}")

    stages = [StageResult("input", program)]
    for name in passes:
        before = stages[-1].program
        after = apply_pass(name, before, spec.options)
        rep = ir.verify(after, tcm_bytes=spec.options.machine.tcm_bytes)
        if not rep.ok:
            raise PassError(f"pass {name} broke structural invariants:\n{rep}")
        stages.append(StageResult(name, after))

    dump_files: list[Path] = []
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        for i, st in enumerate(stages):
            f = dump_dir / f"{i:02d}_{st.name}.ir"
            f.write_text(ir.print_ir(st.program))
            dump_files.append(f)

    outputs = None
    if spec.verify_mode != "off":
        run_inputs = dict(inputs) if inputs else random_inputs(program, seed)
        reference = interp.interpret(stages[0].program, run_inputs)
        outputs = reference
        past_math = False
        for st in stages[1:]:
            past_math = past_math or st.name == "math-approx"
            mode = spec.verify_mode
            if mode == "bitexact" and past_math:
                mode = ("reltol", MATH_RELTOL)
            got = interp.interpret(st.program, run_inputs)
            st.compare = interp.compare_outputs(got, reference, mode)
            if not st.compare.ok:
                raise VerifyFailure(st.name, st.compare)
            outputs = got
    return PipelineResult(ast.name, stages, outputs, dump_files)


def build_staged(
    source: Union[str, Path],
    passes: Sequence[str],
    dims: Optional[Mapping[str, int]],
    config: perf.MachineConfig,
    *,
    mt_threshold: Optional[int] = None,
    vector_width: int = 32,
    threads: int = 4,
    tile_sizes: Optional[tuple[int, ...]] = None,
) -> ir.KernelProgram:
    """Compile straight to the end of `passes` (no dumps, no verification)."""
    opts = PipelineOptions(machine=config, vector_width=vector_width, threads=threads,
                           tile_sizes=tile_sizes)
    if mt_threshold is not None:
        opts.mt_threshold = mt_threshold
    ast, bound = resolve_kernel(source, dims)
    program = lower_to_generics(ast, bound)
    for name in validate_passes(tuple(passes)):
        program = apply_pass(name, program, opts)
    return program


def bench(
    kernels: Sequence[Union[str, Path]],
    config: perf.MachineConfig,
    axis: str = "passes",
    ladders: Optional[Sequence[str]] = None,
    sizes: Optional[Sequence[int]] = None,
    dims: Optional[Mapping[str, int]] = None,
) -> list[dict]:
    """Run perf sweeps for each kernel and concatenate the CSV rows."""
    rows: list[dict] = []
    if axis == "memory_fraction":
        return perf.sweep(None, config, "memory_fraction")
    for k in kernels:
        kw: dict = {}
        if ladders:
            kw["ladders"] = tuple(ladders)
        if sizes:
            kw["sizes"] = tuple(sizes)
        if dims:
            kw["dims"] = dict(dims)
        rows.extend(perf.sweep(str(k), config, axis, **kw))
    return rows
