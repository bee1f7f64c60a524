import numpy as np
import pytest

from tcmc import ir
from tcmc.ir import (
    AffineIndexMap, AllocOp, DeallocOp, GenericOp, IBin, IVar, KernelProgram,
    Payload, Reduction, TensorDecl, count_ops, eval_extent, extent_bounds,
    extent_divisible, ix_add, ix_min, ix_mul, ix_sub, print_ir, verify,
)

from conftest import lower


def elementwise(name="g0", domain=(8,), inputs=("x",), outputs=("y",), maps=None):
    rank = len(domain)
    maps = maps or tuple(AffineIndexMap.identity(rank) for _ in (*inputs, *outputs))
    return GenericOp(name, domain, inputs, outputs, maps,
                     ("parallel",) * rank, (Payload.arg(0),) * len(outputs))


def program(ops, decls=None):
    decls = decls or (TensorDecl("x", (8,), role="input"), TensorDecl("y", (8,), role="output"))
    return KernelProgram("t", tuple(decls), tuple(ops))


# -- extents -----------------------------------------------------------------

def test_extent_algebra_folds_constants():
    assert ix_add(2, 3) == 5
    assert ix_mul(4, ix_min(3, 5)) == 12
    assert ix_sub(IVar("i"), 0) == IVar("i")
    e = ix_min(32, ix_sub(100, IVar("i")))
    assert eval_extent(e, {"i": 96}) == 4
    assert eval_extent(e, {"i": 0}) == 32


def test_extent_bounds_interval():
    e = ix_min(32, ix_sub(100, IVar("i")))
    assert extent_bounds(e, {"i": (0, 99)}) == (1, 32)
    assert extent_bounds(e, {}) is None


def test_extent_divisibility():
    e = ix_min(262144, ix_sub(1048576, IVar("i")))
    assert extent_divisible(e, 32, frozenset({"i"}))
    assert not extent_divisible(ix_sub(100, IVar("i")), 32, frozenset({"i"}))
    assert extent_divisible(7, 1, frozenset())


def test_unbound_variable_raises():
    with pytest.raises(KeyError):
        eval_extent(IVar("nope"), {})


# -- verifier ----------------------------------------------------------------

def test_wellformed_program_verifies():
    assert verify(program([elementwise()])).ok


def test_operand_map_arity_violation():
    bad = GenericOp("g", (8,), ("x", "x2"), ("y",),
                    (AffineIndexMap.identity(1), AffineIndexMap.identity(1)),
                    ("parallel",), (Payload.arg(0),))
    decls = (TensorDecl("x", (8,), role="input"), TensorDecl("x2", (8,), role="input"),
             TensorDecl("y", (8,), role="output"))
    rep = verify(program([bad], decls))
    assert not rep.ok
    assert any(v.rule == "operand/map arity" for v in rep.violations)


def test_reduction_escaping_into_output_map():
    bad = GenericOp("g", (4, 8), ("x",), ("y",),
                    (AffineIndexMap.identity(2), AffineIndexMap.identity(2)),
                    ("parallel", "reduction"), (Payload.arg(0),),
                    (Reduction.sum(),))
    decls = (TensorDecl("x", (4, 8), role="input"), TensorDecl("y", (4, 8), role="output"))
    rep = verify(program([bad], decls))
    assert any(v.rule == "reduction escapes" for v in rep.violations)


def test_payload_arg_out_of_range():
    bad = GenericOp("g", (8,), ("x",), ("y",),
                    (AffineIndexMap.identity(1), AffineIndexMap.identity(1)),
                    ("parallel",), (Payload.arg(1),))
    rep = verify(program([bad]))
    assert any(v.rule == "payload args" for v in rep.violations)


def test_undefined_buffer_and_duplicate_decl():
    rep = verify(program([elementwise(inputs=("ghost",))]))
    assert any(v.rule == "undefined-buffer" for v in rep.violations)
    decls = (TensorDecl("x", (8,), role="input"), TensorDecl("x", (8,)),
             TensorDecl("y", (8,), role="output"))
    rep = verify(program([elementwise()], decls))
    assert any(v.rule == "duplicate decl" for v in rep.violations)


def test_alloc_without_dealloc():
    rep = verify(program([AllocOp("t", (8,), "tcm"), elementwise()]))
    assert any(v.rule == "alloc pairing" for v in rep.violations)
    ok = verify(program([AllocOp("t", (8,), "tcm"), elementwise(), DeallocOp("t")]))
    assert ok.ok


def test_tcm_budget_enforced():
    ops = [AllocOp("t", (1024,), "tcm"), elementwise(), DeallocOp("t")]
    rep = verify(program(ops), tcm_bytes=4095)
    assert [v.rule for v in rep.violations] == ["tcm budget"]
    assert verify(program(ops), tcm_bytes=4096).ok


def test_map_bounds_checked():
    decls = (TensorDecl("x", (4,), role="input"), TensorDecl("y", (8,), role="output"))
    rep = verify(program([elementwise(domain=(8,))], decls))
    assert any(v.rule == "map bounds" for v in rep.violations)


# -- printer -----------------------------------------------------------------

def test_print_deterministic_and_stable():
    p = lower("softmax")
    a, b = print_ir(p), print_ir(p)
    assert a == b
    p2 = lower("softmax")
    assert print_ir(p2) == a  # equal programs, identical bytes


def test_print_annotations_sorted():
    g = elementwise()
    g = ir.GenericOp(g.name, g.domain, g.inputs, g.outputs, g.maps, g.iterators,
                     g.payloads, annotations=frozenset({"zeta", "alpha"}))
    text = print_ir(program([g]))
    assert "{alpha, zeta}" in text


def test_print_empty_program():
    text = print_ir(KernelProgram("empty", (), ()))
    assert text == "program @empty stage=initial {\n}\n"


def test_fmt_f32_shortest_roundtrip():
    assert ir.fmt_f32(0.044715) == "0.044715"
    assert ir.fmt_f32(float("-inf")) == "-inf"
    assert np.float32(ir.fmt_f32(1 / 3)) == np.float32(1 / 3)


def test_golden_dumps(golden_dir):
    from tcmc.passes import fuse_elementwise, tile_generic
    fused = fuse_elementwise(lower("softmax"))
    tiled = tile_generic(fuse_elementwise(lower("gelu")), tile_sizes=(262144,))
    for name, prog in [("softmax_fused.ir", fused), ("gelu_tiled.ir", tiled)]:
        want = (golden_dir / name).read_text()
        assert print_ir(prog) == want, f"golden mismatch for {name}"


def test_tiled_gelu_dump_carries_annotations():
    from tcmc.passes import fuse_elementwise, tile_generic
    text = print_ir(tile_generic(fuse_elementwise(lower("gelu")), tile_sizes=(262144,)))
    assert "all_parallel" in text and "tiled_generic" in text
    assert "1048576" in text and "262144" in text


# -- count_ops ---------------------------------------------------------------

def test_count_ops_generics_and_annotations():
    p = lower("softmax")
    assert count_ops(p, lambda o: isinstance(o, GenericOp)) == 5
    assert count_ops(p, lambda o: False) == 0
    assert count_ops(KernelProgram("e", (), ()), lambda o: True) == 0


def test_count_ops_recurses_into_bodies():
    from tcmc.passes import fuse_elementwise, tile_generic
    p = tile_generic(fuse_elementwise(lower("gelu")))
    assert count_ops(p, lambda o: isinstance(o, GenericOp)) == 1
    assert count_ops(p, lambda o: isinstance(o, ir.CopyOp)) == 1
