"""Operator fusion: splice an all-parallel producer into its sole consumer.

Legality is deliberately narrow: the producer must be all-parallel, its
result must have exactly one use (and not be a program output), and the
consumer must read it through a map that is a permutation relabeling of the
producer's output map (identity, transpose). Broadcasting reads and
recomputation-based fusion are rejected; reduction producers are rejected.
The consumer itself may be a reduction, reading the produced value as a
plain input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

from .. import ir
from ..ir import AffineIndexMap, GenericOp, KernelProgram


@dataclass(frozen=True)
class FusionCandidate:
    producer: str             # generic op name
    consumer: str
    operand: int              # consumer input index being replaced
    relabel: tuple[int, ...]  # witness: producer dim p corresponds to consumer dim relabel[p]


@dataclass(frozen=True)
class FusionRejection:
    reason: str               # producer_has_reduction | map_mismatch | multi_use
    detail: str


def _use_count(program: KernelProgram, tensor: str) -> int:
    uses = 0
    for op, _ in ir.walk_ops(program.ops):
        if isinstance(op, GenericOp):
            uses += sum(1 for n in op.inputs if n == tensor)
        else:
            for attr in ("source", "dest"):
                if getattr(op, attr, None) == tensor:
                    uses += 1
    return uses


def fusion_legal(
    program: KernelProgram,
    producer: GenericOp,
    consumer: GenericOp,
    operand: int,
) -> Union[FusionCandidate, FusionRejection]:
    """Decide legality of fusing `producer` into `consumer` at input `operand`."""
    tensor = consumer.inputs[operand]
    assert tensor in producer.outputs, "operand is not produced by this producer"

    if not producer.is_all_parallel():
        return FusionRejection("producer_has_reduction",
                               f"@{producer.name} has reduction iterators")
    if len(producer.outputs) != 1:
        return FusionRejection("map_mismatch", f"@{producer.name} has multiple outputs")
    decl = program.decl(tensor)
    if decl is not None and decl.role != "temp":
        return FusionRejection("multi_use", f"%{tensor} is a program output")
    if _use_count(program, tensor) != 1:
        return FusionRejection("multi_use", f"%{tensor} has multiple uses")

    pmap = producer.output_maps()[0]
    cmap = consumer.maps[operand]
    if None in pmap.results or None in cmap.results:
        return FusionRejection("map_mismatch", "broadcast dims block payload splicing")
    if len(consumer.domain) != len(producer.domain):
        return FusionRejection("map_mismatch",
                               "iteration domains have different rank (would recompute)")
    if len(set(cmap.results)) != len(consumer.domain):
        return FusionRejection("map_mismatch",
                               "consumer reads a projection of its domain (would recompute)")
    # witness: producer dim p and consumer dim relabel[p] index the same output dim
    relabel = [0] * len(producer.domain)
    for j, p in enumerate(pmap.results):
        relabel[p] = cmap.results[j]
    for p, q in enumerate(relabel):
        pe, qe = producer.domain[p], consumer.domain[q]
        if isinstance(pe, int) and isinstance(qe, int) and pe != qe:
            return FusionRejection("map_mismatch", f"extent mismatch d{p}={pe} vs d{q}={qe}")
    return FusionCandidate(producer.name, consumer.name, operand, tuple(relabel))


_HOLE = -1  # sentinel arg index while renumbering around the fused operand


def _splice(producer: GenericOp, consumer: GenericOp, cand: FusionCandidate) -> GenericOp:
    kept: list[tuple[str, AffineIndexMap]] = []
    consumer_renumber: dict[int, int] = {}
    for i, (name, m) in enumerate(zip(consumer.inputs, consumer.input_maps())):
        if i == cand.operand:
            consumer_renumber[i] = _HOLE
        else:
            consumer_renumber[i] = len(kept)
            kept.append((name, m))

    prod_renumber: dict[int, int] = {}
    for i, (name, m) in enumerate(zip(producer.inputs, producer.input_maps())):
        relabeled = AffineIndexMap(
            tuple(None if r is None else cand.relabel[r] for r in m.results))
        idx = next((k for k, (n2, m2) in enumerate(kept) if n2 == name and m2 == relabeled), None)
        if idx is None:
            idx = len(kept)
            kept.append((name, relabeled))
        prod_renumber[i] = idx

    producer_expr = producer.payloads[0].map_args(prod_renumber)
    new_payloads = tuple(
        p.map_args(consumer_renumber).substitute_arg(_HOLE, producer_expr)
        for p in consumer.payloads)
    return replace(
        consumer,
        inputs=tuple(n for n, _ in kept),
        maps=tuple(m for _, m in kept) + consumer.output_maps(),
        payloads=new_payloads,
    )


def _first_candidate(program: KernelProgram) -> Optional[tuple[int, int, FusionCandidate]]:
    generics = [(i, op) for i, op in enumerate(program.ops) if isinstance(op, GenericOp)]
    producer_of: dict[str, tuple[int, GenericOp]] = {}
    for i, g in generics:
        for out in g.outputs:
            producer_of[out] = (i, g)
    for ci, consumer in generics:
        for oi, name in enumerate(consumer.inputs):
            hit = producer_of.get(name)
            if hit is None or hit[0] == ci:
                continue
            pi, producer = hit
            cand = fusion_legal(program, producer, consumer, oi)
            if isinstance(cand, FusionCandidate):
                return pi, ci, cand
    return None


def fuse_elementwise(program: KernelProgram) -> KernelProgram:
    """Greedy fixed-point fusion; deterministic consumer-first order.

    Each fired fusion removes one generic and the materialized intermediate
    tensor decl. No-op when nothing is legal.
    """
    current = program
    while True:
        hit = _first_candidate(current)
        if hit is None:
            break
        pi, ci, cand = hit
        consumer = current.ops[ci]
        fused = _splice(current.ops[pi], consumer, cand)
        tensor = consumer.inputs[cand.operand]
        ops = tuple(fused if op is consumer else op
                    for op in current.ops if op is not current.ops[pi])
        decls = tuple(d for d in current.decls if d.name != tensor)
        current = replace(current, decls=decls, ops=ops, stage="fused")
    return current
