"""Shared pass plumbing: errors and deterministic name allocation."""

from __future__ import annotations

from .. import ir


class PassError(Exception):
    """A pass rejected its input (bad spec, missing precondition)."""


class NameAllocator:
    """Fresh SSA-style names that never collide with existing program names."""

    def __init__(self, program: ir.KernelProgram):
        self.taken = {d.name for d in program.decls}
        for op, _ in ir.walk_ops(program.ops):
            for attr in ("result", "var", "token", "group", "cell", "target"):
                v = getattr(op, attr, None)
                if isinstance(v, str):
                    self.taken.add(v)
        self.counters: dict[str, int] = {}

    def fresh(self, prefix: str) -> str:
        n = self.counters.get(prefix, 0)
        while True:
            name = f"{prefix}{n}"
            n += 1
            if name not in self.taken:
                self.counters[prefix] = n
                self.taken.add(name)
                return name
