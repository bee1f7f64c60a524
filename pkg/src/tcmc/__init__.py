"""tcmc: a miniature tensor compiler with a semantics-preserving pass pipeline.

Subsystems:

- tcmc.ir         structured IR, verifier, printer
- tcmc.frontend   kernel DSL parser and lowering to generic ops
- tcmc.interp     reference interpreter (the preservation oracle)
- tcmc.passes     fusion, tiling/vectorize, threading, double buffering
- tcmc.mathlib    fast transcendentals and the math expansion pass
- tcmc.perf       machine config and the cycle cost model
- tcmc.pipeline   pass composition, verification, benchmarking
- tcmc.cli        the `tcmc` command line driver
"""

__version__ = "0.1.0"
