"""Mixed-precision post-training quantization laboratory.

Thin Python surface over the C++ core: the uniform quantizer, the
quantization-error expectation tables, the exact bit allocator, and the full
pipeline driven by a run_config/1 JSON string.
"""

from ._core import (
    __version__,
    brute_force_alloc,
    default_config,
    fake_quant,
    gaussian_expectations,
    recon_ratio_table,
    reference_table,
    run_pipeline,
    solve_ilp,
    spearman,
)

__all__ = [
    "__version__",
    "brute_force_alloc",
    "default_config",
    "fake_quant",
    "gaussian_expectations",
    "recon_ratio_table",
    "reference_table",
    "run_pipeline",
    "solve_ilp",
    "spearman",
]
