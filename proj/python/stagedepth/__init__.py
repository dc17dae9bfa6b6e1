"""Any-depth detector: configurations, synthetic data, training and analysis."""

import torch  # noqa: F401  loads libtorch before the extension

from ._stagedepth import (
    APReport,
    Run,
    StagedepthError,
    Scene,
    arch_json,
    config_bitstrings,
    evaluate_map,
    flops,
    generate_dataset,
    hungarian_match,
    linear_cka,
)

__all__ = [
    "APReport",
    "Run",
    "StagedepthError",
    "Scene",
    "arch_json",
    "config_bitstrings",
    "evaluate_map",
    "flops",
    "generate_dataset",
    "hungarian_match",
    "linear_cka",
]
