"""Python interface to the flashclear object-removal toolkit."""

from ._core import (
    CacheError,
    ConfigError,
    FormatError,
    NumericFault,
    RunConfig,
    Scene,
    ShapeError,
    alpha_bars,
    dense_flops,
    derive_token_mask,
    distill,
    gen_data,
    generate_scene,
    infer,
    psnr,
    psnr_mask,
    read_corpus,
    report,
    timestep_plan,
    train_teacher,
)

__all__ = [
    "CacheError",
    "ConfigError",
    "FormatError",
    "NumericFault",
    "RunConfig",
    "Scene",
    "ShapeError",
    "alpha_bars",
    "dense_flops",
    "derive_token_mask",
    "distill",
    "gen_data",
    "generate_scene",
    "infer",
    "psnr",
    "psnr_mask",
    "read_corpus",
    "report",
    "timestep_plan",
    "train_teacher",
]
