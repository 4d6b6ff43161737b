"""Binarized encoder-decoder transformers (C++ core)."""

from ._core import (
    ConfigError,
    Error,
    Model,
    ShapeError,
    benchmark,
    binarize,
    binary_matmul,
    bleu,
    fit_scaling_law,
    length_penalty,
    mbr_argmax,
    resolve_config,
    sentence_bleu,
    ste_mask,
    train,
    variance_oracle,
)

__all__ = [
    "ConfigError",
    "Error",
    "Model",
    "ShapeError",
    "benchmark",
    "binarize",
    "binary_matmul",
    "bleu",
    "fit_scaling_law",
    "length_penalty",
    "mbr_argmax",
    "resolve_config",
    "sentence_bleu",
    "ste_mask",
    "train",
    "variance_oracle",
]
