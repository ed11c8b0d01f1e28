"""DDR + VLAD image retrieval: tensors, codebooks, encoding, whitening, search and evaluation."""

import json

from ._ddrvlad import (
    Error,
    Index,
    PipelineConfig,
    StageError,
    Whitening,
    average_precision,
    ddr_split,
    describe_config,
    kmeans,
    locvlad_encode,
    mean_ap,
    quantize,
    read_tensor,
    root_square_normalize,
    ukb_score,
    vlad_encode,
    write_tensor,
)
from ._ddrvlad import run_pipeline as _run_pipeline


def make_config(**knobs):
    """Build a PipelineConfig from keyword arguments named after its fields."""
    cfg = PipelineConfig()
    for name, value in knobs.items():
        if not hasattr(cfg, name):
            raise AttributeError(f"unknown pipeline option {name!r}")
        setattr(cfg, name, value)
    return cfg


def run_pipeline(config=None, **knobs):
    """Run the full pipeline and return the parsed report plus cache statistics."""
    cfg = config if config is not None else make_config(**knobs)
    raw = _run_pipeline(cfg)
    return {
        "report": json.loads(raw["report"]),
        "log": raw["log"],
        "cache_hits": raw["cache_hits"],
        "cache_misses": raw["cache_misses"],
    }


__all__ = [
    "Error",
    "Index",
    "PipelineConfig",
    "StageError",
    "Whitening",
    "average_precision",
    "ddr_split",
    "describe_config",
    "kmeans",
    "locvlad_encode",
    "make_config",
    "mean_ap",
    "quantize",
    "read_tensor",
    "root_square_normalize",
    "run_pipeline",
    "ukb_score",
    "vlad_encode",
    "write_tensor",
]
