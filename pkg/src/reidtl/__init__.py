"""Person re-identification with a shared-weight two-head network, staged fine-tuning and co-training."""

from reidtl.data import (
    Dataset,
    ImageRecord,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    make_probe_gallery,
    write_manifest,
)
from reidtl.sampler import PairBatch, generate_pairs, sample_batch

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ImageRecord",
    "PairBatch",
    "SyntheticSpec",
    "generate_pairs",
    "generate_synthetic",
    "load_manifest",
    "make_probe_gallery",
    "sample_batch",
    "write_manifest",
]
