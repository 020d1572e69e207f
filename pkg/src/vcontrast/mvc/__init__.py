"""Minimal-contrast data pipeline: embedding store, vision-centric filter, text augmentation."""
from .augment import (
    AugmentedRecord,
    ExternalRewriter,
    MalformedReply,
    RewriterError,
    TemplateRewriter,
    augment_step1,
    augment_step2,
    run_augment,
)
from .filtering import FilterConfig, FilterReport, cosine, filter_pair, filter_records, run_filter
from .store import EmbeddingRecord, StoreError, read_store, write_store

__all__ = [
    "AugmentedRecord",
    "EmbeddingRecord",
    "ExternalRewriter",
    "FilterConfig",
    "FilterReport",
    "MalformedReply",
    "RewriterError",
    "StoreError",
    "TemplateRewriter",
    "augment_step1",
    "augment_step2",
    "cosine",
    "filter_pair",
    "filter_records",
    "read_store",
    "run_augment",
    "run_filter",
    "write_store",
]
