"""Batch-effect-aware evaluation of morphological profiling representations."""

__version__ = "0.1.0"

from morphoeval.profiles import (  # noqa: E402
    LabelStore,
    ProfileSet,
    WellMeta,
    load_label_store,
    load_profile_set,
    related_set,
    save_profile_set,
)
from morphoeval.retrieval import StringencyLevel  # noqa: E402

__all__ = [
    "LabelStore",
    "ProfileSet",
    "StringencyLevel",
    "WellMeta",
    "load_label_store",
    "load_profile_set",
    "related_set",
    "save_profile_set",
]
