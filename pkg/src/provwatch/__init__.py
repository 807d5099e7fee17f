"""Streaming detection of multi-stage intrusions in system provenance logs.

The pipeline turns a stream of kernel-level audit events into a small
number of scored attack reports: statistical deviation analysis picks
out events that do not fit the trained baseline, graph analysis grows
and prunes the provenance neighborhood around them, community
detection groups what is left into units of suspicious behavior, a
pluggable reasoner scores each unit, and a temporal correlation layer
merges partial detections across analysis windows while decaying the
ones that go quiet.
"""

__version__ = "0.1.0"

from .ingest import Codebook, LogEvent, ParseIssue, Window
from .config import PipelineConfig

__all__ = [
    "Codebook",
    "LogEvent",
    "ParseIssue",
    "PipelineConfig",
    "Window",
    "__version__",
]
