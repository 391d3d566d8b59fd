"""mixplane: a deterministic, mixture-aware data plane for training jobs.

The package splits into a metadata catalog (declarative filters over
sample properties, compressed into interval rows), a mixture algebra
(keys, apportionment, static and dynamic mixture sources), a chunk
generator (fixed-size pointer collections honoring a mixture), a TCP
server distributing identical chunk streams to data-parallel groups,
a client that resolves pointers to payloads under three processing
modes, and an operator harness for synthetic corpora and simulations.
"""

from __future__ import annotations

from .ado import AdoConfig, AdoSource, AdoState, DomainLaw, fit_power_law, learning_speed
from .catalog import (
    FilterPredicate,
    IntervalRow,
    JsonFieldParser,
    MetadataCatalog,
    PropertyDef,
    PropertySchema,
    SampleRecord,
    detect_intervals,
)
from .chunks import Chunk, ChunkGenerator, redistribute_best_effort
from .client import (
    MixplaneClient,
    ProgressBoard,
    ResultStreamingArgs,
    StreamStats,
    TokenBatchItem,
    per_domain_loss,
    stream_samples,
)
from .errors import (
    CheckpointError,
    DataReadError,
    FeedbackError,
    IndexBuildError,
    MixplaneError,
    MixtureError,
    ProtocolError,
    QueryError,
    RegistrationError,
    SchemaError,
    ServerError,
)
from .index import ChunkerIndex, RangeCursor, build_index
from .mixtures import (
    HierarchicalMixtureSpec,
    HierarchyBranch,
    HierarchyNode,
    MixtureKey,
    MixtureSchedule,
    MixtureSource,
    MixtureSpec,
    ScheduleSource,
    StaticSource,
    apportion,
    infer_mixture,
    proportions_to_counts,
)
from .query import Query, QueryExecutionArgs, job_seed
from .server import MixplaneServer, resolve_mixture
from .tokenizers import ByteTokenizer, Tokenizer, WhitespaceTokenizer, get_tokenizer

__version__ = "0.1.0"

__all__ = [
    "AdoConfig",
    "AdoSource",
    "AdoState",
    "ByteTokenizer",
    "Chunk",
    "ChunkGenerator",
    "ChunkerIndex",
    "CheckpointError",
    "DataReadError",
    "DomainLaw",
    "FeedbackError",
    "FilterPredicate",
    "HierarchicalMixtureSpec",
    "HierarchyBranch",
    "HierarchyNode",
    "IndexBuildError",
    "IntervalRow",
    "JsonFieldParser",
    "MetadataCatalog",
    "MixplaneClient",
    "MixplaneError",
    "MixplaneServer",
    "MixtureError",
    "MixtureKey",
    "MixtureSchedule",
    "MixtureSource",
    "MixtureSpec",
    "ProgressBoard",
    "PropertyDef",
    "PropertySchema",
    "ProtocolError",
    "Query",
    "QueryError",
    "QueryExecutionArgs",
    "RangeCursor",
    "RegistrationError",
    "ResultStreamingArgs",
    "SampleRecord",
    "ScheduleSource",
    "SchemaError",
    "ServerError",
    "StaticSource",
    "StreamStats",
    "TokenBatchItem",
    "Tokenizer",
    "WhitespaceTokenizer",
    "apportion",
    "build_index",
    "detect_intervals",
    "fit_power_law",
    "get_tokenizer",
    "infer_mixture",
    "job_seed",
    "learning_speed",
    "per_domain_loss",
    "proportions_to_counts",
    "redistribute_best_effort",
    "resolve_mixture",
    "stream_samples",
]
