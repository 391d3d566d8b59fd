"""Query construction: what to train on, and how to execute it.

A Query names a job and carries filter predicates; QueryExecutionArgs
carry the mixture and the distribution topology (data-parallel groups,
nodes per group, loader workers per node). Both serialize to canonical
JSON — the job seed defaults to a stable hash of the serialized query, so
identical queries replay identical streams.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from .catalog import FilterPredicate
from .errors import QueryError
from .mixtures import HierarchicalMixtureSpec, MixtureSchedule, MixtureSpec
from .seeding import canonical_json, stable_hash

_MIXTURE_TYPES = ("static", "hierarchical", "schedule", "inferring", "ado", "arbitrary")


def mixture_config(obj) -> dict:
    """Normalize any accepted mixture description to its config dict."""
    if isinstance(obj, MixtureSpec):
        return {"type": "static", "spec": obj.to_json()}
    if isinstance(obj, HierarchicalMixtureSpec):
        return {"type": "hierarchical", "spec": obj.to_json()}
    if isinstance(obj, MixtureSchedule):
        return {"type": "schedule", "schedule": obj.to_json()}
    if isinstance(obj, Mapping):
        kind = obj.get("type")
        if kind not in _MIXTURE_TYPES:
            raise QueryError(f"unknown mixture type {kind!r}; expected one of {_MIXTURE_TYPES}")
        return dict(obj)
    raise QueryError(f"cannot interpret {type(obj).__name__} as a mixture")


def inferring_mixture(chunk_size: int, strict: bool = False) -> dict:
    """Mixture matching the natural data distribution of the query result."""
    return {"type": "inferring", "chunk_size": int(chunk_size), "strict": bool(strict)}


def arbitrary_chunks(chunk_size: int) -> dict:
    """No mixture at all: chunks drain the index one key at a time."""
    return {"type": "arbitrary", "chunk_size": int(chunk_size)}


def ado_mixture(
    chunk_size: int,
    prior: Mapping,
    config: Mapping | None = None,
) -> dict:
    """Adaptive mixture driven by training feedback; prior defines the domains."""
    prior_json = {
        (k if isinstance(k, str) else k.canonical_string()): float(v) for k, v in prior.items()
    }
    return {
        "type": "ado",
        "chunk_size": int(chunk_size),
        "prior": prior_json,
        "config": dict(config) if config else {},
    }


class Query:
    """Filter predicates for one job, built fluently."""

    def __init__(self, job_id: str, predicates: Sequence | None = None):
        if not job_id:
            raise QueryError("job_id must be non-empty")
        self.job_id = str(job_id)
        self.predicates: list[FilterPredicate] = [
            FilterPredicate.of(p) for p in (predicates or [])
        ]

    @staticmethod
    def for_job(job_id: str) -> "Query":
        return Query(job_id)

    def select(self, predicate) -> "Query":
        self.predicates.append(FilterPredicate.of(predicate))
        return self

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "predicates": [p.to_json() for p in self.predicates],
        }

    @staticmethod
    def from_json(data: Mapping) -> "Query":
        return Query(
            data["job_id"],
            [FilterPredicate.from_json(p) for p in data.get("predicates", [])],
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, Query) and self.to_json() == other.to_json()


class QueryExecutionArgs:
    """Mixture plus distribution topology for one job."""

    def __init__(
        self,
        mixture,
        dp_groups: int = 1,
        nodes_per_group: int = 1,
        num_workers: int = 0,
        seed: int | None = None,
    ):
        if dp_groups < 1 or nodes_per_group < 1 or num_workers < 0:
            raise QueryError("topology counts must be positive (num_workers may be 0)")
        self.mixture = mixture_config(mixture)
        self.dp_groups = int(dp_groups)
        self.nodes_per_group = int(nodes_per_group)
        self.num_workers = int(num_workers)
        self.seed = None if seed is None else int(seed)

    @property
    def streams_per_group(self) -> int:
        return max(1, self.num_workers)

    @property
    def total_streams(self) -> int:
        return self.dp_groups * self.streams_per_group

    def to_json(self) -> dict:
        return {
            "mixture": self.mixture,
            "dp_groups": self.dp_groups,
            "nodes_per_group": self.nodes_per_group,
            "num_workers": self.num_workers,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(data: Mapping) -> "QueryExecutionArgs":
        return QueryExecutionArgs(
            data["mixture"],
            dp_groups=int(data.get("dp_groups", 1)),
            nodes_per_group=int(data.get("nodes_per_group", 1)),
            num_workers=int(data.get("num_workers", 0)),
            seed=data.get("seed"),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, QueryExecutionArgs) and self.to_json() == other.to_json()


def job_seed(query: Query, args: QueryExecutionArgs) -> int:
    """The seed every random choice of a job derives from.

    An explicit seed in the args wins; otherwise the serialized query is
    hashed, so re-submitting the same query replays the same stream.
    """
    if args.seed is not None:
        return args.seed
    return stable_hash("job-seed", canonical_json(query.to_json()))
