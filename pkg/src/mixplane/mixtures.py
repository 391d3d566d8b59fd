"""Mixture keys, mixture specifications, and apportionment.

A `MixtureKey` names a class of samples by a set of properties, each with
one or more values. Keys *match* when their value lists intersect for every
property they share, so a mixture over a property subset can draw from
index entries that carry the full property map. A total order over keys
makes every loop in the system deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import MixtureError

PROPORTION_TOLERANCE = 1e-9


def _escape(text: str) -> str:
    out = []
    for ch in text:
        if ch in "\\;:,":
            out.append("\\")
        out.append(ch)
    return "".join(out)


def _split_unescaped(text: str, sep: str) -> list[str]:
    """Split on unescaped separators, keeping escape sequences intact."""
    parts: list[str] = []
    buf: list[str] = []
    escaped = False
    for ch in text:
        if escaped:
            buf.append(ch)
            escaped = False
        elif ch == "\\":
            buf.append(ch)
            escaped = True
        elif ch == sep:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if escaped:
        raise MixtureError(f"dangling escape in key string: {text!r}")
    parts.append("".join(buf))
    return parts


def _unescape(text: str) -> str:
    out = []
    escaped = False
    for ch in text:
        if escaped:
            out.append(ch)
            escaped = False
        elif ch == "\\":
            escaped = True
        else:
            out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class MixtureKey:
    """Canonical set of property/value-list pairs; hashable and totally ordered."""

    entries: tuple[tuple[str, tuple[str, ...]], ...]

    @staticmethod
    def of(values: Mapping[str, Sequence[str] | str]) -> "MixtureKey":
        if not values:
            raise MixtureError("a mixture key needs at least one property")
        entries = []
        for prop in sorted(values):
            vals = values[prop]
            if isinstance(vals, str):
                vals = [vals]
            vals = tuple(sorted(set(str(v) for v in vals)))
            if not vals:
                raise MixtureError(f"property {prop!r} has no values")
            entries.append((str(prop), vals))
        return MixtureKey(tuple(entries))

    @property
    def properties(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.entries)

    def values_for(self, prop: str) -> tuple[str, ...] | None:
        for p, vals in self.entries:
            if p == prop:
                return vals
        return None

    def as_dict(self) -> dict[str, list[str]]:
        return {p: list(vals) for p, vals in self.entries}

    def matches(self, other: "MixtureKey") -> bool:
        """True iff value lists intersect for every property present in both."""
        mine = dict(self.entries)
        for prop, vals in other.entries:
            held = mine.get(prop)
            if held is None:
                continue
            if not set(held) & set(vals):
                return False
        return True

    def sort_key(self):
        return (
            len(self.entries),
            tuple(p for p, _ in self.entries),
            tuple(vals for _, vals in self.entries),
        )

    def canonical_string(self) -> str:
        return ";".join(
            f"{_escape(p)}:{','.join(_escape(v) for v in vals)}" for p, vals in self.entries
        )

    @staticmethod
    def parse(text: str) -> "MixtureKey":
        values: dict[str, list[str]] = {}
        for part in _split_unescaped(text, ";"):
            pieces = _split_unescaped(part, ":")
            if len(pieces) != 2:
                raise MixtureError(f"bad key entry: {part!r}")
            prop = _unescape(pieces[0])
            vals = [_unescape(v) for v in _split_unescaped(pieces[1], ",")]
            if prop in values:
                raise MixtureError(f"duplicate property in key string: {prop!r}")
            values[prop] = vals
        return MixtureKey.of(values)

    def __lt__(self, other: "MixtureKey") -> bool:
        return self.sort_key() < other.sort_key()

    def __str__(self) -> str:
        return self.canonical_string()


def key_matches(a: MixtureKey, b: MixtureKey) -> bool:
    return a.matches(b)


def key_compare(a: MixtureKey, b: MixtureKey) -> int:
    """Total order: property count, then property names, then value lists."""
    ka, kb = a.sort_key(), b.sort_key()
    if ka < kb:
        return -1
    if ka > kb:
        return 1
    return 0


def apportion(weights: Mapping[MixtureKey, float], total: int) -> dict[MixtureKey, int]:
    """Integerize weights to counts summing exactly to `total`.

    Largest-remainders: floors first, then one extra unit per key in order of
    descending fractional remainder, remainder ties broken by ascending key
    order. Weights are normalized internally, so any positive vector works.
    """
    if total < 0:
        raise MixtureError("total must be nonnegative")
    keys = sorted(weights, key=MixtureKey.sort_key)
    wsum = float(sum(weights[k] for k in keys))
    if wsum <= 0:
        raise MixtureError("weights must sum to a positive value")
    counts: dict[MixtureKey, int] = {}
    fracs: list[tuple[float, MixtureKey]] = []
    assigned = 0
    for k in keys:
        share = weights[k] / wsum * total
        base = int(share + PROPORTION_TOLERANCE)  # guards 2.9999999998-style noise
        counts[k] = base
        fracs.append((max(0.0, share - base), k))
        assigned += base
    leftover = total - assigned
    fracs.sort(key=lambda item: (-item[0], item[1].sort_key()))
    for _, k in fracs[:leftover]:
        counts[k] += 1
    return counts


class MixtureSpec:
    """Target proportions over mixture keys plus the chunk size they apply to."""

    def __init__(
        self,
        weights: Mapping[MixtureKey, float],
        chunk_size: int,
        strict: bool = False,
    ):
        if chunk_size <= 0:
            raise MixtureError("chunk_size must be positive")
        cleaned: dict[MixtureKey, float] = {}
        for key in sorted(weights, key=MixtureKey.sort_key):
            p = float(weights[key])
            if p < 0:
                raise MixtureError(f"negative proportion for {key}")
            if p == 0.0:
                continue  # zero-weight keys never receive counts; drop them
            if p > 1.0 + PROPORTION_TOLERANCE:
                raise MixtureError(f"proportion above 1 for {key}")
            cleaned[key] = p
        if not cleaned:
            raise MixtureError("mixture has no keys with positive proportion")
        total = sum(cleaned.values())
        if abs(total - 1.0) > PROPORTION_TOLERANCE:
            raise MixtureError(f"proportions sum to {total!r}, expected 1.0")
        self.weights = cleaned
        self.chunk_size = int(chunk_size)
        self.strict = bool(strict)

    def keys(self) -> list[MixtureKey]:
        return sorted(self.weights, key=MixtureKey.sort_key)

    def counts(self, total: int | None = None) -> dict[MixtureKey, int]:
        n = self.chunk_size if total is None else int(total)
        if self.strict and n < len(self.weights):
            raise MixtureError(
                f"chunk size {n} below the number of mixture keys ({len(self.weights)})"
            )
        return apportion(self.weights, n)

    def to_json(self) -> dict:
        return {
            "weights": {k.canonical_string(): p for k, p in sorted(
                self.weights.items(), key=lambda item: item[0].sort_key()
            )},
            "chunk_size": self.chunk_size,
            "strict": self.strict,
        }

    @staticmethod
    def from_json(data: Mapping) -> "MixtureSpec":
        weights = {MixtureKey.parse(k): float(p) for k, p in data["weights"].items()}
        return MixtureSpec(weights, int(data["chunk_size"]), bool(data.get("strict", False)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MixtureSpec)
            and self.weights == other.weights
            and self.chunk_size == other.chunk_size
            and self.strict == other.strict
        )

    def __repr__(self) -> str:
        parts = ", ".join(f"{k}={p:.4g}" for k, p in self.weights.items())
        return f"MixtureSpec({parts}, chunk_size={self.chunk_size}, strict={self.strict})"


def proportions_to_counts(spec: MixtureSpec) -> dict[MixtureKey, int]:
    """Per-chunk sample counts for a mixture; sums exactly to chunk_size."""
    return spec.counts()


@dataclass
class HierarchyBranch:
    values: tuple[str, ...]
    proportion: float
    subtree: "HierarchyNode | None" = None


@dataclass
class HierarchyNode:
    property: str
    branches: list[HierarchyBranch]


class HierarchicalMixtureSpec:
    """Nested proportions, e.g. 50% legal and, inside legal, 60% English."""

    def __init__(self, root: HierarchyNode, chunk_size: int, strict: bool = False):
        self.root = root
        self.chunk_size = int(chunk_size)
        self.strict = bool(strict)
        self._validate(root)

    def _validate(self, node: HierarchyNode) -> None:
        if not node.branches:
            raise MixtureError(f"hierarchy node {node.property!r} has no branches")
        total = sum(b.proportion for b in node.branches)
        if abs(total - 1.0) > PROPORTION_TOLERANCE:
            raise MixtureError(
                f"branch proportions under {node.property!r} sum to {total!r}"
            )
        for branch in node.branches:
            if branch.proportion <= 0:
                raise MixtureError(f"non-positive branch proportion under {node.property!r}")
            if branch.subtree is not None:
                self._validate(branch.subtree)

    def flatten(self) -> MixtureSpec:
        weights: dict[MixtureKey, float] = {}

        def walk(node: HierarchyNode, path: dict[str, tuple[str, ...]], mass: float) -> None:
            if node.property in path:
                raise MixtureError(
                    f"property {node.property!r} assigned twice along one path"
                )
            for branch in node.branches:
                new_path = dict(path)
                new_path[node.property] = tuple(branch.values)
                p = mass * branch.proportion
                if branch.subtree is None:
                    key = MixtureKey.of(new_path)
                    if key in weights:
                        raise MixtureError(f"duplicate flattened key {key}")
                    weights[key] = p
                else:
                    walk(branch.subtree, new_path, p)

        walk(self.root, {}, 1.0)
        return MixtureSpec(weights, self.chunk_size, self.strict)

    def to_json(self) -> dict:
        def node_json(node: HierarchyNode) -> dict:
            return {
                "property": node.property,
                "branches": [
                    {
                        "values": list(b.values),
                        "proportion": b.proportion,
                        "subtree": node_json(b.subtree) if b.subtree else None,
                    }
                    for b in node.branches
                ],
            }

        return {"root": node_json(self.root), "chunk_size": self.chunk_size, "strict": self.strict}

    @staticmethod
    def from_json(data: Mapping) -> "HierarchicalMixtureSpec":
        def parse_node(d: Mapping) -> HierarchyNode:
            return HierarchyNode(
                property=d["property"],
                branches=[
                    HierarchyBranch(
                        values=tuple(b["values"]),
                        proportion=float(b["proportion"]),
                        subtree=parse_node(b["subtree"]) if b.get("subtree") else None,
                    )
                    for b in d["branches"]
                ],
            )

        return HierarchicalMixtureSpec(
            parse_node(data["root"]), int(data["chunk_size"]), bool(data.get("strict", False))
        )


def flatten_hierarchy(spec: HierarchicalMixtureSpec) -> MixtureSpec:
    """Turn every root-to-leaf path into one key weighted by the path product."""
    return spec.flatten()


class MixtureSchedule:
    """Sequence of mixtures activating at fixed training steps (inclusive)."""

    def __init__(self, stages: Sequence[tuple[int, MixtureSpec]]):
        if not stages:
            raise MixtureError("schedule needs at least one stage")
        steps = [int(s) for s, _ in stages]
        if steps[0] != 0:
            raise MixtureError("first stage must activate at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise MixtureError("activation steps must be strictly increasing")
        self.stages: list[tuple[int, MixtureSpec]] = [(int(s), spec) for s, spec in stages]

    def at(self, step: int) -> MixtureSpec:
        if step < 0:
            raise MixtureError("step must be nonnegative")
        current = self.stages[0][1]
        for activation, spec in self.stages:
            if activation <= step:
                current = spec
            else:
                break
        return current

    def to_json(self) -> dict:
        return {"stages": [[s, spec.to_json()] for s, spec in self.stages]}

    @staticmethod
    def from_json(data: Mapping) -> "MixtureSchedule":
        return MixtureSchedule(
            [(int(s), MixtureSpec.from_json(spec)) for s, spec in data["stages"]]
        )


def schedule_at(schedule: MixtureSchedule, step: int) -> MixtureSpec:
    """Spec of the last stage whose activation step is <= step."""
    return schedule.at(step)


def infer_mixture(index, chunk_size: int, strict: bool = False) -> MixtureSpec:
    """Derive proportions from the data distribution of a chunker index."""
    counts = index.key_sample_counts()
    total = sum(counts.values())
    if total <= 0:
        raise MixtureError("cannot infer a mixture from an empty index")
    weights = {key: n / total for key, n in counts.items() if n > 0}
    return MixtureSpec(weights, chunk_size, strict)


class MixtureSource:
    """Provider of the mixture in force, re-read before every chunk."""

    algorithm = "static"

    def current_spec(self) -> MixtureSpec:
        raise NotImplementedError

    def observe_feedback(self, step: int, losses: Mapping[MixtureKey, tuple[float, int]]) -> None:
        """Default: mixture ignores training feedback."""

    def is_dynamic(self) -> bool:
        return False

    def state_dict(self) -> dict:
        return {}

    def load_state(self, state: Mapping) -> None:
        pass


class StaticSource(MixtureSource):
    algorithm = "static"

    def __init__(self, spec: MixtureSpec):
        self.spec = spec

    def current_spec(self) -> MixtureSpec:
        return self.spec


class ScheduleSource(MixtureSource):
    """Stage selection driven by the last training step reported in feedback."""

    algorithm = "schedule"

    def __init__(self, schedule: MixtureSchedule):
        self.schedule = schedule
        self.last_step = 0

    def current_spec(self) -> MixtureSpec:
        return self.schedule.at(self.last_step)

    def observe_feedback(self, step: int, losses) -> None:
        if step > self.last_step:
            self.last_step = step

    def is_dynamic(self) -> bool:
        return True

    def state_dict(self) -> dict:
        return {"last_step": self.last_step}

    def load_state(self, state: Mapping) -> None:
        self.last_step = int(state.get("last_step", 0))


def sorted_keys(keys: Iterable[MixtureKey]) -> list[MixtureKey]:
    return sorted(keys, key=MixtureKey.sort_key)
