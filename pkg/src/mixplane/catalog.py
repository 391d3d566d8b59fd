"""Metadata catalog: typed per-sample properties, filters, and intervals.

Datasets are registered once, read-only thereafter. Each sample gets a
property map validated against a schema; values are interned to small
integer codes per property so filters run as vectorized comparisons over
per-file code arrays. Filter output feeds interval detection, which
collapses runs of consecutive samples with identical properties into
half-open ranges — the raw material for index construction.
"""

from __future__ import annotations

import hashlib
import logging
import pickle
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataReadError, QueryError, RegistrationError, SchemaError
from .formats import is_supported, iter_records, open_binary
from .mixtures import MixtureKey

logger = logging.getLogger(__name__)

_SNAPSHOT_MAGIC = b"MXPCAT\x01"
_SNAPSHOT_VERSION = 1

_OPS = ("==", "!=", "in", "not-in")


@dataclass(frozen=True)
class PropertyDef:
    """One typed property column. Categorical kinds enumerate values up front."""

    name: str
    kind: str = "string"
    nullable: bool = True
    multiple: bool = False
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("string", "categorical"):
            raise SchemaError(f"property {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories:
                raise SchemaError(
                    f"categorical property {self.name!r} must enumerate its categories"
                )
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"property {self.name!r}: duplicate categories")
        elif self.categories is not None:
            raise SchemaError(f"string property {self.name!r} must not list categories")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "nullable": self.nullable,
            "multiple": self.multiple,
            "categories": list(self.categories) if self.categories else None,
        }

    @staticmethod
    def from_json(data: Mapping) -> "PropertyDef":
        cats = data.get("categories")
        return PropertyDef(
            name=data["name"],
            kind=data.get("kind", "string"),
            nullable=bool(data.get("nullable", True)),
            multiple=bool(data.get("multiple", False)),
            categories=tuple(cats) if cats else None,
        )


class PropertySchema:
    """Ordered property definitions; order fixes canonical column order."""

    def __init__(self, properties: Sequence[PropertyDef]):
        names = [p.name for p in properties]
        if len(set(names)) != len(names):
            raise SchemaError("property names must be unique within a schema")
        if not properties:
            raise SchemaError("schema needs at least one property")
        self.properties: tuple[PropertyDef, ...] = tuple(properties)
        self._by_name = {p.name: p for p in self.properties}

    def names(self) -> list[str]:
        return [p.name for p in self.properties]

    def get(self, name: str) -> PropertyDef | None:
        return self._by_name.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __eq__(self, other) -> bool:
        return isinstance(other, PropertySchema) and self.properties == other.properties

    def to_json(self) -> dict:
        return {"properties": [p.to_json() for p in self.properties]}

    @staticmethod
    def from_json(data: Mapping) -> "PropertySchema":
        return PropertySchema([PropertyDef.from_json(p) for p in data["properties"]])


@dataclass
class SampleRecord:
    """One sample's identity plus its non-null property values."""

    dataset_id: int
    file_id: int
    sample_id: int
    values: dict[str, list[str]]


@dataclass(frozen=True)
class FilterPredicate:
    property: str
    op: str
    operand: str | tuple[str, ...]

    def __post_init__(self):
        if self.op not in _OPS:
            raise QueryError(f"unknown filter op {self.op!r}; expected one of {_OPS}")
        if self.op in ("==", "!="):
            if not isinstance(self.operand, str):
                raise QueryError(f"{self.op} takes a single value, got {self.operand!r}")
        else:
            if isinstance(self.operand, str) or not self.operand:
                raise QueryError(f"{self.op} takes a non-empty value list")

    @staticmethod
    def of(item: "FilterPredicate | tuple") -> "FilterPredicate":
        if isinstance(item, FilterPredicate):
            return item
        prop, op, operand = item
        if op in ("in", "not-in") and not isinstance(operand, tuple):
            operand = tuple(operand)
        return FilterPredicate(prop, op, operand)

    def operand_values(self) -> tuple[str, ...]:
        return (self.operand,) if isinstance(self.operand, str) else tuple(self.operand)

    def to_json(self) -> list:
        return [self.property, self.op, list(self.operand_values())]

    @staticmethod
    def from_json(data: Sequence) -> "FilterPredicate":
        prop, op, values = data
        operand = values[0] if op in ("==", "!=") else tuple(values)
        return FilterPredicate(prop, op, operand)


@dataclass(frozen=True)
class IntervalRow:
    """Maximal run of consecutive same-property samples within one file."""

    dataset_id: int
    file_id: int
    key: MixtureKey
    start: int
    end: int

    @property
    def values(self) -> dict[str, list[str]]:
        return self.key.as_dict()

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class JsonFieldParser:
    """Reads property values straight out of each JSON record.

    `fields` maps property name → record field name. Missing fields and
    explicit nulls count as null; lists are kept as multi-values.
    """

    fields: tuple[tuple[str, str], ...]

    @staticmethod
    def for_properties(names: Iterable[str]) -> "JsonFieldParser":
        return JsonFieldParser(tuple((n, n) for n in names))

    @staticmethod
    def of(mapping: Mapping[str, str]) -> "JsonFieldParser":
        return JsonFieldParser(tuple(sorted(mapping.items())))

    def parse(self, sample_id: int, record: Mapping) -> dict[str, object]:
        out: dict[str, object] = {}
        for prop, fld in self.fields:
            if fld in record:
                out[prop] = record[fld]
        return out


def _normalize_values(prop: PropertyDef, raw: object, where: str) -> tuple[str, ...]:
    """Coerce one parser output into a tuple of strings ('' tuple = null)."""
    if raw is None:
        values: tuple[str, ...] = ()
    elif isinstance(raw, str):
        values = (raw,)
    elif isinstance(raw, (list, tuple, set)):
        values = tuple(sorted(str(v) for v in raw))
    elif isinstance(raw, (int, float, bool)):
        values = (str(raw),)
    else:
        raise SchemaError(f"{where}: property {prop.name!r} got unsupported value {raw!r}")
    if not values:
        if not prop.nullable:
            raise SchemaError(f"{where}: non-nullable property {prop.name!r} is missing")
        return ()
    if len(values) > 1 and not prop.multiple:
        raise SchemaError(
            f"{where}: property {prop.name!r} is single-valued but got {len(values)} values"
        )
    if len(set(values)) != len(values):
        values = tuple(sorted(set(values)))
    if prop.kind == "categorical":
        bad = [v for v in values if v not in prop.categories]  # type: ignore[operator]
        if bad:
            raise SchemaError(
                f"{where}: value {bad[0]!r} not in categories of {prop.name!r}"
            )
    return values


def _hash_file(path: str) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        while True:
            block = f.read(1 << 20)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def _parse_one_file(path: str, parser, schema: PropertySchema) -> tuple[str, list[dict[str, tuple[str, ...]]]]:
    """Worker: parse + validate one file, returning per-sample string values."""
    digest = _hash_file(path)
    samples: list[dict[str, tuple[str, ...]]] = []
    for sample_id, record in enumerate(iter_records(path)):
        raw = parser.parse(sample_id, record)
        where = f"{path} sample {sample_id}"
        unknown = set(raw) - set(schema.names())
        if unknown:
            raise SchemaError(f"{where}: unknown property {sorted(unknown)[0]!r}")
        values: dict[str, tuple[str, ...]] = {}
        for prop in schema.properties:
            norm = _normalize_values(prop, raw.get(prop.name), where)
            if norm:
                values[prop.name] = norm
        samples.append(values)
    return digest, samples


@dataclass
class _FileStore:
    """Columnar metadata for one registered file."""

    path: str
    dataset_id: int
    n_samples: int
    content_hash: str
    codes: dict[str, np.ndarray] = field(default_factory=dict)  # single-valued, -1 null
    multi: dict[str, list[tuple[int, ...] | None]] = field(default_factory=dict)


class MetadataCatalog:
    """Registered datasets with queryable per-sample properties."""

    def __init__(self):
        self._lock = threading.Lock()
        self._dataset_names: list[str] = []
        self._dataset_files: dict[int, list[int]] = {}
        self._dataset_schemas: dict[int, PropertySchema] = {}
        self._files: dict[int, _FileStore] = {}
        self._props: dict[str, PropertyDef] = {}
        self._vocab: dict[str, list[str]] = {}
        self._vocab_idx: dict[str, dict[str, int]] = {}

    # ------------------------------------------------------------------ views

    def dataset_id(self, name: str) -> int:
        try:
            return self._dataset_names.index(name)
        except ValueError:
            raise QueryError(f"unknown dataset {name!r}") from None

    def dataset_name(self, dataset_id: int) -> str:
        return self._dataset_names[dataset_id]

    def dataset_names(self) -> list[str]:
        return list(self._dataset_names)

    def files_of(self, dataset_id: int) -> list[int]:
        return list(self._dataset_files[dataset_id])

    def file_path(self, file_id: int) -> str:
        return self._files[file_id].path

    def file_paths(self) -> dict[int, str]:
        return {fid: store.path for fid, store in self._files.items()}

    def num_samples(self, file_id: int | None = None) -> int:
        if file_id is not None:
            return self._files[file_id].n_samples
        return sum(s.n_samples for s in self._files.values())

    def properties(self) -> dict[str, PropertyDef]:
        return dict(self._props)

    # ----------------------------------------------------------- registration

    def register_dataset(
        self,
        name: str,
        files: Sequence[str | Path],
        parser,
        schema: PropertySchema,
        workers: int = 1,
    ) -> int:
        """Parse `files` with `parser`, validate against `schema`, commit atomically.

        Re-registering a name with byte-identical files is a no-op; any
        change under an existing name is an error (this layer is read-only).
        Parsing uses `workers` processes; results do not depend on the count.
        """
        paths = [str(Path(p)) for p in files]
        if not paths:
            raise RegistrationError(f"dataset {name!r}: no files given")
        with self._lock:
            for p in paths:
                if not Path(p).is_file():
                    raise RegistrationError(f"dataset {name!r}: file not found: {p}")
                if not is_supported(p):
                    raise RegistrationError(f"dataset {name!r}: unsupported file type: {p}")

            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    parsed = list(pool.map(_parse_one_file, paths, [parser] * len(paths), [schema] * len(paths)))
            else:
                parsed = [_parse_one_file(p, parser, schema) for p in paths]

            if name in self._dataset_names:
                return self._check_reregistration(name, paths, parsed, schema)

            # merge property definitions across datasets; conflicts are errors
            props = dict(self._props)
            for prop in schema.properties:
                held = props.get(prop.name)
                if held is None:
                    props[prop.name] = prop
                elif (held.kind, held.multiple, held.categories) != (
                    prop.kind, prop.multiple, prop.categories
                ):
                    raise SchemaError(
                        f"property {prop.name!r} conflicts with an earlier dataset's definition"
                    )

            # stage vocab + columns; nothing is committed until all files pass
            vocab = {p: list(v) for p, v in self._vocab.items()}
            vocab_idx = {p: dict(v) for p, v in self._vocab_idx.items()}
            for prop in schema.properties:
                if prop.name not in vocab:
                    if prop.kind == "categorical":
                        vocab[prop.name] = list(prop.categories)  # type: ignore[arg-type]
                    else:
                        vocab[prop.name] = []
                    vocab_idx[prop.name] = {v: i for i, v in enumerate(vocab[prop.name])}

            def intern(prop_name: str, value: str) -> int:
                idx = vocab_idx[prop_name]
                code = idx.get(value)
                if code is None:
                    code = len(vocab[prop_name])
                    vocab[prop_name].append(value)
                    idx[value] = code
                return code

            dataset_id = len(self._dataset_names)
            next_file_id = 1 + max(self._files, default=0)
            stores: list[_FileStore] = []
            for path, (digest, samples) in zip(paths, parsed):
                store = _FileStore(
                    path=path,
                    dataset_id=dataset_id,
                    n_samples=len(samples),
                    content_hash=digest,
                )
                for prop in schema.properties:
                    if prop.multiple:
                        col: list[tuple[int, ...] | None] = []
                        for values in samples:
                            held = values.get(prop.name)
                            col.append(
                                None if held is None
                                else tuple(intern(prop.name, v) for v in held)
                            )
                        store.multi[prop.name] = col
                    else:
                        arr = np.full(len(samples), -1, dtype=np.int32)
                        for i, values in enumerate(samples):
                            held = values.get(prop.name)
                            if held is not None:
                                arr[i] = intern(prop.name, held[0])
                        store.codes[prop.name] = arr
                stores.append(store)

            # commit
            self._props = props
            self._vocab = vocab
            self._vocab_idx = vocab_idx
            self._dataset_names.append(name)
            self._dataset_schemas[dataset_id] = schema
            file_ids = []
            for store in stores:
                fid = next_file_id
                next_file_id += 1
                self._files[fid] = store
                file_ids.append(fid)
            self._dataset_files[dataset_id] = file_ids
            logger.info(
                "registered dataset %s: %d files, %d samples",
                name, len(file_ids), sum(s.n_samples for s in stores),
            )
            return dataset_id

    def _check_reregistration(self, name, paths, parsed, schema) -> int:
        dataset_id = self._dataset_names.index(name)
        if schema != self._dataset_schemas[dataset_id]:
            raise RegistrationError(f"dataset {name!r} already registered with a different schema")
        held = sorted(
            (self._files[fid].path, self._files[fid].content_hash)
            for fid in self._dataset_files[dataset_id]
        )
        offered = sorted((p, digest) for p, (digest, _) in zip(paths, parsed))
        if held != offered:
            raise RegistrationError(
                f"dataset {name!r} already registered with different content"
            )
        logger.info("dataset %s unchanged; registration is a no-op", name)
        return dataset_id

    # ---------------------------------------------------------------- filters

    def _code_of(self, prop: str, value: str) -> int | None:
        idx = self._vocab_idx.get(prop)
        return None if idx is None else idx.get(value)

    def _single_mask(self, store: _FileStore, pred: FilterPredicate) -> np.ndarray:
        arr = store.codes[pred.property]
        codes = [self._code_of(pred.property, v) for v in pred.operand_values()]
        known = np.array([c for c in codes if c is not None], dtype=np.int32)
        if pred.op in ("==", "in"):
            if known.size == 0:
                return np.zeros(store.n_samples, dtype=bool)
            hit = np.isin(arr, known)
            hit &= arr != -1
            return hit
        miss = np.isin(arr, known) & (arr != -1) if known.size else np.zeros(store.n_samples, dtype=bool)
        return ~miss

    def _multi_mask(self, store: _FileStore, pred: FilterPredicate) -> np.ndarray:
        codes = {self._code_of(pred.property, v) for v in pred.operand_values()}
        codes.discard(None)
        positive = pred.op in ("==", "in")
        cache: dict[tuple[int, ...] | None, bool] = {}
        col = store.multi[pred.property]
        out = np.empty(store.n_samples, dtype=bool)
        for i, held in enumerate(col):
            hit = cache.get(held)
            if hit is None:
                if held is None:
                    any_match = False  # null holds no values
                else:
                    any_match = any(c in codes for c in held)
                hit = any_match if positive else not any_match
                cache[held] = hit
            out[i] = hit
        return out

    def _file_mask(self, store: _FileStore, predicates: Sequence[FilterPredicate]) -> np.ndarray:
        mask = np.ones(store.n_samples, dtype=bool)
        for pred in predicates:
            if pred.property in store.codes:
                mask &= self._single_mask(store, pred)
            elif pred.property in store.multi:
                mask &= self._multi_mask(store, pred)
            else:
                # property absent from this dataset's schema: all values null
                if pred.op in ("==", "in"):
                    mask[:] = False
            if not mask.any():
                break
        return mask

    def _validated(self, predicates: Sequence) -> list[FilterPredicate]:
        preds = [FilterPredicate.of(p) for p in predicates]
        for pred in preds:
            if pred.property not in self._props:
                raise QueryError(f"unknown property {pred.property!r}")
        return preds

    def _sample_values(self, store: _FileStore, i: int) -> dict[str, list[str]]:
        values: dict[str, list[str]] = {}
        schema = self._dataset_schemas[store.dataset_id]
        for prop in schema.properties:
            if prop.multiple:
                held = store.multi[prop.name][i]
                if held is not None:
                    values[prop.name] = [self._vocab[prop.name][c] for c in held]
            else:
                code = int(store.codes[prop.name][i])
                if code >= 0:
                    values[prop.name] = [self._vocab[prop.name][code]]
        return values

    def execute_filter(self, predicates: Sequence) -> list[SampleRecord]:
        """Records satisfying every predicate, sorted by (file_id, sample_id).

        Null values never satisfy `==`/`in`; they always satisfy `!=`/`not-in`
        (no held value equals the operand). For `multiple` properties a
        positive op matches if any held value matches.
        """
        if not self._files:
            raise QueryError("catalog is empty")
        preds = self._validated(predicates)
        out: list[SampleRecord] = []
        for fid in sorted(self._files):
            store = self._files[fid]
            mask = self._file_mask(store, preds)
            for i in np.flatnonzero(mask):
                out.append(
                    SampleRecord(store.dataset_id, fid, int(i), self._sample_values(store, int(i)))
                )
        return out

    # -------------------------------------------------------------- intervals

    def filter_intervals(self, predicates: Sequence) -> list[IntervalRow]:
        """Fused filter + interval detection, one vectorized pass per file.

        Equivalent to detect_intervals(execute_filter(predicates)) but never
        materializes per-sample records.
        """
        if not self._files:
            raise QueryError("catalog is empty")
        preds = self._validated(predicates)
        rows: list[IntervalRow] = []
        for fid in sorted(self._files):
            store = self._files[fid]
            mask = self._file_mask(store, preds)
            idx = np.flatnonzero(mask)
            if idx.size == 0:
                continue
            schema = self._dataset_schemas[store.dataset_id]
            # per-sample group signature: one code row per property
            sig = np.empty((len(schema.properties), idx.size), dtype=np.int64)
            for j, prop in enumerate(schema.properties):
                if prop.multiple:
                    col = store.multi[prop.name]
                    tuple_code: dict[tuple[int, ...] | None, int] = {None: -1}
                    row = np.empty(idx.size, dtype=np.int64)
                    for k, i in enumerate(idx):
                        held = col[i]
                        code = tuple_code.get(held)
                        if code is None:
                            code = len(tuple_code)
                            tuple_code[held] = code
                        row[k] = code
                    sig[j] = row
                else:
                    sig[j] = store.codes[prop.name][idx]
            breaks = np.diff(idx) != 1
            for j in range(sig.shape[0]):
                breaks |= np.diff(sig[j]) != 0
            starts = np.concatenate(([0], np.flatnonzero(breaks) + 1))
            ends = np.concatenate((np.flatnonzero(breaks) + 1, [idx.size]))
            for s, e in zip(starts, ends):
                first = int(idx[s])
                values = self._sample_values(store, first)
                if not values:
                    raise QueryError(
                        f"sample {first} of file {fid} has no non-null properties; "
                        "it cannot be keyed into a mixture"
                    )
                rows.append(
                    IntervalRow(
                        dataset_id=store.dataset_id,
                        file_id=fid,
                        key=MixtureKey.of(values),
                        start=first,
                        end=int(idx[e - 1]) + 1,
                    )
                )
        return rows

    # --------------------------------------------------------------- snapshot

    def save_snapshot(self, path: str | Path) -> None:
        payload = {
            "version": _SNAPSHOT_VERSION,
            "dataset_names": self._dataset_names,
            "dataset_files": self._dataset_files,
            "dataset_schemas": {d: s.to_json() for d, s in self._dataset_schemas.items()},
            "files": self._files,
            "props": {n: p.to_json() for n, p in self._props.items()},
            "vocab": self._vocab,
        }
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as f:
            f.write(_SNAPSHOT_MAGIC)
            pickle.dump(payload, f, protocol=4)
        tmp.replace(path)

    @staticmethod
    def load_snapshot(path: str | Path) -> "MetadataCatalog":
        with open(path, "rb") as f:
            magic = f.read(len(_SNAPSHOT_MAGIC))
            if magic != _SNAPSHOT_MAGIC:
                raise DataReadError(f"{path}: not a catalog snapshot")
            payload = pickle.load(f)
        if payload.get("version") != _SNAPSHOT_VERSION:
            raise DataReadError(f"{path}: unsupported snapshot version")
        cat = MetadataCatalog()
        cat._dataset_names = payload["dataset_names"]
        cat._dataset_files = payload["dataset_files"]
        cat._dataset_schemas = {
            d: PropertySchema.from_json(s) for d, s in payload["dataset_schemas"].items()
        }
        cat._files = payload["files"]
        cat._props = {n: PropertyDef.from_json(p) for n, p in payload["props"].items()}
        cat._vocab = payload["vocab"]
        cat._vocab_idx = {p: {v: i for i, v in enumerate(vs)} for p, vs in cat._vocab.items()}
        return cat


def detect_intervals(rows: Sequence[SampleRecord]) -> list[IntervalRow]:
    """Collapse sorted records into maximal constant-property runs per file.

    A single linear pass: (1) walk the base rows, (2) compare each sample id
    with its predecessor, (3) open a new group on a gap, file change, or any
    property change, (4) emit each group's min/max as a half-open interval.
    """
    out: list[IntervalRow] = []
    prev: SampleRecord | None = None
    start: SampleRecord | None = None

    def emit(first: SampleRecord, last: SampleRecord) -> None:
        if not first.values:
            raise QueryError(
                f"sample {first.sample_id} of file {first.file_id} has no non-null "
                "properties; it cannot be keyed into a mixture"
            )
        out.append(
            IntervalRow(
                dataset_id=first.dataset_id,
                file_id=first.file_id,
                key=MixtureKey.of(first.values),
                start=first.sample_id,
                end=last.sample_id + 1,
            )
        )

    for row in rows:
        if prev is not None:
            if (row.file_id, row.sample_id) <= (prev.file_id, prev.sample_id):
                raise QueryError(
                    "detect_intervals requires rows strictly sorted by (file_id, sample_id)"
                )
            same_run = (
                row.file_id == prev.file_id
                and row.sample_id == prev.sample_id + 1
                and row.values == prev.values
            )
            if not same_run:
                emit(start, prev)  # type: ignore[arg-type]
                start = row
        else:
            start = row
        prev = row
    if prev is not None:
        emit(start, prev)  # type: ignore[arg-type]
    return out
