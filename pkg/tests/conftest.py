"""Shared fixtures: tiny corpora, catalogs, and a live server factory."""

from __future__ import annotations

import pytest

from mixplane.catalog import JsonFieldParser, MetadataCatalog, PropertyDef, PropertySchema
from mixplane.formats import write_jsonl
from mixplane.server import MixplaneServer


@pytest.fixture
def two_language_corpus(tmp_path):
    """Four python files (700 samples) + two javascript files (300)."""
    files = []
    for i in range(4):
        path = tmp_path / f"py{i}.jsonl"
        write_jsonl(
            path,
            [
                {"text": f"python file{i} sample {j} alpha beta", "language": "python"}
                for j in range(175)
            ],
        )
        files.append(path)
    for i in range(2):
        path = tmp_path / f"js{i}.jsonl"
        write_jsonl(
            path,
            [
                {"text": f"javascript file{i} sample {j} gamma", "language": "javascript"}
                for j in range(150)
            ],
        )
        files.append(path)
    return files


@pytest.fixture
def language_catalog(two_language_corpus):
    catalog = MetadataCatalog()
    catalog.register_dataset(
        "code",
        two_language_corpus,
        JsonFieldParser.for_properties(["language"]),
        PropertySchema([PropertyDef("language", "string")]),
    )
    return catalog


@pytest.fixture
def live_server(language_catalog):
    """A started server over the two-language catalog; stopped on teardown."""
    server = MixplaneServer(language_catalog)
    host, port = server.start()
    yield server, host, port
    server.stop()
