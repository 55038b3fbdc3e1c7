"""Shared domain records: granularities, image/query records, manifests.

A manifest lives on disk as a directory holding ``images.jsonl``,
``queries.jsonl`` and an optional ``manifest.json`` with free-form metadata.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence

IMAGES_FILE = "images.jsonl"
QUERIES_FILE = "queries.jsonl"
METADATA_FILE = "manifest.json"


class Granularity(str, Enum):
    CAPTION = "caption"
    IMAGERY_TAG = "imagery_tag"
    PHRASE = "phrase"
    TRIPLE = "triple"
    FRAGMENT = "fragment"

    @property
    def title(self) -> str:
        return GRANULARITY_TITLES[self]

    @classmethod
    def parse(cls, label: str) -> "Granularity":
        try:
            return cls(label)
        except ValueError:
            raise ValueError(f"unknown granularity {label!r}") from None


# Report column order: coarse/global first, fine/local last.
GRANULARITY_ORDER: tuple[Granularity, ...] = tuple(Granularity)
GRANULARITY_TITLES = {
    Granularity.CAPTION: "Caption",
    Granularity.IMAGERY_TAG: "Imagery Tag",
    Granularity.PHRASE: "Phrase",
    Granularity.TRIPLE: "Triple",
    Granularity.FRAGMENT: "Fragment",
}


class Mode(str, Enum):
    BASELINE = "baseline"
    ENHANCED_MAXSIM = "enhanced_maxsim"
    ENHANCED_VOTE = "enhanced_vote"


MODE_ORDER: tuple[Mode, ...] = tuple(Mode)
MODE_TITLES = {
    Mode.BASELINE: "Baseline",
    Mode.ENHANCED_MAXSIM: "Enhanced",
    Mode.ENHANCED_VOTE: "Enhanced w/ vote",
}


@dataclass(frozen=True)
class ImageRecord:
    id: str
    uri: str
    embedding_id: Optional[str] = None

    @property
    def key(self) -> str:
        """Id used to look the image up in an embedding store."""
        return self.embedding_id or self.id

    def to_json(self) -> dict:
        out = {"id": self.id, "uri": self.uri}
        if self.embedding_id is not None:
            out["embedding_id"] = self.embedding_id
        return out


@dataclass(frozen=True)
class QueryRecord:
    id: str
    text: str
    granularity: Granularity
    true_image_ids: frozenset[str]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "granularity": self.granularity.value,
            "true_image_ids": sorted(self.true_image_ids),
        }


@dataclass(frozen=True)
class DatasetManifest:
    images: tuple[ImageRecord, ...] = ()
    queries: tuple[QueryRecord, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def image_ids(self) -> list[str]:
        return [im.id for im in self.images]

    def image(self, image_id: str) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def query(self, query_id: str) -> QueryRecord:
        for q in self.queries:
            if q.id == query_id:
                return q
        raise KeyError(query_id)

    def counts(self) -> dict[Granularity, int]:
        out = {g: 0 for g in GRANULARITY_ORDER}
        for q in self.queries:
            out[q.granularity] += 1
        return out


@dataclass(frozen=True)
class RankedImage:
    image_id: str
    score: float
    votes: Optional[int] = None


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    mode: Mode
    ranked: tuple[RankedImage, ...]
    candidate_count: int
    # Set when an enhanced mode degraded to baseline after enhancement failed.
    fallback: bool = False

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.ranked]


@dataclass(frozen=True, order=True)
class Violation:
    record_id: str
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.record_id}: {self.rule}" + (f" ({self.detail})" if self.detail else "")


class ManifestParseError(ValueError):
    """A manifest line could not be parsed. Carries the file and line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def validate_manifest(manifest: DatasetManifest) -> list[Violation]:
    """Check referential integrity and record invariants.

    Returns violations sorted by record id, then rule; empty means valid.
    """
    found: list[Violation] = []
    seen: set[str] = set()
    for im in manifest.images:
        if not im.id:
            found.append(Violation(im.id, "empty_image_id"))
        elif im.id in seen:
            found.append(Violation(im.id, "duplicate_image_id", "image ids must be unique"))
        seen.add(im.id)

    seen_queries: set[str] = set()
    for q in manifest.queries:
        if not q.id:
            found.append(Violation(q.id, "empty_query_id"))
        elif q.id in seen_queries:
            found.append(Violation(q.id, "duplicate_query_id", "query ids must be unique"))
        seen_queries.add(q.id)
        if not q.text.strip():
            found.append(Violation(q.id, "empty_text"))
        if not q.true_image_ids:
            found.append(Violation(q.id, "empty_ground_truth"))
        for image_id in sorted(q.true_image_ids):
            if image_id not in seen:
                found.append(Violation(q.id, "missing_image", image_id))
    return sorted(found)


# -- line-delimited I/O -------------------------------------------------------


def _iter_json_lines(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ManifestParseError(path, lineno, "expected a JSON object")
            yield lineno, obj


def _require_str(path, lineno, obj, name, optional=False):
    value = obj.get(name)
    if value is None and optional:
        return None
    if not isinstance(value, str):
        raise ManifestParseError(path, lineno, f"field {name!r} must be a string")
    return value


def read_images(path) -> list[ImageRecord]:
    path = Path(path)
    out = []
    for lineno, obj in _iter_json_lines(path):
        out.append(
            ImageRecord(
                id=_require_str(path, lineno, obj, "id"),
                uri=_require_str(path, lineno, obj, "uri"),
                embedding_id=_require_str(path, lineno, obj, "embedding_id", optional=True),
            )
        )
    return out


def read_queries(path) -> list[QueryRecord]:
    path = Path(path)
    out = []
    for lineno, obj in _iter_json_lines(path):
        label = _require_str(path, lineno, obj, "granularity")
        try:
            granularity = Granularity.parse(label)
        except ValueError as exc:
            raise ManifestParseError(path, lineno, str(exc)) from None
        true_ids = obj.get("true_image_ids")
        if not isinstance(true_ids, list) or not all(isinstance(t, str) for t in true_ids):
            raise ManifestParseError(path, lineno, "field 'true_image_ids' must be a list of strings")
        out.append(
            QueryRecord(
                id=_require_str(path, lineno, obj, "id"),
                text=_require_str(path, lineno, obj, "text"),
                granularity=granularity,
                true_image_ids=frozenset(true_ids),
            )
        )
    return out


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"manifest directory not found: {directory}")
    meta_path = directory / METADATA_FILE
    metadata = {}
    if meta_path.exists():
        metadata = {str(k): str(v) for k, v in json.loads(meta_path.read_text("utf-8")).items()}
    return DatasetManifest(
        images=tuple(read_images(directory / IMAGES_FILE)),
        queries=tuple(read_queries(directory / QUERIES_FILE)),
        metadata=metadata,
    )


def save_manifest(manifest: DatasetManifest, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_jsonl(directory / IMAGES_FILE, (im.to_json() for im in manifest.images))
    write_jsonl(directory / QUERIES_FILE, (q.to_json() for q in manifest.queries))
    (directory / METADATA_FILE).write_text(
        json.dumps(dict(manifest.metadata), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return directory


def queries_by_granularity(
    queries: Sequence[QueryRecord],
) -> dict[Granularity, list[QueryRecord]]:
    out: dict[Granularity, list[QueryRecord]] = {}
    for q in queries:
        out.setdefault(q.granularity, []).append(q)
    return out
