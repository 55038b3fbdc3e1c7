"""Build five-granularity query sets from captioned images.

Stages: imagery tags (vision prompt per image), SPO triples (prompted
extraction from captions), fragments (prompted fusion of 2+ triples of one
image), optional ground-truth merging of near-duplicate texts, and manifest
assembly. Phrases are imported as-is.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .embedding import EmbeddingProvider, cosine_similarity
from .enhancer import PromptTemplate
from .genclient import (
    CapabilityError,
    EmptyGenerationError,
    GenerationClient,
    GenerationRequest,
    parse_sentence_list,
    strip_enumeration,
)
from .manifest import (
    GRANULARITY_ORDER,
    DatasetManifest,
    Granularity,
    ImageRecord,
    QueryRecord,
    Violation,
    validate_manifest,
)

log = logging.getLogger(__name__)

TRIPLE_DELIMITER = "|"
MAX_TAG_WORDS = 6
DEFAULT_TAU = 0.9


class FusionError(RuntimeError):
    pass


class BuildError(ValueError):
    def __init__(self, violations: Sequence[Violation]):
        super().__init__("manifest has violations:\n" + "\n".join(f"  {v}" for v in violations))
        self.violations = list(violations)


@dataclass(frozen=True)
class TextRecord:
    """A caption or phrase row from the input files."""

    id: str
    image_id: str
    text: str

    def to_json(self) -> dict:
        return {"id": self.id, "image_id": self.image_id, "text": self.text}


@dataclass(frozen=True)
class SpoTriple:
    subject: str
    predicate: str
    object: str
    source_caption_id: str = ""

    def __post_init__(self):
        for name in ("subject", "predicate", "object"):
            part = getattr(self, name)
            if not part.strip():
                raise ValueError(f"triple {name} is empty")
            if TRIPLE_DELIMITER in part:
                raise ValueError(f"triple {name} contains the delimiter: {part!r}")

    @property
    def text(self) -> str:
        return f"{self.subject} {self.predicate} {self.object}"

    def to_json(self) -> dict:
        return {"subject": self.subject, "predicate": self.predicate, "object": self.object,
                "source_caption_id": self.source_caption_id}

    @classmethod
    def from_json(cls, obj: dict) -> "SpoTriple":
        return cls(obj["subject"], obj["predicate"], obj["object"], obj.get("source_caption_id", ""))


@dataclass(frozen=True)
class FragmentRecord:
    text: str
    source_triples: tuple[SpoTriple, ...]
    image_ids: frozenset[str]

    def __post_init__(self):
        if len(self.source_triples) < 2:
            raise ValueError("a fragment needs at least two source triples")
        if not self.text.strip() or "\n" in self.text:
            raise ValueError("fragment text must be a single non-empty line")

    def to_json(self) -> dict:
        return {"text": self.text, "source_triples": [t.to_json() for t in self.source_triples],
                "image_ids": sorted(self.image_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "FragmentRecord":
        return cls(obj["text"], tuple(SpoTriple.from_json(t) for t in obj["source_triples"]),
                   frozenset(obj["image_ids"]))


@dataclass(frozen=True)
class ImageryTagRecord:
    tag: str
    image_ids: frozenset[str]

    def to_json(self) -> dict:
        return {"tag": self.tag, "image_ids": sorted(self.image_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "ImageryTagRecord":
        return cls(obj["tag"], frozenset(obj["image_ids"]))


def normalize_tag(tag: str) -> str:
    return " ".join(tag.casefold().split())


def _request(template: PromptTemplate, prompt: str, image_uri: Optional[str] = None) -> GenerationRequest:
    return GenerationRequest(model_name=template.model or "gpt-3.5-turbo", prompt=prompt, image_uri=image_uri,
                             temperature=template.temperature, max_tokens=template.max_tokens)


def generate_imagery_tags(image_uri: str, templates: Sequence[PromptTemplate],
                          client: GenerationClient) -> list[str]:
    """Ask a vision model for short tags; keep lines of at most six words, case-folded, unique."""
    if not client.vision:
        raise CapabilityError("imagery tags need a vision-capable endpoint")
    tags: dict[str, None] = {}
    for template in templates:
        raw = client.generate(_request(template, template.render(), image_uri=image_uri))
        try:
            lines = parse_sentence_list(raw, template.n)
        except EmptyGenerationError:
            log.info("template %s produced no tags for %s", template.name, image_uri)
            continue
        for line in lines:
            tag = normalize_tag(line.strip(" \"'.,;"))
            if tag and len(tag.split()) <= MAX_TAG_WORDS:
                tags.setdefault(tag, None)
    return list(tags)


def parse_triples(raw: str, source_caption_id: str = "") -> list[SpoTriple]:
    out = []
    for line in raw.splitlines():
        parts = [p.strip() for p in strip_enumeration(line).split(TRIPLE_DELIMITER)]
        if len(parts) != 3 or not all(parts):
            continue
        out.append(SpoTriple(*parts, source_caption_id=source_caption_id))
    return out


def extract_triples(caption: str, client: GenerationClient, template: PromptTemplate,
                    source_caption_id: str = "") -> list[SpoTriple]:
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    raw = client.generate(_request(template, template.render(caption)))
    triples = parse_triples(raw, source_caption_id)
    if not triples:
        log.info("no valid triples for caption %r", source_caption_id or caption)
    return triples


def fuse_fragments(triples: Sequence[SpoTriple], client: GenerationClient, template: PromptTemplate,
                   image_ids: Iterable[str] = ()) -> FragmentRecord:
    if len(triples) < 2:
        raise ValueError("fusion needs at least two triples")
    listing = "\n".join(f"{t.subject} | {t.predicate} | {t.object}" for t in triples)
    raw = client.generate(_request(template, template.render(listing)))
    try:
        text = parse_sentence_list(raw, 1)[0]
    except EmptyGenerationError as exc:
        raise FusionError(f"empty fusion output for {len(triples)} triples") from exc
    return FragmentRecord(text, tuple(triples), frozenset(image_ids))


def group_triples(triples: Sequence[SpoTriple], group_size: int = 3) -> list[list[SpoTriple]]:
    """Consecutive groups of ``group_size``; a trailing single triple joins the previous group."""
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    groups = [list(triples[i : i + group_size]) for i in range(0, len(triples), group_size)]
    if len(groups) > 1 and len(groups[-1]) == 1:
        groups[-2].extend(groups.pop())
    return [g for g in groups if len(g) >= 2]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def merge_ground_truth(queries: Sequence[QueryRecord], encoder: EmbeddingProvider,
                       tau: float = DEFAULT_TAU) -> list[QueryRecord]:
    """Union the true-image sets of same-granularity queries whose texts have cosine >= tau.

    Merging is transitive, so chains a~b~c share one ground-truth set.
    """
    out = list(queries)
    by_granularity: dict[Granularity, list[int]] = {}
    for i, q in enumerate(queries):
        by_granularity.setdefault(q.granularity, []).append(i)
    for idx in by_granularity.values():
        if len(idx) < 2:
            continue
        texts = [queries[i].text for i in idx]
        sims = cosine_similarity(encoder.embed_texts(texts), encoder.embed_texts(texts)).values
        uf = _UnionFind(len(idx))
        rows, cols = np.nonzero(np.triu(sims >= tau, k=1))
        for a, b in zip(rows.tolist(), cols.tolist()):
            uf.union(a, b)
        merged: dict[int, set[str]] = {}
        for j, i in enumerate(idx):
            merged.setdefault(uf.find(j), set()).update(queries[i].true_image_ids)
        for j, i in enumerate(idx):
            q = queries[i]
            out[i] = QueryRecord(q.id, q.text, q.granularity, frozenset(merged[uf.find(j)]))
    return out


def merge_pairwise(queries: Sequence[QueryRecord], similarity: Mapping[tuple[str, str], float],
                   tau: float) -> list[QueryRecord]:
    """Same closure as ``merge_ground_truth`` but from explicit pairwise scores (by query id)."""
    pos = {q.id: i for i, q in enumerate(queries)}
    uf = _UnionFind(len(queries))
    for (a, b), s in similarity.items():
        if s >= tau:
            uf.union(pos[a], pos[b])
    merged: dict[int, set[str]] = {}
    for i, q in enumerate(queries):
        merged.setdefault(uf.find(i), set()).update(q.true_image_ids)
    return [QueryRecord(q.id, q.text, q.granularity, frozenset(merged[uf.find(i)]))
            for i, q in enumerate(queries)]


def build_manifest(captions: Sequence[TextRecord], phrases: Sequence[TextRecord],
                   tags: Sequence[ImageryTagRecord], triples: Sequence[tuple[SpoTriple, str]],
                   fragments: Sequence[FragmentRecord], images: Sequence[ImageRecord],
                   metadata: Optional[Mapping[str, str]] = None) -> DatasetManifest:
    """Assemble QueryRecords for all five granularities.

    ``triples`` pairs each triple with its image id. Raises ``BuildError``
    listing every violation if the result would not validate.
    """
    queries: list[QueryRecord] = []
    for c in captions:
        queries.append(QueryRecord(c.id, c.text, Granularity.CAPTION, frozenset([c.image_id])))
    for i, t in enumerate(tags):
        queries.append(QueryRecord(f"tag-{i:05d}", t.tag, Granularity.IMAGERY_TAG, frozenset(t.image_ids)))
    for p in phrases:
        queries.append(QueryRecord(p.id, p.text, Granularity.PHRASE, frozenset([p.image_id])))
    per_source: dict[str, int] = {}
    for triple, image_id in triples:
        source = triple.source_caption_id or image_id
        n = per_source[source] = per_source.get(source, 0) + 1
        queries.append(QueryRecord(f"{source}#t{n}", triple.text, Granularity.TRIPLE, frozenset([image_id])))
    per_image: dict[str, int] = {}
    for frag in fragments:
        anchor = min(frag.image_ids) if frag.image_ids else "fragment"
        n = per_image[anchor] = per_image.get(anchor, 0) + 1
        queries.append(QueryRecord(f"{anchor}#f{n}", frag.text, Granularity.FRAGMENT, frozenset(frag.image_ids)))

    manifest = DatasetManifest(tuple(images), tuple(queries), dict(metadata or {}))
    violations = validate_manifest(manifest)
    if violations:
        raise BuildError(violations)
    return manifest


def count_summary(manifest: DatasetManifest) -> dict[str, int]:
    counts = manifest.counts()
    out = {"image": len(manifest.images)}
    out.update({g.value: counts[g] for g in GRANULARITY_ORDER})
    return out


def format_count_summary(manifest: DatasetManifest, name: str = "dataset") -> str:
    """Statistics table: Dataset | Image | Caption | Imagery Tag | Phrase | Triple | Fragment."""
    counts = count_summary(manifest)
    header = ["Dataset", "Image"] + [g.title for g in GRANULARITY_ORDER]
    row = [name, f"{counts['image']:,}"] + [f"{counts[g.value]:,}" for g in GRANULARITY_ORDER]
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths),
             " | ".join(v.ljust(w) for v, w in zip(row, widths))]
    return "\n".join(lines) + "\n"


def count_summary_csv(manifest: DatasetManifest) -> str:
    counts = count_summary(manifest)
    keys = list(counts)
    return ",".join(keys) + "\n" + ",".join(str(counts[k]) for k in keys) + "\n"


# -- stage files --------------------------------------------------------------------


def read_text_records(path) -> list[TextRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(TextRecord(str(obj["id"]), str(obj["image_id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
    return out


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_records(path, rows: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
