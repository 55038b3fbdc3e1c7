"""Query expansion: turn one query into B batches of enhanced texts.

Every generated sentence is prefixed with the original query
(``"<query>. <sentence>"``) so each batch contributes one similarity row
per sentence downstream.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .genclient import (
    EmptyGenerationError,
    GenerationClient,
    GenerationRequest,
    parse_sentence_list,
    render,
)

log = logging.getLogger(__name__)

SEPARATOR = ". "
DEFAULT_BATCHES = 3
DEFAULT_N = 10
DEFAULT_MODEL = "gpt-3.5-turbo"


class EnhancementError(RuntimeError):
    """Every batch came back empty; callers usually fall back to the plain query."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    n: int = DEFAULT_N
    temperature: float = 0.7
    max_tokens: int = 256
    model: Optional[str] = None
    # Image prompts describe an attached picture and need no query text.
    image: bool = False

    def __post_init__(self):
        count = self.body.count("{query}")
        if count != 1 and not (self.image and count == 0):
            raise ValueError(f"template {self.name!r} must contain {{query}} exactly once (found {count})")
        if self.n < 1:
            raise ValueError("template n must be >= 1")

    def render(self, query: str = "") -> str:
        return render(self.body, n=str(self.n), query=query)


def parse_template(text: str, default_name: str = "template") -> PromptTemplate:
    """Parse a template file: a JSON header line, then the body.

    Header keys: ``name``, ``n``, ``temperature``, ``max_tokens``, ``model``,
    ``image`` (prompt goes with an attached image; ``{query}`` optional).
    Body placeholders: ``{query}`` (exactly once) and optionally ``{n}``.
    """
    header_line, _, body = text.partition("\n")
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError:
        raise ValueError("template must start with a JSON header line") from None
    return PromptTemplate(
        name=header.get("name", default_name),
        body=body.strip("\n"),
        n=int(header.get("n", DEFAULT_N)),
        temperature=float(header.get("temperature", 0.7)),
        max_tokens=int(header.get("max_tokens", 256)),
        model=header.get("model"),
        image=bool(header.get("image", False)),
    )


def load_template(path) -> PromptTemplate:
    path = Path(path)
    return parse_template(path.read_text(encoding="utf-8"), default_name=path.stem)


def builtin_template(name: str) -> PromptTemplate:
    text = resources.files("qe_retrieval").joinpath("templates", f"{name}.txt").read_text("utf-8")
    return parse_template(text, default_name=name)


def resolve_template(spec: Optional[str], default: str = "expand_scene") -> PromptTemplate:
    """A file path, or the name of a bundled template."""
    if not spec:
        return builtin_template(default)
    path = Path(spec)
    if path.is_file():
        return load_template(path)
    return builtin_template(spec)


@dataclass(frozen=True)
class EnhancedQuery:
    original: str
    batches: tuple[tuple[str, ...], ...]
    pooled: tuple[str, ...] = field(default=())
    batch_tags: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.pooled:
            object.__setattr__(self, "pooled", pool_texts(self.batches))

    def to_json(self) -> dict:
        return {"original": self.original, "batch_tags": list(self.batch_tags),
                "batches": [list(b) for b in self.batches], "pooled": list(self.pooled)}


def pool_texts(batches) -> tuple[str, ...]:
    return tuple(dict.fromkeys(t for batch in batches for t in batch))


def enhanced_text(query: str, sentence: str) -> str:
    return f"{query}{SEPARATOR}{sentence}"


def passthrough(query: str) -> EnhancedQuery:
    if not query:
        raise ValueError("query must be non-empty")
    return EnhancedQuery(original=query, batches=((query,),), pooled=(query,), batch_tags=(0,))


def enhance(query: str, template: PromptTemplate, client: GenerationClient, batches: int = DEFAULT_BATCHES,
            *, retries: int = 2, model: Optional[str] = None) -> EnhancedQuery:
    """Expand ``query`` into ``batches`` generation turns (batch_tag 1..B).

    A turn yielding no sentences is re-asked up to ``retries`` times and then
    dropped; if no turn survives, ``EnhancementError`` is raised.
    Transport and cache-miss errors propagate unchanged.
    """
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    if batches < 1:
        raise ValueError("batches must be >= 1")
    model_name = model or template.model or DEFAULT_MODEL
    prompt = template.render(query)

    def request(tag: int, attempt: int) -> GenerationRequest:
        return GenerationRequest(model_name=model_name, prompt=prompt, temperature=template.temperature,
                                 max_tokens=template.max_tokens, batch_tag=tag, attempt=attempt)

    tags = list(range(1, batches + 1))
    raws = client.generate_many([request(tag, 0) for tag in tags])
    kept: list[tuple[str, ...]] = []
    kept_tags: list[int] = []
    for tag, raw in zip(tags, raws):
        sentences = None
        for attempt in range(retries + 1):
            if attempt:
                raw = client.generate(request(tag, attempt))
            try:
                sentences = parse_sentence_list(raw, template.n)
                break
            except EmptyGenerationError:
                log.info("batch %d of %r empty (attempt %d)", tag, query, attempt + 1)
        if sentences is None:
            log.warning("dropping batch %d of %r after %d attempts", tag, query, retries + 1)
            continue
        kept.append(tuple(enhanced_text(query, s) for s in sentences))
        kept_tags.append(tag)
    if not kept:
        raise EnhancementError(f"all {batches} generation batches were empty for query {query!r}")
    return EnhancedQuery(original=query, batches=tuple(kept), pooled=pool_texts(kept),
                         batch_tags=tuple(kept_tags))
