"""Chat-style generation client with a content-addressed on-disk cache.

Each cache entry is ``<key>.txt`` (raw response text) next to a
``<key>.json`` sidecar holding the request fields. Keys are SHA-256 hex
digests of the canonical request, so a warm cache replays a run exactly.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import mimetypes
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import requests

log = logging.getLogger(__name__)

DEFAULT_SYSTEM_PROMPT = "You are a helpful assistant that writes short, concrete image descriptions."


class GenerationError(RuntimeError):
    pass


class CacheMissError(GenerationError):
    def __init__(self, key: str):
        super().__init__(f"generation cache miss in offline mode: {key}")
        self.key = key


class GenerationTransportError(GenerationError):
    def __init__(self, key: str, cause: Exception):
        super().__init__(f"generation endpoint failed for key {key}: {cause}")
        self.key = key


class EmptyGenerationError(GenerationError, ValueError):
    """Model output contained no usable sentence."""


class CapabilityError(GenerationError):
    """Endpoint cannot serve the request (e.g. image input on a text-only model)."""


@dataclass(frozen=True)
class GenerationRequest:
    model_name: str
    prompt: str
    image_uri: Optional[str] = None
    temperature: float = 0.7
    max_tokens: int = 256
    batch_tag: int = 0
    # Retry attempt; only enters the key when non-zero so first attempts keep stable keys.
    attempt: int = 0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def key_fields(self) -> dict:
        fields = {
            "model_name": self.model_name,
            "prompt": self.prompt,
            "image_uri": self.image_uri,
            "temperature": float(self.temperature),
            "max_tokens": int(self.max_tokens),
            "batch_tag": int(self.batch_tag),
        }
        if self.attempt:
            fields["attempt"] = int(self.attempt)
        return fields

    def cache_key(self) -> str:
        canonical = json.dumps(self.key_fields(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


Transport = Callable[[str, dict, dict, float], dict]


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class GenerationCache:
    def __init__(self, directory):
        self.directory = Path(directory)

    def _text_path(self, key: str) -> Path:
        return self.directory / f"{key}.txt"

    def get(self, key: str) -> Optional[str]:
        path = self._text_path(key)
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None

    def put(self, key: str, text: str, request_fields: dict) -> str:
        """Store ``text`` unless another writer got there first; returns the stored value."""
        self.directory.mkdir(parents=True, exist_ok=True)
        final = self._text_path(key)
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-", suffix=".txt")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            try:
                os.link(tmp, final)
            except FileExistsError:
                return final.read_text(encoding="utf-8")
        finally:
            os.unlink(tmp)
        sidecar = self.directory / f"{key}.json"
        sidecar.write_text(json.dumps(request_fields, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                           encoding="utf-8")
        return text

    def __contains__(self, key: str) -> bool:
        return self._text_path(key).exists()


class GenerationClient:
    """Single chat endpoint shared by query enhancement and corpus building.

    ``offline=True`` never touches the network and raises ``CacheMissError``
    for uncached requests. ``network_calls`` counts endpoint hits.
    """

    def __init__(self, cache_dir, *, endpoint_url: Optional[str] = None,
                 api_key_env: str = "QE_GEN_API_KEY", offline: bool = False,
                 timeout: float = 60.0, retries: int = 3, backoff: float = 1.0,
                 max_in_flight: int = 4, vision: bool = False, inline_images: bool = False,
                 system_prompt: str = DEFAULT_SYSTEM_PROMPT, transport: Optional[Transport] = None):
        self.cache = GenerationCache(cache_dir)
        self.endpoint_url = endpoint_url or os.environ.get("QE_GEN_ENDPOINT")
        self.api_key_env = api_key_env
        self.offline = offline
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max(1, max_in_flight)
        self.vision = vision
        self.inline_images = inline_images
        self.system_prompt = system_prompt
        self.transport = transport or _requests_transport
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(self.max_in_flight)
        self.network_calls = 0
        self.hits = 0
        self.misses = 0

    @property
    def stats(self) -> dict:
        with self._lock:
            return {"hits": self.hits, "misses": self.misses, "network_calls": self.network_calls}

    def _payload(self, request: GenerationRequest) -> dict:
        if request.image_uri is None:
            user_content = request.prompt
        else:
            url = _inline_image(request.image_uri) if self.inline_images else request.image_uri
            user_content = [
                {"type": "text", "text": request.prompt},
                {"type": "image_url", "image_url": {"url": url}},
            ]
        return {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": user_content},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def _call(self, request: GenerationRequest, key: str) -> str:
        if not self.endpoint_url:
            raise GenerationTransportError(key, RuntimeError("no generation endpoint configured"))
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = self._payload(request)
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                with self._slots:
                    with self._lock:
                        self.network_calls += 1
                    data = self.transport(self.endpoint_url, payload, headers, self.timeout)
                return _first_choice_text(data)
            except (requests.RequestException, OSError, KeyError, IndexError, TypeError, ValueError) as exc:
                last = exc
                log.warning("generation call failed (attempt %d/%d): %s", attempt + 1, self.retries + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (2**attempt))
        raise GenerationTransportError(key, last)

    def generate(self, request: GenerationRequest) -> str:
        if request.image_uri is not None and not self.vision:
            raise CapabilityError("endpoint is not vision-capable; cannot attach an image")
        key = request.cache_key()
        cached = self.cache.get(key)
        if cached is not None:
            with self._lock:
                self.hits += 1
            return cached
        with self._lock:
            self.misses += 1
        if self.offline:
            raise CacheMissError(key)
        text = self._call(request, key)
        fields = request.key_fields()
        fields["image_uri"] = request.image_uri
        return self.cache.put(key, text, fields)

    def generate_many(self, requests_: Sequence[GenerationRequest]) -> list[str]:
        """Concurrent ``generate``; output order follows input order."""
        if len(requests_) <= 1:
            return [self.generate(r) for r in requests_]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.generate, requests_))


def _first_choice_text(data: dict) -> str:
    content = data["choices"][0]["message"]["content"]
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if not isinstance(content, str):
        raise ValueError("response content is not text")
    return content


def _inline_image(uri: str) -> str:
    if uri.startswith(("data:", "http://", "https://")):
        return uri
    path = Path(uri[len("file://"):] if uri.startswith("file://") else uri)
    mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
    return f"data:{mime};base64," + base64.b64encode(path.read_bytes()).decode("ascii")


# Digits need a following space ("1. dog") so "1.5 metres" survives; bullets don't.
_ENUM_PREFIX = re.compile(r"^(?:\(?\d{1,3}[.):](?=\s|$)|[-•*–])\s*")


def strip_enumeration(line: str) -> str:
    line = line.strip()
    while True:
        stripped = _ENUM_PREFIX.sub("", line, count=1).strip()
        if stripped == line:
            return line
        line = stripped


def has_enumeration_prefix(text: str) -> bool:
    return bool(_ENUM_PREFIX.match(text))


def parse_sentence_list(raw: str, expected_n: int) -> list[str]:
    """Split model output into at most ``expected_n`` clean sentences."""
    out = []
    for line in raw.splitlines():
        sentence = strip_enumeration(line)
        if sentence:
            out.append(sentence)
            if len(out) == expected_n:
                break
    if not out:
        raise EmptyGenerationError("generation contained no usable sentences")
    return out


def render(template_body: str, **values: str) -> str:
    """Fill ``{name}`` placeholders without touching other braces."""
    out = template_body
    for name, value in values.items():
        out = out.replace("{" + name + "}", str(value))
    return out


def load_client_config(config: dict, cache_dir=None, offline: Optional[bool] = None,
                       transport: Optional[Transport] = None) -> GenerationClient:
    """Build a client from a config mapping (the ``generation`` section of a run config)."""
    cfg = dict(config or {})
    return GenerationClient(
        cache_dir or cfg.get("cache_dir", ".qe_cache/generation"),
        endpoint_url=cfg.get("endpoint_url"),
        api_key_env=cfg.get("api_key_env", "QE_GEN_API_KEY"),
        offline=cfg.get("offline", False) if offline is None else offline,
        timeout=float(cfg.get("timeout", 60.0)),
        retries=int(cfg.get("retries", 3)),
        max_in_flight=int(cfg.get("max_in_flight", 4)),
        vision=bool(cfg.get("vision", False)),
        inline_images=bool(cfg.get("inline_images", False)),
        transport=transport,
    )
