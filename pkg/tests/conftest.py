from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable

import pytest

from qe_retrieval.embedding import SyntheticEncoder, save_store, store_from_provider
from qe_retrieval.genclient import GenerationClient
from qe_retrieval.manifest import DatasetManifest, Granularity, ImageRecord, QueryRecord, save_manifest

FIXTURES = Path(__file__).parent / "fixtures"


class ChatStub:
    """Fake chat endpoint: ``respond(prompt, payload) -> text``; counts calls."""

    def __init__(self, respond: Callable[[str, dict], str]):
        self.respond = respond
        self.calls = 0
        self.payloads: list[dict] = []

    def __call__(self, url, payload, headers, timeout):
        self.calls += 1
        self.payloads.append(payload)
        user = payload["messages"][-1]["content"]
        prompt = user if isinstance(user, str) else user[0]["text"]
        return {"choices": [{"message": {"content": self.respond(prompt, payload)}}]}


def numbered(lines) -> str:
    return "\n".join(f"{i}. {line}" for i, line in enumerate(lines, start=1))


def expansion_stub(n: int = 10) -> ChatStub:
    """Sentences depend on the prompt and batch temperature only through the prompt hash."""

    def respond(prompt, payload):
        h = hashlib.sha256(prompt.encode()).hexdigest()
        return numbered(f"detail {h[i:i + 4]} of the scene" for i in range(n))

    return ChatStub(respond)


@pytest.fixture
def stub_client(tmp_path):
    stub = expansion_stub()
    client = GenerationClient(tmp_path / "cache", endpoint_url="http://stub.invalid/v1/chat", transport=stub,
                              backoff=0)
    return client, stub


WORDS = ["dog", "park", "river", "bicycle", "child", "tree", "beach", "kitchen", "market", "snow",
         "guitar", "train", "bridge", "horse", "umbrella", "boat", "street", "garden", "mountain", "crowd"]


def small_world(root: Path, n_images: int = 20, dim: int = 32, seed: int = 3) -> dict:
    """Manifest + caption-anchored synthetic image store on disk.

    Returns paths and the manifest. Query granularities rotate through all five.
    """
    images = [ImageRecord(f"img_{i:03d}", f"images/img_{i:03d}.jpg") for i in range(n_images)]
    grans = list(Granularity)
    queries = []
    anchors = {}
    for i in range(n_images):
        w1, w2 = WORDS[i % len(WORDS)], WORDS[(3 * i + 1) % len(WORDS)]
        g = grans[i % len(grans)]
        text = f"a {w1} near a {w2} number {i}"
        truth = {images[i].id}
        if i % 4 == 0 and i + 1 < n_images:
            truth.add(images[i + 1].id)
        queries.append(QueryRecord(f"q{i:03d}", text, g, frozenset(truth)))
        anchors[images[i].id] = text
    manifest = DatasetManifest(tuple(images), tuple(queries), {"name": "small-world"})
    mdir = save_manifest(manifest, root / "manifest")
    encoder = SyntheticEncoder(dim=dim, seed=seed, image_texts=anchors, image_noise=0.8)
    store_path = save_store(store_from_provider(encoder, [im.id for im in images]), root / "images.cfqe")
    return {"manifest_dir": mdir, "store": store_path, "manifest": manifest, "dim": dim, "seed": seed}


@pytest.fixture
def world(tmp_path):
    return small_world(tmp_path)


def write_config(path: Path, config: dict) -> Path:
    path.write_text(json.dumps(config, indent=2))
    return path
