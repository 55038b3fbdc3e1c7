"""Embedding stores, encoder providers, and the similarity / top-k kernels.

Store file layout (all integers little-endian)::

    b"CFQE" | version u16 | dim u32 | count u64
    count x (u32 byte length, UTF-8 id)      # ascending id order
    count x dim float32                      # rows in id-table order

Provenance (encoder name, creation time) is kept in a JSON sidecar
``<store>.meta.json`` so the binary layout stays fixed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np
import requests

log = logging.getLogger(__name__)

MAGIC = b"CFQE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")
_U32 = struct.Struct("<I")
NORM_TOLERANCE = 1e-5


class StoreError(Exception):
    """Base class for embedding-store failures."""


class StoreFormatError(StoreError):
    """Bad magic bytes: not an embedding store file."""


class StoreVersionError(StoreError):
    """Known magic but unsupported format version."""


class TruncatedStoreError(StoreError):
    """File ended before the declared payload."""


class DuplicateIdError(StoreError, ValueError):
    pass


class ZeroVectorError(ValueError):
    """Cosine similarity is undefined for zero vectors."""


class EmbeddingConfigError(ValueError):
    """Provider and store disagree (dimension, capability...)."""


class EncoderTransportError(RuntimeError):
    """Remote encoder still failing after the configured retries."""


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Unit-normalize rows to float32; rows already within tolerance are left untouched."""
    arr = np.asarray(vectors)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains NaN or Inf components")
    arr64 = arr.astype(np.float64)
    norms = np.linalg.norm(arr64, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ZeroVectorError(f"row {bad} is a zero vector")
    out = arr.astype(np.float32, copy=True)
    redo = np.abs(norms - 1.0) > 1e-6
    if np.any(redo):
        out[redo] = (arr64[redo] / norms[redo, None]).astype(np.float32)
    return out


@dataclass(frozen=True)
class EmbeddingStore:
    """Immutable id -> vector map with a shared dimension."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("vectors must be a count x dim array matching ids")
        self.vectors.setflags(write=False)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> np.ndarray:
        try:
            return self.vectors[self._index[key]]
        except KeyError:
            raise KeyError(f"id not in embedding store: {key!r}") from None

    def lookup(self, keys: Sequence[str]) -> np.ndarray:
        missing = [k for k in keys if k not in self._index]
        if missing:
            raise KeyError(f"id not in embedding store: {missing[0]!r}")
        rows = [self._index[k] for k in keys]
        return self.vectors[rows] if rows else np.zeros((0, self.dim), np.float32)


def build_store(
    records: Iterable[tuple[str, Sequence[float]]] | Mapping[str, Sequence[float]],
    *,
    normalize: bool = True,
    metadata: Optional[Mapping[str, str]] = None,
    dim: Optional[int] = None,
) -> EmbeddingStore:
    """Build a store from (id, vector) pairs. Ids end up in ascending order."""
    if isinstance(records, Mapping):
        records = records.items()
    seen: dict[str, np.ndarray] = {}
    for key, vec in records:
        if key in seen:
            raise DuplicateIdError(f"duplicate id: {key!r}")
        v = np.asarray(vec, dtype=np.float32)
        if v.ndim != 1:
            raise ValueError(f"vector for {key!r} is not 1-D")
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise EmbeddingConfigError(f"vector for {key!r} has dim {v.shape[0]}, expected {dim}")
        seen[key] = v
    ids = tuple(sorted(seen))
    if dim is None:
        raise ValueError("cannot infer dimension of an empty store; pass dim=")
    mat = np.stack([seen[k] for k in ids]) if ids else np.zeros((0, dim), np.float32)
    if normalize and ids:
        mat = normalize_rows(mat)
    elif ids and not np.all(np.isfinite(mat)):
        raise ValueError("embedding contains NaN or Inf components")
    return EmbeddingStore(ids, np.ascontiguousarray(mat, dtype=np.float32), dict(metadata or {}))


def store_bytes(store: EmbeddingStore) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, store.dim, len(store))]
    for key in store.ids:
        raw = key.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
    parts.append(store.vectors.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def save_store(store: EmbeddingStore, path) -> Path:
    path = Path(path)
    if list(store.ids) != sorted(store.ids):
        raise ValueError("store ids must be in ascending order")
    path.write_bytes(store_bytes(store))
    if store.metadata:
        _meta_path(path).write_text(json.dumps(dict(store.metadata), sort_keys=True, indent=2) + "\n")
    return path


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def parse_store(data: bytes, metadata: Optional[Mapping[str, str]] = None) -> EmbeddingStore:
    if len(data) < 4 or data[:4] != MAGIC:
        raise StoreFormatError("not an embedding store (bad magic bytes)")
    if len(data) < _HEADER.size:
        raise TruncatedStoreError("file shorter than header")
    _, version, dim, count = _HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise StoreVersionError(f"unsupported store version {version}")
    offset = _HEADER.size
    ids = []
    for _ in range(count):
        if offset + 4 > len(data):
            raise TruncatedStoreError("id table truncated")
        (n,) = _U32.unpack_from(data, offset)
        offset += 4
        if offset + n > len(data):
            raise TruncatedStoreError("id table truncated")
        ids.append(data[offset : offset + n].decode("utf-8"))
        offset += n
    if len(set(ids)) != len(ids):
        raise DuplicateIdError("duplicate id in store file")
    need = count * dim * 4
    if len(data) - offset < need:
        raise TruncatedStoreError(f"vector block truncated: need {need} bytes, have {len(data) - offset}")
    if len(data) - offset > need:
        raise StoreFormatError("trailing bytes after vector block")
    vectors = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
    vectors = vectors.reshape(count, dim).astype(np.float32)
    return EmbeddingStore(tuple(ids), vectors, dict(metadata or {}))


def load_store(path) -> EmbeddingStore:
    path = Path(path)
    meta_path = _meta_path(path)
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return parse_store(path.read_bytes(), metadata)


# -- providers ------------------------------------------------------------------


class EmbeddingProvider(Protocol):
    name: str

    @property
    def dim(self) -> int: ...

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed_images(self, image_keys: Sequence[str]) -> np.ndarray: ...


def _check_texts(texts: Sequence[str]) -> None:
    for t in texts:
        if not isinstance(t, str) or not t:
            raise ValueError(f"texts must be non-empty strings, got {t!r}")


class SyntheticEncoder:
    """Deterministic stand-in encoder for tests and desk-scale runs.

    Each string is hashed with a keyed BLAKE2b (key = seed) and the digest
    seeds a Gaussian draw, so vectors are stable across processes.
    Images are embedded from their id in a separate namespace, unless
    ``image_texts`` maps an image id to a text whose vector it should share.
    """

    def __init__(self, dim: int = 64, seed: int = 0, image_texts: Optional[Mapping[str, str]] = None,
                 image_noise: float = 0.0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim_ = dim
        self.seed = seed
        self.name = f"synthetic-d{dim}-s{seed}"
        self.image_texts = dict(image_texts or {})
        self.image_noise = image_noise

    @property
    def dim(self) -> int:
        return self.dim_

    def _raw(self, namespace: str, key: str) -> np.ndarray:
        h = hashlib.blake2b(
            f"{namespace}\x00{key}".encode("utf-8"),
            key=str(self.seed).encode("ascii"),
            digest_size=16,
        )
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(h.digest(), "little")))
        return rng.standard_normal(self.dim_)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        _check_texts(texts)
        if not texts:
            return np.zeros((0, self.dim_), np.float32)
        return normalize_rows(np.stack([self._raw("text", t) for t in texts]))

    def embed_images(self, image_keys: Sequence[str]) -> np.ndarray:
        if not image_keys:
            return np.zeros((0, self.dim_), np.float32)
        rows = []
        for key in image_keys:
            if key in self.image_texts:
                v = self._raw("text", self.image_texts[key])
                if self.image_noise:
                    v = v + self.image_noise * self._raw("image", key)
            else:
                v = self._raw("image", key)
            rows.append(v)
        return normalize_rows(np.stack(rows))


class FileProvider:
    """Serves precomputed vectors. Texts are looked up by their exact string."""

    def __init__(self, image_store: Optional[EmbeddingStore] = None,
                 text_store: Optional[EmbeddingStore] = None, name: str = "file"):
        if image_store is None and text_store is None:
            raise EmbeddingConfigError("FileProvider needs at least one store")
        if image_store is not None and text_store is not None and image_store.dim != text_store.dim:
            raise EmbeddingConfigError(
                f"image store dim {image_store.dim} != text store dim {text_store.dim}"
            )
        self.image_store = image_store
        self.text_store = text_store
        self.name = name

    @property
    def dim(self) -> int:
        return (self.image_store or self.text_store).dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        if self.text_store is None:
            raise EmbeddingConfigError("no text store configured")
        _check_texts(texts)
        return self.text_store.lookup(list(texts))

    def embed_images(self, image_keys: Sequence[str]) -> np.ndarray:
        if self.image_store is None:
            raise EmbeddingConfigError("no image store configured")
        return self.image_store.lookup(list(image_keys))


Transport = Callable[[str, dict, dict, float], dict]


def _requests_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class RemoteEncoder:
    """HTTP encoder client.

    POSTs ``{"model", "kind": "text"|"image", "inputs": [...]}`` and expects
    ``{"embeddings": [[...], ...]}``. Image inputs are URIs.
    """

    def __init__(self, url: str, model: str = "", dim: Optional[int] = None, *,
                 token_env: str = "QE_ENCODER_TOKEN", timeout: float = 30.0, retries: int = 3,
                 batch_size: int = 64, max_in_flight: int = 4, backoff: float = 0.5,
                 transport: Optional[Transport] = None):
        self.url = url
        self.model = model
        self.name = model or url
        self._dim = dim
        self.token_env = token_env
        self.timeout = timeout
        self.retries = retries
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self.backoff = backoff
        self.transport = transport or _requests_transport

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise EmbeddingConfigError("remote encoder dimension unknown until first call")
        return self._dim

    def _post(self, kind: str, batch: list[str]) -> np.ndarray:
        headers = {}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {"model": self.model, "kind": kind, "inputs": batch}
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            try:
                data = self.transport(self.url, payload, headers, self.timeout)
                arr = np.asarray(data["embeddings"], dtype=np.float64)
                break
            except (requests.RequestException, OSError, KeyError, ValueError) as exc:
                last = exc
                log.warning("encoder call failed (attempt %d/%d): %s", attempt + 1, self.retries + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (2**attempt))
        else:
            raise EncoderTransportError(f"encoder at {self.url} failed: {last}") from last
        if arr.ndim != 2 or arr.shape[0] != len(batch):
            raise EncoderTransportError(f"encoder returned shape {arr.shape} for {len(batch)} inputs")
        return arr

    def _embed(self, kind: str, inputs: Sequence[str]) -> np.ndarray:
        if not inputs:
            return np.zeros((0, self._dim or 0), np.float32)
        batches = [list(inputs[i : i + self.batch_size]) for i in range(0, len(inputs), self.batch_size)]
        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            parts = list(pool.map(lambda b: self._post(kind, b), batches))
        arr = np.concatenate(parts)
        if self._dim is None:
            self._dim = arr.shape[1]
        elif arr.shape[1] != self._dim:
            raise EmbeddingConfigError(f"encoder returned dim {arr.shape[1]}, expected {self._dim}")
        return normalize_rows(arr)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        _check_texts(texts)
        return self._embed("text", texts)

    def embed_images(self, image_keys: Sequence[str]) -> np.ndarray:
        return self._embed("image", image_keys)


def embed_texts(provider: EmbeddingProvider, texts: Sequence[str]) -> np.ndarray:
    return provider.embed_texts(list(texts))


def embed_images(provider: EmbeddingProvider, image_keys: Sequence[str]) -> np.ndarray:
    return provider.embed_images(list(image_keys))


def store_from_provider(provider: EmbeddingProvider, keys: Sequence[str], *, kind: str = "image",
                        store_keys: Optional[Sequence[str]] = None) -> EmbeddingStore:
    """Embed ``keys`` and pack them into a store (optionally under other ids)."""
    vecs = provider.embed_images(keys) if kind == "image" else provider.embed_texts(keys)
    ids = list(store_keys) if store_keys is not None else list(keys)
    return build_store(
        zip(ids, vecs),
        dim=provider.dim,
        metadata={"encoder": provider.name, "kind": kind,
                  "created": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")},
    )


# -- kernels ----------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityMatrix:
    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.rows)} rows x {len(self.cols)} cols")


def cosine_similarity(text_vecs, image_vecs, rows: Optional[Sequence[str]] = None,
                      cols: Optional[Sequence[str]] = None) -> SimilarityMatrix:
    """Pairwise cosine between T text vectors and I image vectors (T x I)."""
    t = np.atleast_2d(np.asarray(text_vecs, dtype=np.float64))
    im = np.atleast_2d(np.asarray(image_vecs, dtype=np.float64))
    if t.size == 0:
        t = t.reshape(0, im.shape[1] if im.ndim == 2 else 0)
    if im.size == 0:
        im = im.reshape(0, t.shape[1])
    if t.shape[1] != im.shape[1]:
        raise EmbeddingConfigError(f"dimension mismatch: {t.shape[1]} vs {im.shape[1]}")
    tn = np.linalg.norm(t, axis=1)
    inorm = np.linalg.norm(im, axis=1)
    if np.any(tn == 0) or np.any(inorm == 0):
        raise ZeroVectorError("cosine similarity undefined for zero vectors")
    values = np.clip((t / tn[:, None]) @ (im / inorm[:, None]).T, -1.0, 1.0)
    rows = tuple(rows) if rows is not None else tuple(str(i) for i in range(t.shape[0]))
    cols = tuple(cols) if cols is not None else tuple(str(i) for i in range(im.shape[0]))
    return SimilarityMatrix(rows, cols, values)


def top_k_per_row(matrix: SimilarityMatrix, k: int) -> list[list[str]]:
    """Top-k column ids per row, by descending value then ascending id.

    Uses partial selection; elements tied at the k-th value are resolved by id
    so the output matches a full stable sort exactly.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    values = matrix.values
    n_cols = values.shape[1]
    if n_cols == 0:
        return [[] for _ in range(values.shape[0])]
    k = min(k, n_cols)
    # rank of each column id in ascending string order
    id_rank = np.empty(n_cols, dtype=np.int64)
    id_rank[np.argsort(np.array(matrix.cols, dtype=object), kind="stable")] = np.arange(n_cols)
    cols = matrix.cols
    out = []
    for row in values:
        if k == n_cols:
            sel = np.arange(n_cols)
        else:
            part = np.argpartition(-row, k - 1)[:k]
            threshold = row[part].min()
            above = np.flatnonzero(row > threshold)
            tied = np.flatnonzero(row == threshold)
            tied = tied[np.argsort(id_rank[tied], kind="stable")][: k - above.size]
            sel = np.concatenate([above, tied])
        order = sel[np.lexsort((id_rank[sel], -row[sel]))]
        out.append([cols[j] for j in order])
    return out
