import math
import struct
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qe_retrieval.embedding import (
    MAGIC,
    DuplicateIdError,
    EmbeddingConfigError,
    EncoderTransportError,
    FileProvider,
    RemoteEncoder,
    SimilarityMatrix,
    StoreFormatError,
    StoreVersionError,
    SyntheticEncoder,
    TruncatedStoreError,
    ZeroVectorError,
    build_store,
    cosine_similarity,
    load_store,
    parse_store,
    save_store,
    store_bytes,
    top_k_per_row,
)


def full_sort_topk(values, cols, k):
    """Oracle: stable full sort by (-value, id)."""
    return [[cols[j] for j in sorted(range(len(cols)), key=lambda j: (-row[j], cols[j]))[:k]] for row in values]


# -- providers ---------------------------------------------------------------------


def test_synthetic_is_deterministic():
    enc = SyntheticEncoder(dim=16, seed=5)
    a, b = enc.embed_texts(["abc"]), enc.embed_texts(["abc"])
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, SyntheticEncoder(dim=16, seed=6).embed_texts(["abc"]))


def test_synthetic_is_unit_norm():
    vecs = SyntheticEncoder(dim=8).embed_texts(["x", "a longer text", "ü"])
    assert np.allclose(np.linalg.norm(vecs.astype(np.float64), axis=1), 1.0, atol=1e-5)


def test_synthetic_stable_across_processes():
    code = ("from qe_retrieval.embedding import SyntheticEncoder;"
            "print(SyntheticEncoder(dim=8, seed=11).embed_texts(['family gathering']).tobytes().hex())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    assert out == SyntheticEncoder(dim=8, seed=11).embed_texts(["family gathering"]).tobytes().hex()


def test_file_provider_returns_stored_vector_bit_exact():
    vec = np.array([0.6, 0.8, 0.0, 0.0], dtype=np.float32)
    store = build_store({"img_a": vec, "img_b": [0, 0, 1, 0]})
    got = FileProvider(image_store=store).embed_images(["img_a"])[0]
    assert got.tobytes() == vec.tobytes()


def test_file_provider_missing_id():
    store = build_store({"a": [1.0, 0.0]})
    with pytest.raises(KeyError, match="img_404"):
        FileProvider(image_store=store).embed_images(["img_404"])


def test_file_provider_thousand_ids():
    enc = SyntheticEncoder(dim=12, seed=1)
    ids = [f"im{i:04d}" for i in range(1000)]
    store = build_store(zip(ids, enc.embed_images(ids)))
    out = FileProvider(image_store=store).embed_images(ids)
    assert out.shape == (1000, 12)


def test_empty_image_list():
    store = build_store({"a": [1.0, 0.0]})
    assert FileProvider(image_store=store).embed_images([]).shape == (0, 2)
    assert SyntheticEncoder(dim=4).embed_images([]).shape == (0, 4)


def test_file_provider_dimension_mismatch():
    with pytest.raises(EmbeddingConfigError):
        FileProvider(image_store=build_store({"a": [1.0, 0.0]}), text_store=build_store({"t": [1.0, 0, 0]}))


def test_remote_encoder_retries_then_fails():
    calls = []

    def flaky(url, payload, headers, timeout):
        calls.append(payload)
        raise OSError("connection refused")

    enc = RemoteEncoder("http://x.invalid", retries=2, backoff=0, transport=flaky)
    with pytest.raises(EncoderTransportError):
        enc.embed_texts(["a"])
    assert len(calls) == 3


def test_remote_encoder_normalizes_and_checks_dim(monkeypatch):
    monkeypatch.setenv("QE_ENCODER_TOKEN", "secret")
    seen = {}

    def ok(url, payload, headers, timeout):
        seen["headers"] = headers
        return {"embeddings": [[3.0, 4.0] for _ in payload["inputs"]]}

    enc = RemoteEncoder("http://x.invalid", transport=ok, batch_size=2)
    out = enc.embed_texts(["a", "b", "c"])
    assert out.shape == (3, 2) and np.allclose(out, [0.6, 0.8])
    assert seen["headers"]["Authorization"] == "Bearer secret"
    with pytest.raises(EmbeddingConfigError):
        RemoteEncoder("http://x.invalid", dim=3, transport=ok).embed_texts(["a"])


# -- cosine --------------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity([[1.0, 0.0]], [[1.0, 0.0]]).values[0, 0] == 1.0
    assert cosine_similarity([[1.0, 0.0]], [[0.0, 1.0]]).values[0, 0] == 0.0
    r = 1 / math.sqrt(2)
    assert abs(cosine_similarity([[1.0, 0.0]], [[r, r]]).values[0, 0] - 0.70710678) < 1e-6


def test_cosine_unnormalized_inputs():
    v = cosine_similarity([[2.0, 0.0]], [[3.0, 3.0]]).values[0, 0]
    assert abs(v - 6 / (2 * math.sqrt(18))) < 1e-12


def test_cosine_rejects_zero_vector():
    with pytest.raises(ZeroVectorError):
        cosine_similarity([[0.0, 0.0]], [[1.0, 0.0]])


def test_cosine_range_many_samples():
    rng = np.random.default_rng(0)
    t = rng.standard_normal((100, 16))
    i = rng.standard_normal((120, 16))
    v = cosine_similarity(t, i).values  # 12,000 pairs
    assert v.min() >= -1 - 1e-6 and v.max() <= 1 + 1e-6


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_symmetric(a, b):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    assert cosine_similarity([a], [b]).values[0, 0] == pytest.approx(cosine_similarity([b], [a]).values[0, 0],
                                                                   abs=1e-12)


def test_normalization_rejects_zero_on_build():
    with pytest.raises(ZeroVectorError):
        build_store({"a": [0.0, 0.0]})


# -- top-k -----------------------------------------------------------------------------


def m(values, cols=None):
    values = np.asarray(values, dtype=np.float64)
    cols = cols or [f"c{j}" for j in range(values.shape[1])]
    return SimilarityMatrix(tuple(str(i) for i in range(values.shape[0])), tuple(cols), values)


def test_topk_example():
    assert top_k_per_row(m([[0.1, 0.9, 0.5]]), 2) == [["c1", "c2"]]


def test_topk_k_exceeds_columns():
    assert top_k_per_row(m([[0.1, 0.9, 0.5]]), 10) == [["c1", "c2", "c0"]]


def test_topk_all_equal_uses_ascending_id():
    assert top_k_per_row(m([[0.3] * 5], ["e", "b", "d", "a", "c"]), 3) == [["a", "b", "c"]]


def test_topk_tie_at_boundary():
    # ids out of column order; boundary tie must go to the smaller id
    row = [[0.9, 0.5, 0.5, 0.5, 0.1]]
    assert top_k_per_row(m(row, ["z", "y", "b", "x", "a"]), 2) == [["z", "b"]]


def test_topk_rejects_zero_k():
    with pytest.raises(ValueError):
        top_k_per_row(m([[1.0]]), 0)


@settings(max_examples=300)
@given(st.integers(1, 6), st.integers(1, 30), st.integers(1, 35), st.integers(0, 2**32 - 1), st.booleans())
def test_topk_matches_full_sort(rows, cols, k, seed, quantize):
    rng = np.random.default_rng(seed)
    values = rng.uniform(-1, 1, size=(rows, cols))
    if quantize:  # force many ties
        values = np.round(values * 3) / 3
    col_ids = [f"id{x}" for x in rng.permutation(cols * 3)[:cols]]
    assert top_k_per_row(m(values, col_ids), k) == full_sort_topk(values, col_ids, k)


def test_duplicate_image_vectors_tie_break_by_id():
    v = SyntheticEncoder(dim=16, seed=2).embed_texts(["same"])[0]
    images = np.stack([v, v, v])
    sims = cosine_similarity(v[None, :], images, cols=["k", "c", "m"])
    assert top_k_per_row(sims, 2) == [["c", "k"]]


# -- store file -----------------------------------------------------------------------------


def test_store_round_trip_bytes(tmp_path):
    store = build_store({"b": [1, 2, 3, 4], "a": [0, 0, 0, 1], "c": [-1, 0.5, 0.25, 2]})
    path = save_store(store, tmp_path / "s.cfqe")
    again = load_store(path)
    assert again.ids == ("a", "b", "c")
    assert again.vectors.tobytes() == store.vectors.tobytes()
    assert store_bytes(again) == path.read_bytes()


def test_store_header_layout(tmp_path):
    store = build_store({"é": [1.0, 0.0]})
    data = store_bytes(store)
    assert data[:4] == MAGIC
    assert struct.unpack_from("<HIQ", data, 4) == (1, 2, 1)
    assert struct.unpack_from("<I", data, 18) == (2,)
    assert data[22:24] == "é".encode()
    assert np.frombuffer(data[24:], "<f4").tolist() == [1.0, 0.0]


def test_corrupted_magic(tmp_path):
    data = bytearray(store_bytes(build_store({"a": [1.0, 0.0]})))
    data[0:4] = b"XXXX"
    with pytest.raises(StoreFormatError):
        parse_store(bytes(data))


def test_distinct_error_kinds():
    data = store_bytes(build_store({"a": [1.0, 0.0], "b": [0.0, 1.0]}))
    with pytest.raises(TruncatedStoreError):
        parse_store(data[:-3])
    bad_version = data[:4] + struct.pack("<H", 9) + data[6:]
    with pytest.raises(StoreVersionError):
        parse_store(bad_version)
    dup = data.replace(b"\x01\x00\x00\x00b", b"\x01\x00\x00\x00a")
    with pytest.raises(DuplicateIdError):
        parse_store(dup)
    with pytest.raises(DuplicateIdError):
        build_store([("a", [1.0]), ("a", [2.0])])
    kinds = {StoreFormatError, StoreVersionError, TruncatedStoreError, DuplicateIdError}
    assert len(kinds) == 4


def test_dimension_mismatch_on_build():
    with pytest.raises(EmbeddingConfigError):
        build_store([("a", [1.0, 0.0]), ("b", [1.0, 0.0, 0.0])])
