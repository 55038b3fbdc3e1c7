import csv
import json

import pytest

from qe_retrieval.embedding import SyntheticEncoder, load_store
from qe_retrieval.enhancer import passthrough
from qe_retrieval.genclient import GenerationClient
from qe_retrieval.harness import (
    ReportCell,
    ReportMismatchError,
    compare_metrics,
    compare_runs,
    export_heatmap,
    read_report,
    report_cells,
    run_benchmark,
    runspec_from_config,
    sample_queries,
)
from qe_retrieval.manifest import Granularity, Mode
from qe_retrieval.metrics import EvalRecord
from qe_retrieval.retrieval import ImageIndex, RetrievalConfig, retrieve

from conftest import expansion_stub


def config_for(world, out, **extra):
    cfg = {
        "manifest": str(world["manifest_dir"]),
        "encoders": {"synth": {"image_store": str(world["store"]),
                               "text": {"kind": "synthetic", "seed": world["seed"]}}},
        "output_dir": str(out),
        "retrieval": {"n_initial": 20, "k1": 5, "k_final": 3},
    }
    cfg.update(extra)
    return cfg


def stub_client(cache_dir, stub=None, offline=False):
    return GenerationClient(cache_dir, endpoint_url="http://stub.invalid", transport=stub or expansion_stub(),
                            offline=offline, backoff=0)


def test_baseline_only_one_row_per_granularity(world, tmp_path):
    spec = runspec_from_config(config_for(world, tmp_path / "run", modes=["baseline"], sample={"count": 10, "seed": 1}))
    outcome = run_benchmark(spec)
    assert outcome.ok
    assert len(outcome.records) == 10
    rows = [c for c in outcome.cells if c.metric == "recall_at_k"]
    grans = [c.granularity for c in rows]
    assert len(grans) == len(set(grans))
    assert set(grans) == {r.granularity for r in outcome.records}
    assert all(c.delta_vs_baseline == 0 for c in rows)


def test_sampling_is_seeded(world):
    qs = list(world["manifest"].queries)
    a = sample_queries(qs, 5, seed=7)
    assert [q.id for q in a] == [q.id for q in sample_queries(list(reversed(qs)), 5, seed=7)]
    assert len(a) == 5
    assert [q.id for q in sample_queries(qs, 5, seed=8)] != [q.id for q in a]


def test_offline_empty_cache_fails_enhanced_cells_only(world, tmp_path):
    spec = runspec_from_config(config_for(world, tmp_path / "run", modes=["baseline", "enhanced_vote"]))
    outcome = run_benchmark(spec, client=stub_client(tmp_path / "empty", offline=True))
    assert not outcome.ok
    assert all("enhanced_vote" in name for name in outcome.failures)
    assert len(outcome.failures) == 5
    assert {c.mode for c in outcome.cells} == {Mode.BASELINE}
    assert len([c for c in outcome.cells if c.metric == "recall_at_k"]) == 5
    snapshot = json.loads((tmp_path / "run" / "run_config.json").read_text())
    assert set(snapshot["failures"]) == set(outcome.failures)


def test_warm_cache_needs_no_network(world, tmp_path):
    cache = tmp_path / "cache"
    cfg = config_for(world, tmp_path / "r1", sample={"count": 6, "seed": 2})
    first = run_benchmark(runspec_from_config(cfg), client=stub_client(cache))
    assert first.ok
    stub = expansion_stub()
    cfg["output_dir"] = str(tmp_path / "r2")
    second = run_benchmark(runspec_from_config(cfg), client=stub_client(cache, stub))
    assert stub.calls == 0
    assert (tmp_path / "r1" / "report.csv").read_bytes() == (tmp_path / "r2" / "report.csv").read_bytes()
    assert second.records == first.records


def test_report_matches_records(world, tmp_path):
    cfg = config_for(world, tmp_path / "run")
    outcome = run_benchmark(runspec_from_config(cfg), client=stub_client(tmp_path / "cache"))
    records = [EvalRecord.from_json(json.loads(line))
               for line in (tmp_path / "run" / "records.jsonl").read_text().splitlines()]
    assert records == outcome.records
    report = read_report(tmp_path / "run" / "report.csv")
    assert report == report_cells(records)
    for cell in report:
        group = [r for r in records if r.mode is cell.mode and r.granularity is cell.granularity]
        assert cell.count == len(group)
        mean = 100 * sum(getattr(r, cell.metric) for r in group) / len(group)
        assert abs(cell.value - mean) <= 0.005 + 1e-9


def test_fallback_recorded_when_every_batch_is_empty(world, tmp_path):
    from conftest import ChatStub
    cfg = config_for(world, tmp_path / "run", modes=["enhanced_vote"], sample={"count": 3, "seed": 0})
    outcome = run_benchmark(runspec_from_config(cfg), client=stub_client(tmp_path / "c", ChatStub(lambda p, _: "")))
    assert outcome.ok
    assert all(r.fallback for r in outcome.records)


def test_heatmap_passthrough_matches_baseline(world, tmp_path):
    store = load_store(world["store"])
    index = ImageIndex.from_store(store)
    encoder = SyntheticEncoder(dim=world["dim"], seed=world["seed"])
    query = world["manifest"].queries[0]
    cols = list(index.ids[:3])
    path = export_heatmap(query, passthrough(query.text), cols, index, encoder, tmp_path / "h.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["index", "text"] + cols
    assert len(rows) == 2
    values = [float(v) for v in rows[1][2:]]
    assert all(-1 <= v <= 1 for v in values)
    sub = index.subset(cols)
    base = retrieve(query, sub, encoder, RetrievalConfig(n_initial=3, k1=3, k_final=3, mode=Mode.BASELINE))
    by_id = {r.image_id: r.score for r in base.ranked}
    assert [f"{by_id[c]:.8f}" for c in cols] == rows[1][2:]


def cell(mode, gran, value, metric="recall_at_k"):
    return ReportCell("e", Mode(mode), Granularity(gran), metric, value, None, 10)


def test_compare_identical():
    a = [cell("baseline", "caption", 61.76), cell("enhanced_vote", "caption", 70.0)]
    assert all(r.delta == 0 for r in compare_runs(a, a))


def test_compare_delta_sign():
    rows = compare_runs([cell("baseline", "phrase", 61.76)], [cell("baseline", "phrase", 52.08)])
    assert rows[0].delta == pytest.approx(-9.68, abs=1e-9)
    assert rows[0].arrow == "↓"


def test_compare_missing_cell_named():
    a = [cell("baseline", "phrase", 1.0), cell("baseline", "triple", 2.0)]
    with pytest.raises(ReportMismatchError, match="triple"):
        compare_runs(a, a[:1])


def test_compare_metrics_within_report():
    report = [cell("baseline", "caption", 50.0), cell("baseline", "caption", 10.0, "multi_recall_at_k")]
    assert compare_metrics(report)[0].delta == -40.0


def test_run_output_files(world, tmp_path):
    cfg = config_for(world, tmp_path / "run", sample={"count": 5, "seed": 7}, heatmaps=1)
    run_benchmark(runspec_from_config(cfg), client=stub_client(tmp_path / "cache"))
    out = tmp_path / "run"
    for name in ("records.jsonl", "report.csv", "report.txt", "run_config.json"):
        assert (out / name).is_file()
    snapshot = json.loads((out / "run_config.json").read_text())
    assert len(snapshot["resolved"]["sampled_query_ids"]) == 5
    assert snapshot["heatmaps"] and all((out / p).is_file() for p in snapshot["heatmaps"])
    assert "Enhanced w/ vote" in (out / "report.txt").read_text()
