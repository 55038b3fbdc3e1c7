"""Benchmark runner: every (encoder x mode x granularity) cell over a sampled query set.

Outputs written to the run's output directory:

    records.jsonl     one EvalRecord per (cell, query)
    report.csv        encoder,mode,granularity,metric,value,delta_vs_baseline,count
    report.txt        mode x granularity tables, one per encoder and metric
    run_config.json   resolved settings, sampled ids, cache statistics, failures
    heatmaps/*.csv    query + enhanced texts x images cosine matrices

Nothing time- or host-dependent is written, so a rerun with warm caches is
byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .embedding import (
    EmbeddingConfigError,
    EmbeddingProvider,
    FileProvider,
    RemoteEncoder,
    SyntheticEncoder,
    cosine_similarity,
    load_store,
)
from .enhancer import DEFAULT_BATCHES, EnhancedQuery, enhance, resolve_template
from .genclient import GenerationClient, load_client_config
from .manifest import (
    GRANULARITY_ORDER,
    GRANULARITY_TITLES,
    MODE_ORDER,
    MODE_TITLES,
    DatasetManifest,
    Granularity,
    Mode,
    QueryRecord,
    load_manifest,
    validate_manifest,
)
from .metrics import METRICS, EvalRecord, aggregate
from .retrieval import ImageIndex, RetrievalConfig, retrieve

log = logging.getLogger(__name__)

METRIC_TITLES = {"multi_recall_at_k": "Multi-recall@{k}", "recall_at_k": "Recall@{k}"}


class ConfigError(ValueError):
    """Bad or inconsistent run configuration (CLI exit code 2)."""


class ReportMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    image_store: Path
    text: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class RunSpec:
    manifest: Path
    encoders: tuple[EncoderSpec, ...]
    output_dir: Path
    modes: tuple[Mode, ...] = MODE_ORDER
    granularities: Optional[tuple[Granularity, ...]] = None
    retrieval: RetrievalConfig = RetrievalConfig()
    batches: int = DEFAULT_BATCHES
    template: Optional[str] = None
    generation: Mapping = field(default_factory=dict)
    sample_count: Optional[int] = None
    sample_seed: int = 0
    pool_size: Optional[int] = None
    pool_seed: int = 0
    heatmaps: int = 1
    parallelism: int = 1

    def __post_init__(self):
        if self.sample_count is not None and self.sample_count < 1:
            raise ConfigError("sample count must be >= 1")
        if self.batches < 1:
            raise ConfigError("batches must be >= 1")
        if not self.encoders:
            raise ConfigError("at least one encoder is required")

    def check_files(self) -> None:
        if not Path(self.manifest).is_dir():
            raise ConfigError(f"manifest directory not found: {self.manifest}")
        for enc in self.encoders:
            if not Path(enc.image_store).is_file():
                raise ConfigError(f"image store not found for encoder {enc.name}: {enc.image_store}")

    def to_json(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "encoders": {e.name: {"image_store": str(e.image_store), "text": dict(e.text)} for e in self.encoders},
            "output_dir": str(self.output_dir),
            "modes": [m.value for m in self.modes],
            "granularities": [g.value for g in self.granularities] if self.granularities else None,
            "retrieval": {"n_initial": self.retrieval.n_initial, "k1": self.retrieval.k1,
                          "k_final": self.retrieval.k_final},
            "batches": self.batches,
            "template": self.template,
            "generation": {k: v for k, v in dict(self.generation).items()},
            "sample": {"count": self.sample_count, "seed": self.sample_seed} if self.sample_count else None,
            "pool_size": self.pool_size,
            "pool_seed": self.pool_seed,
            "heatmaps": self.heatmaps,
            "parallelism": self.parallelism,
        }


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def runspec_from_config(config: Mapping, base_dir=".") -> RunSpec:
    """Build a RunSpec from a config mapping; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    try:
        encoders = []
        for name, enc in dict(config["encoders"]).items():
            text = dict(enc.get("text", {"kind": "synthetic"}))
            if "path" in text:
                text["path"] = str(_resolve(base, text["path"]))
            encoders.append(EncoderSpec(name, _resolve(base, enc["image_store"]), text))
        r = dict(config.get("retrieval", {}))
        retrieval = RetrievalConfig(n_initial=int(r.get("n_initial", 1000)), k1=int(r.get("k1", 15)),
                                    k_final=int(r.get("k_final", 10)))
        sample = config.get("sample") or {}
        generation = dict(config.get("generation", {}))
        if "cache_dir" in generation:
            generation["cache_dir"] = str(_resolve(base, generation["cache_dir"]))
        template = config.get("template")
        if template and (base / template).is_file():
            template = str(base / template)
        granularities = config.get("granularities")
        return RunSpec(
            manifest=_resolve(base, config["manifest"]),
            encoders=tuple(encoders),
            output_dir=_resolve(base, config.get("output_dir", "run")),
            modes=tuple(Mode(m) for m in config.get("modes", [m.value for m in MODE_ORDER])),
            granularities=tuple(Granularity.parse(g) for g in granularities) if granularities else None,
            retrieval=retrieval,
            batches=int(config.get("batches", DEFAULT_BATCHES)),
            template=template,
            generation=generation,
            sample_count=int(sample["count"]) if sample.get("count") else None,
            sample_seed=int(sample.get("seed", 0)),
            pool_size=int(config["pool_size"]) if config.get("pool_size") else None,
            pool_seed=int(config.get("pool_seed", 0)),
            heatmaps=int(config.get("heatmaps", 1)),
            parallelism=int(config.get("parallelism", 1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid run config: {exc}") from exc


def make_text_provider(spec: Mapping, image_store_dim: int, name: str) -> EmbeddingProvider:
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        provider = SyntheticEncoder(dim=int(spec.get("dim", image_store_dim)), seed=int(spec.get("seed", 0)))
    elif kind == "file":
        provider = FileProvider(text_store=load_store(spec["path"]), name=name)
    elif kind == "remote":
        provider = RemoteEncoder(spec["url"], model=spec.get("model", ""), dim=image_store_dim,
                                 token_env=spec.get("token_env", "QE_ENCODER_TOKEN"),
                                 timeout=float(spec.get("timeout", 30)), retries=int(spec.get("retries", 3)),
                                 max_in_flight=int(spec.get("max_in_flight", 4)))
    else:
        raise ConfigError(f"unknown text provider kind {kind!r}")
    if provider.dim != image_store_dim:
        raise EmbeddingConfigError(f"encoder {name}: text dim {provider.dim} != image store dim {image_store_dim}")
    return provider


# -- sampling ---------------------------------------------------------------------------


def sample_queries(queries: Sequence[QueryRecord], count: Optional[int], seed: int) -> list[QueryRecord]:
    """Seeded uniform draw without replacement over ids sorted lexicographically."""
    ordered = sorted(queries, key=lambda q: q.id)
    if count is None or count >= len(ordered):
        return ordered
    picked = random.Random(seed).sample(range(len(ordered)), count)
    return sorted((ordered[i] for i in picked), key=lambda q: q.id)


def build_pool(manifest: DatasetManifest, queries: Sequence[QueryRecord], pool_size: Optional[int],
               seed: int) -> list[str]:
    """Ground-truth images of ``queries`` plus seeded distractors up to ``pool_size``."""
    all_ids = sorted(manifest.image_ids())
    if pool_size is None:
        return all_ids
    truth = sorted({i for q in queries for i in q.true_image_ids})
    rest = sorted(set(all_ids) - set(truth))
    extra = max(0, min(pool_size - len(truth), len(rest)))
    return sorted(truth + random.Random(seed).sample(rest, extra))


# -- enhancement memo --------------------------------------------------------------------


class _EnhancementMemo:
    """One enhancement per query text per run, shared by every encoder and mode."""

    def __init__(self, fn: Callable[[str], EnhancedQuery]):
        self.fn = fn
        self._lock = threading.Lock()
        self._done: dict[str, EnhancedQuery | BaseException] = {}

    def __call__(self, text: str) -> EnhancedQuery:
        with self._lock:
            if text not in self._done:
                try:
                    self._done[text] = self.fn(text)
                except Exception as exc:  # replayed to every caller of this text
                    self._done[text] = exc
            result = self._done[text]
        if isinstance(result, BaseException):
            raise result
        return result


# -- reports ------------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportCell:
    encoder: str
    mode: Mode
    granularity: Granularity
    metric: str
    value: float
    delta_vs_baseline: Optional[float]
    count: int

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.encoder, self.mode.value, self.granularity.value, self.metric)


def _sub(a: float, b: float) -> float:
    return float(Decimal(repr(a)) - Decimal(repr(b)))


def report_cells(records: Sequence[EvalRecord]) -> list[ReportCell]:
    table = aggregate(records, group_by=("encoder", "granularity", "mode"))
    base = {}
    for row in table.rows:
        if row.get("mode") == Mode.BASELINE.value:
            base[(row.get("encoder"), row.get("granularity"))] = row.values
    cells = []
    for row in table.rows:
        b = base.get((row.get("encoder"), row.get("granularity")))
        for metric in METRICS:
            value = row.values[metric]
            delta = _sub(value, b[metric]) if b is not None else None
            cells.append(ReportCell(row.get("encoder"), Mode(row.get("mode")), Granularity(row.get("granularity")),
                                    metric, value, delta, row.count))
    cells.sort(key=lambda c: (c.encoder, METRICS.index(c.metric), GRANULARITY_ORDER.index(c.granularity),
                              MODE_ORDER.index(c.mode)))
    return cells


REPORT_FIELDS = ["encoder", "mode", "granularity", "metric", "value", "delta_vs_baseline", "count"]


def report_csv(cells: Sequence[ReportCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for c in cells:
        writer.writerow([c.encoder, c.mode.value, c.granularity.value, c.metric, f"{c.value:.2f}",
                         "" if c.delta_vs_baseline is None else f"{c.delta_vs_baseline:+.2f}", c.count])
    return buf.getvalue()


def read_report(path) -> list[ReportCell]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        delta = r.get("delta_vs_baseline") or ""
        out.append(ReportCell(r["encoder"], Mode(r["mode"]), Granularity(r["granularity"]), r["metric"],
                              float(r["value"]), float(delta) if delta else None, int(r["count"])))
    return out


def arrow(delta: Optional[float]) -> str:
    if delta is None or delta == 0:
        return ""
    return "↑" if delta > 0 else "↓"


def report_text(cells: Sequence[ReportCell], k: int) -> str:
    """Rows are modes, columns granularities; enhanced rows carry (↑/↓ delta)."""
    blocks = []
    for encoder in sorted({c.encoder for c in cells}):
        for metric in METRICS:
            sel = [c for c in cells if c.encoder == encoder and c.metric == metric]
            if not sel:
                continue
            grans = [g for g in GRANULARITY_ORDER if any(c.granularity is g for c in sel)]
            modes = [m for m in MODE_ORDER if any(c.mode is m for c in sel)]
            lookup = {(c.mode, c.granularity): c for c in sel}
            header = [""] + [f"{GRANULARITY_TITLES[g]} (%)" for g in grans]
            body = []
            for m in modes:
                row = [MODE_TITLES[m]]
                for g in grans:
                    c = lookup.get((m, g))
                    if c is None:
                        row.append("-")
                    elif m is Mode.BASELINE or c.delta_vs_baseline is None:
                        row.append(f"{c.value:.2f}")
                    else:
                        row.append(f"{c.value:.2f} ({arrow(c.delta_vs_baseline)}{abs(c.delta_vs_baseline):.2f})")
                body.append(row)
            widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
            title = f"{encoder} - {METRIC_TITLES[metric].format(k=k)}"
            lines = [title, " | ".join(h.ljust(w) for h, w in zip(header, widths)),
                     "-+-".join("-" * w for w in widths)]
            lines += [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in body]
            blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


@dataclass(frozen=True)
class DeltaRow:
    key: tuple[str, ...]
    a: float
    b: float
    delta: float

    @property
    def arrow(self) -> str:
        return arrow(self.delta)


def compare_runs(report_a: Sequence[ReportCell], report_b: Sequence[ReportCell]) -> list[DeltaRow]:
    """Per-cell ``b - a``; both reports must have the same cell keys."""
    a = {c.key: c for c in report_a}
    b = {c.key: c for c in report_b}
    only_a = sorted(set(a) - set(b))
    only_b = sorted(set(b) - set(a))
    if only_a or only_b:
        parts = []
        if only_a:
            parts.append("missing from second report: " + "; ".join("/".join(k) for k in only_a))
        if only_b:
            parts.append("missing from first report: " + "; ".join("/".join(k) for k in only_b))
        raise ReportMismatchError(", ".join(parts))
    return [DeltaRow(k, a[k].value, b[k].value, _sub(b[k].value, a[k].value)) for k in a]


def compare_metrics(report: Sequence[ReportCell], metric_a: str = "recall_at_k",
                    metric_b: str = "multi_recall_at_k") -> list[DeltaRow]:
    """Same cells, two metrics (e.g. Recall@K vs Multi-recall@K): ``metric_b - metric_a``."""
    a = [c for c in report if c.metric == metric_a]
    b = [c for c in report if c.metric == metric_b]
    strip = lambda cells: [ReportCell(c.encoder, c.mode, c.granularity, "", c.value, None, c.count) for c in cells]
    rows = compare_runs(strip(a), strip(b))
    return [DeltaRow(r.key[:3], r.a, r.b, r.delta) for r in rows]


def delta_table(rows: Sequence[DeltaRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["cell", "a", "b", "delta", "direction"])
    for r in rows:
        writer.writerow(["/".join(r.key), f"{r.a:.2f}", f"{r.b:.2f}", f"{r.delta:+.2f}", r.arrow])
    return buf.getvalue()


# -- heatmap ------------------------------------------------------------------------------


def heatmap_rows(query: QueryRecord | str, enhanced: EnhancedQuery, image_ids: Sequence[str], index: ImageIndex,
                 encoder: EmbeddingProvider):
    """Row 0 is the original query, rows 1.. the pooled enhanced texts."""
    text = query.text if isinstance(query, QueryRecord) else query
    texts = [text] + [t for t in enhanced.pooled if t != text]
    sub = index.subset(list(image_ids))
    vecs = encoder.embed_texts(texts)
    # one row at a time so row 0 matches the baseline scoring call exactly
    rows = [cosine_similarity(vecs[i : i + 1], sub.vectors).values[0] for i in range(len(texts))]
    return texts, rows


def export_heatmap(query: QueryRecord | str, enhanced: EnhancedQuery, image_ids: Sequence[str],
                   index: ImageIndex, encoder: EmbeddingProvider, path) -> Path:
    texts, rows = heatmap_rows(query, enhanced, image_ids, index, encoder)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "text"] + list(image_ids))
        for i, (t, row) in enumerate(zip(texts, rows)):
            writer.writerow([i, t] + [f"{v:.8f}" for v in row])
    return path


# -- run ----------------------------------------------------------------------------------


@dataclass
class RunOutcome:
    records: list[EvalRecord]
    cells: list[ReportCell]
    failures: dict[str, str]
    output_dir: Path

    @property
    def ok(self) -> bool:
        return not self.failures


def _cell_name(encoder: str, mode: Mode, granularity: Granularity) -> str:
    return f"{encoder}/{mode.value}/{granularity.value}"


def _cell_order(cell) -> tuple:
    name, mode, gran = cell
    return name, GRANULARITY_ORDER.index(gran), MODE_ORDER.index(mode)


def run_benchmark(spec: RunSpec, client: Optional[GenerationClient] = None) -> RunOutcome:
    spec.check_files()
    try:
        manifest = load_manifest(spec.manifest)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load manifest: {exc}") from exc
    violations = validate_manifest(manifest)
    if violations:
        raise ConfigError(f"manifest has {len(violations)} violations, first: {violations[0]}")

    wanted = set(spec.granularities or GRANULARITY_ORDER)
    sampled = sample_queries([q for q in manifest.queries if q.granularity in wanted],
                             spec.sample_count, spec.sample_seed)
    pool_ids = build_pool(manifest, sampled, spec.pool_size, spec.pool_seed)
    keys = {im.id: im.key for im in manifest.images}
    n_initial = min(spec.retrieval.n_initial, len(pool_ids))
    config = RetrievalConfig(n_initial=n_initial, k1=min(spec.retrieval.k1, n_initial),
                             k_final=spec.retrieval.k_final)

    enhancer = None
    if any(m is not Mode.BASELINE for m in spec.modes):
        client = client or load_client_config(spec.generation)
        template = resolve_template(spec.template)
        retries = int(dict(spec.generation).get("batch_retries", 2))
        enhancer = _EnhancementMemo(lambda text: enhance(text, template, client, spec.batches, retries=retries))

    encoders = {}
    for enc in spec.encoders:
        store = load_store(enc.image_store)
        index = ImageIndex.from_store(store, pool_ids, keys=keys)
        encoders[enc.name] = (index, make_text_provider(enc.text, store.dim, enc.name))

    by_gran: dict[Granularity, list[QueryRecord]] = {}
    for q in sampled:
        by_gran.setdefault(q.granularity, []).append(q)
    cells = [(e.name, m, g) for e in spec.encoders for g in GRANULARITY_ORDER if g in by_gran
             for m in spec.modes]

    def run_cell(cell):
        name, mode, gran = cell
        index, provider = encoders[name]
        cfg = RetrievalConfig(config.n_initial, config.k1, config.k_final, mode)
        out = []
        for q in by_gran[gran]:
            result = retrieve(q, index, provider, cfg, enhancer)
            out.append(EvalRecord.score(q.id, mode, gran, result.ids, q.true_image_ids, cfg.k_final,
                                        encoder=name, fallback=result.fallback))
        return out

    def guarded(cell):
        try:
            return cell, run_cell(cell), None
        except Exception as exc:
            log.error("cell %s failed: %s", _cell_name(*cell), exc)
            return cell, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, spec.parallelism)) as pool:
        completed = list(pool.map(guarded, cells))

    records: list[EvalRecord] = []
    failures: dict[str, str] = {}
    for cell, recs, err in sorted(completed, key=lambda c: _cell_order(c[0])):
        if err is not None:
            failures[_cell_name(*cell)] = err
        else:
            records.extend(recs)

    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
    report = report_cells(records)
    (out_dir / "report.csv").write_text(report_csv(report), encoding="utf-8")
    (out_dir / "report.txt").write_text(report_text(report, config.k_final), encoding="utf-8")

    heatmap_files = []
    if enhancer is not None and spec.heatmaps > 0:
        heatmap_files = _write_heatmaps(spec, by_gran, encoders, enhancer, config, out_dir / "heatmaps")

    snapshot = {
        "spec": spec.to_json(),
        "resolved": {"n_initial": config.n_initial, "k1": config.k1, "k_final": config.k_final,
                     "pool_size": len(pool_ids), "sampled_query_ids": [q.id for q in sampled],
                     "cells": [_cell_name(*c) for c in sorted(cells, key=_cell_order)]},
        "generation_cache": client.stats if enhancer is not None else None,
        "failures": failures,
        "heatmaps": heatmap_files,
    }
    (out_dir / "run_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return RunOutcome(records, report, failures, out_dir)


def _write_heatmaps(spec, by_gran, encoders, enhancer, config, directory: Path) -> list[str]:
    written = []
    for gran in GRANULARITY_ORDER:
        for q in by_gran.get(gran, [])[: spec.heatmaps]:
            try:
                enhanced = enhancer(q.text)
            except Exception as exc:
                log.warning("no heatmap for %s: %s", q.id, exc)
                continue
            for name in sorted(encoders):
                index, provider = encoders[name]
                base = retrieve(q, index, provider, RetrievalConfig(config.n_initial, config.k1,
                                                                    config.k_final, Mode.BASELINE))
                cols = sorted(set(base.ids) | set(q.true_image_ids))
                path = directory / f"{_safe(name)}__{_safe(q.id)}.csv"
                export_heatmap(q, enhanced, cols, index, provider, path)
                written.append(path.relative_to(directory.parent).as_posix())
    return written


def _safe(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)
