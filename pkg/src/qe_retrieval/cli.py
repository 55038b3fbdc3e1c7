"""Command-line entry point: ``qe-retrieval <subcommand>``.

Exit codes: 0 success, 1 some cells / items failed, 2 configuration or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corpus
from .embedding import (
    EmbeddingConfigError,
    RemoteEncoder,
    StoreError,
    SyntheticEncoder,
    ZeroVectorError,
    load_store,
    save_store,
    store_from_provider,
)
from .enhancer import DEFAULT_BATCHES, EnhancementError, enhance, passthrough, resolve_template
from .genclient import GenerationError, load_client_config
from .harness import (
    ConfigError,
    ReportMismatchError,
    compare_metrics,
    compare_runs,
    delta_table,
    export_heatmap,
    make_text_provider,
    read_report,
    run_benchmark,
    runspec_from_config,
    sample_queries,
)
from .manifest import (
    DatasetManifest,
    Granularity,
    ManifestParseError,
    load_manifest,
    read_images,
    save_manifest,
    validate_manifest,
)
from .retrieval import ImageIndex

log = logging.getLogger("qe_retrieval")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _load_config(path) -> tuple[dict, Path]:
    if not path:
        return {}, Path(".")
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8")), path.parent
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _apply_overrides(config: dict, args) -> dict:
    """CLI flags win over config-file values."""
    cfg = json.loads(json.dumps(config))
    if getattr(args, "manifest", None):
        cfg["manifest"] = str(Path(args.manifest).resolve())
    if getattr(args, "out", None):
        cfg["output_dir"] = str(Path(args.out).resolve())
    for item in getattr(args, "encoder", None) or []:
        name, _, store = item.partition("=")
        if not store:
            raise ConfigError(f"--encoder expects NAME=STORE, got {item!r}")
        cfg.setdefault("encoders", {})[name] = {
            **cfg.get("encoders", {}).get(name, {}), "image_store": str(Path(store).resolve())}
    if getattr(args, "modes", None):
        cfg["modes"] = args.modes.split(",")
    if getattr(args, "granularities", None):
        cfg["granularities"] = args.granularities.split(",")
    r = cfg.setdefault("retrieval", {})
    for flag, key in (("n_initial", "n_initial"), ("k1", "k1"), ("k_final", "k_final")):
        if getattr(args, flag, None) is not None:
            r[key] = getattr(args, flag)
    if getattr(args, "batches", None) is not None:
        cfg["batches"] = args.batches
    if getattr(args, "template", None):
        cfg["template"] = args.template
    if getattr(args, "sample", None) is not None:
        cfg.setdefault("sample", {})["count"] = args.sample
    if getattr(args, "seed", None) is not None:
        cfg.setdefault("sample", {})["seed"] = args.seed
    if getattr(args, "pool_size", None) is not None:
        cfg["pool_size"] = args.pool_size
    if getattr(args, "parallelism", None) is not None:
        cfg["parallelism"] = args.parallelism
    gen = cfg.setdefault("generation", {})
    if getattr(args, "cache_dir", None):
        gen["cache_dir"] = str(Path(args.cache_dir).resolve())
    if getattr(args, "offline", False):
        gen["offline"] = True
    if getattr(args, "endpoint", None):
        gen["endpoint_url"] = args.endpoint
    return cfg


def _run_spec(args):
    config, base = _load_config(args.config)
    return runspec_from_config(_apply_overrides(config, args), base)


# -- subcommands ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    violations = validate_manifest(manifest)
    for v in violations:
        print(v)
    counts = manifest.counts()
    print(f"{len(manifest.images)} images, " + ", ".join(f"{counts[g]} {g.value}" for g in Granularity))
    return EXIT_FAILED if violations else EXIT_OK


def _provider(args, manifest: DatasetManifest | None = None):
    if args.provider == "synthetic":
        anchors = {}
        if args.anchor_captions and manifest is not None:
            for q in sorted(manifest.queries, key=lambda q: q.id):
                if q.granularity is Granularity.CAPTION:
                    for image_id in sorted(q.true_image_ids):
                        anchors.setdefault(manifest.image(image_id).key, q.text)
        return SyntheticEncoder(dim=args.dim, seed=args.seed, image_texts=anchors, image_noise=args.noise)
    if args.provider == "remote":
        if not args.url:
            raise ConfigError("--url is required for the remote provider")
        return RemoteEncoder(args.url, model=args.model or "", dim=args.dim)
    raise ConfigError(f"unknown provider {args.provider!r}")


def cmd_embed(args) -> int:
    manifest = load_manifest(args.manifest)
    provider = _provider(args, manifest)
    if args.target == "images":
        keys = sorted({im.key for im in manifest.images})
        inputs = keys
        if args.provider == "remote":
            uri = {im.key: im.uri for im in manifest.images}
            inputs = [uri[k] for k in keys]
        store = store_from_provider(provider, inputs, kind="image", store_keys=keys)
    else:
        texts = sorted({q.text for q in manifest.queries})
        store = store_from_provider(provider, texts, kind="text")
    save_store(store, args.out)
    print(f"wrote {len(store)} vectors (dim {store.dim}) to {args.out}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    spec = _run_spec(args)
    manifest = load_manifest(spec.manifest)
    wanted = set(spec.granularities or Granularity)
    queries = sample_queries([q for q in manifest.queries if q.granularity in wanted],
                             spec.sample_count, spec.sample_seed)
    client = load_client_config(spec.generation)
    template = resolve_template(spec.template)
    failed = 0
    for q in queries:
        try:
            enhance(q.text, template, client, spec.batches)
        except (GenerationError, EnhancementError) as exc:
            failed += 1
            log.error("%s: %s", q.id, exc)
    stats = client.stats
    print(f"{len(queries)} queries, {failed} failed; cache hits {stats['hits']}, misses {stats['misses']}, "
          f"network calls {stats['network_calls']}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_run(args) -> int:
    outcome = run_benchmark(_run_spec(args))
    print((outcome.output_dir / "report.txt").read_text(encoding="utf-8"), end="")
    for cell, err in outcome.failures.items():
        print(f"FAILED {cell}: {err}", file=sys.stderr)
    return EXIT_OK if outcome.ok else EXIT_FAILED


def cmd_heatmap(args) -> int:
    spec = _run_spec(args)
    manifest = load_manifest(spec.manifest)
    query = manifest.query(args.query_id)
    enc = next((e for e in spec.encoders if e.name == args.encoder_name), None) if args.encoder_name \
        else spec.encoders[0]
    if enc is None:
        raise ConfigError(f"no encoder named {args.encoder_name!r}")
    store = load_store(enc.image_store)
    keys = {im.id: im.key for im in manifest.images}
    image_ids = args.images.split(",") if args.images else sorted(query.true_image_ids)
    index = ImageIndex.from_store(store, image_ids, keys=keys)
    provider = make_text_provider(enc.text, store.dim, enc.name)
    if args.passthrough:
        enhanced = passthrough(query.text)
    else:
        client = load_client_config(spec.generation)
        enhanced = enhance(query.text, resolve_template(spec.template), client, spec.batches)
    path = export_heatmap(query, enhanced, image_ids, index, provider, args.output)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = read_report(args.report_a)
    if args.report_b:
        rows = compare_runs(a, read_report(args.report_b))
    else:
        rows = compare_metrics(a, args.metric_a, args.metric_b)
    print(delta_table(rows), end="")
    return EXIT_OK


def cmd_build_corpus(args) -> int:
    stages = set(args.stages.split(","))
    unknown = stages - {"tags", "triples", "fragments", "merge", "assemble"}
    if unknown:
        raise ConfigError(f"unknown stages: {', '.join(sorted(unknown))}")
    if "merge" in stages and args.tau is None:
        raise ConfigError("the merge stage needs an explicit --tau")
    work = Path(args.work)
    work.mkdir(parents=True, exist_ok=True)
    client = load_client_config({"cache_dir": args.cache_dir, "offline": args.offline, "vision": True,
                                 "endpoint_url": args.endpoint})
    images = read_images(args.images)
    captions = corpus.read_text_records(args.captions)
    phrases = corpus.read_text_records(args.phrases) if args.phrases else []
    failures = 0

    if "tags" in stages:
        templates = [resolve_template(t) for t in (args.tag_templates or "imagery_tag_mood,imagery_tag_occasion").split(",")]
        vocab: dict[str, set[str]] = {}
        for im in images:
            try:
                for tag in corpus.generate_imagery_tags(im.uri, templates, client):
                    vocab.setdefault(tag, set()).add(im.id)
            except GenerationError as exc:
                failures += 1
                log.error("tags for %s: %s", im.id, exc)
        corpus.write_records(work / "tags.jsonl",
                             (corpus.ImageryTagRecord(t, frozenset(ids)).to_json() for t, ids in sorted(vocab.items())))

    if "triples" in stages:
        template = resolve_template(args.triple_template or "triple_extract")
        rows = []
        for cap in captions:
            try:
                for t in corpus.extract_triples(cap.text, client, template, source_caption_id=cap.id):
                    rows.append({**t.to_json(), "image_id": cap.image_id})
            except GenerationError as exc:
                failures += 1
                log.error("triples for %s: %s", cap.id, exc)
        corpus.write_records(work / "triples.jsonl", rows)

    if "fragments" in stages:
        template = resolve_template(args.fragment_template or "fragment_fuse")
        per_image: dict[str, list[corpus.SpoTriple]] = {}
        for row in _read_optional(work / "triples.jsonl"):
            per_image.setdefault(row["image_id"], []).append(corpus.SpoTriple.from_json(row))
        out = []
        for image_id in sorted(per_image):
            for group in corpus.group_triples(per_image[image_id], args.group_size):
                try:
                    out.append(corpus.fuse_fragments(group, client, template, [image_id]).to_json())
                except (GenerationError, corpus.FusionError) as exc:
                    failures += 1
                    log.error("fragment for %s: %s", image_id, exc)
        corpus.write_records(work / "fragments.jsonl", out)

    if "assemble" in stages or "merge" in stages:
        tags = [corpus.ImageryTagRecord.from_json(r) for r in _read_optional(work / "tags.jsonl")]
        triples = [(corpus.SpoTriple.from_json(r), r["image_id"]) for r in _read_optional(work / "triples.jsonl")]
        fragments = [corpus.FragmentRecord.from_json(r) for r in _read_optional(work / "fragments.jsonl")]
        manifest = corpus.build_manifest(captions, phrases, tags, triples, fragments, images,
                                         metadata={"name": args.name, "source": str(args.captions)})
        if "merge" in stages:
            encoder = (make_text_provider({"kind": "file", "path": args.text_store}, load_store(args.text_store).dim,
                                          "text-store") if args.text_store
                       else SyntheticEncoder(dim=args.dim, seed=args.seed))
            merged = corpus.merge_ground_truth(manifest.queries, encoder, args.tau)
            manifest = DatasetManifest(manifest.images, tuple(merged), manifest.metadata)
        out = Path(args.out or work / "manifest")
        save_manifest(manifest, out)
        (out / "counts.csv").write_text(corpus.count_summary_csv(manifest), encoding="utf-8")
        print(corpus.format_count_summary(manifest, args.name), end="")
    return EXIT_FAILED if failures else EXIT_OK


def _read_optional(path: Path) -> list[dict]:
    return corpus.read_jsonl(path) if path.exists() else []


# -- parser --------------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--manifest", help="manifest directory")
    p.add_argument("--encoder", action="append", metavar="NAME=STORE", help="image store per encoder")
    p.add_argument("--modes", help="comma list: baseline,enhanced_maxsim,enhanced_vote")
    p.add_argument("--granularities", help="comma list of granularities")
    p.add_argument("--n-initial", dest="n_initial", type=int)
    p.add_argument("--k1", type=int)
    p.add_argument("--k-final", dest="k_final", type=int)
    p.add_argument("--batches", type=int, help=f"generation turns per query (default {DEFAULT_BATCHES})")
    p.add_argument("--template", help="template file or bundled template name")
    p.add_argument("--sample", type=int, help="number of queries to draw")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--cache-dir", dest="cache_dir")
    p.add_argument("--endpoint", help="chat endpoint URL")
    p.add_argument("--offline", action="store_true", help="serve generations from cache only")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qe-retrieval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("embed", help="build an embedding store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--target", choices=["images", "queries"], default="images")
    p.add_argument("--provider", choices=["synthetic", "remote"], default="synthetic")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.5, help="synthetic: image noise around anchored captions")
    p.add_argument("--anchor-captions", action="store_true",
                   help="synthetic: place each image near one of its caption texts")
    p.add_argument("--url")
    p.add_argument("--model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("enhance", help="pre-warm the generation cache")
    _add_run_flags(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("run", help="run the benchmark")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("heatmap", help="export a query/enhanced-texts x images similarity matrix")
    _add_run_flags(p)
    p.add_argument("--query-id", required=True)
    p.add_argument("--encoder-name")
    p.add_argument("--images", help="comma list of image ids (default: the query's true images)")
    p.add_argument("--passthrough", action="store_true", help="skip enhancement")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("compare", help="per-cell deltas between reports, or between two metrics of one report")
    p.add_argument("report_a")
    p.add_argument("report_b", nargs="?")
    p.add_argument("--metric-a", default="recall_at_k")
    p.add_argument("--metric-b", default="multi_recall_at_k")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("build-corpus", help="construct multi-granularity queries")
    p.add_argument("--captions", required=True)
    p.add_argument("--phrases")
    p.add_argument("--images", required=True, help="images.jsonl")
    p.add_argument("--work", required=True, help="directory for stage files")
    p.add_argument("--stages", default="tags,triples,fragments,assemble")
    p.add_argument("--cache-dir", dest="cache_dir", default=".qe_cache/generation")
    p.add_argument("--endpoint")
    p.add_argument("--offline", action="store_true")
    p.add_argument("--tag-templates")
    p.add_argument("--triple-template")
    p.add_argument("--fragment-template")
    p.add_argument("--group-size", type=int, default=3)
    p.add_argument("--tau", type=float, help="cosine threshold for ground-truth merging (required by merge)")
    p.add_argument("--text-store", help="text embedding store for merging")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="corpus")
    p.add_argument("--out", help="manifest output directory (default WORK/manifest)")
    p.set_defaults(func=cmd_build_corpus)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ReportMismatchError, ManifestParseError, StoreError, EmbeddingConfigError,
            ZeroVectorError, OSError, KeyError, corpus.BuildError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
