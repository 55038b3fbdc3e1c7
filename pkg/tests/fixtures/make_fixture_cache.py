"""Regenerate tests/fixtures/gencache from canned model answers.

Run from the repo root: ``python tests/fixtures/make_fixture_cache.py``.
The canned answers stand in for a vision/chat model; the cache files are
what the offline corpus-building tests replay.
"""
from __future__ import annotations

import shutil
from pathlib import Path

from qe_retrieval import corpus
from qe_retrieval.enhancer import builtin_template
from qe_retrieval.genclient import GenerationClient
from qe_retrieval.manifest import read_images

HERE = Path(__file__).parent
CACHE = HERE / "gencache"

TAGS = {
    ("img_001", "imagery_tag_mood"): "1. pleasant afternoon\n2. family gathering\n3. Winter Fun",
    ("img_001", "imagery_tag_occasion"): "1. Family Gathering\n2. a backyard birthday party with lots of kids and parents around",
    ("img_002", "imagery_tag_mood"): "1. weekend ride\n2. active lifestyle",
    ("img_002", "imagery_tag_occasion"): "1. commute by bike",
    ("img_003", "imagery_tag_mood"): "1. pleasant afternoon\n2. playful pets",
    ("img_003", "imagery_tag_occasion"): "1. walk in the park",
    ("img_004", "imagery_tag_mood"): "1. quiet moment",
    ("img_004", "imagery_tag_occasion"): "- reading outdoors",
}

TRIPLES = {
    "cap_001": "children | bundled up for | cold weather\nadults | bundled up for | cold weather\n"
               "children | stand near | a bounce house\nchildren cold weather",
    "cap_002": "1. a man | rides | a bicycle\n2. a man | in | a red jacket\n3. bicycle | along | a river path",
    "cap_003": "two dogs | chase | a ball\na ball | across | a sunny park lawn",
    "cap_004": "a woman | reads | a book\n| on | a bench",
}

FRAGMENTS = {
    "img_001": "children and adults bundled up near a bounce house in the cold",
    "img_002": "man in red jacket biking along river path",
    "img_003": "two dogs chasing a ball on a park lawn",
}


def main() -> None:
    shutil.rmtree(CACHE, ignore_errors=True)
    images = read_images(HERE / "corpus" / "images.jsonl")
    captions = corpus.read_text_records(HERE / "corpus" / "captions.jsonl")

    current = {}

    def transport(url, payload, headers, timeout):
        return {"choices": [{"message": {"content": current["answer"]}}]}

    client = GenerationClient(CACHE, endpoint_url="http://fixture.invalid", transport=transport, vision=True)
    for im in images:
        for name in ("imagery_tag_mood", "imagery_tag_occasion"):
            current["answer"] = TAGS[(im.id, name)]
            corpus.generate_imagery_tags(im.uri, [builtin_template(name)], client)
    triple_tpl = builtin_template("triple_extract")
    per_image = {}
    for cap in captions:
        current["answer"] = TRIPLES[cap.id]
        per_image.setdefault(cap.image_id, []).extend(
            corpus.extract_triples(cap.text, client, triple_tpl, source_caption_id=cap.id))
    fuse_tpl = builtin_template("fragment_fuse")
    for image_id, triples in sorted(per_image.items()):
        for group in corpus.group_triples(triples, 3):
            current["answer"] = FRAGMENTS[image_id]
            corpus.fuse_fragments(group, client, fuse_tpl, [image_id])
    print(f"wrote {len(list(CACHE.glob('*.txt')))} cache entries to {CACHE}")


if __name__ == "__main__":
    main()
