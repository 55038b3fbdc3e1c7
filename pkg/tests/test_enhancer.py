import pytest

from qe_retrieval.enhancer import (
    EnhancementError,
    PromptTemplate,
    builtin_template,
    enhance,
    parse_template,
    passthrough,
)
from qe_retrieval.genclient import CacheMissError, GenerationClient

from conftest import ChatStub, numbered

TEN = [f"sentence number {i}" for i in range(10)]


def client_for(tmp_path, respond, **kw):
    stub = ChatStub(respond)
    return GenerationClient(tmp_path, endpoint_url="http://stub", transport=stub, backoff=0, **kw), stub


def test_fixed_stub_three_batches(tmp_path):
    client, stub = client_for(tmp_path, lambda p, _: numbered(TEN))
    tpl = PromptTemplate("t", "Expand: {query}", n=10)
    eq = enhance("a dog", tpl, client, 3)
    assert len(eq.batches) == 3 and all(len(b) == 10 for b in eq.batches)
    assert len(eq.pooled) <= 30
    # identical output per batch collapses to 10 unique texts
    assert len(eq.pooled) == 10
    assert eq.batch_tags == (1, 2, 3)
    assert stub.calls == 3


def test_distinct_batches_pool_up_to_b_times_n(tmp_path):
    counter = iter(range(100))
    client, _ = client_for(tmp_path, lambda p, _: numbered(f"s{next(counter)}-{i}" for i in range(4)),
                           max_in_flight=1)
    eq = enhance("q", PromptTemplate("t", "{query}", n=4), client, 3)
    assert len(eq.pooled) == 12
    assert len(set(eq.pooled)) == len(eq.pooled)


def test_concatenation_rule(tmp_path):
    client, _ = client_for(tmp_path, lambda p, _: "children outside a bounce house")
    eq = enhance("family gathering", PromptTemplate("t", "{query}", n=10), client, 1)
    assert eq.batches == (("family gathering. children outside a bounce house",),)


def test_prefix_property_and_bounds(tmp_path):
    client, _ = client_for(tmp_path, lambda p, _: numbered(TEN[:7]))
    eq = enhance("two dogs", PromptTemplate("t", "{query}", n=5), client, 2)
    assert all(t.startswith("two dogs") for t in eq.pooled)
    assert 1 <= len(eq.pooled) <= 2 * 5
    assert all(1 <= len(b) <= 5 for b in eq.batches)


def test_warm_cache_is_deterministic(tmp_path):
    counter = iter(range(100))
    client, stub = client_for(tmp_path, lambda p, _: numbered([f"v{next(counter)}"]))
    tpl = PromptTemplate("t", "{query}", n=3)
    first = enhance("q", tpl, client, 3)
    offline = GenerationClient(tmp_path, offline=True)
    assert enhance("q", tpl, offline, 3) == first


def test_empty_batch_retried_then_dropped(tmp_path):
    responses = {}

    def respond(prompt, payload):
        responses.setdefault("n", 0)
        responses["n"] += 1
        return "   \n"

    client, stub = client_for(tmp_path, respond)
    with pytest.raises(EnhancementError):
        enhance("q", PromptTemplate("t", "{query}"), client, 3, retries=2)
    assert stub.calls == 9  # 3 batches x (1 + 2 retries)


def test_partial_drop_keeps_good_batches(tmp_path):
    calls = []

    def respond(prompt, payload):
        calls.append(1)
        return "" if len(calls) == 1 else "ok sentence"

    client, _ = client_for(tmp_path, respond, max_in_flight=1)
    eq = enhance("q", PromptTemplate("t", "{query}"), client, 2, retries=0)
    assert eq.batch_tags == (2,)
    assert eq.pooled == ("q. ok sentence",)


def test_cache_miss_propagates(tmp_path):
    with pytest.raises(CacheMissError):
        enhance("q", PromptTemplate("t", "{query}"), GenerationClient(tmp_path, offline=True), 1)


def test_passthrough():
    eq = passthrough("a dog")
    assert eq.batches == (("a dog",),)
    assert eq.pooled == ("a dog",)


def test_template_placeholder_rules():
    with pytest.raises(ValueError):
        PromptTemplate("t", "no placeholder")
    with pytest.raises(ValueError):
        PromptTemplate("t", "{query} {query}")
    with pytest.raises(ValueError):
        PromptTemplate("t", "{query}", n=0)


def test_template_file_format():
    tpl = parse_template('{"name": "x", "n": 4, "temperature": 0.1}\nGive {n} lines about {query}.\n')
    assert (tpl.name, tpl.n, tpl.temperature) == ("x", 4, 0.1)
    assert tpl.render("{n} dogs") == "Give 4 lines about {n} dogs."


@pytest.mark.parametrize("name", ["expand_scene", "triple_extract", "fragment_fuse", "imagery_tag_mood",
                                  "imagery_tag_occasion"])
def test_builtin_templates_parse(name):
    tpl = builtin_template(name)
    assert tpl.name == name
