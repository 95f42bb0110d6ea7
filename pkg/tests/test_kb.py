import json

import httpx
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from kanoclip.errors import (
    ClientFailure,
    EmptyClassName,
    EmptyKnowledge,
    InsufficientDescriptions,
    SchemaMismatch,
    UnknownClass,
    UnreadableImage,
)
from kanoclip.kb import (
    ChatCompletionsClient,
    ClassKnowledge,
    Description,
    DescriptionClient,
    FixtureClient,
    KnowledgeBase,
    PromptTemplateConfig,
    build_knowledge_base,
    collect_class_descriptions,
    collect_image_descriptions,
    knowledge_mean,
    load_kb,
    render_class_prompt,
    render_vqa_prompt,
    save_kb,
    split_response,
)

FABRIC = [f"fabric defect {i}" for i in range(5)]


def test_class_prompt_exact():
    assert render_class_prompt("fabric") == "Q: Describe what an abnormal image of fabric looks like?"
    assert render_class_prompt("metal nut") == "Q: Describe what an abnormal image of metal nut looks like?"


def test_vqa_prompt_exact():
    assert render_vqa_prompt("fabric") == (
        "<IMAGE> + Q: Identify anomalies in the input image of the specified fabric. "
        "Describe each anomaly's location, color, shape, size, and other characteristics."
    )
    assert render_vqa_prompt("wood") == render_vqa_prompt("fabric").replace("fabric", "wood")


@pytest.mark.parametrize("name", ["", "  ", "\t"])
def test_empty_class_rejected(name):
    with pytest.raises(EmptyClassName):
        render_class_prompt(name)
    with pytest.raises(EmptyClassName):
        render_vqa_prompt(name)


def test_defaults():
    cfg = PromptTemplateConfig()
    assert (cfg.n_class_descriptions, cfg.m_image_descriptions, cfg.retry_budget) == (5, 1, 2)
    assert cfg.vqa_source == "anomalous_only"


def test_fixture_passthrough_in_order():
    client = FixtureClient({render_class_prompt("fabric"): FABRIC})
    assert collect_class_descriptions(client, "fabric", n=5) == FABRIC


def test_fixture_short_raises():
    client = FixtureClient({render_class_prompt("fabric"): FABRIC[:3]})
    with pytest.raises(InsufficientDescriptions):
        collect_class_descriptions(client, "fabric", n=5, retry_budget=0)


def test_missing_fixture_is_client_failure():
    with pytest.raises(ClientFailure):
        collect_class_descriptions(FixtureClient({}), "fabric")


class Trickle(DescriptionClient):
    """Live-mode stub that returns two descriptions per call."""

    mode = "live"

    def __init__(self):
        self.calls = 0

    def query(self, prompt, image=None, image_id=None):
        self.calls += 1
        return [f"d{self.calls}a", f"d{self.calls}b"]


def test_retry_budget_accumulates_then_fails():
    client = Trickle()
    assert collect_class_descriptions(client, "x", n=5, retry_budget=2) == ["d1a", "d1b", "d2a", "d2b", "d3a"]
    with pytest.raises(InsufficientDescriptions):
        collect_class_descriptions(Trickle(), "x", n=5, retry_budget=1)


@pytest.fixture
def png(tmp_path):
    path = tmp_path / "img.png"
    Image.new("RGB", (8, 8), (10, 20, 30)).save(path)
    return path


def test_image_descriptions(png):
    prompt = render_vqa_prompt("wood")
    client = FixtureClient({f"a/1.png|{prompt}": ["crack at top left"], prompt: ["generic"]})
    assert collect_image_descriptions(client, png, "wood", m=1, image_id="a/1.png") == ["crack at top left"]
    assert collect_image_descriptions(client, png, "wood", m=1, image_id="other") == ["generic"]
    again = collect_image_descriptions(client, png, "wood", m=1, image_id="a/1.png")
    assert again == ["crack at top left"]


def test_m_zero_skips_client(png):
    client = FixtureClient({})
    assert collect_image_descriptions(client, png, "wood", m=0) == []
    assert client.calls == []


def test_unreadable_image(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(UnreadableImage):
        collect_image_descriptions(FixtureClient({}), bad, "wood")


def test_split_response():
    assert split_response("1. first\n\n- second\n* third\n2) fourth") == ["first", "second", "third", "fourth"]


def test_live_client_over_mock_transport(png):
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request.url.path, request.headers.get("authorization"), body))
        return httpx.Response(200, json={"choices": [{"message": {"content": "1. a\n2. b"}}]})

    client = ChatCompletionsClient("http://llm.test/v1", "m", api_key="k", transport=httpx.MockTransport(handler))
    assert client.query("hello") == ["a", "b"]
    assert client.query("look", image=png) == ["a", "b"]
    path, auth, body = seen[1]
    assert path == "/v1/chat/completions" and auth == "Bearer k"
    parts = body["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "look"}
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_live_client_http_error_maps_to_client_failure():
    client = ChatCompletionsClient("http://llm.test", "m",
                                   transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(ClientFailure):
        client.query("x")


class Sample:
    def __init__(self, path, class_name, label, image_id):
        self.image_path, self.class_name, self.label, self.image_id = path, class_name, label, image_id


def _fixtures():
    return {
        render_class_prompt("wood"): FABRIC,
        render_class_prompt("tile"): FABRIC[::-1],
        render_vqa_prompt("wood"): ["wood image note"],
        render_vqa_prompt("tile"): ["tile image note"],
    }


def test_build_counts_and_provenance(png):
    images = [Sample(png, "wood", 1, "w1"), Sample(png, "wood", 0, "w0"), Sample(png, "tile", 1, "t1")]
    client = FixtureClient(_fixtures())
    kb = build_knowledge_base(client, ["wood", "tile"], vqa_client=client, images=images)
    assert kb.classes == ["tile", "wood"]
    assert kb["wood"].n_llm == 5 and kb["wood"].n_vqa == 1  # normal image skipped
    assert kb["wood"].vqa[0].image_id == "w1"
    assert {d.source for d in kb["wood"].llm + kb["wood"].vqa} == {"fixture"}
    all_kb = build_knowledge_base(client, ["wood"], PromptTemplateConfig(vqa_source="all"),
                                  vqa_client=client, images=images)
    assert all_kb["wood"].n_vqa == 2


def test_build_twice_byte_identical(tmp_path, png):
    images = [Sample(png, "wood", 1, f"w{i}") for i in range(6)]
    paths = []
    for run in range(2):
        client = FixtureClient(_fixtures())
        kb = build_knowledge_base(client, ["tile", "wood"], vqa_client=client, images=images, max_workers=4)
        paths.append(tmp_path / f"kb{run}.json")
        save_kb(kb, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_round_trip_and_empty(tmp_path):
    kb = KnowledgeBase({"wood": ClassKnowledge(
        [Description("a", "llm")], [Description("b", "vqa", "img/1.png")])})
    save_kb(kb, tmp_path / "kb.json")
    assert load_kb(tmp_path / "kb.json") == kb
    save_kb(KnowledgeBase(), tmp_path / "empty.json")
    assert load_kb(tmp_path / "empty.json") == KnowledgeBase()
    data = json.loads((tmp_path / "kb.json").read_text())
    assert data["schema_version"] == 1 and data["classes"]["wood"]["vqa"][0]["image_id"] == "img/1.png"


def test_unknown_schema(tmp_path):
    (tmp_path / "kb.json").write_text(json.dumps({"schema_version": 99, "classes": {}}))
    with pytest.raises(SchemaMismatch):
        load_kb(tmp_path / "kb.json")


texts = st.text(alphabet="abcdefgh xyz", min_size=1, max_size=12).filter(lambda s: s.strip())


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(alphabet="abc", min_size=1, max_size=4),
                       st.tuples(st.lists(texts, max_size=4), st.lists(texts, max_size=3)), max_size=4))
def test_round_trip_property(tmp_path_factory, entries):
    kb = KnowledgeBase({
        name: ClassKnowledge([Description(t, "llm") for t in llm],
                             [Description(t, "vqa", f"{name}/{i}") for i, t in enumerate(vqa)])
        for name, (llm, vqa) in entries.items()
    })
    path = tmp_path_factory.mktemp("kb") / "kb.json"
    save_kb(kb, path)
    assert load_kb(path) == kb


def _kb_with(texts_):
    return KnowledgeBase({"c": ClassKnowledge([Description(t, "llm") for t in texts_])})


def test_knowledge_mean_hand_values():
    table = {k: torch.tensor(v, dtype=torch.float64)
             for k, v in {"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [1.0, 1.0]}.items()}
    mean = knowledge_mean(_kb_with(["a", "b", "c"]), "c", table.__getitem__)
    assert mean.tolist() == pytest.approx([2 / 3, 2 / 3], abs=1e-12)
    v = torch.tensor([0.3, -1.2])
    assert torch.equal(knowledge_mean(_kb_with(["a"]), "c", lambda t: v), v)
    assert torch.allclose(knowledge_mean(_kb_with(["a", "b"]), "c", lambda t: v), v)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3), min_size=1, max_size=8))
def test_knowledge_mean_linearity(rows):
    names = [f"t{i}" for i in range(len(rows))]
    table = {n: torch.tensor(r, dtype=torch.float64) for n, r in zip(names, rows)}
    got = knowledge_mean(_kb_with(names), "c", table.__getitem__)
    expected = [sum(r[j] for r in rows) / len(rows) for j in range(3)]
    assert got.tolist() == pytest.approx(expected, abs=1e-9)


def test_knowledge_mean_errors():
    with pytest.raises(UnknownClass):
        knowledge_mean(KnowledgeBase(), "x", lambda t: torch.zeros(2))
    with pytest.raises(EmptyKnowledge):
        knowledge_mean(KnowledgeBase({"x": ClassKnowledge()}), "x", lambda t: torch.zeros(2))
