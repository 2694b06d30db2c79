import json

import httpx
import pytest

from echo_esc.dataset import ESC10_LABELS, ESC50_LABELS, US8K_LABELS, ClipRecord, DatasetKind, Manifest
from echo_esc.errors import (
    ClassCountTooSmall,
    InvalidParentCount,
    OntologyGenerationFailed,
    ProviderUnreachable,
    UnassignedLabel,
    UnparseableReply,
)
from echo_esc.ontology import (
    API_KEY_ENV,
    ChatCompletionClient,
    Ontology,
    OntologySource,
    ViolationCode,
    available_fixtures,
    build_prompt,
    generate_ontology,
    load_fixture,
    load_ontology_file,
    parse_reply,
    relabel,
    save_ontology_file,
    sqrt_heuristic,
    validate_ontology,
)
from ontology_mutations import EXPECTED, mutation_suite

LABELS = {"US8K": US8K_LABELS, "ESC10": ESC10_LABELS, "ESC50": ESC50_LABELS}
SHIPPED = [(d, p) for d, ps in (("US8K", (2, 3, 5)), ("ESC10", (2, 3, 5)), ("ESC50", (3, 5, 7))) for p in ps]


def test_all_expected_fixtures_ship():
    assert available_fixtures() == sorted(f"{d.lower()}_p{p}.json" for d, p in SHIPPED)


@pytest.mark.parametrize("dataset,p", SHIPPED)
def test_fixture_valid(dataset, p):
    o = load_fixture(dataset, p)
    assert o.source is OntologySource.FIXTURE and o.p == p
    assert validate_ontology(o, LABELS[dataset]).ok
    assert sum(len(c) for c in o.parents.values()) == len(LABELS[dataset])


def test_table_parent_names():
    assert list(load_fixture("US8K", 5).parents) == [
        "Construction- Maintenance", "Transportation- Vehicles", "Emergency-Alerts", "Urban Leisure",
        "Residential-Animal Sounds"]
    assert list(load_fixture("ESC10", 3).parents) == ["Nature-Animals", "Mechanical Sounds", "Human-Related Sounds"]
    assert list(load_fixture("ESC10", 2).parents) == ["Natural Sounds", "Human-Man-Made Sounds"]


def test_mutations_fail_with_expected_code():
    fixtures = [(load_fixture(d, p), LABELS[d]) for d, p in SHIPPED]
    suite = mutation_suite(fixtures, count=30)
    assert len(suite) == 30
    for kind, _, labels, mutant in suite:
        report = validate_ontology(mutant, labels)
        assert not report.ok
        assert report.codes == EXPECTED[kind], (kind, report.violations)


def test_dog_removed_is_partition_violation():
    o = load_fixture("ESC10", 2)
    parents = {k: tuple(c for c in v if c != "dog") for k, v in o.parents.items()}
    assert ViolationCode.PARTITION in validate_ontology(Ontology(parents, 2), ESC10_LABELS).codes


def test_bounds_and_small_n():
    one = Ontology({"all": ESC10_LABELS}, 1)
    assert ViolationCode.PARENT_BOUNDS in validate_ontology(one, ESC10_LABELS).codes
    tiny = Ontology({"x": ("a",), "y": ("b", "c")}, 2)
    assert validate_ontology(tiny, ["a", "b", "c"]).codes == {ViolationCode.TOO_FEW_CLASSES}


def test_sqrt_heuristic():
    assert sqrt_heuristic(50) == 7
    assert sqrt_heuristic(10) == 3
    assert sqrt_heuristic(4) == 2
    assert [sqrt_heuristic(n) for n in (8, 9, 15, 16, 99, 100)] == [2, 3, 3, 4, 9, 10]
    with pytest.raises(ClassCountTooSmall):
        sqrt_heuristic(3)


def test_prompt_template():
    pt = build_prompt(US8K_LABELS, 2)
    assert "Number of Classes in Dataset = 10" in pt.text
    assert "Number of Parent Classes to Generate = 2" in pt.text
    assert pt.text.startswith("Dataset Classes:")
    assert all(f"- {lab}" in pt.text for lab in US8K_LABELS)
    assert (pt.n, pt.p) == (10, 2)
    assert build_prompt(ESC10_LABELS, 3).label_list_hash != pt.label_list_hash
    for bad in (1, 10, 11):
        with pytest.raises(InvalidParentCount):
            build_prompt(ESC10_LABELS, bad)


def test_prompt_feedback():
    pt = build_prompt(ESC10_LABELS, 3, ["('dog' has no parent)"])
    assert "previous answer was rejected" in pt.text and "'dog' has no parent" in pt.text


def test_parse_json_reply_with_loose_spelling():
    reply = ("Sure! Here is the grouping:\n```json\n" + json.dumps({
        "Natural Sounds": ["Dog", "rooster", "Rain", "sea waves", "crackling-fire"],
        "Human-Man-Made Sounds": ["crying baby", "sneezing", "clock_tick", "Helicopter", "chainsaw"],
    }) + "\n```")
    o = parse_reply(reply, ESC10_LABELS, 2)
    assert o.p == 2 and o.source is OntologySource.LLM
    assert o.assignment["sea_waves"] == "Natural Sounds"
    assert validate_ontology(o, ESC10_LABELS).ok


def test_parse_bullet_fallback():
    reply = """1. **Natural Sounds**:
   - dog
   - rooster
   - rain
   - sea waves
   - crackling fire
2. **Human-Man-Made Sounds**:
   - crying baby
   - sneezing
   - clock tick
   - helicopter
   - chainsaw
"""
    o = parse_reply(reply, ESC10_LABELS, 2)
    assert list(o.parents) == ["Natural Sounds", "Human-Man-Made Sounds"]
    assert len(o.parents["Human-Man-Made Sounds"]) == 5


def test_parse_inline_lists():
    reply = "Natural Sounds: dog, rooster, rain, sea_waves, crackling_fire\n" \
            "Human-Man-Made Sounds: crying_baby, sneezing, clock_tick, helicopter, chainsaw"
    assert parse_reply(reply, ESC10_LABELS, 2).n == 10


@pytest.mark.parametrize("parents", [
    {"A": ["dog", "rooster", "rain", "sea_waves"], "B": ["crying_baby", "sneezing", "clock_tick", "helicopter", "chainsaw"]},
    {"A": ["dog", "rooster", "rain", "sea_waves", "crackling_fire"],
     "B": ["dog", "crying_baby", "sneezing", "clock_tick", "helicopter", "chainsaw"]},
    {"A": ["dog", "rooster", "rain", "sea_waves", "crackling_fire", "kazoo"],
     "B": ["crying_baby", "sneezing", "clock_tick", "helicopter", "chainsaw"]},
])
def test_parse_rejects_bad_partitions(parents):
    with pytest.raises(UnparseableReply) as exc:
        parse_reply(json.dumps(parents), ESC10_LABELS, 2)
    assert exc.value.violations


def test_parse_rejects_noise():
    for raw in ("", "   ", "I cannot help with that."):
        with pytest.raises(UnparseableReply):
            parse_reply(raw, ESC10_LABELS, 2)


class ScriptedProvider:
    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        return self.replies.pop(0)


GOOD_P2 = json.dumps({"Natural Sounds": ["dog", "rooster", "rain", "sea_waves", "crackling_fire"],
                      "Human-Man-Made Sounds": ["crying_baby", "sneezing", "clock_tick", "helicopter", "chainsaw"]})


def test_generate_retries_then_fails():
    prov = ScriptedProvider(["garbage"] * 5)
    with pytest.raises(OntologyGenerationFailed) as exc:
        generate_ontology(prov, ESC10_LABELS, 2, max_retries=3)
    assert exc.value.attempts == 3 and len(prov.prompts) == 3


def test_generate_feeds_back_violations():
    bad = json.dumps({"A": list(ESC10_LABELS[:4]), "B": list(ESC10_LABELS[5:])})
    prov = ScriptedProvider([bad, GOOD_P2])
    o = generate_ontology(prov, ESC10_LABELS, 2, max_retries=3, dataset=DatasetKind.ESC10)
    assert o.meta["attempts"] == 2 and o.source is OntologySource.LLM and o.dataset == "ESC10"
    assert "crackling_fire" in prov.prompts[1] and "rejected" in prov.prompts[1]


def test_fixture_mode_never_calls_provider():
    prov = ScriptedProvider([])
    o = generate_ontology(prov, US8K_LABELS, 5, dataset="US8K", fixture_only=True)
    assert o.source is OntologySource.FIXTURE and not prov.prompts
    with pytest.raises(OntologyGenerationFailed):
        generate_ontology(None, ESC10_LABELS, 4, dataset="ESC10", fixture_only=True)


def _mock_client(tmp_path, handler, key="sk-test-123"):
    return ChatCompletionClient("http://llm.invalid/v1/chat/completions", "test-model", api_key=key,
                                log_dir=tmp_path / "llm", transport=httpx.MockTransport(handler))


def test_http_client_roundtrip_and_logging(tmp_path):
    seen = []

    def handler(request):
        seen.append(request)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": GOOD_P2}}]})

    client = _mock_client(tmp_path, handler)
    o = generate_ontology(client, ESC10_LABELS, 2, dataset="ESC10")
    assert o.p == 2
    body = json.loads(seen[0].content)
    assert body["model"] == "test-model" and body["messages"][0]["role"] == "user"
    assert seen[0].headers["authorization"] == "Bearer sk-test-123"
    logs = list((tmp_path / "llm").glob("llm-*.json"))
    assert len(logs) == 1 and "sk-test-123" not in logs[0].read_text()


def test_http_errors_are_unreachable(tmp_path):
    client = _mock_client(tmp_path, lambda r: httpx.Response(503, text="overloaded"))
    with pytest.raises(ProviderUnreachable):
        generate_ontology(client, ESC10_LABELS, 2)

    def boom(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(ProviderUnreachable):
        _mock_client(tmp_path, boom).complete("hi")


def test_api_key_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "env-key")
    c = ChatCompletionClient("http://x.invalid", "m")
    assert c.api_key == "env-key"


def test_relabel_indoor_outdoor():
    labels = ("TV", "fan", "traffic", "car horn")
    recs = tuple(ClipRecord(f"{lab}-{i}", "", lab, 1 + i % 2, 1.0) for lab in labels for i in range(3))
    m = Manifest(DatasetKind.CUSTOM, recs, labels, 2, 1.0)
    o = Ontology({"indoor sounds": ("TV", "fan"), "outdoor sounds": ("traffic", "car horn")}, 2)
    c = relabel(m, o)
    assert c.label_set == ("indoor sounds", "outdoor sounds")
    assert [r.label for r in c.records if r.clip_id.startswith(("TV", "fan"))] == ["indoor sounds"] * 6
    assert [r.label for r in c.records if r.clip_id.startswith(("traffic", "car horn"))] == ["outdoor sounds"] * 6
    assert [r.fold_index for r in c.records] == [r.fold_index for r in m.records]
    assert relabel(m, o) == c
    with pytest.raises(UnassignedLabel):
        relabel(m, Ontology({"indoor sounds": ("TV", "fan"), "outdoor sounds": ("traffic",)}, 2))


def test_relabel_esc50_conserves_records():
    recs = tuple(ClipRecord(f"{i}-{t}", "", lab, 1 + i % 5, 5.0)
                 for t, lab in enumerate(ESC50_LABELS) for i in range(40))
    m = Manifest(DatasetKind.ESC50, recs, ESC50_LABELS, 5, 5.0)
    c = relabel(m, load_fixture("ESC50", 7))
    assert c.n == 7 and len(c.records) == 2000
    assert c.fold_counts() == m.fold_counts()


def test_file_roundtrip(tmp_path):
    o = load_fixture("US8K", 3)
    save_ontology_file(o, tmp_path / "o.json")
    back = load_ontology_file(tmp_path / "o.json")
    assert back == o and back.hash == o.hash
