import json
from importlib import resources

import pytest

from ragloop.backend import GenerationRequest
from ragloop.mocks import (
    CallCounter,
    FixtureError,
    FixtureScenario,
    ForgetfulReasoner,
    StaticRetriever,
    available_scenarios,
    fact_sentence,
    load_scenario,
    parse_extractor_prompt,
    run_scenario,
)
from ragloop.orchestrator import FORCED_ANSWER_SUFFIX
from ragloop.protocol import TemplateId, load_templates, render_prompt


def test_shipped_scenarios_load():
    assert set(available_scenarios()) >= {"trace_baseline", "trace_extractor", "trace_dedup",
                                          "duplicate_heavy", "mini_batch"}
    for name in available_scenarios():
        assert load_scenario(name).name == name
    with pytest.raises(FixtureError):
        load_scenario("nope")


def test_scenarios_meet_their_expectations():
    for name in available_scenarios():
        sc = load_scenario(name)
        for mode, per_q in sc.expected.items():
            episodes = {e.qid: e for e in run_scenario(sc, mode)}
            for qid, exp in per_q.items():
                ep = episodes[qid]
                assert ep.retrieval_count == exp.get("retrieval_count", ep.retrieval_count), (name, mode, qid)
                assert ep.final_answer == exp.get("final_answer", ep.final_answer), (name, mode, qid)
                if "new_document_counts" in exp:
                    assert ep.new_document_counts == exp["new_document_counts"], (name, mode, qid)


def test_fixture_validation_catches_inconsistent_expectations():
    raw = json.loads((resources.files("ragloop") / "fixtures" / "trace_baseline.json").read_text("utf-8"))
    raw["expected"]["baseline"]["sheehy-lee"]["retrieval_count"] = 3
    with pytest.raises(FixtureError):
        FixtureScenario.from_dict(raw)


def test_extractor_prompt_parsing():
    t = load_templates()[TemplateId.EXTRACTOR]
    prompt = render_prompt(t, {"question": "Q?", "information": 'Doc 1(Title: "A") x', "prev_cache": "old"})
    assert parse_extractor_prompt(prompt) == ("Q?", 'Doc 1(Title: "A") x', "old")


def test_forgetful_reasoner_uses_fallback_when_forced():
    r = ForgetfulReasoner([("Needed", "find it")], "right", "guess")
    first = r.generate(GenerationRequest("m", "Question: q", ("</search>", "</answer>")))
    assert "<search> find it" in first.text
    forced = r.generate(GenerationRequest("m", "Question: q" + first.text + "</search>" + FORCED_ANSWER_SUFFIX,
                                          ("</search>", "</answer>")))
    assert "<answer> guess" in forced.text
    r = ForgetfulReasoner([("Needed", "find it")], "right", "guess")
    out = r.generate(GenerationRequest("m", "Question: q", ("</search>",))).text
    seen = r.generate(GenerationRequest("m", f"Question: q{out}</search> {fact_sentence('Needed')}"))
    assert "<answer> right" in seen.text
    # text from before the previous turn is invisible to it
    r = ForgetfulReasoner([("Needed", "find it")], "right", "guess")
    out = r.generate(GenerationRequest("m", f"Question: q {fact_sentence('Needed')}", ("</search>",))).text
    again = r.generate(GenerationRequest("m", f"Question: q {fact_sentence('Needed')}{out}</search> nothing"))
    assert "<search> find it" in again.text


def test_static_retriever():
    sc = load_scenario("duplicate_heavy")
    r = StaticRetriever(sc.corpus, {"q": ["kern", "sf-2018"]})
    assert [d.doc_id for d in r.retrieve("q", 1).candidates] == ["kern"]
    with pytest.raises(ValueError):
        StaticRetriever(sc.corpus, {"q": ["missing"]})


def test_call_counter():
    counter = CallCounter()
    sc = load_scenario("mini_batch")
    judge = counter.wrap(sc.judge_backend())
    t = load_templates()[TemplateId.JUDGE_MATCH]
    judge.generate(GenerationRequest("m", render_prompt(t, {"predicted": "2", "golds": '["Two"]'})))
    assert counter.calls == 1
