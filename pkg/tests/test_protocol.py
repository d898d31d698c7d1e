import pytest
from hypothesis import given, strategies as st

from ragloop.protocol import (
    Answer,
    EmptyDocumentSet,
    Malformed,
    PromptTemplate,
    Search,
    TagKind,
    TemplateId,
    UnboundPlaceholder,
    action_end,
    complete_stopped_output,
    extract_think,
    parse_information_block,
    parse_next_action,
    render_information_block,
    render_prompt,
    scan_blocks,
    stop_sequences_for,
    unresolved_placeholders,
)
from ragloop.retriever import Document

SHEEHY_Q = "who was appointed to the board of supervisors first, Jeff Sheehy or Ed Lee"


def test_parse_search_from_sample_trace():
    out = ("<think> I need to determine if Jeff Sheehy or Ed Lee was appointed to the board of "
           "supervisors first. I'll search for it.</think>\n<search> " + SHEEHY_Q + " </search>")
    assert parse_next_action(out) == Search(SHEEHY_Q)


def test_parse_answer():
    assert parse_next_action("<think> ... </think>\n<answer> Ed Lee </answer>") == Answer("Ed Lee")


@pytest.mark.parametrize("text, reason", [
    ("I think the answer is Paris.", "missing-tag"),
    ("", "missing-tag"),
    ("<search> unfinished", "unclosed-tag"),
    ("<answer>   </answer>", "empty-content"),
    ("<search> a <think> b </think> </search>", "nested-tag"),
    ("<search>q</search>".upper(), "missing-tag"),
    ("<think> x </think><information> Doc 1 ... </information><answer> y </answer>", "hallucinated-information"),
])
def test_malformed(text, reason):
    assert parse_next_action(text) == Malformed(reason)


def test_first_complete_block_wins():
    assert parse_next_action("<search> q1 </search> ignored <answer> x </answer>") == Search("q1")


def test_unclosed_think_is_tolerated():
    # one sample trace closes its think block with a second opening tag
    out = "<think> I'll search for it. <think>\n\n<search> q </search>"
    assert parse_next_action(out) == Search("q")
    assert extract_think(out) is None


def test_internal_whitespace_preserved():
    assert parse_next_action("<answer>  New   York\n City </answer>") == Answer("New   York\n City")


def test_stop_sequences():
    assert stop_sequences_for("awaiting_action") == ["</search>", "</answer>"]
    with pytest.raises(ValueError):
        stop_sequences_for("other")


def test_overrun_parses_like_stopped_output():
    stopped = complete_stopped_output("<think> a </think>\n<search> q ")
    overran = "<think> a </think>\n<search> q </search>\n<information> fake </information>"
    assert parse_next_action(stopped) == parse_next_action(overran) == Search("q")
    assert action_end(overran) == len(stopped)


def test_complete_stopped_output_leaves_closed_text_alone():
    assert complete_stopped_output("<answer> x </answer>") == "<answer> x </answer>"
    assert complete_stopped_output("<answer> x ") == "<answer> x </answer>"
    assert complete_stopped_output("no tags") == "no tags"


def test_scan_blocks_spans():
    text = "<think> a </think> mid <search> q </search>"
    blocks = scan_blocks(text)
    assert [b.kind for b in blocks] == [TagKind.THINK, TagKind.SEARCH]
    assert [b.content for b in blocks] == ["a", "q"]
    for b in blocks:
        s, e = b.span
        assert text[s:e].startswith(f"<{b.kind.value}>") and text[s:e].endswith(f"</{b.kind.value}>")
    assert blocks[0].span[1] <= blocks[1].span[0]


def test_render_information_block():
    docs = [Document("a", "Jeff Sheehy", "Jeff Sheehy is a former member...")]
    assert render_information_block(docs) == 'Doc 1(Title: "Jeff Sheehy") Jeff Sheehy is a former member...'
    two = render_information_block([Document("a", "A", "x"), Document("b", "B", "y")])
    assert two == 'Doc 1(Title: "A") x\nDoc 2(Title: "B") y'
    with pytest.raises(EmptyDocumentSet):
        render_information_block([])


def test_render_prompt_examples(templates):
    base = render_prompt(templates[TemplateId.BASE_AGENT], {"question": "Q?"})
    assert base.endswith("Question: Q?")
    assert "You must conduct reasoning inside <think> and </think>" in base
    judge = render_prompt(templates[TemplateId.JUDGE_MATCH], {"predicted": "2", "golds": '["Two"]'})
    assert "Predicted Answer: 2" in judge and 'Ground Truth Answers: ["Two"]' in judge
    with pytest.raises(UnboundPlaceholder) as exc:
        render_prompt(templates[TemplateId.EXTRACTOR], {"question": "Q?", "prev_cache": ""})
    assert exc.value.name == "information"


def test_shipped_templates_carry_their_anchors(templates):
    assert "only new information can be added" in templates[TemplateId.EXTRACTOR].text
    assert "Score 0 or 1 based on the semantic similarity" in templates[TemplateId.JUDGE_MATCH].text
    assert "Score 1-5 how well the reasoning reflects extraction" in templates[TemplateId.REASONING_SCORE].text


def test_bound_values_are_not_rescanned():
    t = PromptTemplate(TemplateId.BASE_AGENT, "Question: {question}")
    assert render_prompt(t, {"question": "{question} {x}"}) == "Question: {question} {x}"


# --- properties -----------------------------------------------------------------

tag_free = st.text(alphabet=st.characters(blacklist_characters="<>"), max_size=40)
content = st.text(alphabet=st.characters(blacklist_characters="<>"), min_size=1, max_size=40).filter(str.strip)
titles = st.text(alphabet=st.characters(blacklist_characters='"\n\r', blacklist_categories=("Cs",)), max_size=20)
bodies = st.text(alphabet=st.characters(blacklist_characters="\n\r", blacklist_categories=("Cs",)), max_size=60)


@given(st.text(max_size=200))
def test_parse_is_total_and_deterministic(text):
    a = parse_next_action(text)
    assert isinstance(a, (Search, Answer, Malformed))
    assert parse_next_action(text) == a


@given(tag_free, st.sampled_from(["search", "answer"]), content, st.text(max_size=80))
def test_first_block_rule(prefix, kind, body, suffix):
    block = f"<{kind}>{body}</{kind}>"
    expected = parse_next_action(block)
    assert parse_next_action(prefix + block) == expected
    assert parse_next_action(block + suffix) == expected
    assert isinstance(expected, Search if kind == "search" else Answer)
    assert (expected.query if kind == "search" else expected.answer) == body.strip()


@given(st.lists(st.tuples(titles, bodies), min_size=1, max_size=6))
def test_information_block_round_trip(pairs):
    docs = [Document(f"id{i}", t, b) for i, (t, b) in enumerate(pairs)]
    assert parse_information_block(render_information_block(docs)) == pairs


@given(st.dictionaries(st.sampled_from(["question", "information", "prev_cache", "predicted", "golds", "think"]),
                       tag_free.filter(lambda s: "{" not in s), min_size=6))
def test_rendered_prompts_have_no_placeholders(bindings):
    from ragloop.protocol import REQUIRED_PLACEHOLDERS, load_templates

    for tid, template in load_templates().items():
        text = render_prompt(template, bindings)
        assert unresolved_placeholders(text, REQUIRED_PLACEHOLDERS[tid]) == []
