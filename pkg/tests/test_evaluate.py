from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CountingTransport, live_backend, scripted, write_png
from fager.backend import ModelRequest, RoleTag
from fager.errors import CardinalityError, FagerError
from fager.evaluate import EvalConfig, answer_questions, decide, evaluate, make_feedback, score
from fager.model import (
    Answer,
    Decision,
    Fact,
    FactCategory,
    FactLevel,
    FactSource,
    FactualRubric,
    PromptSpec,
    QAPair,
    QASet,
    QuestionResult,
)

PROMPT = PromptSpec("p", "an apple on a wooden table")


def results_of(*answers: Answer) -> list[QuestionResult]:
    return [
        QuestionResult(qa_id=f"q{i}", answer=a, rationale="seen") for i, a in enumerate(answers)
    ]


def make_qaset(n_l1=5, n_l2=5, n_l3=5) -> QASet:
    pairs = []
    for level, count in ((FactLevel.L1, n_l1), (FactLevel.L2, n_l2), (FactLevel.L3, n_l3)):
        for i in range(count):
            idx = len(pairs)
            pairs.append(
                QAPair(
                    qa_id=f"p.qa.{idx}",
                    fact_id=f"p.proposal.{idx}",
                    level=level,
                    category=FactCategory.OTHERS,
                    question=f"Is {level.value} item {i} shown?",
                )
            )
    return QASet(prompt_id="p", pairs=tuple(pairs))


def make_rubric_for(qaset: QASet) -> FactualRubric:
    facts = tuple(
        Fact(
            fact_id=p.fact_id,
            level=p.level,
            category=p.category,
            statement=f"fact behind {p.qa_id}",
            source=FactSource.PROPOSAL,
        )
        for p in qaset.pairs
    )
    return FactualRubric(prompt_id="p", facts=facts)


def eval_transport(answer_for, feedback="fix the thing") -> CountingTransport:
    """Handles both answer batches and feedback requests."""

    def handler(req: ModelRequest) -> str:
        if req.response_schema_id == "feedback":
            return json.dumps({"feedback": feedback})
        payload = json.loads(req.user_text.split("Questions:\n", 1)[1].split("\n\nYour previous")[0])
        return json.dumps(
            {
                "answers": [
                    {"qa_id": q["qa_id"], "answer": answer_for(q["qa_id"], q["question"]),
                     "rationale": "visible evidence"}
                    for q in payload
                ]
            }
        )

    return scripted(handler)


# -- score -------------------------------------------------------------------

def test_score_examples():
    assert score(results_of(Answer.YES, Answer.YES, Answer.NO, Answer.UNKNOWN)) == 62.5
    assert score(results_of(*([Answer.YES] * 7))) == 100.0
    assert score(results_of(*([Answer.UNKNOWN] * 4))) == 50.0


def test_score_empty_is_error():
    with pytest.raises(FagerError):
        score([])


@given(st.lists(st.sampled_from(Answer), min_size=1, max_size=50))
def test_score_matches_brute_force_mean(answers):
    # independent oracle: exact rational mean of {0, 1/2, 1}
    value = {Answer.YES: Fraction(1), Answer.NO: Fraction(0), Answer.UNKNOWN: Fraction(1, 2)}
    expected = float(sum((value[a] for a in answers), Fraction(0)) / len(answers) * 100)
    assert score(results_of(*answers)) == expected


@given(st.lists(st.sampled_from(Answer), min_size=1, max_size=30), st.data())
def test_score_single_upgrade_strictly_increases(answers, data):
    upgrade = {Answer.NO: Answer.UNKNOWN, Answer.UNKNOWN: Answer.YES}
    candidates = [i for i, a in enumerate(answers) if a in upgrade]
    if not candidates:
        return
    i = data.draw(st.sampled_from(candidates))
    upgraded = list(answers)
    upgraded[i] = upgrade[upgraded[i]]
    assert score(results_of(*upgraded)) > score(results_of(*answers))


@given(st.lists(st.sampled_from(Answer), min_size=1, max_size=50))
def test_score_bounds_and_extremes(answers):
    s = score(results_of(*answers))
    assert 0 <= s <= 100
    assert (s == 100) == all(a is Answer.YES for a in answers)
    assert (s == 0) == all(a is Answer.NO for a in answers)


# -- decision rule -----------------------------------------------------------

@pytest.mark.parametrize(
    "l1,expected_regen",
    [(0.0, True), (19.99, True), (20.0, False), (20.01, False)],
)
def test_regeneration_threshold_is_strict(l1, expected_regen):
    decision = decide(l1, 50.0, EvalConfig())
    assert (decision is Decision.REGENERATE) == expected_regen


@pytest.mark.parametrize(
    "overall,expected",
    [(94.99, Decision.EDIT), (95.0, Decision.EDIT), (95.01, Decision.KEEP), (100.0, Decision.KEEP)],
)
def test_keep_threshold_is_strict(overall, expected):
    assert decide(100.0, overall, EvalConfig()) is expected


def test_eval_config_threshold_invariant():
    with pytest.raises(ValueError):
        EvalConfig(regeneration_threshold=95, keep_threshold=20)


# -- answer_questions --------------------------------------------------------

def test_answer_questions_preserves_order(image):
    qaset = make_qaset(3, 0, 0)
    transport = eval_transport(lambda qa_id, q: "yes")
    results = answer_questions(image, qaset.pairs, live_backend(transport))
    assert [r.qa_id for r in results] == [p.qa_id for p in qaset.pairs]


def test_answer_questions_occlusion_yields_unknown(image):
    qaset = make_qaset(2, 0, 0)
    transport = eval_transport(
        lambda qa_id, q: "unknown" if qa_id.endswith(".1") else "yes"
    )
    results = answer_questions(image, qaset.pairs, live_backend(transport))
    assert results[1].answer is Answer.UNKNOWN


def test_answer_questions_coerces_out_of_vocabulary_to_unknown(image):
    qaset = make_qaset(1, 0, 0)
    transport = eval_transport(lambda qa_id, q: "probably")
    results = answer_questions(image, qaset.pairs, live_backend(transport))
    assert results[0].answer is Answer.UNKNOWN


def test_answer_questions_repairs_missing_answer(image):
    qaset = make_qaset(3, 0, 0)
    calls = {"n": 0}

    def handler(req):
        calls["n"] += 1
        payload = json.loads(req.user_text.split("Questions:\n", 1)[1].split("\n\nYour previous")[0])
        answers = [
            {"qa_id": q["qa_id"], "answer": "yes", "rationale": "seen"} for q in payload
        ]
        if calls["n"] == 1:
            answers = answers[1:]
        return json.dumps({"answers": answers})

    results = answer_questions(image, qaset.pairs, live_backend(scripted(handler)))
    assert len(results) == 3
    assert calls["n"] == 2


def test_answer_questions_cardinality_error_after_repair(image):
    qaset = make_qaset(2, 0, 0)

    def handler(req):
        return json.dumps({"answers": []})

    with pytest.raises(CardinalityError):
        answer_questions(image, qaset.pairs, live_backend(scripted(handler)))


def test_answer_questions_respects_batch_size(image):
    qaset = make_qaset(7, 0, 0)
    transport = eval_transport(lambda qa_id, q: "yes")
    answer_questions(image, qaset.pairs, live_backend(transport), batch_size=3)
    assert transport.count() == 3  # 3 + 3 + 1


# -- evaluate ----------------------------------------------------------------

def test_gated_failure_answers_only_l1(image):
    qaset = make_qaset(5, 5, 5)
    rubric = make_rubric_for(qaset)
    transport = eval_transport(lambda qa_id, q: "no")
    outcome = evaluate(image, qaset, EvalConfig(gated=True), live_backend(transport),
                       rubric=rubric, prompt=PROMPT)
    assert outcome.decision is Decision.REGENERATE
    assert outcome.gated is True
    assert len(outcome.results) == 5
    assert all(p.level is FactLevel.L1 for p in qaset.pairs[:5])
    # no L2/L3 question ever hit the backend
    answered = [
        q["qa_id"]
        for r in transport.requests
        if r.response_schema_id == "answer_list"
        for q in json.loads(r.user_text.split("Questions:\n", 1)[1].split("\n\nYour previous")[0])
    ]
    l2l3 = {p.qa_id for p in qaset.pairs if p.level is not FactLevel.L1}
    assert not set(answered) & l2l3
    assert outcome.overall_score == outcome.level_scores[FactLevel.L1] == 0.0
    assert outcome.feedback is not None


def test_ungated_answers_everything_despite_l1_failure(image):
    qaset = make_qaset(5, 5, 5)
    rubric = make_rubric_for(qaset)
    transport = eval_transport(lambda qa_id, q: "no")
    outcome = evaluate(image, qaset, EvalConfig(gated=False), live_backend(transport),
                       rubric=rubric, prompt=PROMPT)
    assert len(outcome.results) == 15
    assert outcome.gated is False
    assert outcome.decision is Decision.REGENERATE  # l1 still below threshold


def test_all_yes_is_keep_without_feedback(image):
    qaset = make_qaset(4, 4, 4)
    transport = eval_transport(lambda qa_id, q: "yes")
    outcome = evaluate(image, qaset, EvalConfig(), live_backend(transport))
    assert outcome.overall_score == 100.0
    assert outcome.decision is Decision.KEEP
    assert outcome.feedback is None
    assert set(outcome.level_scores) == set(FactLevel)


def test_middling_score_is_edit(image):
    # 4 questions: yes, yes, no, unknown -> 62.5 -> edit
    qaset = make_qaset(2, 2, 0)
    answers = {"p.qa.0": "yes", "p.qa.1": "yes", "p.qa.2": "no", "p.qa.3": "unknown"}
    transport = eval_transport(lambda qa_id, q: answers[qa_id])
    outcome = evaluate(image, qaset, EvalConfig(), live_backend(transport),
                       rubric=make_rubric_for(qaset), prompt=PROMPT)
    assert outcome.overall_score == 62.5
    assert outcome.decision is Decision.EDIT
    assert outcome.feedback == "fix the thing"


def test_gated_requires_l1_question(image):
    qaset = make_qaset(0, 2, 0)
    transport = eval_transport(lambda qa_id, q: "yes")
    with pytest.raises(FagerError):
        evaluate(image, qaset, EvalConfig(gated=True), live_backend(transport))


# -- make_feedback -----------------------------------------------------------

def test_make_feedback_mechanical_fallback(image):
    qaset = make_qaset(2, 0, 0)
    rubric = make_rubric_for(qaset)
    results = results_of(Answer.NO, Answer.UNKNOWN)
    results = [
        QuestionResult(qa_id="p.qa.0", answer=Answer.NO, rationale="absent"),
        QuestionResult(qa_id="p.qa.1", answer=Answer.UNKNOWN, rationale="occluded"),
    ]

    def broken(req):
        raise RuntimeError("feedback model down")

    text = make_feedback(
        Decision.EDIT, results, qaset, rubric, PROMPT, live_backend(scripted(broken))
    )
    assert text == "ensure: fact behind p.qa.0; fact behind p.qa.1"


def test_make_feedback_rejects_keep():
    qaset = make_qaset(1, 0, 0)
    with pytest.raises(FagerError):
        make_feedback(Decision.KEEP, [], qaset, None, PROMPT, live_backend(scripted(lambda r: "")))


def test_make_feedback_uses_mode_instruction(image):
    qaset = make_qaset(1, 0, 0)
    rubric = make_rubric_for(qaset)
    results = [QuestionResult(qa_id="p.qa.0", answer=Answer.NO, rationale="absent")]
    seen = {}

    def handler(req):
        seen["system"] = req.system_text
        return json.dumps({"feedback": "in an outdoor harbor setting"})

    text = make_feedback(
        Decision.REGENERATE, results, qaset, rubric, PROMPT, live_backend(scripted(handler))
    )
    assert text == "in an outdoor harbor setting"
    assert "REGENERATE" in seen["system"]
