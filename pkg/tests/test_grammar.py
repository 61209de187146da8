import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundnav import grammar
from groundnav.curation import annotate_scene
from groundnav.errors import InvariantViolation, MalformedResponse
from groundnav.grammar import (
    ACCESSIBLE,
    HARMFUL,
    DistanceEntry,
    GroundedPhrase,
    StructuredResponse,
    extract_seg_positions,
    parse_response,
    round_distance,
    serialize_response,
    validate_response,
)
from groundnav.ontology import AccessibilityOntology

from .strategies import random_valid_response

TEMPLATE_ANSWER = (
    "<assessment> The way ahead is mostly clear. </assessment>\n"
    "\n"
    "Accessible features are here:\n"
    "<p>sidewalk</p><SEG>\n"
    "\n"
    "Non-accessible features are here:\n"
    "<p>pole</p><SEG>\n"
    "\n"
    "<distance>\n"
    "Distance from the user to sidewalk: 3.4 m;\n"
    "to pole: 7.2 m;\n"
    "</distance>"
)


class TestParse:
    def test_template_answer(self):
        response = parse_response(TEMPLATE_ANSWER)
        assert response.assessment == "The way ahead is mostly clear."
        assert [(p.phrase, p.accessibility, p.seg_index) for p in response.phrases] == [
            ("sidewalk", ACCESSIBLE, 0),
            ("pole", HARMFUL, 1),
        ]
        assert [(d.object_name, d.distance_m) for d in response.distances] == [
            ("sidewalk", 3.4),
            ("pole", 7.2),
        ]
        assert response.raw_text == TEMPLATE_ANSWER

    def test_assessment_only_is_valid(self):
        response = parse_response("<assessment> Nothing to report. </assessment>")
        assert response.phrases == []
        assert response.distances == []

    def test_p_without_seg_is_malformed(self):
        text = (
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>tree</p>"
        )
        with pytest.raises(MalformedResponse):
            parse_response(text)

    def test_missing_assessment_is_malformed(self):
        with pytest.raises(MalformedResponse):
            parse_response("Accessible features are here:\n<p>sidewalk</p><SEG>")

    def test_unbalanced_tags(self):
        with pytest.raises(MalformedResponse):
            parse_response("<assessment> ok </assessment><p>sidewalk<SEG>")

    def test_non_numeric_distance(self):
        text = (
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>sidewalk</p><SEG>\n\n"
            "<distance>\nDistance from the user to sidewalk: far m;\n</distance>"
        )
        with pytest.raises(MalformedResponse):
            parse_response(text)

    def test_stray_seg_is_malformed(self):
        text = "<assessment> ok </assessment>\n<SEG>"
        with pytest.raises(MalformedResponse):
            parse_response(text)

    def test_phrase_outside_section_is_malformed(self):
        text = "<assessment> ok </assessment>\n<p>sidewalk</p><SEG>"
        with pytest.raises(MalformedResponse):
            parse_response(text)

    def test_empty_phrase_is_malformed(self):
        text = (
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p> </p><SEG>"
        )
        with pytest.raises(MalformedResponse):
            parse_response(text)


class TestSerialize:
    def test_both_sections_and_single_distance_block(self):
        response = StructuredResponse(
            assessment="Mixed scene.",
            phrases=[
                GroundedPhrase("sidewalk", ACCESSIBLE, 0),
                GroundedPhrase("vehicle", HARMFUL, 1),
            ],
            distances=[
                DistanceEntry("sidewalk", 3.4),
                DistanceEntry("vehicle", 7.2),
            ],
        )
        text = serialize_response(response)
        assert grammar.ACCESSIBLE_HEADER in text
        assert grammar.HARMFUL_HEADER in text
        assert text.count("<distance>") == 1
        assert "Distance from the user to sidewalk: 3.4 m;" in text
        assert "to vehicle: 7.2 m;" in text

    def test_empty_distance_list_omits_block(self):
        response = StructuredResponse(
            assessment="Simple.",
            phrases=[GroundedPhrase("sidewalk", ACCESSIBLE, 0)],
            distances=[],
        )
        text = serialize_response(response)
        assert "<distance>" not in text

    def test_empty_section_omitted(self):
        response = StructuredResponse(
            assessment="Simple.",
            phrases=[GroundedPhrase("sidewalk", ACCESSIBLE, 0)],
            distances=[DistanceEntry("sidewalk", 2.0)],
        )
        text = serialize_response(response)
        assert grammar.HARMFUL_HEADER not in text

    def test_invariant_violations_raise(self):
        with pytest.raises(InvariantViolation):
            serialize_response(
                StructuredResponse(assessment="", phrases=[], distances=[])
            )
        with pytest.raises(InvariantViolation):
            serialize_response(
                StructuredResponse(
                    assessment="x",
                    phrases=[GroundedPhrase("a", ACCESSIBLE, 1)],  # bad seg_index
                    distances=[],
                )
            )
        with pytest.raises(InvariantViolation):
            serialize_response(
                StructuredResponse(
                    assessment="x",
                    phrases=[GroundedPhrase("a", ACCESSIBLE, 0)],
                    distances=[DistanceEntry("a", 3.42)],  # off the 0.1 m grid
                )
            )

    def test_round_trip_1000_random_responses(self):
        rng = random.Random(1234)
        for _ in range(1000):
            original = random_valid_response(rng)
            parsed = parse_response(serialize_response(original))
            assert parsed.assessment == original.assessment
            assert parsed.phrases == original.phrases
            assert parsed.distances == original.distances


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_round_trip_property(seed):
    original = random_valid_response(random.Random(seed))
    parsed = parse_response(serialize_response(original))
    assert parsed.phrases == original.phrases
    assert parsed.distances == original.distances
    # Order preservation: parsed order equals raw-text order.
    positions = [parsed.raw_text.index(f"<p>{p.phrase}</p>") for p in parsed.phrases]
    assert positions == sorted(positions)
    # Count coupling between <SEG> tokens and phrases.
    assert parsed.raw_text.count("<SEG>") == len(parsed.phrases)


class TestRounding:
    def test_examples(self):
        assert round_distance(3.42) == 3.4
        # Half away from zero on the printed decimal value.
        assert round_distance(7.25) == 7.3
        assert round_distance(0.05) == 0.1
        assert round_distance(0.0) == 0.0

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            round_distance(-1.0)
        with pytest.raises(ValueError):
            round_distance(math.inf)


def _annotation(class_depths: dict[int, float], shape=(8, 8)):
    ontology = AccessibilityOntology.default()
    mask = np.zeros(shape, dtype=np.int64)
    depth = np.zeros(shape, dtype=np.float64)
    for k, (cid, d) in enumerate(class_depths.items()):
        mask[k, :] = cid
        depth[k, :] = d
    return annotate_scene("sample0", "img.png", mask, depth, ontology)


class TestValidate:
    def test_unknown_object(self):
        annotation = _annotation({3: 2.0})
        response = parse_response(
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>crosswalk</p><SEG>"
        )
        report = validate_response(response, annotation)
        assert not report.passed
        assert [v.code for v in report.violations] == [grammar.UNKNOWN_OBJECT]

    def test_depth_mismatch(self):
        annotation = _annotation({3: 5.4})
        response = parse_response(
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>sidewalk</p><SEG>\n\n"
            "<distance>\nDistance from the user to sidewalk: 3.4 m;\n</distance>"
        )
        report = validate_response(response, annotation)
        assert [v.code for v in report.violations] == [grammar.DEPTH_MISMATCH]

    def test_fully_consistent_passes(self):
        annotation = _annotation({3: 3.42, 21: 7.0})
        response = parse_response(
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>sidewalk</p><SEG>\n\n"
            "Non-accessible features are here:\n<p>vehicle</p><SEG>\n\n"
            "<distance>\nDistance from the user to sidewalk: 3.4 m;\nto vehicle: 7.0 m;\n</distance>"
        )
        report = validate_response(response, annotation)
        assert report.passed and report.violations == []

    def test_unmentioned_distance(self):
        annotation = _annotation({3: 2.0, 21: 4.0})
        response = parse_response(
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>sidewalk</p><SEG>\n\n"
            "<distance>\nDistance from the user to sidewalk: 2.0 m;\nto vehicle: 4.0 m;\n</distance>"
        )
        report = validate_response(response, annotation)
        assert [v.code for v in report.violations] == [grammar.UNMENTIONED_DISTANCE]

    def test_accessibility_mismatch(self):
        annotation = _annotation({21: 4.0})
        response = parse_response(
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>vehicle</p><SEG>"
        )
        report = validate_response(response, annotation)
        assert [v.code for v in report.violations] == [grammar.ACCESSIBILITY_MISMATCH]

    def test_seg_count_mismatch_detected(self):
        annotation = _annotation({3: 2.0})
        response = parse_response(
            "<assessment> ok </assessment>\n\n"
            "Accessible features are here:\n<p>sidewalk</p><SEG>"
        )
        response.raw_text = response.raw_text + "<SEG>"  # corrupt after parse
        report = validate_response(response, annotation)
        assert grammar.SEG_COUNT_MISMATCH in [v.code for v in report.violations]


class TestSegPositions:
    def test_known_positions(self):
        seg = 99
        ids = [1, 2, 3, 4, 5, seg, 7, 8, 9, 10, 11, 12, seg]
        assert extract_seg_positions(ids, seg) == [5, 12]

    def test_no_seg(self):
        assert extract_seg_positions([1, 2, 3], 99) == []

    def test_count_matches_phrases_for_serialized_responses(self):
        from groundnav.tokenizer import ResponseTokenizer

        tokenizer = ResponseTokenizer.build()
        rng = random.Random(7)
        for _ in range(100):
            response = random_valid_response(rng)
            ids = tokenizer.encode(response.raw_text)
            positions = extract_seg_positions(ids, tokenizer.seg_token_id)
            assert len(positions) == len(response.phrases)
