"""Structured-token answer grammar: parsing, serialization and validation.

An answer couples free text to segmentation and depth through seven control
tags::

    <assessment> ... </assessment>   overall walkability judgment
    <p>phrase</p><SEG>               a grounded object mention; every <p> block
                                     is immediately followed by one <SEG>
    <distance> ... </distance>       per-object distances in text form

The canonical layout is an assessment block, an optional "Accessible features
are here:" section, an optional "Non-accessible features are here:" section,
and an optional distance block. Empty sections are omitted entirely so that
serialization stays injective. Distances render with one decimal (0.1 m
discretization), first entry as ``Distance from the user to NAME: X.X m;`` and
later entries as ``to NAME: X.X m;``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .errors import InvariantViolation, MalformedResponse

ACCESSIBLE = "accessible"
HARMFUL = "harmful"
IGNORE = "ignore"

TAG_ASSESSMENT_OPEN = "<assessment>"
TAG_ASSESSMENT_CLOSE = "</assessment>"
TAG_P_OPEN = "<p>"
TAG_P_CLOSE = "</p>"
TAG_SEG = "<SEG>"
TAG_DISTANCE_OPEN = "<distance>"
TAG_DISTANCE_CLOSE = "</distance>"

ALL_TAGS = (
    TAG_ASSESSMENT_OPEN,
    TAG_ASSESSMENT_CLOSE,
    TAG_P_OPEN,
    TAG_P_CLOSE,
    TAG_SEG,
    TAG_DISTANCE_OPEN,
    TAG_DISTANCE_CLOSE,
)

ACCESSIBLE_HEADER = "Accessible features are here:"
HARMFUL_HEADER = "Non-accessible features are here:"
DISTANCE_LEAD = "Distance from the user to "

_PHRASE_RE = re.compile(re.escape(TAG_P_OPEN) + r"(.*?)" + re.escape(TAG_P_CLOSE), re.S)
_ASSESSMENT_RE = re.compile(
    re.escape(TAG_ASSESSMENT_OPEN) + r"(.*?)" + re.escape(TAG_ASSESSMENT_CLOSE), re.S
)
_DISTANCE_BLOCK_RE = re.compile(
    re.escape(TAG_DISTANCE_OPEN) + r"(.*?)" + re.escape(TAG_DISTANCE_CLOSE), re.S
)
_DISTANCE_ENTRY_RE = re.compile(
    r"^(?:Distance from the user to\s+|to\s+)(.+?):\s*([^\s;]+)\s*m$", re.S
)


@dataclass
class GroundedPhrase:
    """An object mention tied to one <SEG> token."""

    phrase: str
    accessibility: str  # ACCESSIBLE or HARMFUL
    seg_index: int


@dataclass
class DistanceEntry:
    """A per-object distance statement, in meters."""

    object_name: str
    distance_m: float


@dataclass
class StructuredResponse:
    """A parsed grounded answer."""

    assessment: str
    phrases: list[GroundedPhrase]
    distances: list[DistanceEntry]
    raw_text: str = ""


@dataclass
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    sample_id: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


# Violation codes emitted by validate_response / dataset verification.
UNKNOWN_OBJECT = "UNKNOWN_OBJECT"
SEG_COUNT_MISMATCH = "SEG_COUNT_MISMATCH"
UNMENTIONED_DISTANCE = "UNMENTIONED_DISTANCE"
DUPLICATE_DISTANCE = "DUPLICATE_DISTANCE"
DEPTH_MISMATCH = "DEPTH_MISMATCH"
ACCESSIBILITY_MISMATCH = "ACCESSIBILITY_MISMATCH"
PARSE_ERROR = "PARSE_ERROR"
MASK_COUNT_MISMATCH = "MASK_COUNT_MISMATCH"
MASK_MISMATCH = "MASK_MISMATCH"

DEPTH_TOLERANCE_M = 0.05  # one half of the 0.1 m discretization step


def normalize_name(name: str) -> str:
    """Case-insensitive, whitespace-collapsed form used for name matching."""
    return " ".join(name.lower().split())


def round_distance(meters: float) -> float:
    """Discretize a distance onto the 0.1 m grid, rounding half away from zero.

    Rounding applies to the shortest decimal representation of the float, so
    the result matches what a reader of the printed value would expect.
    """
    if not math.isfinite(meters) or meters < 0:
        raise ValueError(f"distance must be finite and non-negative, got {meters}")
    quantized = Decimal(repr(float(meters))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return float(quantized)


def format_distance(meters: float) -> str:
    return f"{meters:.1f}"


def _check_tag_balance(text: str) -> None:
    for open_tag, close_tag in (
        (TAG_ASSESSMENT_OPEN, TAG_ASSESSMENT_CLOSE),
        (TAG_P_OPEN, TAG_P_CLOSE),
        (TAG_DISTANCE_OPEN, TAG_DISTANCE_CLOSE),
    ):
        n_open = text.count(open_tag)
        n_close = text.count(close_tag)
        if n_open != n_close:
            raise MalformedResponse(
                f"unbalanced tags: {n_open} {open_tag} vs {n_close} {close_tag}"
            )
    # Paired tags must alternate open/close in order.
    for open_tag, close_tag in (
        (TAG_ASSESSMENT_OPEN, TAG_ASSESSMENT_CLOSE),
        (TAG_P_OPEN, TAG_P_CLOSE),
        (TAG_DISTANCE_OPEN, TAG_DISTANCE_CLOSE),
    ):
        pos, expecting_close = 0, False
        pattern = re.compile("|".join(re.escape(t) for t in (open_tag, close_tag)))
        for m in pattern.finditer(text):
            if (m.group() == close_tag) != expecting_close:
                raise MalformedResponse(f"misordered {open_tag}...{close_tag} tags")
            expecting_close = not expecting_close
            pos = m.end()
        del pos


def _parse_section_phrases(section: str, accessibility: str) -> list[tuple[int, str, str]]:
    """Return (offset, phrase, accessibility) for each <p>...</p><SEG> unit."""
    found = []
    for m in _PHRASE_RE.finditer(section):
        phrase = m.group(1).strip()
        if not phrase:
            raise MalformedResponse("empty <p></p> phrase")
        tail = section[m.end():]
        if not tail.lstrip(" ").startswith(TAG_SEG):
            raise MalformedResponse(f"<p>{phrase}</p> is not followed by {TAG_SEG}")
        found.append((m.start(), phrase, accessibility))
    return found


def _parse_distance_block(block: str) -> list[DistanceEntry]:
    entries = []
    for chunk in block.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        m = _DISTANCE_ENTRY_RE.match(chunk)
        if m is None:
            raise MalformedResponse(f"unparseable distance entry: {chunk!r}")
        name = " ".join(m.group(1).split())
        try:
            value = float(m.group(2))
        except ValueError:
            raise MalformedResponse(f"non-numeric distance: {m.group(2)!r}") from None
        if not math.isfinite(value) or value < 0:
            raise MalformedResponse(f"distance out of range: {m.group(2)!r}")
        entries.append(DistanceEntry(object_name=name, distance_m=value))
    return entries


def parse_response(text: str) -> StructuredResponse:
    """Parse answer text into a :class:`StructuredResponse`.

    Raises :class:`MalformedResponse` on unbalanced tags, a ``<p>`` block
    without a trailing ``<SEG>``, a missing assessment block, or a
    non-numeric distance.
    """
    _check_tag_balance(text)

    assessments = _ASSESSMENT_RE.findall(text)
    if len(assessments) != 1:
        raise MalformedResponse(
            f"expected exactly one assessment block, found {len(assessments)}"
        )
    assessment = assessments[0].strip()
    if not assessment:
        raise MalformedResponse("empty assessment block")

    dist_blocks = _DISTANCE_BLOCK_RE.findall(text)
    if len(dist_blocks) > 1:
        raise MalformedResponse("more than one <distance> block")
    distances = _parse_distance_block(dist_blocks[0]) if dist_blocks else []

    # Locate section bodies. A section runs from its header to the next
    # header, the distance block, or the end of text.
    boundaries = []
    for marker in (ACCESSIBLE_HEADER, HARMFUL_HEADER, TAG_DISTANCE_OPEN):
        idx = text.find(marker)
        if idx >= 0 and text.find(marker, idx + 1) >= 0:
            raise MalformedResponse(f"duplicated section marker {marker!r}")
        boundaries.append((idx, marker))
    present = sorted((i, m) for i, m in boundaries if i >= 0)

    all_phrases: list[tuple[int, str, str]] = []
    for k, (start, marker) in enumerate(present):
        if marker == TAG_DISTANCE_OPEN:
            continue
        end = present[k + 1][0] if k + 1 < len(present) else len(text)
        body = text[start + len(marker):end]
        label = ACCESSIBLE if marker == ACCESSIBLE_HEADER else HARMFUL
        for off, phrase, acc in _parse_section_phrases(body, label):
            all_phrases.append((start + len(marker) + off, phrase, acc))

    if len(_PHRASE_RE.findall(text)) != len(all_phrases):
        raise MalformedResponse("<p> phrase outside a feature section")
    n_seg = text.count(TAG_SEG)
    if n_seg != len(all_phrases):
        raise MalformedResponse(
            f"{n_seg} {TAG_SEG} tokens for {len(all_phrases)} phrases"
        )

    all_phrases.sort(key=lambda item: item[0])
    phrases = [
        GroundedPhrase(phrase=p, accessibility=acc, seg_index=i)
        for i, (_, p, acc) in enumerate(all_phrases)
    ]
    return StructuredResponse(
        assessment=assessment, phrases=phrases, distances=distances, raw_text=text
    )


def check_invariants(response: StructuredResponse) -> None:
    """Raise :class:`InvariantViolation` unless the response is serializable."""
    if not response.assessment.strip():
        raise InvariantViolation("assessment must be non-empty")
    seen_harmful = False
    names = []
    for i, phrase in enumerate(response.phrases):
        if not phrase.phrase.strip():
            raise InvariantViolation("phrase text must be non-empty")
        if phrase.accessibility not in (ACCESSIBLE, HARMFUL):
            raise InvariantViolation(f"bad accessibility {phrase.accessibility!r}")
        if phrase.seg_index != i:
            raise InvariantViolation("seg_index values must be contiguous from 0")
        if phrase.accessibility == HARMFUL:
            seen_harmful = True
        elif seen_harmful:
            raise InvariantViolation(
                "accessible phrases must precede harmful ones in response order"
            )
        names.append(normalize_name(phrase.phrase))
    if len(set(names)) != len(names):
        raise InvariantViolation("duplicate phrase names")
    seen = set()
    for entry in response.distances:
        key = normalize_name(entry.object_name)
        if key not in names:
            raise InvariantViolation(
                f"distance entry {entry.object_name!r} matches no phrase"
            )
        if key in seen:
            raise InvariantViolation(f"duplicate distance entry {entry.object_name!r}")
        seen.add(key)
        if not math.isfinite(entry.distance_m) or entry.distance_m < 0:
            raise InvariantViolation("distance must be finite and non-negative")
        if abs(entry.distance_m * 10 - round(entry.distance_m * 10)) > 1e-9:
            raise InvariantViolation(
                f"distance {entry.distance_m} is not on the 0.1 m grid"
            )


def serialize_response(response: StructuredResponse) -> str:
    """Render the canonical template text for a valid response."""
    check_invariants(response)
    parts = [f"{TAG_ASSESSMENT_OPEN} {response.assessment.strip()} {TAG_ASSESSMENT_CLOSE}"]

    for header, label in ((ACCESSIBLE_HEADER, ACCESSIBLE), (HARMFUL_HEADER, HARMFUL)):
        members = [p for p in response.phrases if p.accessibility == label]
        if not members:
            continue
        row = "".join(f"{TAG_P_OPEN}{p.phrase}{TAG_P_CLOSE}{TAG_SEG}" for p in members)
        parts.append(f"{header}\n{row}")

    if response.distances:
        lines = [TAG_DISTANCE_OPEN]
        for i, entry in enumerate(response.distances):
            lead = DISTANCE_LEAD if i == 0 else "to "
            lines.append(f"{lead}{entry.object_name}: {format_distance(entry.distance_m)} m;")
        lines.append(TAG_DISTANCE_CLOSE)
        parts.append("\n".join(lines))

    return "\n\n".join(parts)


def validate_response(
    response: StructuredResponse,
    annotation,
    tolerance_m: float = DEPTH_TOLERANCE_M,
) -> ValidationReport:
    """Check a response against a scene annotation.

    ``annotation`` is a :class:`groundnav.curation.SceneAnnotation`; it carries
    the ground-truth class names (via its ontology), per-class minimum depths,
    and the set of present classes. Always returns a report, never raises.
    """
    violations: list[Violation] = []
    ontology = annotation.ontology
    present_by_name = {
        normalize_name(ontology.class_names[cid]): cid
        for cid in annotation.present_classes
        if ontology.accessibility[cid] != IGNORE
    }

    mentioned: dict[str, GroundedPhrase] = {}
    for phrase in response.phrases:
        key = normalize_name(phrase.phrase)
        mentioned[key] = phrase
        cid = present_by_name.get(key)
        if cid is None:
            violations.append(
                Violation(UNKNOWN_OBJECT, f"{phrase.phrase!r} is not a present class")
            )
            continue
        if ontology.accessibility[cid] != phrase.accessibility:
            violations.append(
                Violation(
                    ACCESSIBILITY_MISMATCH,
                    f"{phrase.phrase!r} labeled {phrase.accessibility}, "
                    f"ontology says {ontology.accessibility[cid]}",
                )
            )

    n_seg = response.raw_text.count(TAG_SEG)
    if n_seg != len(response.phrases):
        violations.append(
            Violation(
                SEG_COUNT_MISMATCH,
                f"{n_seg} {TAG_SEG} tokens vs {len(response.phrases)} phrases",
            )
        )

    seen_distance: set[str] = set()
    for entry in response.distances:
        key = normalize_name(entry.object_name)
        if key not in mentioned:
            violations.append(
                Violation(
                    UNMENTIONED_DISTANCE,
                    f"distance for unmentioned object {entry.object_name!r}",
                )
            )
            continue
        if key in seen_distance:
            violations.append(
                Violation(DUPLICATE_DISTANCE, f"repeated distance for {entry.object_name!r}")
            )
            continue
        seen_distance.add(key)
        cid = present_by_name.get(key)
        if cid is None:
            continue  # already reported as UNKNOWN_OBJECT
        gt_depth = annotation.class_min_depth.get(cid)
        if gt_depth is None:
            violations.append(
                Violation(
                    DEPTH_MISMATCH,
                    f"{entry.object_name!r} has no valid ground-truth depth",
                )
            )
        elif abs(entry.distance_m - gt_depth) > tolerance_m + 1e-9:
            violations.append(
                Violation(
                    DEPTH_MISMATCH,
                    f"{entry.object_name!r}: {entry.distance_m} m vs "
                    f"ground truth {gt_depth:.3f} m",
                )
            )

    return ValidationReport(sample_id=annotation.sample_id, violations=violations)


def extract_seg_positions(token_ids: Sequence[int] | Iterable[int], seg_id: int) -> list[int]:
    """Ascending positions of every <SEG> vocabulary id in a token sequence."""
    return [i for i, t in enumerate(token_ids) if t == seg_id]
