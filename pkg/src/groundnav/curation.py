"""Build and verify accessibility VQA samples from masks and depth maps.

The pipeline converts a 3-channel panoptic mask to a single-channel semantic
mask, computes per-class minimum depths from the dense depth map, and renders
the canonical structured answer. Questions (and the qualitative assessment
sentence) come from a pluggable source: an external HTTP generator, a replay
file, or deterministic templates.
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import grammar
from .errors import BadMaskShape, GeneratorUnavailable, NoFeatures, ShapeMismatch
from .grammar import (
    ACCESSIBLE,
    HARMFUL,
    IGNORE,
    DistanceEntry,
    GroundedPhrase,
    StructuredResponse,
    ValidationReport,
    Violation,
)
from .ontology import MAX_CLASS_ID, AccessibilityOntology


@dataclass
class SceneAnnotation:
    """Ground-truth description of one frame."""

    sample_id: str
    image_ref: str
    semantic_mask: np.ndarray           # (H, W) int, values 0..30
    depth_map: np.ndarray               # (H, W) float meters; <=0 or non-finite invalid
    class_min_depth: dict[int, float]
    present_classes: set[int]
    ontology: AccessibilityOntology


@dataclass
class ObjectRecord:
    name: str
    class_id: int
    accessibility: str
    distance_m: float | None            # exact minimum depth, unrounded


@dataclass
class VQASample:
    sample_id: str
    image_ref: str
    question: str
    answer: str                          # serialized StructuredResponse
    masks: list[np.ndarray]              # per-phrase binary masks, phrase order
    objects: list[ObjectRecord]
    annotation: SceneAnnotation
    split: str = "train"
    mask_refs: list[str] = field(default_factory=list)


def panoptic_to_semantic(mask3: np.ndarray) -> np.ndarray:
    """First channel of a 3-channel panoptic mask, clamped into 0..30."""
    if mask3.ndim != 3 or mask3.shape[2] != 3:
        raise BadMaskShape(f"expected (H, W, 3) panoptic mask, got {mask3.shape}")
    return np.clip(mask3[:, :, 0].astype(np.int64), 0, MAX_CLASS_ID)


def resize_semantic(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with half-pixel centers; preserves label values."""
    if mask.ndim != 2:
        raise BadMaskShape(f"expected a 2-d mask, got shape {mask.shape}")
    if out_h < 1 or out_w < 1:
        raise BadMaskShape("output sides must be >= 1")
    in_h, in_w = mask.shape
    rows = np.minimum((np.floor((np.arange(out_h) + 0.5) * in_h / out_h)).astype(np.int64), in_h - 1)
    cols = np.minimum((np.floor((np.arange(out_w) + 0.5) * in_w / out_w)).astype(np.int64), in_w - 1)
    return mask[rows][:, cols]


def min_depth_per_class(mask: np.ndarray, depth: np.ndarray) -> dict[int, float]:
    """Minimum valid-pixel depth per class; classes with no valid depth omitted."""
    if mask.shape != depth.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs depth {depth.shape}")
    valid = np.isfinite(depth) & (depth > 0)
    ids = mask[valid]
    values = depth[valid]
    return {int(cid): float(values[ids == cid].min()) for cid in np.unique(ids)}


def annotate_scene(
    sample_id: str,
    image_ref: str,
    semantic_mask: np.ndarray,
    depth_map: np.ndarray,
    ontology: AccessibilityOntology,
) -> SceneAnnotation:
    if semantic_mask.shape != depth_map.shape:
        raise ShapeMismatch(f"mask {semantic_mask.shape} vs depth {depth_map.shape}")
    present = {int(c) for c in np.unique(semantic_mask)}
    min_depths = min_depth_per_class(semantic_mask, depth_map)
    # Only non-ignore classes carry distances.
    min_depths = {
        cid: d for cid, d in min_depths.items() if ontology.accessibility[cid] != IGNORE
    }
    return SceneAnnotation(
        sample_id=sample_id,
        image_ref=image_ref,
        semantic_mask=semantic_mask,
        depth_map=depth_map,
        class_min_depth=min_depths,
        present_classes=present,
        ontology=ontology,
    )


def assemble_answer(
    annotation: SceneAnnotation,
    ontology: AccessibilityOntology,
    assessment: str,
) -> StructuredResponse:
    """Render the canonical answer for a scene.

    Sections list present classes in ascending class-id order, accessible
    first; the distance block covers every mentioned class that has a valid
    minimum depth, rounded onto the 0.1 m grid.
    """
    if not assessment.strip():
        raise ValueError("assessment must be non-empty")
    mentioned: list[tuple[int, str]] = []
    for label in (ACCESSIBLE, HARMFUL):
        for cid in sorted(annotation.present_classes):
            if ontology.accessibility.get(cid) == label:
                mentioned.append((cid, label))
    if not mentioned:
        raise NoFeatures(f"no non-background class present in {annotation.sample_id}")

    phrases = [
        GroundedPhrase(phrase=ontology.class_names[cid], accessibility=label, seg_index=i)
        for i, (cid, label) in enumerate(mentioned)
    ]
    distances = [
        DistanceEntry(
            object_name=ontology.class_names[cid],
            distance_m=grammar.round_distance(annotation.class_min_depth[cid]),
        )
        for cid, _ in mentioned
        if cid in annotation.class_min_depth
    ]
    response = StructuredResponse(
        assessment=assessment.strip(), phrases=phrases, distances=distances
    )
    response.raw_text = grammar.serialize_response(response)
    return response


# ---------------------------------------------------------------------------
# Question sources
# ---------------------------------------------------------------------------

QUESTION_TEMPLATES = (
    "Is the path ahead accessible, and what should I watch out for?",
    "Can I keep walking straight here, and are there any hazards nearby?",
    "How walkable is the way ahead, and what might block me?",
    "Is it safe to continue forward, and what obstacles should I avoid?",
    "What does the route ahead look like for walking, and any dangers?",
    "Am I clear to proceed on this path, and what should I be careful of?",
    "Is this stretch easy to walk, and is anything in my way?",
    "Could you check if the way forward is passable and point out risks?",
)

ASSESSMENT_TEMPLATES = {
    (True, True): "The path ahead is generally walkable, but stay alert for obstructions.",
    (True, False): "The path ahead looks clear and easy to walk.",
    (False, True): "The way ahead is obstructed; proceed with caution.",
    (False, False): "There is little to go on in this view.",
}


def _stable_index(sample_id: str, modulus: int) -> int:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") % modulus


class DeterministicTemplateSource:
    """Referentially transparent question/assessment templates."""

    kind = "deterministic_template"

    def generate(self, sample_id: str, annotation: SceneAnnotation) -> tuple[str, str]:
        question = QUESTION_TEMPLATES[_stable_index(sample_id, len(QUESTION_TEMPLATES))]
        labels = {
            annotation.ontology.accessibility[cid]
            for cid in annotation.present_classes
        }
        assessment = ASSESSMENT_TEMPLATES[(ACCESSIBLE in labels, HARMFUL in labels)]
        return question, assessment


class ReplayFileSource:
    """Replays recorded question/assessment pairs from a JSONL file."""

    kind = "replay_file"

    def __init__(self, path: str | Path, fallback: bool = True):
        self._records: dict[str, dict] = {}
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                self._records[rec["sample_id"]] = rec
        self._fallback = DeterministicTemplateSource() if fallback else None

    def generate(self, sample_id: str, annotation: SceneAnnotation) -> tuple[str, str]:
        rec = self._records.get(sample_id)
        if rec is None:
            if self._fallback is None:
                raise GeneratorUnavailable(f"no replay record for {sample_id}")
            return self._fallback.generate(sample_id, annotation)
        if "assessment" in rec:
            return rec["question"], rec["assessment"]
        _, assessment = DeterministicTemplateSource().generate(sample_id, annotation)
        return rec["question"], assessment


class ExternalClientSource:
    """POSTs to an external question generator endpoint.

    The endpoint receives ``{"sample_id": ...}`` and must answer with a JSON
    object carrying ``question`` and ``assessment``. Failures raise
    :class:`GeneratorUnavailable` unless a fallback is configured.
    """

    kind = "external_client"

    def __init__(self, endpoint: str, timeout_s: float = 10.0, fallback: bool = True):
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._fallback = DeterministicTemplateSource() if fallback else None

    def generate(self, sample_id: str, annotation: SceneAnnotation) -> tuple[str, str]:
        payload = json.dumps({"sample_id": sample_id}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=payload, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout_s) as reply:
                body = json.loads(reply.read().decode("utf-8"))
            return body["question"], body["assessment"]
        except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
            if self._fallback is not None:
                return self._fallback.generate(sample_id, annotation)
            raise GeneratorUnavailable(str(exc)) from exc


QuestionSource = Callable  # duck-typed: object with .generate(sample_id, annotation)


def build_sample(
    raw_mask3: np.ndarray,
    depth: np.ndarray,
    image_ref: str,
    ontology: AccessibilityOntology,
    question_source,
    sample_id: str,
    split: str = "train",
) -> VQASample:
    """Run the full per-frame pipeline and return a validated sample."""
    semantic = panoptic_to_semantic(raw_mask3)
    annotation = annotate_scene(sample_id, image_ref, semantic, np.asarray(depth, dtype=np.float64), ontology)
    question, assessment = question_source.generate(sample_id, annotation)
    response = assemble_answer(annotation, ontology, assessment)

    masks = []
    objects = []
    for phrase in response.phrases:
        cid = ontology.class_for_name(phrase.phrase)
        masks.append(semantic == cid)
        objects.append(
            ObjectRecord(
                name=phrase.phrase,
                class_id=cid,
                accessibility=phrase.accessibility,
                distance_m=annotation.class_min_depth.get(cid),
            )
        )
    return VQASample(
        sample_id=sample_id,
        image_ref=image_ref,
        question=question,
        answer=response.raw_text,
        masks=masks,
        objects=objects,
        annotation=annotation,
        split=split,
    )


def sample_session_frames(frame_ids: Sequence, n: int) -> list:
    """Evenly spaced frame subset: floor(k * len / n) for k in 0..n-1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    total = len(frame_ids)
    if n >= total:
        return list(frame_ids)
    indices = (np.arange(n) * total) // n
    return [frame_ids[int(i)] for i in indices]


@dataclass
class DatasetVerification:
    reports: list[ValidationReport]
    n_samples: int
    n_passed: int
    histogram: dict[str, int]

    @property
    def pass_rate(self) -> float:
        return self.n_passed / self.n_samples if self.n_samples else 1.0

    def summary_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_passed": self.n_passed,
            "pass_rate": self.pass_rate,
            "violations": dict(sorted(self.histogram.items())),
        }


def verify_sample(sample: VQASample) -> ValidationReport:
    """validate_response plus mask-count and mask-content checks."""
    try:
        response = grammar.parse_response(sample.answer)
    except grammar.MalformedResponse as exc:
        return ValidationReport(
            sample_id=sample.sample_id,
            violations=[Violation(grammar.PARSE_ERROR, str(exc))],
        )
    report = grammar.validate_response(response, sample.annotation)
    if len(sample.masks) != len(response.phrases):
        report.violations.append(
            Violation(
                grammar.MASK_COUNT_MISMATCH,
                f"{len(sample.masks)} masks vs {len(response.phrases)} phrases",
            )
        )
    else:
        ontology = sample.annotation.ontology
        for phrase, mask in zip(response.phrases, sample.masks):
            cid = ontology.class_for_name(phrase.phrase)
            if cid is None:
                continue  # reported by validate_response already
            expected = sample.annotation.semantic_mask == cid
            if mask.shape != expected.shape or not np.array_equal(mask, expected):
                report.violations.append(
                    Violation(
                        grammar.MASK_MISMATCH,
                        f"mask for {phrase.phrase!r} does not match the semantic mask",
                    )
                )
    return report


def verify_dataset(samples: Iterable[VQASample]) -> DatasetVerification:
    reports = []
    histogram: dict[str, int] = {}
    n_passed = 0
    for sample in samples:
        report = verify_sample(sample)
        reports.append(report)
        if report.passed:
            n_passed += 1
        for violation in report.violations:
            histogram[violation.code] = histogram.get(violation.code, 0) + 1
    return DatasetVerification(
        reports=reports, n_samples=len(reports), n_passed=n_passed, histogram=histogram
    )


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def write_dataset(samples: Sequence[VQASample], out_dir: str | Path) -> Path:
    """Write samples under ``out_dir``: JSONL plus mask/semantic/depth files.

    Per-phrase binary masks become single-channel PNGs named
    ``{sample_id}_{seg_index}.png``. Paths inside the JSONL are relative to
    ``out_dir``; reruns over identical inputs produce byte-identical output.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    (out_dir / "semantic").mkdir(exist_ok=True)
    (out_dir / "depth").mkdir(exist_ok=True)

    jsonl_path = out_dir / "dataset.jsonl"
    with open(jsonl_path, "w") as handle:
        for sample in samples:
            semantic_rel = f"semantic/{sample.sample_id}.png"
            depth_rel = f"depth/{sample.sample_id}.npy"
            Image.fromarray(sample.annotation.semantic_mask.astype(np.uint8), mode="L").save(
                out_dir / semantic_rel
            )
            np.save(out_dir / depth_rel, sample.annotation.depth_map.astype(np.float32))
            mask_refs = []
            for k, mask in enumerate(sample.masks):
                rel = f"masks/{sample.sample_id}_{k}.png"
                Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(out_dir / rel)
                mask_refs.append(rel)
            sample.mask_refs = mask_refs
            row = {
                "sample_id": sample.sample_id,
                "image": sample.image_ref,
                "semantic_mask": semantic_rel,
                "depth": depth_rel,
                "question": sample.question,
                "answer": sample.answer,
                "objects": [
                    {
                        "name": o.name,
                        "class_id": o.class_id,
                        "accessibility": o.accessibility,
                        "distance_m": o.distance_m,
                    }
                    for o in sample.objects
                ],
                "split": sample.split,
            }
            handle.write(json.dumps(row) + "\n")
    return jsonl_path


def read_dataset(
    jsonl_path: str | Path,
    ontology: AccessibilityOntology | None = None,
    split: str | None = None,
) -> list[VQASample]:
    """Load samples written by :func:`write_dataset`."""
    from PIL import Image

    ontology = ontology or AccessibilityOntology.default()
    jsonl_path = Path(jsonl_path)
    root = jsonl_path.parent
    samples = []
    for line in jsonl_path.read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if split is not None and row["split"] != split:
            continue
        semantic = np.asarray(Image.open(root / row["semantic_mask"]), dtype=np.int64)
        depth = np.load(root / row["depth"]).astype(np.float64)
        annotation = annotate_scene(
            row["sample_id"], row["image"], semantic, depth, ontology
        )
        masks = []
        mask_refs = []
        for k in range(len(row["objects"])):
            rel = f"masks/{row['sample_id']}_{k}.png"
            masks.append(np.asarray(Image.open(root / rel)) > 0)
            mask_refs.append(rel)
        samples.append(
            VQASample(
                sample_id=row["sample_id"],
                image_ref=row["image"],
                question=row["question"],
                answer=row["answer"],
                masks=masks,
                objects=[ObjectRecord(**o) for o in row["objects"]],
                annotation=annotation,
                split=row["split"],
                mask_refs=mask_refs,
            )
        )
    return samples
