"""Accessibility ontology over the 31 semantic classes (ids 0..30).

Class names and the accessible / harmful / ignore assignment are data, not
code: the defaults below can be replaced by loading a JSON table. Id 0 is
always the ignored background class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .grammar import ACCESSIBLE, HARMFUL, IGNORE, normalize_name

MAX_CLASS_ID = 30

# (class_id, name, accessibility)
DEFAULT_CLASS_TABLE: tuple[tuple[int, str, str], ...] = (
    (0, "background", IGNORE),
    (1, "road", HARMFUL),
    (2, "curb", HARMFUL),
    (3, "sidewalk", ACCESSIBLE),
    (4, "gutter", HARMFUL),
    (5, "crosswalk", ACCESSIBLE),
    (6, "driveway", ACCESSIBLE),
    (7, "building", HARMFUL),
    (8, "wall", HARMFUL),
    (9, "fence", HARMFUL),
    (10, "guard rail", HARMFUL),
    (11, "barrier", HARMFUL),
    (12, "pedestrian", HARMFUL),
    (13, "rider", HARMFUL),
    (14, "animal", HARMFUL),
    (15, "stairs", HARMFUL),
    (16, "ramp", ACCESSIBLE),
    (17, "other walkable surface", ACCESSIBLE),
    (18, "curb cut", ACCESSIBLE),
    (19, "vegetation", HARMFUL),
    (20, "obstacle", HARMFUL),
    (21, "vehicle", HARMFUL),
    (22, "bicycle", HARMFUL),
    (23, "motorcycle", HARMFUL),
    (24, "pole", HARMFUL),
    (25, "traffic sign", HARMFUL),
    (26, "sky", IGNORE),
    (27, "water", HARMFUL),
    (28, "tree", HARMFUL),
    (29, "terrain", ACCESSIBLE),
    (30, "other structure", HARMFUL),
)


@dataclass(frozen=True)
class AccessibilityOntology:
    """Maps class ids to names and accessibility categories."""

    class_names: dict[int, str]
    accessibility: dict[int, str]

    def __post_init__(self) -> None:
        for cid in self.class_names:
            if not 0 <= cid <= MAX_CLASS_ID:
                raise ValueError(f"class id {cid} outside 0..{MAX_CLASS_ID}")
        if self.accessibility.get(0) != IGNORE:
            raise ValueError("class 0 (background) must be ignored")
        for cid, label in self.accessibility.items():
            if label not in (ACCESSIBLE, HARMFUL, IGNORE):
                raise ValueError(f"bad accessibility {label!r} for class {cid}")
            if label != IGNORE and not self.class_names.get(cid, "").strip():
                raise ValueError(f"non-ignore class {cid} needs a name")

    @classmethod
    def default(cls) -> "AccessibilityOntology":
        return cls(
            class_names={cid: name for cid, name, _ in DEFAULT_CLASS_TABLE},
            accessibility={cid: acc for cid, _, acc in DEFAULT_CLASS_TABLE},
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "AccessibilityOntology":
        table = json.loads(Path(path).read_text())
        return cls(
            class_names={int(k): v["name"] for k, v in table.items()},
            accessibility={int(k): v["accessibility"] for k, v in table.items()},
        )

    def to_json(self, path: str | Path) -> None:
        table = {
            str(cid): {"name": self.class_names[cid], "accessibility": self.accessibility[cid]}
            for cid in sorted(self.class_names)
        }
        Path(path).write_text(json.dumps(table, indent=2) + "\n")

    def class_for_name(self, name: str) -> int | None:
        wanted = normalize_name(name)
        for cid, cname in self.class_names.items():
            if normalize_name(cname) == wanted:
                return cid
        return None

    def ids_with(self, label: str) -> list[int]:
        return sorted(cid for cid, acc in self.accessibility.items() if acc == label)


def load_lexicon(path: str | Path) -> dict[str, int]:
    """Load a phrase -> class-id lexicon from a text table.

    Each non-comment line is ``class_id<TAB>phrase``. Phrases are normalized
    for case and whitespace.
    """
    lexicon: dict[str, int] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cid_text, phrase = line.split("\t", 1)
        lexicon[normalize_name(phrase)] = int(cid_text)
    return lexicon


def default_lexicon() -> dict[str, int]:
    """The lexicon shipped with the package (class names plus synonyms)."""
    with resources.as_file(resources.files("groundnav") / "data" / "lexicon.txt") as p:
        return load_lexicon(p)
