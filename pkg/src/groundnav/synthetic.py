"""Parametric synthetic scenes: image, panoptic mask and analytic depth.

Scenes are a sky band, a ground plane whose depth grows linearly with
distance from the bottom edge, and a few vertical objects standing on the
ground at the depth of their base row. All rectangles align to the 4-pixel
patch grid so the mask decoder's logit grid can represent them exactly.
Sky pixels carry depth 0, exercising the invalid-depth path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curation import VQASample, build_sample
from .ontology import AccessibilityOntology

CELL = 4  # patch alignment in pixels

SKY_ID = 26
GROUND_CLASSES = (3, 5, 17, 29, 1, 6)   # sidewalk, crosswalk, walkable, terrain, road, driveway
OBJECT_CLASSES = (21, 15, 24, 20, 28, 12, 9, 16)  # vehicle, stairs, pole, obstacle, ...

# Deterministic class palette (RGB in 0..255).
_PALETTE = {}
for _cid in range(31):
    _PALETTE[_cid] = (
        (37 * _cid + 71) % 256,
        (97 * _cid + 23) % 256,
        (53 * _cid + 199) % 256,
    )


@dataclass
class SceneFrame:
    frame_id: str
    image: np.ndarray      # (H, W, 3) uint8
    panoptic: np.ndarray   # (H, W, 3) uint8; channel 0 = class id
    depth: np.ndarray      # (H, W) float32; 0 where invalid


def generate_scene(frame_id: str, rng: np.random.Generator, image_size: int = 64) -> SceneFrame:
    size = image_size
    horizon = (size // 2 - size // 8) // CELL * CELL  # grid-aligned sky/ground split

    semantic = np.full((size, size), SKY_ID, dtype=np.uint8)
    instance = np.zeros((size, size), dtype=np.uint8)
    depth = np.zeros((size, size), dtype=np.float64)

    ground_class = int(GROUND_CLASSES[int(rng.integers(len(GROUND_CLASSES)))])
    d_near = float(rng.uniform(0.8, 3.0))
    d_far = float(rng.uniform(8.0, 20.0))
    rows = np.arange(horizon, size)
    ground_depth = d_far + (rows - horizon) / (size - 1 - horizon) * (d_near - d_far)
    semantic[horizon:] = ground_class
    depth[horizon:] = ground_depth[:, None]

    n_objects = int(rng.integers(1, 3))
    # Disjoint column bands keep objects from occluding each other; sides are
    # at least two grid cells so every mask is well represented at 1/4 scale.
    band = size // max(n_objects, 1)
    used = set()
    for k in range(n_objects):
        cls = int(OBJECT_CLASSES[int(rng.integers(len(OBJECT_CLASSES)))])
        while cls == ground_class or cls in used:
            cls = int(OBJECT_CLASSES[int(rng.integers(len(OBJECT_CLASSES)))])
        used.add(cls)
        x_lo = k * band
        max_width_cells = max((band - CELL) // CELL, 3)
        width = int(rng.integers(2, max_width_cells + 1)) * CELL
        x0 = x_lo + int(rng.integers(0, max((band - width) // CELL, 0) + 1)) * CELL
        x0 = min(x0, size - width)
        y_bottom = int(rng.integers(horizon // CELL + 3, size // CELL + 1)) * CELL
        height = int(rng.integers(3, max((y_bottom - CELL) // CELL, 4))) * CELL
        y0 = max(y_bottom - height, CELL)
        semantic[y0:y_bottom, x0:x0 + width] = cls
        instance[y0:y_bottom, x0:x0 + width] = k + 1
        depth[y0:y_bottom, x0:x0 + width] = float(
            d_far + (min(y_bottom, size) - 1 - horizon) / (size - 1 - horizon) * (d_near - d_far)
        )

    # Color by class, shaded by depth so the image carries distance cues.
    image = np.zeros((size, size, 3), dtype=np.float64)
    for cid in np.unique(semantic):
        sel = semantic == cid
        image[sel] = np.array(_PALETTE[int(cid)], dtype=np.float64)
    shade = np.where(depth > 0, 0.55 + 0.45 * np.exp(-depth / 10.0), 1.0)
    image *= shade[:, :, None]

    panoptic = np.stack([semantic, instance, np.zeros_like(semantic)], axis=-1)
    return SceneFrame(
        frame_id=frame_id,
        image=np.clip(image, 0, 255).astype(np.uint8),
        panoptic=panoptic.astype(np.uint8),
        depth=depth.astype(np.float32),
    )


def generate_session(
    out_dir: str | Path,
    n_frames: int,
    seed: int = 0,
    image_size: int = 64,
    session_id: str = "session0",
) -> Path:
    """Write a raw session (images, panoptic masks, depth, manifest)."""
    from PIL import Image

    out_dir = Path(out_dir)
    for sub in ("images", "panoptic", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n_frames):
        frame_id = f"{session_id}_{i:05d}"
        scene = generate_scene(frame_id, rng, image_size)
        Image.fromarray(scene.image).save(out_dir / "images" / f"{frame_id}.png")
        Image.fromarray(scene.panoptic).save(out_dir / "panoptic" / f"{frame_id}.png")
        np.save(out_dir / "depth" / f"{frame_id}.npy", scene.depth)
        frames.append(
            {
                "frame_id": frame_id,
                "image": f"images/{frame_id}.png",
                "panoptic": f"panoptic/{frame_id}.png",
                "depth": f"depth/{frame_id}.npy",
            }
        )
    manifest = {"session_id": session_id, "frames": frames}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


@dataclass
class PreparedSample:
    """A VQA sample together with its image pixels, ready for training."""

    sample: VQASample
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]


def synthetic_samples(
    n: int,
    seed: int,
    ontology: AccessibilityOntology,
    question_source,
    image_size: int = 64,
    split: str = "train",
) -> list[PreparedSample]:
    """Deterministic in-memory training samples from the scene generator."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        frame_id = f"synthetic_{seed}_{i:05d}"
        scene = generate_scene(frame_id, rng, image_size)
        sample = build_sample(
            scene.panoptic.astype(np.int64),
            scene.depth.astype(np.float64),
            image_ref=f"{frame_id}.png",
            ontology=ontology,
            question_source=question_source,
            sample_id=frame_id,
            split=split,
        )
        out.append(PreparedSample(sample=sample, image=scene.image.astype(np.float64) / 255.0))
    return out
