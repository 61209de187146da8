"""Batch command-line surface: curate, verify, train, eval, gradcheck, parse.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
Configuration comes from an optional JSON file (``--config``) with ``model``,
``paths`` and ``seed`` sections; command-line flags win over the file. The
environment variable ``WALK_QGEN_ENDPOINT`` selects the external question
generator; when unset, deterministic templates are used.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import grammar
from .checkpoint import load_checkpoint, restore_model_state
from .config import ModelConfig
from .curation import (
    DeterministicTemplateSource,
    ExternalClientSource,
    ReplayFileSource,
    build_sample,
    read_dataset,
    resize_semantic,
    sample_session_frames,
    verify_dataset,
    write_dataset,
)
from .evaluate import evaluate_samples
from .gradcheck import run_all_checks
from .model import GroundedNavModel
from .ontology import AccessibilityOntology, default_lexicon, load_lexicon
from .synthetic import PreparedSample, synthetic_samples
from .tokenizer import ResponseTokenizer
from .training import Trainer

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_USAGE = 2


def _load_file_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _model_config(args, file_config: dict) -> ModelConfig:
    section = dict(file_config.get("model", {}))
    if getattr(args, "seed", None) is not None:
        section["seed"] = args.seed
    elif "seed" in file_config:
        section.setdefault("seed", file_config["seed"])
    return ModelConfig.from_dict(section)


def _path_from(args, file_config: dict, flag: str, key: str) -> str | None:
    value = getattr(args, flag, None)
    if value is not None:
        return value
    return file_config.get("paths", {}).get(key)


def _question_source(args):
    replay = getattr(args, "replay", None)
    if replay:
        return ReplayFileSource(replay)
    endpoint = os.environ.get("WALK_QGEN_ENDPOINT")
    if endpoint:
        return ExternalClientSource(endpoint)
    return DeterministicTemplateSource()


def _load_prepared(dataset_path: str, ontology, split: str | None, limit: int | None) -> list[PreparedSample]:
    from PIL import Image

    samples = read_dataset(dataset_path, ontology=ontology, split=split)
    if limit is not None:
        samples = samples[:limit]
    root = Path(dataset_path).parent
    prepared = []
    for sample in samples:
        image = np.asarray(Image.open(root / sample.image_ref), dtype=np.float64) / 255.0
        prepared.append(PreparedSample(sample=sample, image=image))
    return prepared


def _prepared_from_args(args, file_config: dict, config: ModelConfig, ontology) -> list[PreparedSample]:
    dataset = _path_from(args, file_config, "dataset", "dataset")
    if getattr(args, "synthetic", None):
        return synthetic_samples(
            args.synthetic, config.seed, ontology, _question_source(args),
            image_size=config.image_size, split=getattr(args, "split", None) or "train",
        )
    if not dataset:
        raise UsageError("either --dataset or --synthetic is required")
    if not Path(dataset).exists():
        raise UsageError(f"dataset not found: {dataset}")
    return _load_prepared(dataset, ontology, getattr(args, "split", None), getattr(args, "limit", None))


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_curate(args) -> int:
    from PIL import Image

    file_config = _load_file_config(args.config)
    session_dir = Path(_path_from(args, file_config, "session", "session") or ".")
    manifest_path = session_dir / "manifest.json"
    if not manifest_path.exists():
        print("no frames", file=sys.stderr)
        return EXIT_USAGE
    manifest = json.loads(manifest_path.read_text())
    frames = manifest.get("frames", [])
    if not frames:
        print("no frames", file=sys.stderr)
        return EXIT_USAGE
    if args.frames:
        frames = sample_session_frames(frames, args.frames)
    if args.limit:
        frames = frames[:args.limit]

    ontology = AccessibilityOntology.default()
    source = _question_source(args)
    out_dir = Path(args.out or "curated")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    samples = []
    for frame in frames:
        frame_id = frame["frame_id"]
        panoptic = np.asarray(Image.open(session_dir / frame["panoptic"]), dtype=np.int64)
        depth = np.load(session_dir / frame["depth"]).astype(np.float64)
        if panoptic.shape[:2] != depth.shape:
            semantic3 = np.stack(
                [resize_semantic(panoptic[:, :, c], *depth.shape) for c in range(3)], axis=-1
            )
            panoptic = semantic3
        image_rel = f"images/{frame_id}.png"
        shutil.copyfile(session_dir / frame["image"], out_dir / image_rel)
        sample = build_sample(
            panoptic, depth, image_ref=image_rel, ontology=ontology,
            question_source=source, sample_id=frame_id, split=args.split or "train",
        )
        samples.append(sample)

    write_dataset(samples, out_dir)
    verification = verify_dataset(samples)
    class_histogram: dict[str, int] = {}
    for sample in samples:
        for obj in sample.objects:
            class_histogram[obj.name] = class_histogram.get(obj.name, 0) + 1
    summary = {
        "n_frames": len(samples),
        "class_histogram": dict(sorted(class_histogram.items())),
        **verification.summary_dict(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if verification.pass_rate == 1.0 else EXIT_VERIFICATION


def cmd_verify_dataset(args) -> int:
    file_config = _load_file_config(args.config)
    dataset = _path_from(args, file_config, "dataset", "dataset")
    if not dataset or not Path(dataset).exists():
        print(f"dataset not found: {dataset}", file=sys.stderr)
        return EXIT_USAGE
    samples = read_dataset(dataset)
    if args.limit:
        samples = samples[:args.limit]
    verification = verify_dataset(samples)
    summary = verification.summary_dict()
    print(json.dumps(summary, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "verification.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK if verification.pass_rate == 1.0 else EXIT_VERIFICATION


def cmd_sample_frames(args) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.exists():
        print(f"manifest not found: {manifest_path}", file=sys.stderr)
        return EXIT_USAGE
    manifest = json.loads(manifest_path.read_text())
    frames = manifest.get("frames", [])
    if not frames:
        print("no frames", file=sys.stderr)
        return EXIT_USAGE
    selected = sample_session_frames([f["frame_id"] for f in frames], args.n)
    for frame_id in selected:
        print(frame_id)
    return EXIT_OK


def cmd_train(args) -> int:
    file_config = _load_file_config(args.config)
    config = _model_config(args, file_config)
    ontology = AccessibilityOntology.default()
    try:
        prepared = _prepared_from_args(args, file_config, config, ontology)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE

    resume = _path_from(args, file_config, "checkpoint", "checkpoint")
    if resume:
        if not Path(resume).exists():
            print(f"checkpoint not found: {resume}", file=sys.stderr)
            return EXIT_USAGE
        trainer = Trainer.restore(load_checkpoint(resume))
    else:
        trainer = Trainer(config)

    out_dir = Path(args.out or "run")
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    mode = "a" if resume else "w"
    with open(log_path, mode) as log:
        trainer.run(
            prepared,
            epochs=args.epochs,
            max_steps=args.steps,
            log_fn=lambda rec: log.write(json.dumps(rec) + "\n"),
        )
    checkpoint_path = out_dir / "checkpoint.npz"
    trainer.save(checkpoint_path)
    print(json.dumps({"steps": trainer.step, "checkpoint": str(checkpoint_path)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    file_config = _load_file_config(args.config)
    ontology = AccessibilityOntology.default()
    lexicon_path = _path_from(args, file_config, "lexicon", "lexicon")
    lexicon = load_lexicon(lexicon_path) if lexicon_path else default_lexicon()

    if args.self_eval:
        config = _model_config(args, file_config)
        model = None
        tokenizer = ResponseTokenizer.build(ontology)
    else:
        checkpoint_path = _path_from(args, file_config, "checkpoint", "checkpoint")
        if not checkpoint_path or not Path(checkpoint_path).exists():
            print(f"checkpoint not found: {checkpoint_path}", file=sys.stderr)
            return EXIT_USAGE
        checkpoint = load_checkpoint(checkpoint_path)
        config = checkpoint.config
        model = GroundedNavModel(config)
        restore_model_state(model, checkpoint)
        model.eval()
        tokenizer = ResponseTokenizer.build(ontology)

    try:
        prepared = _prepared_from_args(args, file_config, config, ontology)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE

    outcome = evaluate_samples(
        model,
        tokenizer,
        config,
        prepared,
        lexicon,
        self_eval=args.self_eval,
        overlay_dir=(Path(args.out or ".") / "overlays") if args.dump_overlays else None,
    )
    document = {
        **outcome.report.to_dict(),
        "parse_failure_rate": outcome.parse_failure_rate,
        "n_depth_skipped": outcome.n_depth_skipped,
    }
    print(json.dumps(document, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.json").write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
        if args.per_sample_csv:
            fields = sorted({k for row in outcome.rows for k in row})
            with open(out_dir / "per_sample.csv", "w", newline="") as handle:
                writer = csv.DictWriter(handle, fieldnames=fields)
                writer.writeheader()
                writer.writerows(outcome.rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all_checks(seed=args.seed or 0, corrupt=args.corrupt)
    print(f"{'group':<18} {'params':>8} {'max_rel_err':>12} {'time_s':>7} status")
    all_ok = True
    for r in results:
        status = "ok" if r.passed else "FAIL"
        all_ok &= r.passed
        print(f"{r.name:<18} {r.n_params:>8} {r.max_rel_err:>12.3e} {r.seconds:>7.2f} {status}")
    return EXIT_OK if all_ok else EXIT_VERIFICATION


def cmd_parse(args) -> int:
    path = Path(args.file)
    if not path.exists():
        print(f"file not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        response = grammar.parse_response(path.read_text())
    except grammar.MalformedResponse as exc:
        print(f"malformed response: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION
    print(
        json.dumps(
            {
                "assessment": response.assessment,
                "phrases": [
                    {"phrase": p.phrase, "accessibility": p.accessibility, "seg_index": p.seg_index}
                    for p in response.phrases
                ],
                "distances": [
                    {"object_name": d.object_name, "distance_m": d.distance_m}
                    for d in response.distances
                ],
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--checkpoint", help="checkpoint path")
    parser.add_argument("--split", choices=["train", "val"], default=None)
    parser.add_argument("--limit", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundnav")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("curate", help="build a VQA dataset from a raw session")
    _add_common(p)
    p.add_argument("--session", help="raw session directory (manifest.json)")
    p.add_argument("--frames", type=int, default=None, help="uniform frames per session")
    p.add_argument("--replay", help="replay file for recorded questions")
    p.set_defaults(fn=cmd_curate)

    p = sub.add_parser("verify-dataset", help="re-validate a curated dataset")
    _add_common(p)
    p.add_argument("--dataset", help="dataset JSONL path")
    p.set_defaults(fn=cmd_verify_dataset)

    p = sub.add_parser("sample-frames", help="uniformly sample frame ids from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(fn=cmd_sample_frames)

    p = sub.add_parser("train", help="train the desk-scale model")
    _add_common(p)
    p.add_argument("--dataset", help="dataset JSONL path")
    p.add_argument("--synthetic", type=int, default=None, help="train on N synthetic samples")
    p.add_argument("--replay", help="replay file for recorded questions")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="max optimizer steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="generate, parse and score responses")
    _add_common(p)
    p.add_argument("--dataset", help="dataset JSONL path")
    p.add_argument("--synthetic", type=int, default=None, help="evaluate on N synthetic samples")
    p.add_argument("--replay", help="replay file for recorded questions")
    p.add_argument("--lexicon", help="phrase lexicon path")
    p.add_argument("--self-eval", action="store_true", help="score ground truth against itself")
    p.add_argument("--per-sample-csv", action="store_true")
    p.add_argument("--dump-overlays", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("parse", help="parse a structured answer file")
    _add_common(p)
    p.add_argument("file")
    p.set_defaults(fn=cmd_parse)

    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
