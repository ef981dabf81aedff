"""Command line interface: ``instflow {synth,track,eval,loss,render,bench}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import InstflowError
from .evaluation import Track, evaluate_videos, identity_switches, tracks_from_identity_maps
from .grouping import DEFAULT_CENTER_THRESHOLD, DEFAULT_NMS_WINDOW, GroupingParams
from .losses import (
    LossComponents,
    LossWeights,
    center_loss,
    offset_loss,
    semantic_loss,
    shape_loss,
    total_loss,
)
from .matching import MatchingParams, ReferencePolicy
from .parallel import Workers
from .pipeline import PipelineParams, SequenceTracker, bench
from .render import render_identity
from .synth import benchmark_scene, generate_sequence, noise_from_config, random_scene, scene_from_config, synthesize


def _policy(text: str) -> ReferencePolicy:
    try:
        return ReferencePolicy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nms-window", type=int, default=DEFAULT_NMS_WINDOW)
    p.add_argument("--center-threshold", type=float, default=DEFAULT_CENTER_THRESHOLD)
    p.add_argument("--epsilon", type=float, default=None, help="matching threshold in px (default: 0.1 x diagonal)")
    p.add_argument("--refs", type=_policy, default=None, help="first+N or adj-N (default: the sequence's policy)")
    p.add_argument("--flow-stride", type=int, default=1)
    p.add_argument("--flow-method", choices=("residual", "avg", "iou"), default="residual")


def _pipeline_params(args, default_policy: str) -> PipelineParams:
    policy = args.refs if args.refs is not None else ReferencePolicy.parse(default_policy)
    return PipelineParams(
        GroupingParams(args.nms_window, args.center_threshold),
        MatchingParams(args.epsilon, policy),
        args.flow_method,
        args.flow_stride,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instflow", description=__doc__)
    parser.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
    parser.add_argument("--seed", type=int, default=None, help="seed for synthetic scenes and noise")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic sequence directory")
    p.add_argument("--config", type=Path, help="YAML/JSON with a scene (or random) section and optional noise")
    p.add_argument("--noise", type=Path, help="YAML/JSON noise description (overrides the config's)")
    p.add_argument("--refs", type=_policy, default=ReferencePolicy())
    p.add_argument("--name", default=None)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--num-frames", type=int, default=12)
    p.add_argument("--max-shapes", type=int, default=8)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("track", help="run the assembly pipeline on a sequence directory")
    p.add_argument("sequence", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_pipeline_flags(p)

    p = sub.add_parser("eval", help="score a results directory")
    p.add_argument("results", type=Path)
    p.add_argument("ground_truth", type=Path, nargs="?", help="sequence directory with ground truth (default: the copy inside the results)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("loss", help="loss components between predicted and ground-truth sequence maps")
    p.add_argument("prediction", type=Path)
    p.add_argument("ground_truth", type=Path)
    p.add_argument("--lambda-cent", type=float, default=LossWeights.lambda_cent)
    p.add_argument("--lambda-inter", type=float, default=LossWeights.lambda_inter)
    p.add_argument("--lambda-intra", type=float, default=LossWeights.lambda_intra)
    p.add_argument("--lambda-shape", type=float, default=LossWeights.lambda_shape)
    p.add_argument("--foreground-only", action="store_true", help="zero offset and shape weights on gt background")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("render", help="render identity maps to PNG")
    p.add_argument("input", type=Path, help="an identity map file or a results directory")
    p.add_argument("--out", type=Path, required=True, help="PNG path, or directory for a results directory")

    p = sub.add_parser("bench", help="time the pipeline")
    p.add_argument("sequence", type=Path, nargs="?", help="sequence directory (default: built-in 720x1280 scene)")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--num-frames", type=int, default=8)
    p.add_argument("--out", type=Path, help="directory for the identity maps and their digest")
    p.add_argument("--report", type=Path, help="also write the timing report here (timings vary run to run)")
    _add_pipeline_flags(p)
    return parser


def _emit(doc: dict, out: Path | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out is not None:
        out.write_text(text + "\n")
    print(text)


def cmd_synth(args, workers: Workers) -> None:
    config = io.load_config(args.config) if args.config else {}
    if config:
        scene = scene_from_config(config, args.seed)
    else:
        scene = random_scene(
            args.seed or 0,
            height=args.height,
            width=args.width,
            num_frames=args.num_frames,
            max_shapes=args.max_shapes,
            policy=args.refs,
        )
    noise = noise_from_config(io.load_config(args.noise) if args.noise else config.get("noise"))
    seq = synthesize(scene, noise, args.refs, workers)
    io.write_sequence(
        args.out,
        args.name or args.out.name,
        seq.predictions,
        str(args.refs),
        scene.num_classes,
        gt_maps=seq.gt_maps,
        gt_tracks=seq.gt_tracks,
        generator=scene.to_dict(),
        noise=noise.to_dict() if noise else None,
    )
    print(f"wrote {scene.num_frames} frames with {len(scene.shapes)} shapes to {args.out}")


def _track_dicts(tracks) -> list[dict]:
    return [
        {
            "global_id": t.global_id,
            "class_index": t.class_index,
            "label_confidence": t.label_confidence,
            "score": t.score,
            "frames": list(t.frames),
        }
        for t in tracks
    ]


def cmd_track(args, workers: Workers) -> None:
    seq = io.open_sequence(args.sequence)
    params = _pipeline_params(args, seq.policy)
    tracker = SequenceTracker(params, workers)
    maps = [tracker.step(seq.frame(t, params.matching.policy.select(t))) for t in range(seq.num_frames)]
    tracks = tracker.finish()
    gt = seq.manifest.get("gt")
    io.write_results(
        args.out,
        seq.manifest["name"],
        maps,
        _track_dicts(tracks),
        params.to_dict(),
        seq.manifest["num_classes"],
        gt_maps=[seq.gt_map(t) for t in range(seq.num_frames)] if gt and gt.get("identity_maps") else None,
        gt_tracks=gt.get("tracks") if gt else None,
    )
    print(f"tracked {len(tracks)} instances over {seq.num_frames} frames into {args.out}")


def _gt_tracks(root: Path, doc: dict) -> list[Track]:
    gt = doc.get("gt") or {}
    if not gt.get("identity_maps"):
        raise io.ManifestError(f"{root} carries no ground-truth identity maps")
    maps = [io.read_map(root / f, "ids") for f in gt["identity_maps"]]
    classes = {int(g): int(c) for _, g, c in gt.get("tracks", [])}
    return tracks_from_identity_maps(maps, classes)


def cmd_eval(args, workers: Workers) -> None:
    root, doc = io.open_results(args.results)
    maps = [io.read_map(root / f["ids"], "ids") for f in doc["frames"]]
    preds = tracks_from_identity_maps(
        maps,
        {t["global_id"]: t["class_index"] for t in doc["tracks"]},
        {t["global_id"]: t["score"] for t in doc["tracks"]},
    )
    if args.ground_truth is not None:
        seq = io.open_sequence(args.ground_truth)
        gts = _gt_tracks(seq.root, seq.manifest)
    else:
        gts = _gt_tracks(root, doc)
    metrics = evaluate_videos([(preds, gts)])
    metrics["identity_switches"] = identity_switches(preds, gts)
    metrics["num_predicted_tracks"] = len(preds)
    metrics["num_ground_truth_tracks"] = len(gts)
    _emit(metrics, args.out)


def cmd_loss(args, workers: Workers) -> None:
    pred_seq = io.open_sequence(args.prediction)
    gt_seq = io.open_sequence(args.ground_truth)
    if pred_seq.shape != gt_seq.shape or pred_seq.num_frames != gt_seq.num_frames:
        raise io.ManifestError("prediction and ground truth sequences differ in size or length")
    per_frame = []
    for t in range(gt_seq.num_frames):
        pred, gt = pred_seq.frame(t), gt_seq.frame(t)
        labels = np.argmax(gt.semantic.probs, axis=0)
        weights = (labels > 0).astype(np.float64) if args.foreground_only else None
        refs = sorted(set(pred.reference_indices) & set(gt.reference_indices))
        inter = [offset_loss(pred.inter(r), gt.inter(r), weights) for r in refs]
        shape = [shape_loss(pred.intra_offset, pred.inter(r), gt.intra_offset, gt.inter(r), weights) for r in refs]
        per_frame.append(
            LossComponents(
                sem=semantic_loss(pred.semantic, labels),
                cent=center_loss(pred.heatmap, gt.heatmap),
                inter=float(np.mean(inter)) if inter else 0.0,
                intra=offset_loss(pred.intra_offset, gt.intra_offset, weights),
                shape=float(np.mean(shape)) if shape else 0.0,
            )
        )
    names = ("sem", "cent", "inter", "intra", "shape")
    mean = LossComponents(**{n: float(np.mean([getattr(c, n) for c in per_frame])) for n in names})
    weights = LossWeights(args.lambda_cent, args.lambda_inter, args.lambda_intra, args.lambda_shape)
    doc = {n: getattr(mean, n) for n in names}
    doc["total"] = total_loss(mean, weights)
    doc["num_frames"] = len(per_frame)
    _emit(doc, args.out)


def cmd_render(args, workers: Workers) -> None:
    if args.input.is_dir():
        root, doc = io.open_results(args.input)
        args.out.mkdir(parents=True, exist_ok=True)
        for f in doc["frames"]:
            render_identity(io.read_map(root / f["ids"], "ids"), args.out / (Path(f["ids"]).stem + ".png"))
        print(f"rendered {len(doc['frames'])} frames into {args.out}")
    else:
        render_identity(io.read_map(args.input, "ids"), args.out)
        print(f"rendered {args.input} to {args.out}")


def _maps_digest(maps) -> str:
    h = hashlib.sha256()
    for m in maps:
        h.update(io.encode_map(m))
    return h.hexdigest()


def cmd_bench(args, workers: Workers) -> None:
    if args.sequence is not None:
        seq = io.open_sequence(args.sequence)
        params = _pipeline_params(args, seq.policy)
        frames = [seq.frame(t, params.matching.policy.select(t)) for t in range(seq.num_frames)]
        source = str(args.sequence)
    else:
        params = _pipeline_params(args, "first+3")
        scene = benchmark_scene(args.seed or 0, num_frames=args.num_frames)
        frames = generate_sequence(scene, params.matching.policy, workers).predictions
        source = f"builtin {scene.height}x{scene.width}, {len(scene.shapes)} instances"
    report = bench(frames, params, workers, args.repetitions)
    result = report.pop("result")
    digest = _maps_digest(result.identity_maps)
    report["source"] = source
    report["identity_maps_sha256"] = digest
    if args.out is not None:
        io.write_results(args.out, "bench", result.identity_maps, _track_dicts(result.tracks), params.to_dict(), frames[0].semantic.num_classes)
    if args.report is not None:
        args.report.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))


COMMANDS = {
    "synth": cmd_synth,
    "track": cmd_track,
    "eval": cmd_eval,
    "loss": cmd_loss,
    "render": cmd_render,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with Workers(args.workers) as workers:
            COMMANDS[args.command](args, workers)
    except (InstflowError, ValueError, KeyError, OSError) as exc:
        print(f"instflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
