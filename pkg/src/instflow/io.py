"""Binary map files, sequence manifests and result directories.

Map files start with the magic ``IFA1`` followed by four little-endian u32
fields (dtype code, height, width, channels) and a row-major,
channel-innermost little-endian payload. Manifests are JSON with sorted
keys so that identical content gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .core import FramePrediction, IdentityMap, OffsetField, ScalarMap, SemanticProbMap
from .errors import ManifestError, MapFormatError, MapTruncatedError

MAGIC = b"IFA1"
_HEADER = struct.Struct("<4s4I")
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<u4"): 1}
MAP_KINDS = ("semantic", "heatmap", "offset", "ids")
SEQUENCE_FORMAT = "instflow-sequence/1"
RESULTS_FORMAT = "instflow-results/1"


def frame_file(t: int, kind: str) -> str:
    return f"frame_{t:05d}_{kind}.ifa"


def inter_file(t: int, r: int) -> str:
    return f"frame_{t:05d}_inter_{r:05d}.ifa"


def _as_array(obj) -> np.ndarray:
    if isinstance(obj, SemanticProbMap):
        return obj.to_hwc().astype("<f4")
    if isinstance(obj, OffsetField):
        return obj.to_hwc().astype("<f4")
    if isinstance(obj, ScalarMap):
        return obj.values[..., None].astype("<f4")
    if isinstance(obj, IdentityMap):
        return obj.ids[..., None].astype("<u4")
    arr = np.asarray(obj)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise MapFormatError(f"maps are 2-D or 3-D (H, W, C), got shape {arr.shape}")
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype.kind in "ui":
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
            raise MapFormatError("integer maps must fit in 32-bit unsigned")
        return arr.astype("<u4")
    raise MapFormatError(f"unsupported map dtype {arr.dtype}")


def encode_map(obj) -> bytes:
    arr = _as_array(obj)
    h, w, c = arr.shape
    return _HEADER.pack(MAGIC, _CODES[arr.dtype], h, w, c) + np.ascontiguousarray(arr).tobytes()


def write_map(obj, path) -> None:
    """Write a typed map or an ``(H, W[, C])`` array; floats are stored as 32-bit."""
    Path(path).write_bytes(encode_map(obj))


def decode_map(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise MapTruncatedError(f"map header needs {_HEADER.size} bytes, got {len(data)}")
    magic, code, h, w, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MapFormatError(f"bad magic {magic!r}")
    if code not in DTYPES:
        raise MapFormatError(f"unknown dtype code {code}")
    if h < 1 or w < 1 or c < 1:
        raise MapFormatError(f"empty map dimensions {h}x{w}x{c}")
    expected = h * w * c * 4
    payload = len(data) - _HEADER.size
    if payload < expected:
        raise MapTruncatedError(f"payload has {payload} bytes, expected {expected}")
    if payload > expected:
        raise MapFormatError(f"payload has {payload - expected} trailing bytes")
    return np.frombuffer(data, dtype=DTYPES[code], offset=_HEADER.size).reshape(h, w, c)


def read_array(path) -> np.ndarray:
    """Raw ``(H, W, C)`` contents of a map file, as float32 or uint32."""
    return decode_map(Path(path).read_bytes())


def read_map(path, kind: str | None = None):
    """Read a map file as a typed map.

    ``kind`` is one of ``semantic``, ``heatmap``, ``offset`` or ``ids``. Without
    it the kind is inferred: u32 is an identity map, one float channel a
    heatmap, two an offset field, more a semantic map.
    """
    arr = read_array(path)
    is_float = arr.dtype == DTYPES[0]
    c = arr.shape[2]
    if kind is None:
        kind = "ids" if not is_float else {1: "heatmap", 2: "offset"}.get(c, "semantic")
    if kind not in MAP_KINDS:
        raise ValueError(f"unknown map kind {kind!r}")
    if (kind == "ids") == is_float:
        raise MapFormatError(f"{path}: dtype {arr.dtype} does not fit a {kind} map")
    if kind in ("heatmap", "ids") and c != 1:
        raise MapFormatError(f"{path}: a {kind} map has 1 channel, got {c}")
    if kind == "offset" and c != 2:
        raise MapFormatError(f"{path}: an offset map has 2 channels, got {c}")
    if kind == "semantic" and c < 2:
        raise MapFormatError(f"{path}: a semantic map needs at least 2 channels")
    if kind == "ids":
        return IdentityMap(arr[..., 0])
    if kind == "heatmap":
        return ScalarMap(arr[..., 0])
    if kind == "offset":
        return OffsetField.from_hwc(arr)
    return SemanticProbMap.from_hwc(arr)


def write_json(obj: Any, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc


def load_config(path) -> dict:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ManifestError(f"{path}: invalid config ({exc})") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: config must be a mapping")
    return data


@dataclass
class SequenceDir:
    """A sequence directory with its parsed manifest; frames are loaded on demand."""

    root: Path
    manifest: dict

    @property
    def num_frames(self) -> int:
        return int(self.manifest["num_frames"])

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.manifest["height"]), int(self.manifest["width"])

    @property
    def policy(self) -> str:
        return self.manifest["reference_policy"]

    def frame(self, t: int, references=None) -> FramePrediction:
        """Load frame ``t``; ``references`` restricts (and requires) the inter-offset files."""
        entry = self.manifest["frames"][t]
        inter_files = {int(r): f for r, f in entry["inter"].items()}
        if references is None:
            references = sorted(inter_files)
        missing = [r for r in references if r not in inter_files]
        if missing:
            raise ManifestError(f"frame {t} has no inter-frame offsets towards reference(s) {missing}")
        pred = FramePrediction(
            t,
            read_map(self.root / entry["semantic"], "semantic"),
            read_map(self.root / entry["heatmap"], "heatmap"),
            read_map(self.root / entry["intra"], "offset"),
            tuple((r, read_map(self.root / inter_files[r], "offset")) for r in references),
        )
        if pred.shape != self.shape or pred.semantic.num_classes != self.manifest["num_classes"]:
            raise ManifestError(f"frame {t} maps disagree with the manifest dimensions")
        return pred

    def gt_map(self, t: int) -> IdentityMap | None:
        gt = self.manifest.get("gt")
        if not gt or not gt.get("identity_maps"):
            return None
        return read_map(self.root / gt["identity_maps"][t], "ids")

    def gt_classes(self) -> dict[int, int]:
        gt = self.manifest.get("gt") or {}
        return {int(g): int(c) for _, g, c in gt.get("tracks", [])}


def validate_manifest(manifest: dict, root: Path) -> None:
    for key in ("name", "height", "width", "num_classes", "num_frames", "frames", "reference_policy"):
        if key not in manifest:
            raise ManifestError(f"manifest lacks {key!r}")
    frames = manifest["frames"]
    if len(frames) != manifest["num_frames"]:
        raise ManifestError(f"manifest lists {len(frames)} frames but num_frames is {manifest['num_frames']}")
    files = []
    for t, entry in enumerate(frames):
        if entry.get("index") != t:
            raise ManifestError(f"frame entry {t} has index {entry.get('index')}")
        for kind in ("semantic", "heatmap", "intra"):
            if kind not in entry:
                raise ManifestError(f"frame {t} lacks a {kind} file")
            files.append(entry[kind])
        for r, f in entry.get("inter", {}).items():
            if not 0 <= int(r) < t:
                raise ManifestError(f"frame {t} lists inter offsets towards non-past frame {r}")
            files.append(f)
    gt = manifest.get("gt") or {}
    maps = gt.get("identity_maps") or []
    if maps and len(maps) != len(frames):
        raise ManifestError("ground-truth identity maps do not cover every frame")
    files.extend(maps)
    missing = [f for f in files if not (root / f).is_file()]
    if missing:
        raise ManifestError(f"manifest references missing files: {missing[:5]}")


def open_sequence(path) -> SequenceDir:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ManifestError(f"{root} has no manifest.json")
    manifest = read_json(manifest_path)
    if manifest.get("format") != SEQUENCE_FORMAT:
        raise ManifestError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    validate_manifest(manifest, root)
    return SequenceDir(root, manifest)


def write_sequence(
    root,
    name: str,
    predictions,
    policy: str,
    num_classes: int,
    class_names=None,
    gt_maps=None,
    gt_tracks=None,
    generator: dict | None = None,
    noise: dict | None = None,
) -> Path:
    """Write frame maps and ``manifest.json`` into ``root`` (created if needed)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    shape = None
    for pred in predictions:
        t = pred.index
        shape = pred.shape
        entry = {"index": t, "inter": {}}
        for kind, obj in (("semantic", pred.semantic), ("heatmap", pred.heatmap), ("intra", pred.intra_offset)):
            entry[kind] = frame_file(t, kind)
            write_map(obj, root / entry[kind])
        for r, field in pred.inter_offsets:
            entry["inter"][str(r)] = inter_file(t, r)
            write_map(field, root / entry["inter"][str(r)])
        frames.append(entry)
    if shape is None:
        raise ManifestError("a sequence needs at least one frame")
    manifest = {
        "format": SEQUENCE_FORMAT,
        "name": name,
        "height": shape[0],
        "width": shape[1],
        "num_classes": num_classes,
        "class_names": list(class_names or ["background"] + [f"class_{k}" for k in range(1, num_classes)]),
        "num_frames": len(frames),
        "reference_policy": policy,
        "frames": frames,
    }
    if gt_maps is not None:
        names = []
        for t, m in enumerate(gt_maps):
            names.append(frame_file(t, "gt"))
            write_map(m, root / names[-1])
        manifest["gt"] = {"identity_maps": names, "tracks": [list(map(int, row)) for row in gt_tracks or []]}
    if generator is not None:
        manifest["generator"] = generator
    if noise is not None:
        manifest["noise"] = noise
    write_json(manifest, root / "manifest.json")
    return root


def write_results(
    root,
    name: str,
    identity_maps,
    tracks: list[dict],
    params: dict,
    num_classes: int,
    gt_maps=None,
    gt_tracks=None,
) -> Path:
    """Write per-frame global identity maps and ``results.json``.

    Ground truth, when given, is copied in so the directory can be evaluated
    on its own.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    shape = None
    for t, m in enumerate(identity_maps):
        shape = m.shape
        frames.append({"index": t, "ids": frame_file(t, "ids")})
        write_map(m, root / frames[-1]["ids"])
    doc = {
        "format": RESULTS_FORMAT,
        "name": name,
        "height": shape[0] if shape else 0,
        "width": shape[1] if shape else 0,
        "num_classes": num_classes,
        "num_frames": len(frames),
        "params": params,
        "frames": frames,
        "tracks": tracks,
    }
    if gt_maps is not None:
        names = []
        for t, m in enumerate(gt_maps):
            names.append(frame_file(t, "gt"))
            write_map(m, root / names[-1])
        doc["gt"] = {"identity_maps": names, "tracks": [list(map(int, row)) for row in gt_tracks or []]}
    write_json(doc, root / "results.json")
    return root


def open_results(path) -> tuple[Path, dict]:
    root = Path(path)
    doc_path = root / "results.json"
    if not doc_path.is_file():
        raise ManifestError(f"{root} has no results.json")
    doc = read_json(doc_path)
    if doc.get("format") != RESULTS_FORMAT:
        raise ManifestError(f"{doc_path}: unsupported format {doc.get('format')!r}")
    files = [f["ids"] for f in doc["frames"]] + list((doc.get("gt") or {}).get("identity_maps", []))
    missing = [f for f in files if not (root / f).is_file()]
    if missing:
        raise ManifestError(f"results reference missing files: {missing[:5]}")
    return root, doc
