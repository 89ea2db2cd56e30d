"""Reading and writing sprite sheets, label maps, correspondences and results.

File formats:

* manifest: JSON ``{"name": ..., "poses": [{"image": ..., "mask": ...}, ...]}``;
  relative paths resolve against the manifest's directory.
* label maps: single-channel 16-bit PNG, 0 = background.
* correspondences (APCR): ``b"APCR"``, u32 version (1), u32 H, u32 W, then
  H*W records of two little-endian float32 ``(x, y)``; ``(-1, -1)`` = none.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CandidatePart, CorrespondenceMap, InputError, LabelMap, Pose, SelectionSolution, SpriteSheet

APCR_MAGIC = b"APCR"
APCR_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_SENTINEL = -1.0


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode == "1":
            return np.array(im, dtype=bool)
        gray = np.array(im.convert("L"))
    return gray >= 128


def load_sheet(manifest_path) -> SpriteSheet:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise InputError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest is not valid JSON: {exc}") from exc
    entries = doc.get("poses")
    if not isinstance(entries, list):
        raise InputError("manifest must contain a 'poses' list")
    root = manifest_path.parent
    poses = []
    for i, entry in enumerate(entries):
        try:
            img_path, mask_path = root / entry["image"], root / entry["mask"]
        except (KeyError, TypeError) as exc:
            raise InputError(f"pose entry {i} needs 'image' and 'mask'") from exc
        for p in (img_path, mask_path):
            if not p.is_file():
                raise InputError(f"pose {i}: missing file {p}")
        poses.append(Pose(_read_rgb(img_path), _read_mask(mask_path), pose_id=i))
    return SpriteSheet(poses, name=str(doc.get("name", manifest_path.stem)))


def save_sheet(sheet: SpriteSheet, out_dir) -> Path:
    """Write poses as PNGs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "poses").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pose in enumerate(sheet.poses):
        img_rel, mask_rel = f"poses/pose_{i:02d}.png", f"poses/mask_{i:02d}.png"
        Image.fromarray(pose.image).save(out_dir / img_rel)
        Image.fromarray((pose.mask * 255).astype(np.uint8)).save(out_dir / mask_rel)
        entries.append({"image": img_rel, "mask": mask_rel})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"name": sheet.name, "poses": entries}, indent=2) + "\n")
    return manifest


def write_label_map(labels: LabelMap | np.ndarray, path) -> None:
    arr = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint16)).save(path)


def read_label_map(path) -> LabelMap:
    with Image.open(path) as im:
        arr = np.array(im)
    return LabelMap(arr.astype(np.uint16))


def write_corr(corr: CorrespondenceMap, path) -> None:
    h, w = corr.shape
    valid = corr.valid
    targets = corr.targets.astype("<f4", copy=True)
    if (valid & (targets[..., 0] == _SENTINEL) & (targets[..., 1] == _SENTINEL)).any():
        raise InputError("a matched pixel carries the reserved (-1, -1) sentinel")
    targets[~valid] = _SENTINEL
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(APCR_MAGIC, APCR_VERSION, h, w))
        fh.write(targets.tobytes())


def read_corr(path, source_pose: int = 0, target_pose: int = 1) -> CorrespondenceMap:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InputError(f"{path}: truncated header")
    magic, version, h, w = _HEADER.unpack_from(data)
    if magic != APCR_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != APCR_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + h * w * 8
    if len(data) != expected:
        raise InputError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    targets = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, 2).astype(np.float32)
    none = (targets[..., 0] == _SENTINEL) & (targets[..., 1] == _SENTINEL)
    targets[none] = np.nan
    return CorrespondenceMap(source_pose, target_pose, targets)


def corr_io(corr: CorrespondenceMap | None, path, mode: str = "read", **ids) -> CorrespondenceMap:
    if mode == "write":
        if corr is None:
            raise InputError("write mode needs a correspondence map")
        write_corr(corr, path)
        return corr
    if mode == "read":
        return read_corr(path, **ids)
    raise ValueError(f"mode must be 'read' or 'write', not {mode!r}")


def corr_filename(source: int, target: int) -> str:
    return f"corr_{source:02d}_{target:02d}.apcr"


def load_corr_dir(directory, n_poses: int) -> dict[tuple[int, int], CorrespondenceMap] | None:
    """Load every ordered pair from ``directory``; None if any file is missing."""
    directory = Path(directory)
    out = {}
    for s in range(n_poses):
        for t in range(n_poses):
            if s == t:
                continue
            path = directory / corr_filename(s, t)
            if not path.is_file():
                return None
            out[s, t] = read_corr(path, s, t)
    return out


def part_label_maps(
    parts: list[CandidatePart], solution: SelectionSolution, n_poses: int, shape: tuple[int, int]
) -> list[np.ndarray]:
    """Rasterize selected parts into their own source poses (ids 1..k in selection order)."""
    maps = [np.zeros(shape, dtype=np.uint16) for _ in range(n_poses)]
    for label, idx in enumerate(solution.selected, start=1):
        part = parts[idx]
        maps[part.source_pose][part.pixel_mask] = label
    return maps


def save_results(
    parts: list[CandidatePart],
    solution: SelectionSolution,
    out_dir,
    *,
    pose_labels: list[np.ndarray] | None = None,
    n_poses: int | None = None,
    extra: dict | None = None,
) -> Path:
    """Write per-pose label maps and ``parts.json``; returns the JSON path.

    ``pose_labels`` (one map per pose, ids 1..k) overrides the default of
    painting each selected part only into its own source pose.
    """
    if len(solution.z) != len(parts):
        raise ValueError(f"solution has {len(solution.z)} entries for {len(parts)} parts")
    out_dir = Path(out_dir)
    try:
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out_dir}: {exc}") from exc
    if pose_labels is None:
        if n_poses is None:
            n_poses = 1 + max((p.source_pose for p in parts), default=0)
        shape = parts[0].pixel_mask.shape if parts else (0, 0)
        pose_labels = part_label_maps(parts, solution, n_poses, shape)
    for i, labels in enumerate(pose_labels):
        write_label_map(labels, out_dir / "labels" / f"pose_{i:02d}.png")

    records = []
    for label, idx in enumerate(solution.selected, start=1):
        part = parts[idx]
        x0, y0, x1, y1 = part.bbox()
        records.append(
            {
                "id": label,
                "candidate": idx,
                "source_pose": part.source_pose,
                "superpixels": sorted(part.superpixels),
                "bbox": [x0, y0, x1, y1],
                "area": part.area,
            }
        )
    doc = {
        "parts": records,
        "cost": solution.cost,
        "recon_error": solution.recon_error,
        "pose_errors": solution.pose_errors,
    }
    if extra:
        doc.update(extra)
    path = out_dir / "parts.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
