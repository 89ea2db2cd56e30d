"""Procedural rigged puppets with exact ground truth.

A rig is a tree of parts. Each part lives in its own local frame whose origin
is the pivot joint connecting it to its parent, with the rest direction along
local +x. Limb shapes carry a disk of radius ``JOINT_DISK * half_width``
around their pivot, and that disk is cut out of the parent. As long as a
child's angle relative to its rest direction stays within 0.3*pi, the child
never overlaps its parent, so every pixel belongs to exactly one part and the
correspondences between poses are exact and visible. Collisions between
non-adjacent parts are rejected at sampling time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.color import rgb2lab

from .core import CorrespondenceMap, InputError, LabelMap, Pose, SpriteSheet
from .sheet_io import corr_filename, save_sheet, write_corr, write_label_map

log = logging.getLogger(__name__)

CANVAS = 256
ANGLE_LIMIT = 0.3 * math.pi
JOINT_DISK = 1.75  # >= 1 / cos(ANGLE_LIMIT) keeps child bodies off their parent
MAX_REJECTIONS = 2000
BLOB_AREA = 60.0  # local-frame area per texture blob
BLOB_AMPLITUDE = 45.0
MIN_NEIGHBOR_DELTA_E = 40.0
OUTLINE_WIDTH = 3.0  # px

PALETTE = np.array(
    [
        (220, 60, 50), (60, 150, 220), (90, 190, 80), (240, 180, 40),
        (170, 80, 200), (40, 190, 180), (240, 120, 170), (140, 100, 50),
        (120, 130, 240), (200, 220, 90), (250, 140, 60), (100, 100, 110),
        (60, 90, 160), (190, 150, 230), (150, 40, 90), (30, 120, 70),
    ],
    dtype=np.float64,
)

TEMPLATES = ("humanoid", "quadruped", "star")


@dataclass
class PartSpec:
    name: str
    parent: int  # -1 for the root
    pivot: tuple[float, float]  # in the parent's local frame (canvas coords for the root)
    rest_angle: float  # relative to the parent frame
    add: list = field(default_factory=list)  # shape primitives, see _inside
    sub: list = field(default_factory=list)
    color: tuple[float, float, float] = (128.0, 128.0, 128.0)
    blobs: np.ndarray | None = None  # (n, 6): cx, cy, sigma, dr, dg, db in the local frame
    reach: float = 0.0  # max distance of the shape from the local origin


@dataclass
class PuppetRig:
    parts: list[PartSpec]
    template: str
    seed: int
    canvas: tuple[int, int] = (CANVAS, CANVAS)

    @property
    def layer_order(self) -> list[int]:
        """Parents before children, so children paint on top."""
        return sorted(range(len(self.parts)), key=lambda i: (self.depth(i), i))

    def depth(self, i: int) -> int:
        d = 1
        while self.parts[i].parent >= 0:
            i = self.parts[i].parent
            d += 1
        return d

    def children(self, i: int) -> list[int]:
        return [j for j, p in enumerate(self.parts) if p.parent == i]

    def joints(self) -> list[tuple[int, int]]:
        """``(parent, child)`` pairs for every pivot joint."""
        return [(p.parent, j) for j, p in enumerate(self.parts) if p.parent >= 0]


@dataclass
class GroundTruthPose:
    pose: Pose
    part_labels: LabelMap  # part index + 1
    joint_angles: np.ndarray  # per part, radians (root entry is 0)
    transforms: np.ndarray  # (n_parts, 3, 3) local -> canvas
    corr_to: dict[int, CorrespondenceMap] = field(default_factory=dict)
    visible_to: dict[int, np.ndarray] = field(default_factory=dict)
    deform: object | None = None  # jitter warp (see arap.JitterWarp), None when rigid


# -- shapes -----------------------------------------------------------------


def _inside(prims, u, v):
    out = np.zeros(u.shape, dtype=bool)
    for prim in prims:
        kind = prim[0]
        if kind == "rect":
            _, x0, x1, y0, y1 = prim
            out |= (u >= x0) & (u < x1) & (v >= y0) & (v < y1)
        elif kind == "disk":
            _, cx, cy, r = prim
            out |= (u - cx) ** 2 + (v - cy) ** 2 < r * r
        elif kind == "ellipse":
            _, cx, cy, a, b = prim
            out |= ((u - cx) / a) ** 2 + ((v - cy) / b) ** 2 < 1.0
        else:
            raise InputError(f"unknown shape primitive {kind!r}")
    return out


def _signed_distance(prim, u, v):
    """Approximate distance to the primitive's outline, positive inside."""
    kind = prim[0]
    if kind == "rect":
        _, x0, x1, y0, y1 = prim
        qx = np.abs(u - (x0 + x1) / 2) - (x1 - x0) / 2
        qy = np.abs(v - (y0 + y1) / 2) - (y1 - y0) / 2
        return -(np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0))
    if kind == "disk":
        _, cx, cy, r = prim
        return r - np.hypot(u - cx, v - cy)
    if kind == "ellipse":
        _, cx, cy, a, b = prim
        return (1.0 - np.hypot((u - cx) / a, (v - cy) / b)) * min(a, b)
    raise InputError(f"unknown shape primitive {kind!r}")


def _inner_distance(part, u, v):
    d = np.max([_signed_distance(p, u, v) for p in part.add], axis=0)
    for p in part.sub:
        d = np.minimum(d, -_signed_distance(p, u, v))
    return d


def _prim_bounds(prims):
    xs, ys = [], []
    for prim in prims:
        kind = prim[0]
        if kind == "rect":
            xs += [prim[1], prim[2]]
            ys += [prim[3], prim[4]]
        else:
            cx, cy = prim[1], prim[2]
            rx, ry = (prim[3], prim[3]) if kind == "disk" else (prim[3], prim[4])
            xs += [cx - rx, cx + rx]
            ys += [cy - ry, cy + ry]
    return min(xs), max(xs), min(ys), max(ys)


def _prim_reach(prim) -> float:
    kind = prim[0]
    if kind == "rect":
        _, x0, x1, y0, y1 = prim
        return max(math.hypot(x, y) for x in (x0, x1) for y in (y0, y1))
    if kind == "disk":
        _, cx, cy, r = prim
        return math.hypot(cx, cy) + r
    _, cx, cy, a, b = prim
    return math.hypot(cx, cy) + max(a, b)


def _limb(name, parent, pivot, rest_angle, length, half_width, terminal=True):
    add = [
        ("rect", 0.0, length, -half_width, half_width),
        ("disk", 0.0, 0.0, JOINT_DISK * half_width),
    ]
    if terminal:
        add.append(("disk", length, 0.0, half_width))
    return PartSpec(name, parent, pivot, rest_angle, add=add)


def _head(name, parent, pivot, rest_angle, neck, half_width, radius):
    add = [
        ("rect", 0.0, neck, -half_width, half_width),
        ("disk", 0.0, 0.0, JOINT_DISK * half_width),
        ("disk", neck, 0.0, radius),
    ]
    return PartSpec(name, parent, pivot, rest_angle, add=add)


def _attach_cutouts(parts):
    """Cut each child's joint disk out of its parent so siblings never overlap at a pivot."""
    for part in parts:
        if part.parent < 0:
            continue
        disk_r = part.add[1][3]
        px, py = part.pivot
        parts[part.parent].sub.append(("disk", px, py, disk_r))


# -- templates ----------------------------------------------------------------


def _humanoid(rng, limb_segments=2, head=True):
    tw, th = 60.0, 76.0
    parts = [PartSpec("torso", -1, (128.0, 120.0), 0.0, add=[("rect", -tw / 2, tw / 2, -th / 2, th / 2)])]
    if head:
        parts.append(_limb("neck", 0, (0.0, -th / 2), -math.pi / 2, 12.0, 6.0, terminal=False))
        parts.append(_head("head", 1, (12.0, 0.0), 0.0, 14.0, 5.0, 16.0))
    upper = [("l_arm", (-tw / 2, -th / 2 + 14), math.pi, 34.0, 7.0),
             ("r_arm", (tw / 2, -th / 2 + 14), 0.0, 34.0, 7.0),
             ("l_leg", (-15.0, th / 2), math.pi / 2, 32.0, 8.0),
             ("r_leg", (15.0, th / 2), math.pi / 2, 32.0, 8.0)]
    lower_dims = {"l_arm": (30.0, 6.0), "r_arm": (30.0, 6.0), "l_leg": (30.0, 7.0), "r_leg": (30.0, 7.0)}
    for name, pivot, angle, length, hw in upper:
        idx = len(parts)
        parts.append(_limb(name, 0, pivot, angle, length, hw, terminal=limb_segments == 1))
        if limb_segments >= 2:
            l2, hw2 = lower_dims[name]
            parts.append(_limb(name.replace("arm", "forearm").replace("leg", "shin"), idx, (length, 0.0), 0.0, l2, hw2))
    return parts


def _quadruped(rng):
    tw, th = 112.0, 44.0
    parts = [PartSpec("torso", -1, (128.0, 118.0), 0.0, add=[("rect", -tw / 2, tw / 2, -th / 2, th / 2)])]
    parts.append(_head("head", 0, (tw / 2, -8.0), 0.0, 28.0, 7.0, 16.0))
    parts.append(_limb("tail", 0, (-tw / 2, -10.0), math.pi, 40.0, 4.0))
    for k, x in enumerate((-40.0, -16.0, 16.0, 40.0)):
        idx = len(parts)
        parts.append(_limb(f"leg{k}", 0, (x, th / 2), math.pi / 2, 28.0, 6.0, terminal=False))
        parts.append(_limb(f"paw{k}", idx, (28.0, 0.0), 0.0, 26.0, 5.0))
    return parts


def _star(rng, k=4):
    if k < 1:
        raise InputError("star template needs k >= 1")
    radius = 38.0
    parts = [PartSpec("torso", -1, (128.0, 128.0), 0.0, add=[("disk", 0.0, 0.0, radius)])]
    offset = float(rng.uniform(0, 2 * math.pi / k))
    for i in range(k):
        a = offset + 2 * math.pi * i / k
        parts.append(_limb(f"limb{i}", 0, (radius * math.cos(a), radius * math.sin(a)), a, 52.0, 8.0))
    return parts


def _custom(spec):
    try:
        parts = []
        for entry in spec["parts"]:
            parts.append(
                PartSpec(
                    str(entry["name"]),
                    int(entry["parent"]),
                    tuple(float(v) for v in entry["pivot"]),
                    float(entry.get("rest_angle", 0.0)),
                    add=[tuple(p) for p in entry["add"]],
                    sub=[tuple(p) for p in entry.get("sub", [])],
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed custom puppet spec: {exc}") from exc
    roots = [i for i, p in enumerate(parts) if p.parent < 0]
    if len(roots) != 1 or roots[0] != 0:
        raise InputError("custom puppet needs exactly one root, listed first")
    for i, p in enumerate(parts):
        if p.parent >= i:
            raise InputError("custom puppet parts must list parents before children")
        for prim in p.add + p.sub:
            if prim[0] not in ("rect", "disk", "ellipse"):
                raise InputError(f"unknown shape primitive {prim[0]!r}")
    return parts


def make_puppet(template="star", seed: int = 0, **options) -> PuppetRig:
    """Build a deterministic rig.

    ``template`` is one of ``humanoid``, ``quadruped``, ``star`` or a dict with
    a ``parts`` list (custom spec). Options: ``k`` for star (limb count),
    ``limb_segments`` and ``head`` for humanoid.
    """
    rng = np.random.default_rng([seed, 7])
    if isinstance(template, dict):
        parts, name = _custom(template), "custom"
        explicit_cutouts = True
    elif template == "humanoid":
        parts, name = _humanoid(rng, **options), template
        explicit_cutouts = False
    elif template == "quadruped":
        parts, name = _quadruped(rng), template
        explicit_cutouts = False
    elif template == "star":
        parts, name = _star(rng, **options), template
        explicit_cutouts = False
    else:
        raise InputError(f"unknown puppet template {template!r}")
    if not explicit_cutouts:
        _attach_cutouts(parts)

    colors = _assign_colors(parts, rng)
    for i, part in enumerate(parts):
        part.color = colors[i]
        x0, x1, y0, y1 = _prim_bounds(part.add)
        n = max(int((x1 - x0) * (y1 - y0) / BLOB_AREA), 2)
        part.blobs = np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), rng.uniform(3.0, 6.0, n),
             rng.uniform(-1.0, 1.0, (n, 3)) * BLOB_AMPLITUDE]
        )
        part.reach = max(_prim_reach(p) for p in part.add)

    rig = PuppetRig(parts, name, seed)
    _fit_canvas(rig)
    return rig


def _assign_colors(parts, rng, min_delta_e: float = MIN_NEIGHBOR_DELTA_E):
    """Palette colors in random order, keeping parts that meet at a joint apart in Lab.

    Each part takes the first unused color whose CIE76 distance to every
    already-colored parent, child or sibling is at least ``min_delta_e``; if none
    qualifies it takes the unused color with the largest such distance.
    """
    order = rng.permutation(len(PALETTE))
    lab = rgb2lab(PALETTE[None] / 255.0)[0]
    related = [set() for _ in parts]
    for i, p in enumerate(parts):
        if p.parent >= 0:
            related[i].add(p.parent)
            related[p.parent].add(i)
            for j, q in enumerate(parts):
                if j != i and q.parent == p.parent:
                    related[i].add(j)
    chosen: list[int] = []
    for i in range(len(parts)):
        free = [c for c in order if c not in chosen] or list(order)
        others = [chosen[j] for j in related[i] if j < i]

        def gap(c):
            return min((np.linalg.norm(lab[c] - lab[o]) for o in others), default=np.inf)

        ok = [c for c in free if gap(c) >= min_delta_e]
        chosen.append(int(ok[0] if ok else max(free, key=gap)))
    return [tuple(PALETTE[c]) for c in chosen]


def _fit_canvas(rig: PuppetRig, margin: float = 4.0):
    """Uniformly shrink the rig if some pose could leave the canvas."""
    h, w = rig.canvas
    cx, cy = rig.parts[0].pivot
    # conservative bound: every chain fully stretched in any direction
    origin = np.zeros(len(rig.parts))
    extent = np.zeros(len(rig.parts))
    for i in rig.layer_order:
        p = rig.parts[i]
        if p.parent >= 0:
            origin[i] = origin[p.parent] + math.hypot(*p.pivot)
        extent[i] = origin[i] + p.reach
    need = float(extent.max())
    room = min(cx, cy, w - cx, h - cy) - margin
    if need <= room:
        return
    scale = room / need
    log.warning("puppet exceeds the canvas; scaling rig by %.3f", scale)
    for i, p in enumerate(rig.parts):
        if p.parent >= 0:
            p.pivot = (p.pivot[0] * scale, p.pivot[1] * scale)
        p.add = [_scale_prim(q, scale) for q in p.add]
        p.sub = [_scale_prim(q, scale) for q in p.sub]
        p.reach *= scale


def _scale_prim(prim, s):
    return (prim[0], *[v * s for v in prim[1:]])


# -- posing and rendering -----------------------------------------------------


def _rot(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def forward_kinematics(rig: PuppetRig, angles) -> np.ndarray:
    """Local-to-canvas 3x3 transforms for every part."""
    n = len(rig.parts)
    out = np.zeros((n, 3, 3))
    for i in rig.layer_order:
        p = rig.parts[i]
        local = np.eye(3)
        local[:2, :2] = _rot(p.rest_angle + angles[i])
        local[:2, 2] = p.pivot
        out[i] = local if p.parent < 0 else out[p.parent] @ local
    return out


def _texture(part: PartSpec, u, v):
    val = np.broadcast_to(np.asarray(part.color), (*u.shape, 3)).copy()
    for cx, cy, sigma, dr, dg, db in part.blobs:
        g = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * sigma * sigma))
        val += g[..., None] * np.array([dr, dg, db])
    # soft ink outline: fade to black over the last OUTLINE_WIDTH px inside the shape
    if OUTLINE_WIDTH > 0:
        val *= np.clip(_inner_distance(part, u, v) / OUTLINE_WIDTH, 0.0, 1.0)[..., None]
    return val


def _part_pixels(rig, transforms, i, shape):
    """Pixels (rows, cols) covered by part ``i`` plus their local coordinates."""
    h, w = shape
    p = rig.parts[i]
    t = transforms[i]
    ox, oy = t[0, 2], t[1, 2]
    x0, x1 = max(int(math.floor(ox - p.reach)) - 1, 0), min(int(math.ceil(ox + p.reach)) + 2, w)
    y0, y1 = max(int(math.floor(oy - p.reach)) - 1, 0), min(int(math.ceil(oy + p.reach)) + 2, h)
    if x0 >= x1 or y0 >= y1:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    rinv = t[:2, :2].T
    dx, dy = xx - ox, yy - oy
    u = rinv[0, 0] * dx + rinv[0, 1] * dy
    v = rinv[1, 0] * dx + rinv[1, 1] * dy
    ins = _inside(p.add, u, v)
    if p.sub:
        ins &= ~_inside(p.sub, u, v)
    return yy[ins], xx[ins], u[ins], v[ins]


def render(rig: PuppetRig, transforms, shape=None):
    """Paint parts in layer order; returns ``(image, labels, overlap_count)``."""
    shape = shape or rig.canvas
    image = np.zeros((*shape, 3))
    labels = np.zeros(shape, dtype=np.uint16)
    count = np.zeros(shape, dtype=np.int32)
    for i in rig.layer_order:
        rr, cc, u, v = _part_pixels(rig, transforms, i, shape)
        image[rr, cc] = _texture(rig.parts[i], u, v)
        labels[rr, cc] = i + 1
        count[rr, cc] += 1
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), labels, count


def _touches_border(labels):
    return bool(labels[0].any() or labels[-1].any() or labels[:, 0].any() or labels[:, -1].any())


def sample_angles(rng, n_parts: int) -> np.ndarray:
    angles = rng.uniform(-ANGLE_LIMIT, ANGLE_LIMIT, n_parts)
    angles[0] = 0.0
    return angles


def sample_pose(rig: PuppetRig, seed, jitter: str = "none", angles=None, pose_id: int = 0) -> GroundTruthPose:
    """Pose the rig with i.i.d. uniform joint angles, rejecting self-collisions.

    ``angles`` (one per part, root ignored) bypasses sampling.
    """
    if jitter not in ("none", "arap"):
        raise InputError(f"jitter must be 'none' or 'arap', not {jitter!r}")
    rng = np.random.default_rng(seed)
    forced = angles is not None
    for _ in range(MAX_REJECTIONS):
        a = np.asarray(angles, dtype=float).copy() if forced else sample_angles(rng, len(rig.parts))
        a[0] = 0.0
        transforms = forward_kinematics(rig, a)
        image, labels, count = render(rig, transforms)
        if forced or (count.max() <= 1 and not _touches_border(labels)):
            break
    else:
        log.warning("no collision-free pose after %d draws; keeping the last one", MAX_REJECTIONS)
    gt = GroundTruthPose(
        Pose(image, labels > 0, pose_id), LabelMap(labels, {i + 1: p.name for i, p in enumerate(rig.parts)}), a, transforms
    )
    if jitter == "arap":
        from .arap import jitter_ground_truth

        jitter_ground_truth(gt, rig, seed=np.random.default_rng([int(rng.integers(2**31)), 1]))
    return gt


def gt_correspondence(rig: PuppetRig, src: GroundTruthPose, dst: GroundTruthPose):
    """Exact map ``src -> dst`` plus a per-pixel visibility flag."""
    labels = src.part_labels.labels.astype(np.int64)
    shape = labels.shape
    rows, cols = np.nonzero(labels)
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    part = labels[rows, cols] - 1
    if src.deform is not None:
        pts = src.deform.backward(pts, part)
    rel = np.einsum("nij,njk->nik", dst.transforms, np.linalg.inv(src.transforms))
    out = np.einsum("nij,nj->ni", rel[part][:, :2, :2], pts) + rel[part][:, :2, 2]
    if dst.deform is not None:
        out = dst.deform.forward(out, part)
    targets = np.full((*shape, 2), np.nan, dtype=np.float64)
    targets[rows, cols] = out
    corr = CorrespondenceMap(src.pose.pose_id, dst.pose.pose_id, targets)
    h, w = shape
    ri = np.clip(np.rint(out[:, 1]).astype(int), 0, h - 1)
    ci = np.clip(np.rint(out[:, 0]).astype(int), 0, w - 1)
    visible = np.zeros(shape, dtype=bool)
    visible[rows, cols] = dst.part_labels.labels[ri, ci] == part + 1
    return corr, visible


def make_sheet(rig: PuppetRig, n_poses: int = 6, seed: int = 0, jitter: str = "none") -> list[GroundTruthPose]:
    """Sample ``n_poses`` poses and the exact correspondences between every ordered pair."""
    poses = [sample_pose(rig, [seed, i], jitter=jitter, pose_id=i) for i in range(n_poses)]
    for a in poses:
        for b in poses:
            if a is b:
                continue
            corr, vis = gt_correspondence(rig, a, b)
            a.corr_to[b.pose.pose_id] = corr
            a.visible_to[b.pose.pose_id] = vis
    return poses


def to_sprite_sheet(poses: list[GroundTruthPose], name: str = "synthetic") -> SpriteSheet:
    return SpriteSheet([g.pose for g in poses], name=name)


def joint_positions(rig: PuppetRig, gt: GroundTruthPose) -> list[dict]:
    out = []
    for parent, child in rig.joints():
        x, y = gt.transforms[child][:2, 2]
        out.append({"parent": parent, "child": child, "x": float(x), "y": float(y)})
    return out


def write_dataset(rig: PuppetRig, poses: list[GroundTruthPose], out_dir, name=None) -> Path:
    """Write manifest, pose PNGs, ground-truth label maps, APCR files and joints.

    Returns the manifest path. Layout::

        manifest.json, poses/, gt/labels/pose_XX.png, gt/corr/corr_SS_TT.apcr, gt/rig.json
    """
    out_dir = Path(out_dir)
    manifest = save_sheet(to_sprite_sheet(poses, name or f"{rig.template}-{rig.seed}"), out_dir)
    (out_dir / "gt" / "labels").mkdir(parents=True, exist_ok=True)
    (out_dir / "gt" / "corr").mkdir(parents=True, exist_ok=True)
    for g in poses:
        i = g.pose.pose_id
        write_label_map(g.part_labels, out_dir / "gt" / "labels" / f"pose_{i:02d}.png")
        for j, corr in sorted(g.corr_to.items()):
            write_corr(corr, out_dir / "gt" / "corr" / corr_filename(i, j))
    info = {
        "template": rig.template,
        "seed": rig.seed,
        "parts": [{"id": i + 1, "name": p.name, "parent": p.parent + 1 if p.parent >= 0 else 0} for i, p in enumerate(rig.parts)],
        "poses": [
            {"pose": g.pose.pose_id, "angles": [float(v) for v in g.joint_angles], "joints": joint_positions(rig, g)}
            for g in poses
        ],
    }
    (out_dir / "gt" / "rig.json").write_text(json.dumps(info, indent=2) + "\n")
    return manifest
