"""Textured control meshes, as-rigid-as-possible deformation and pose reconstruction.

A part's control mesh is a Delaunay triangulation of grid vertices laid over
the part's oriented bounding box. Deforming the mesh carries the part's
source pixels along through barycentric coordinates; rendering inverts that
map per target pixel and samples the source bilinearly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu
from scipy.spatial import Delaunay, cKDTree
from skimage.morphology import disk

from .core import CandidatePart, CorrespondenceMap, InputError, LabelMap, Pose
from .metrics import image_metrics
from .motion import RansacParams, procrustes_2d, ransac_rigid, rotation_matrix

log = logging.getLogger(__name__)

DEFAULT_SPACING = 12.0  # px
DEFAULT_LAMBDA = 0.05
MAX_ITERATIONS = 100
STOP_DISPLACEMENT = 1e-3  # px
JITTER_SIGMA_FRAC = 0.02
INIT_RANSAC = RansacParams(iterations=200, inlier_threshold=3.0)
REFINE_ITERATIONS = 10
OUTLIER_GATE = 0.5  # in units of the vertex radius
TEXTURE_PAD = 2  # px of neighboring source foreground carried by part meshes in reconstruction
MODES = ("corr_guided", "render_refined")


@dataclass
class ControlMesh:
    rest_vertices: np.ndarray  # (V, 2) xy
    triangles: np.ndarray  # (T, 3)
    image: np.ndarray  # (H, W, 3) float source pixels
    mask: np.ndarray  # (H, W) bool, the pixels this mesh carries
    pixel_xy: np.ndarray  # (N, 2) mask pixels
    pixel_tri: np.ndarray  # (N,) containing triangle
    pixel_bary: np.ndarray  # (N, 3) barycentric texture coordinates
    axes: np.ndarray  # (2, 2) rows are the bounding-box axes
    part_id: int = 0
    source_pose: int = 0
    spacing: float = DEFAULT_SPACING
    core: np.ndarray | None = None  # (H, W) bool, the part itself when ``mask`` is padded

    def __post_init__(self):
        if self.core is None:
            self.core = self.mask

    @property
    def n_vertices(self) -> int:
        return len(self.rest_vertices)

    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(i, j)``, ``i < j``, sorted."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)


@dataclass
class DeformState:
    vertices: np.ndarray  # (V, 2)
    rotations: np.ndarray  # (V, 2, 2)
    energy: list[float] = field(default_factory=list)
    iterations: int = 0


def obb_axes(points: np.ndarray) -> np.ndarray:
    """Principal axes of a point set as rows, major axis first, with a fixed sign convention."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        return np.eye(2)
    cov = np.cov((pts - pts.mean(0)).T)
    vals, vecs = np.linalg.eigh(cov)
    major = vecs[:, np.argmax(vals)]
    if major[0] < -1e-12 or (abs(major[0]) <= 1e-12 and major[1] < 0):
        major = -major
    minor = np.array([-major[1], major[0]])
    return np.stack([major, minor])


def _barycentric(tri_xy: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``pts`` (N, 2) in one triangle (3, 2); NaN if degenerate."""
    a, b, c = tri_xy
    v0, v1 = b - a, c - a
    det = v0[0] * v1[1] - v0[1] * v1[0]
    if abs(det) < 1e-12:
        return np.full((len(pts), 3), np.nan)
    d = pts - a
    l1 = (d[:, 0] * v1[1] - d[:, 1] * v1[0]) / det
    l2 = (v0[0] * d[:, 1] - v0[1] * d[:, 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def locate(points, vertices, triangles, extrapolate: bool = True, eps: float = 1e-9):
    """Containing triangle and barycentric coordinates for every point.

    The first triangle (by index) containing a point wins. Points outside the
    mesh get the triangle they are least outside of when ``extrapolate`` is
    set, and triangle -1 otherwise.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    tri = np.full(n, -1, dtype=np.int64)
    bary = np.full((n, 3), np.nan)
    best = np.full(n, -np.inf)
    for k, t in enumerate(triangles):
        xy = vertices[t]
        lo, hi = xy.min(0) - eps, xy.max(0) + eps
        free = tri < 0
        cand = np.flatnonzero(free & (pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0]) & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1]))
        if len(cand):
            b = _barycentric(xy, pts[cand])
            inside = b.min(1) >= -eps
            tri[cand[inside]] = k
            bary[cand[inside]] = b[inside]
    if extrapolate and (tri < 0).any():
        out = np.flatnonzero(tri < 0)
        pick = np.full(len(out), -1)
        pick_b = np.full((len(out), 3), np.nan)
        for k, t in enumerate(triangles):
            b = _barycentric(vertices[t], pts[out])
            score = np.nan_to_num(b.min(1), nan=-np.inf)
            better = score > best[out]
            best[out[better]] = score[better]
            pick[better] = k
            pick_b[better] = b[better]
        tri[out] = pick
        bary[out] = pick_b
    return tri, bary


def build_control_mesh(part, pose: Pose, spacing: float = DEFAULT_SPACING, part_id: int | None = None,
                       pad: int = 0) -> ControlMesh:
    """Grid over the oriented bounding box of the part, Delaunay-triangulated.

    ``part`` is a CandidatePart or a boolean mask. With ``pad`` > 0 the mesh
    also carries the source foreground within ``pad`` px of the part, so
    parts cut from different poses overlap slightly instead of leaving seams
    where their superpixel borders disagree. Vertices farther than
    ``spacing * sqrt(2)`` from the mask are dropped (a grid cell holding a mask
    pixel can have corners that far away), and so are triangles whose three
    vertices lie off the mask unless they contain a mask pixel.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if isinstance(part, CandidatePart):
        mask, pid, src = part.pixel_mask, part.part_id, part.source_pose
    else:
        mask, pid, src = np.asarray(part, dtype=bool), 0, pose.pose_id
    if part_id is not None:
        pid = part_id
    if mask.shape != pose.shape:
        raise InputError("part mask and pose differ in shape")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    core = mask
    if pad > 0 and mask.any():
        mask = mask | (ndimage.binary_dilation(mask, disk(pad)) & pose.mask)
    rows, cols = np.nonzero(mask)
    if not len(rows):
        raise InputError("cannot build a mesh for an empty part")
    pix = np.stack([cols, rows], axis=1).astype(np.float64)
    axes = obb_axes(pix)
    center = pix.mean(0)
    proj = (pix - center) @ axes.T
    lo, hi = proj.min(0) - 1.0, proj.max(0) + 1.0
    grids = [np.linspace(lo[d], hi[d], max(int(np.ceil((hi[d] - lo[d]) / spacing)), 1) + 1) for d in range(2)]
    gu, gv = np.meshgrid(grids[0], grids[1], indexing="ij")
    verts = center + np.stack([gu.ravel(), gv.ravel()], axis=1) @ axes
    tree = cKDTree(pix)
    dist, _ = tree.query(verts)
    verts = verts[dist <= spacing * np.sqrt(2) + 1e-9]

    tris = None
    if len(verts) >= 3:
        try:
            tris = Delaunay(verts).simplices.astype(np.int64)
        except Exception:  # collinear vertices
            tris = None
    if tris is not None:
        tri_of, _ = locate(pix, verts, tris, extrapolate=False)
        holds = np.zeros(len(tris), dtype=bool)
        holds[tri_of[tri_of >= 0]] = True
        dist, _ = tree.query(verts)
        on = dist <= 0.5
        keep = holds | on[tris].any(axis=1)
        tris = tris[keep]
        used = np.unique(tris)
        if (tri_of < 0).any() or len(used) < 3:
            tris = None
        else:
            remap = np.full(len(verts), -1)
            remap[used] = np.arange(len(used))
            verts, tris = verts[used], remap[tris]
    if tris is None:
        x0, y0 = pix.min(0) - 0.5
        x1, y1 = pix.max(0) + 0.5
        verts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        tris = np.array([[0, 1, 2], [0, 2, 3]])
        axes = np.eye(2)
    tri_of, bary = locate(pix, verts, tris, extrapolate=True)
    return ControlMesh(
        rest_vertices=verts, triangles=tris, image=np.asarray(pose.image, dtype=np.float64),
        mask=mask.copy(), pixel_xy=pix, pixel_tri=tri_of, pixel_bary=bary, axes=axes,
        part_id=int(pid), source_pose=int(src), spacing=float(spacing), core=core.copy(),
    )


# -- ARAP -------------------------------------------------------------------------------


def _directed_edges(mesh: ControlMesh) -> tuple[np.ndarray, np.ndarray]:
    e = mesh.edges()
    return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])


def arap_energy(mesh: ControlMesh, vertices, rotations, targets, weights, lam: float = DEFAULT_LAMBDA) -> float:
    """Positional term plus ``lam`` times the rigidity term over directed 1-ring edges."""
    i, j = _directed_edges(mesh)
    rest = mesh.rest_vertices
    fit = float((weights * ((vertices - targets) ** 2).sum(1)).sum())
    e_rest = rest[i] - rest[j]
    e_cur = vertices[i] - vertices[j]
    rot = np.einsum("nab,nb->na", rotations[i], e_rest)
    return fit + lam * float(((e_cur - rot) ** 2).sum())


def _local_rotations(rest, cur, i, j, n):
    a = rest[i] - rest[j]
    b = cur[i] - cur[j]
    dot = np.bincount(i, weights=a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1], minlength=n)
    cross = np.bincount(i, weights=a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], minlength=n)
    theta = np.arctan2(cross, dot)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _anchor_components(mesh: ControlMesh, weights, targets, init):
    """Give each connected component without positional weight an anchor at its first vertex."""
    n = mesh.n_vertices
    e = mesh.edges()
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    ncomp, comp = sparse.csgraph.connected_components(adj, directed=False)
    w = weights.copy()
    g = targets.copy()
    for c in range(ncomp):
        members = np.flatnonzero(comp == c)
        if not (w[members] > 0).any():
            v = members[0]
            log.warning("mesh component without targets; anchoring vertex %d", v)
            w[v] = 1.0
            g[v] = init[v]
    return w, g


def rigid_fit(src, dst, weights=None):
    """Weighted best-fit rotation and translation, translation-only for a single point."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    keep = w > 0
    if keep.sum() == 0:
        return 0.0, np.zeros(2)
    if keep.sum() == 1:
        k = np.flatnonzero(keep)[0]
        return 0.0, dst[k] - src[k]
    return procrustes_2d(src[keep], dst[keep], w[keep])


def arap_solve(
    mesh: ControlMesh,
    targets,
    weights=None,
    lam: float = DEFAULT_LAMBDA,
    init=None,
    max_iter: int = MAX_ITERATIONS,
    tol: float = STOP_DISPLACEMENT,
) -> DeformState:
    """Alternate per-vertex best-fit rotations and a sparse global least-squares solve.

    Starts from ``init`` or, by default, the weighted rigid fit of the rest
    mesh to the targets. ``energy`` records the objective after every local
    step, which makes the sequence non-increasing.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    rest = mesh.rest_vertices
    n = len(rest)
    g = np.asarray(targets, dtype=np.float64).reshape(n, 2)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    if (w < 0).any():
        raise ValueError("target weights must be non-negative")
    if init is None:
        theta, t = rigid_fit(rest, g, w)
        cur = rest @ rotation_matrix(theta).T + t
    else:
        cur = np.asarray(init, dtype=np.float64).reshape(n, 2).copy()
    w, g = _anchor_components(mesh, w, g, cur)

    i, j = _directed_edges(mesh)
    m = len(i)
    # each directed edge adds (e_i - e_j)(e_i - e_j)^T to the normal matrix
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([np.ones(m), np.ones(m), -np.ones(m), -np.ones(m)]) * lam
    A = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc() + sparse.diags(w).tocsc()
    solver = splu(A.tocsc())
    e_rest = rest[i] - rest[j]

    rots = _local_rotations(rest, cur, i, j, n)
    state = DeformState(cur, rots, [arap_energy(mesh, cur, rots, g, w, lam)], 0)
    for it in range(1, max_iter + 1):
        r_e = np.einsum("nab,nb->na", rots[i], e_rest) * lam
        b = w[:, None] * g
        b += np.stack([np.bincount(i, weights=r_e[:, d], minlength=n) - np.bincount(j, weights=r_e[:, d], minlength=n)
                       for d in range(2)], axis=1)
        new = np.stack([solver.solve(b[:, 0]), solver.solve(b[:, 1])], axis=1)
        moved = float(np.abs(new - cur).max())
        cur = new
        rots = _local_rotations(rest, cur, i, j, n)
        state.energy.append(arap_energy(mesh, cur, rots, g, w, lam))
        state.iterations = it
        if moved < tol:
            break
    state.vertices, state.rotations = cur, rots
    return state


# -- rendering ---------------------------------------------------------------------------


def _bilinear(arr, x, y):
    """Bilinear samples of a 2D array (zero outside) at float coordinates."""
    return ndimage.map_coordinates(arr, [y, x], order=1, mode="constant", cval=0.0)


def warp_to(mesh_rest, mesh_def, triangles, shape):
    """For every pixel inside the deformed mesh, its position in the rest frame.

    Returns ``(rows, cols, rest_xy)``.
    """
    h, w = shape
    claimed = np.zeros(shape, dtype=bool)
    out_r, out_c, out_xy = [], [], []
    for t in triangles:
        d = mesh_def[t]
        x0, y0 = np.maximum(np.floor(d.min(0)).astype(int), 0)
        x1, y1 = np.minimum(np.ceil(d.max(0)).astype(int), [w - 1, h - 1])
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        free = ~claimed[y0:y1 + 1, x0:x1 + 1]
        pts = np.stack([xx[free], yy[free]], axis=1).astype(np.float64)
        if not len(pts):
            continue
        b = _barycentric(d, pts)
        inside = np.nan_to_num(b.min(1), nan=-1.0) >= -1e-9
        if not inside.any():
            continue
        rr, cc = pts[inside, 1].astype(int), pts[inside, 0].astype(int)
        claimed[rr, cc] = True
        out_r.append(rr)
        out_c.append(cc)
        out_xy.append(b[inside] @ mesh_rest[t])
    if not out_r:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2))
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_xy)


def deformed_pixels(mesh: ControlMesh, vertices) -> np.ndarray:
    """Positions of the mesh's pixels (``pixel_xy``) under the deformed vertices."""
    v = np.asarray(vertices, dtype=np.float64)
    return np.einsum("nk,nkd->nd", mesh.pixel_bary, v[mesh.triangles[mesh.pixel_tri]])


def render_part(mesh: ControlMesh, vertices, shape, with_core: bool = False, trusted=None):
    """Render a deformed part; returns ``(color (H, W, 3) float, coverage (H, W) bool)``.

    Colors are bilinear samples of the source normalized over the mesh's
    pixels, and a pixel is covered when the bilinear mask reaches 0.5. With
    ``with_core`` the coverage of the unpadded part is returned as well, and
    with a ``trusted`` source mask also the coverage of those pixels.
    """
    rr, cc, xy = warp_to(mesh.rest_vertices, np.asarray(vertices, dtype=np.float64), mesh.triangles, shape)
    color = np.zeros((*shape, 3))
    layers = [np.zeros(shape, dtype=bool) for _ in range(3)]
    if len(rr):
        m = mesh.mask.astype(np.float64)
        mm = _bilinear(m, xy[:, 0], xy[:, 1])
        ok = mm >= 0.5
        num = np.stack([_bilinear(mesh.image[..., ch] * m, xy[:, 0], xy[:, 1]) for ch in range(3)], axis=1)
        color[rr[ok], cc[ok]] = num[ok] / mm[ok, None]
        layers[0][rr[ok], cc[ok]] = True
        for k, src in ((1, mesh.core if with_core else None), (2, trusted)):
            if src is not None:
                hit = ok & (_bilinear(np.asarray(src, dtype=np.float64), xy[:, 0], xy[:, 1]) >= 0.5)
                layers[k][rr[hit], cc[hit]] = True
    if trusted is not None:
        return color, *layers
    return (color, layers[0], layers[1]) if with_core else (color, layers[0])


# -- reconstruction ----------------------------------------------------------------------


@dataclass
class Reconstruction:
    image: np.ndarray  # (H, W, 3) uint8
    coverage: np.ndarray  # (H, W) bool
    mse: float
    psnr: float | str
    states: dict = field(default_factory=dict)  # part id -> DeformState
    rigid: dict = field(default_factory=dict)  # part id -> (theta, t)


def vertex_targets(mesh: ControlMesh, src, dst, theta: float, t, radius: float | None = None,
                   gate: float | None = None):
    """Per-vertex targets and weights from the part's correspondences.

    Every match x -> x' within ``radius`` of a vertex v votes for
    ``x' + R (v - x)`` (R the part's rigid rotation), so a vertex away from
    the mean of its matches still gets an unbiased target; with R = I this is
    the mean matched position shifted by the vertex offset. The weight is the
    vote count. Matches straying more than ``gate`` px (default
    ``OUTLIER_GATE * radius``) from the rigid prediction are ignored.
    """
    radius = mesh.spacing if radius is None else radius
    gate = OUTLIER_GATE * radius if gate is None else gate
    r = rotation_matrix(theta)
    n = mesh.n_vertices
    tg = np.zeros((n, 2))
    wt = np.zeros(n)
    if not len(src):
        return tg, wt
    ok = np.linalg.norm(dst - (src @ r.T + t), axis=1) <= gate
    src, dst = src[ok], dst[ok]
    if not len(src):
        return tg, wt
    votes = dst - src @ r.T  # per-match translation
    tree = cKDTree(src)
    for k, v in enumerate(mesh.rest_vertices):
        near = tree.query_ball_point(v, radius)
        if not near:
            continue
        tg[k] = r @ v + votes[near].mean(0)
        wt[k] = len(near)
    return tg, wt


def _part_matches(mesh: ControlMesh, corr: CorrespondenceMap):
    return corr.pairs(mesh.core)


def _initial_rigid(src, dst, seed):
    if len(src) < 2:
        return None
    fit = ransac_rigid(src, dst, INIT_RANSAC, np.random.default_rng(seed))
    if fit is None:
        return procrustes_2d(src, dst)
    return fit[0], fit[1]


def _refine(mesh, state, target: Pose, lam, iterations=REFINE_ITERATIONS, h=0.25):
    """Finite-difference descent on the photometric error of this part plus the rigidity term."""
    shape = target.shape
    _, cov0 = render_part(mesh, state.vertices, shape)
    region = ndimage.binary_dilation(cov0, iterations=max(int(mesh.spacing), 1)) & (target.mask | cov0)
    tgt = target.image.astype(np.float64)
    i, j = _directed_edges(mesh)
    e_rest = mesh.rest_vertices[i] - mesh.rest_vertices[j]

    def objective(v):
        col, cov = render_part(mesh, v, shape)
        img = np.where(cov[..., None], col, 0.0)
        photo = float(((img[region] - tgt[region]) ** 2).mean(axis=1).sum())
        rots = _local_rotations(mesh.rest_vertices, v, i, j, len(v))
        rig = float(((v[i] - v[j] - np.einsum("nab,nb->na", rots[i], e_rest)) ** 2).sum())
        return photo + lam * rig

    v = state.vertices.copy()
    cur = objective(v)
    for _ in range(iterations):
        grad = np.zeros_like(v)
        for k in range(len(v)):
            for d in range(2):
                vp, vm = v.copy(), v.copy()
                vp[k, d] += h
                vm[k, d] -= h
                grad[k, d] = (objective(vp) - objective(vm)) / (2 * h)
        gmax = np.abs(grad).max()
        if gmax == 0:
            break
        step = 1.0 / gmax
        improved = False
        for _ in range(6):
            cand = v - step * grad
            val = objective(cand)
            if val < cur:
                v, cur, improved = cand, val, True
                break
            step /= 2
        if not improved:
            break
    return DeformState(v, _local_rotations(mesh.rest_vertices, v, i, j, len(v)), state.energy, state.iterations)


def deform_part(part, mesh: ControlMesh, target: Pose, corr: CorrespondenceMap | None,
                mode: str = "corr_guided", lam: float = DEFAULT_LAMBDA, seed=0):
    """Deform one part's mesh into ``target``; returns ``(DeformState, (theta, t))``.

    ``corr`` maps the part's source pose into the target and may be None when
    the part already lives in the target pose. A part without usable matches
    stays rigid under the best fit of every correspondence of its source pose.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, not {mode!r}")
    seed_key = list(np.atleast_1d(seed).astype(np.int64))
    if part.source_pose == target.pose_id:
        src = mesh.pixel_xy
        dst = src.copy()
    else:
        if corr is None:
            raise InputError(f"no correspondences from pose {part.source_pose} to pose {target.pose_id}")
        src, dst = _part_matches(mesh, corr)
    fit = _initial_rigid(src, dst, seed_key + [part.part_id, target.pose_id])
    if fit is None:
        log.warning("part %d has no correspondences into pose %d; using the global rigid fit",
                    part.part_id, target.pose_id)
        gs, gd = corr.pairs() if corr is not None else (src, dst)
        theta, t = procrustes_2d(gs, gd) if len(gs) >= 2 else (0.0, np.zeros(2))
        v = mesh.rest_vertices @ rotation_matrix(theta).T + t
        state = DeformState(v, np.tile(rotation_matrix(theta), (mesh.n_vertices, 1, 1)), [], 0)
        return state, (float(theta), np.asarray(t, dtype=np.float64))
    theta, t = fit
    tg, wt = vertex_targets(mesh, src, dst, theta, t)
    init = mesh.rest_vertices @ rotation_matrix(theta).T + t
    state = arap_solve(mesh, tg, wt, lam=lam, init=init)
    if mode == "render_refined":
        state = _refine(mesh, state, target, lam)
    return state, (float(theta), np.asarray(t, dtype=np.float64))


def reconstruct_pose(
    parts,
    meshes: dict,
    target: Pose,
    corrs: dict,
    mode: str = "corr_guided",
    lam: float = DEFAULT_LAMBDA,
    seed=0,
) -> Reconstruction:
    """Deform every part into ``target`` and composite, largest part first.

    ``meshes`` maps part id to ControlMesh and ``corrs`` maps a source pose id
    to its CorrespondenceMap into the target (no entry is needed for parts
    that already live in the target pose).
    """
    states, rigid = {}, {}
    for part in parts:
        st, rt = deform_part(part, meshes[part.part_id], target, corrs.get(part.source_pose), mode, lam, seed)
        states[part.part_id] = st
        rigid[part.part_id] = rt
    image, coverage = composite(parts, meshes, states, target.shape)
    mse, psnr = image_metrics(image, target, coverage)
    return Reconstruction(image, coverage, mse, psnr, states, rigid)


def paint_order(parts) -> list:
    """Descending area, ties by part id; later entries are painted over earlier ones."""
    return sorted(parts, key=lambda p: (-p.area, p.part_id))


def composite(parts, meshes, states, shape, renders=None):
    """Paint deformed parts in ``paint_order``.

    ``renders`` optionally maps part id to a precomputed ``(color, coverage)``.
    """
    out = np.zeros((*shape, 3))
    coverage = np.zeros(shape, dtype=bool)
    for part in paint_order(parts):
        if renders is not None and part.part_id in renders:
            col, cov = renders[part.part_id]
        else:
            col, cov = render_part(meshes[part.part_id], states[part.part_id].vertices, shape)
        out[cov] = col[cov]
        coverage |= cov
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), coverage


# -- non-rigid jitter --------------------------------------------------------------------


def jitter_offsets(n: int, shape, sigma_frac: float = JITTER_SIGMA_FRAC, rng=None) -> np.ndarray:
    """``(n, 2)`` i.i.d. Gaussian offsets with sigma = ``sigma_frac * max(H, W)``."""
    if sigma_frac < 0:
        raise ValueError("sigma_frac must be >= 0")
    rng = np.random.default_rng(rng)
    return rng.normal(0.0, sigma_frac * max(shape), size=(n, 2))


def _signed_areas(v, tris):
    a, b, c = v[tris[:, 0]], v[tris[:, 1]], v[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


@dataclass
class JitterWarp:
    """Piecewise-affine map between an undeformed pose and its jittered version."""

    rest: np.ndarray  # (V, 2)
    deformed: np.ndarray  # (V, 2)
    triangles: np.ndarray  # (T, 3)

    def forward(self, pts, part=None) -> np.ndarray:
        """Undeformed coordinates -> jittered coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        tri, bary = locate(pts, self.rest, self.triangles)
        return np.einsum("nk,nkd->nd", bary, self.deformed[self.triangles[tri]])

    def backward(self, pts, part=None) -> np.ndarray:
        """Jittered coordinates -> undeformed coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        tri, bary = locate(pts, self.deformed, self.triangles)
        return np.einsum("nk,nkd->nd", bary, self.rest[self.triangles[tri]])


def _jitter(pose: Pose, labels: np.ndarray, sigma_frac, rng, spacing=DEFAULT_SPACING, lam=DEFAULT_LAMBDA):
    """Jitter one pose with a single mesh over the whole foreground.

    Returns ``(pose, labels, warp)``. The ARAP result is pulled back toward
    the rest mesh by halving until no triangle flips or collapses, so the
    warp stays one-to-one.
    """
    mesh = build_control_mesh(pose.mask, pose, spacing)
    rest = mesh.rest_vertices
    offsets = jitter_offsets(len(rest), pose.shape, sigma_frac, rng)
    if sigma_frac == 0:
        return Pose(pose.image.copy(), pose.mask.copy(), pose.pose_id), labels.copy(), JitterWarp(rest, rest.copy(), mesh.triangles)
    st = arap_solve(mesh, rest + offsets, np.ones(len(rest)), lam=lam, init=rest)
    area0 = _signed_areas(rest, mesh.triangles)
    disp = st.vertices - rest
    for _ in range(20):
        v = rest + disp
        area = _signed_areas(v, mesh.triangles)
        if (np.sign(area) == np.sign(area0)).all() and (np.abs(area) >= 0.2 * np.abs(area0)).all():
            break
        disp = disp / 2
    else:
        v = rest
    warp = JitterWarp(rest, v, mesh.triangles)

    shape = pose.shape
    rr, cc, xy = warp_to(rest, v, mesh.triangles, shape)
    m = pose.mask.astype(np.float64)
    mm = _bilinear(m, xy[:, 0], xy[:, 1])
    ok = mm >= 0.5
    rr, cc, xy, mm = rr[ok], cc[ok], xy[ok], mm[ok]
    img = pose.image.astype(np.float64)
    num = np.stack([_bilinear(img[..., ch] * m, xy[:, 0], xy[:, 1]) for ch in range(3)], axis=1)
    out = np.zeros_like(img)
    out[rr, cc] = num / mm[:, None]
    # label from the foreground neighbor with the largest bilinear weight
    x0 = np.floor(xy[:, 0]).astype(int)
    y0 = np.floor(xy[:, 1]).astype(int)
    fx, fy = xy[:, 0] - x0, xy[:, 1] - y0
    h, w = shape
    best_w = np.full(len(rr), -1.0)
    lab = np.zeros(len(rr), dtype=labels.dtype)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xs = np.clip(x0 + dx, 0, w - 1)
        ys = np.clip(y0 + dy, 0, h - 1)
        cand = labels[ys, xs]
        better = (cand > 0) & (wt > best_w)
        lab[better] = cand[better]
        best_w[better] = wt[better]
    new_labels = np.zeros_like(labels)
    new_labels[rr, cc] = lab
    image = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return Pose(image, new_labels > 0, pose.pose_id), new_labels, warp


def jitter_augment(pose: Pose, gt_parts: LabelMap, sigma_frac: float = JITTER_SIGMA_FRAC, seed=0) -> Pose:
    """Non-rigidly perturb a pose: Gaussian vertex offsets followed by an ARAP solve and re-render."""
    out, _, _ = _jitter(pose, np.asarray(gt_parts.labels), sigma_frac, np.random.default_rng(seed))
    return out


def jitter_labels(pose: Pose, gt_parts: LabelMap, sigma_frac: float = JITTER_SIGMA_FRAC, seed=0):
    """Like :func:`jitter_augment` but also returns the warped LabelMap and the warp itself."""
    out, labels, warp = _jitter(pose, np.asarray(gt_parts.labels), sigma_frac, np.random.default_rng(seed))
    return out, LabelMap(labels, dict(gt_parts.legend)), warp


def jitter_ground_truth(gt, rig=None, seed=0, sigma_frac: float = JITTER_SIGMA_FRAC):
    """Jitter a synthetic ground-truth pose in place; correspondences then go through ``gt.deform``."""
    pose, labels, warp = jitter_labels(gt.pose, gt.part_labels, sigma_frac, seed)
    gt.pose = pose
    gt.part_labels = labels
    gt.deform = warp
    return gt
