"""Marching-cubes surface extraction and per-vertex running-average colouring."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyVolume, InputError, NoFrames
from .geometry import project_points
from .mc_table import CORNERS, EDGES, case_table

# samples sitting exactly on the iso value are nudged below it so that no
# interpolated vertex collapses onto a lattice corner
ISO_NUDGE = 1e-6
UNOBSERVED_COLOR = (0.5, 0.5, 0.5)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray = None
    observation_count: np.ndarray = None
    edge_keys: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.colors is None:
            self.colors = np.tile(UNOBSERVED_COLOR, (n, 1))
        if self.observation_count is None:
            self.observation_count = np.zeros(n, dtype=np.int64)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise InputError("triangle index out of range")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def corners(self):
        return self.vertices[self.triangles]

    def centroids(self):
        return self.corners().mean(axis=1)

    def face_normals(self, unit=True):
        p = self.corners()
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if unit:
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return n

    def triangle_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def area(self):
        return float(self.triangle_areas().sum())

    def edge_incidence(self):
        """Map of undirected edge -> number of incident triangles (as two arrays)."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        edges, counts = np.unique(e, axis=0, return_counts=True)
        return edges, counts

    def is_watertight(self):
        _, counts = self.edge_incidence()
        return bool(len(counts)) and bool(np.all(counts == 2))

    def fingerprint(self):
        return hash((self.vertices.tobytes(), self.triangles.tobytes(), self.colors.tobytes()))


def _values_for_extraction(prob, iso):
    v = np.array(prob, dtype=float)
    v[v == iso] = iso - ISO_NUDGE
    return v


def _march_block(values, base, grid_dims, origin, voxel_size, iso, cube_lo, cube_hi):
    """Triangles for cubes whose min sample lies in ``[cube_lo, cube_hi)`` (block-local)."""
    tri_table, counts = case_table()
    v = values
    idx = np.zeros(tuple(np.array(v.shape) - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        sl = tuple(slice(o, o + s) for o, s in zip((dx, dy, dz), idx.shape))
        idx |= (v[sl] > iso).astype(np.int64) << c
    region = tuple(slice(a, b) for a, b in zip(cube_lo, cube_hi))
    sub = idx[region]
    cube_pos = np.argwhere((counts[sub] > 0))
    if len(cube_pos) == 0:
        return np.empty((0,), np.int64), np.empty((0, 3)), np.empty((0, 3), np.int64)
    cube_pos += np.asarray(cube_lo)
    cases = idx[tuple(cube_pos.T)]
    n_tri = counts[cases]
    cube_rep = np.repeat(np.arange(len(cases)), n_tri)
    slot = np.arange(len(cube_rep)) - np.repeat(np.cumsum(n_tri) - n_tri, n_tri)
    tri_edges = tri_table[cases[cube_rep], slot]  # (T, 3) cube-edge ids
    ca = CORNERS[EDGES[tri_edges, 0]]  # (T, 3, 3) corner offsets
    cb = CORNERS[EDGES[tri_edges, 1]]
    pa = cube_pos[cube_rep][:, None, :] + ca  # block-local sample indices
    pb = cube_pos[cube_rep][:, None, :] + cb
    va = v[pa[..., 0], pa[..., 1], pa[..., 2]]
    vb = v[pb[..., 0], pb[..., 1], pb[..., 2]]
    ga = pa + base
    gb = pb + base
    lo = np.minimum(ga, gb)
    axis = np.argmax(gb != ga, axis=-1)
    gx, gy, gz = grid_dims
    keys = ((lo[..., 0] * gy + lo[..., 1]) * gz + lo[..., 2]) * 3 + axis
    # interpolate from the lower sample so shared edges give bit-identical positions
    swap = ga.sum(-1) > gb.sum(-1)
    v_lo = np.where(swap, vb, va)
    v_hi = np.where(swap, va, vb)
    t_lo = (iso - v_lo) / (v_hi - v_lo)
    step = np.zeros(lo.shape)
    np.put_along_axis(step, axis[..., None], 1.0, axis=-1)
    pos = origin + (lo + 0.5 + t_lo[..., None] * step) * voxel_size
    return keys.ravel(), pos.reshape(-1, 3), np.arange(len(keys.ravel())).reshape(-1, 3)


def extract_isosurface(grid, iso=0.5):
    """Marching cubes over occupancy probabilities sampled at voxel centres.

    Sub-volumes are processed one at a time with a one-voxel overlap band;
    vertices on shared lattice edges are merged by edge identity, which is
    equivalent to exact-position merging because both sides interpolate the
    same two samples.
    """
    e = grid.sub_volume_edge
    dims = np.array(grid.dims)
    all_keys, all_pos, all_tris = [], [], []
    offset = 0
    for pi in range(grid.page_dims[0]):
        for pj in range(grid.page_dims[1]):
            for pk in range(grid.page_dims[2]):
                base = np.array([pi, pj, pk]) * e
                hi = np.minimum(base + e + 1, dims)
                logodds = grid.read_block(base, hi)
                if not logodds.any():
                    continue
                prob = _values_for_extraction(1.0 / (1.0 + np.exp(-logodds)), iso)
                cube_hi = np.minimum(np.full(3, e), np.array(prob.shape) - 1)
                keys, pos, tris = _march_block(prob, base, dims, grid.origin, grid.voxel_size, iso, (0, 0, 0), cube_hi)
                if len(keys):
                    all_keys.append(keys)
                    all_pos.append(pos)
                    all_tris.append(tris + offset)
                    offset += len(keys)
    if not all_keys:
        raise EmptyVolume("no iso crossing in the grid")
    return _assemble(np.concatenate(all_keys), np.concatenate(all_pos), np.concatenate(all_tris))


def extract_from_array(prob, origin, voxel_size, iso=0.5):
    """Marching cubes on a dense probability array (no paging)."""
    prob = _values_for_extraction(prob, iso)
    keys, pos, tris = _march_block(prob, np.zeros(3, np.int64), np.array(prob.shape), np.asarray(origin, float),
                                   float(voxel_size), iso, (0, 0, 0), np.array(prob.shape) - 1)
    if len(keys) == 0:
        raise EmptyVolume("no iso crossing in the array")
    return _assemble(keys, pos, tris)


def _assemble(keys, pos, tris):
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    vertices = pos[first]
    triangles = inverse[tris]
    mesh = TriangleMesh(vertices, triangles, edge_keys=uniq)
    keep = mesh.triangle_areas() > 1e-12
    if not keep.all():
        mesh = TriangleMesh(vertices, triangles[keep], edge_keys=uniq)
    # canonical triangle order: independent of page traversal
    order = np.lexsort(np.sort(mesh.triangles, axis=1).T[::-1])
    mesh.triangles = mesh.triangles[order]
    return mesh


def _bilinear(image, uv):
    h, w = image.shape[:2]
    u = np.clip(uv[:, 0], 0, w - 1)
    v = np.clip(uv[:, 1], 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(np.int64), w - 2)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    img = image.reshape(h, w, -1)
    return ((1 - du) * (1 - dv) * img[v0, u0] + du * (1 - dv) * img[v0, u0 + 1]
            + (1 - du) * dv * img[v0 + 1, u0] + du * dv * img[v0 + 1, u0 + 1])


def colorize_mesh(mesh, frames, k, tree=None, occlusion_tolerance=None):
    """Running-average vertex colours over every frame that sees the vertex.

    ``frames`` is a sequence of ``(rgb image in [0,1] or uint8, Pose6D)`` or
    ``(image, pose, depth)``. A vertex counts as seen when it projects inside
    the image in front of the camera and is not occluded: with a depth image
    its depth must agree with the measured depth within
    ``occlusion_tolerance``; otherwise the ray from the camera centre must
    first meet the mesh within that distance of the vertex. The tolerance
    defaults to 1.5 median edge lengths. ``tree=False`` skips the ray test.
    """
    frames = list(frames)
    if not frames:
        raise NoFrames("colorize_mesh needs at least one frame")
    if tree is None and any(len(f) < 3 or f[2] is None for f in frames):
        from .gaze import build_obb_tree

        tree = build_obb_tree(mesh)
    if occlusion_tolerance is None:
        occlusion_tolerance = 1.5 * _edge_scale(mesh)
    colors = mesh.colors.copy()
    count = mesh.observation_count.copy()
    for frame in frames:
        image, pose = frame[0], frame[1]
        depth = frame[2] if len(frame) > 2 else None
        image = np.asarray(image)
        if image.shape[:2] != k.shape:
            raise InputError(f"image shape {image.shape[:2]} does not match intrinsics {k.shape}")
        img = image.astype(float) / 255.0 if image.dtype == np.uint8 else image.astype(float)
        uv, z = project_points(mesh.vertices, pose, k)
        seen = (z > 0) & k.contains(uv)
        idx = np.flatnonzero(seen)
        if depth is not None and len(idx):
            px = np.clip(np.round(uv[idx]).astype(np.int64), 0, [k.width - 1, k.height - 1])
            measured = np.asarray(depth, float)[px[:, 1], px[:, 0]]
            idx = idx[(measured > 0) & (np.abs(measured - z[idx]) < occlusion_tolerance)]
        elif tree is not False and len(idx):
            from .gaze import first_hit_distances

            c = pose.center
            diff = mesh.vertices[idx] - c
            dist = np.linalg.norm(diff, axis=1)
            hit = first_hit_distances(tree, np.broadcast_to(c, diff.shape), diff / dist[:, None])
            idx = idx[np.abs(hit - dist) < occlusion_tolerance]
        if len(idx) == 0:
            continue
        observed = _bilinear(img, uv[idx])[:, :3]
        n = count[idx][:, None].astype(float)
        colors[idx] = (n * colors[idx] + observed) / (n + 1.0)
        count[idx] += 1
    return TriangleMesh(mesh.vertices, mesh.triangles, colors, count, mesh.edge_keys)


def _edge_scale(mesh):
    p = mesh.corners()
    return float(np.median(np.linalg.norm(p[:, 1] - p[:, 0], axis=1))) if len(p) else 0.0


# --- PLY -------------------------------------------------------------------

def write_ply(path, mesh, ascii=False, vertex_colors=None, comments=()):
    """Little-endian binary (or ASCII) PLY with double xyz and uint8 rgb."""
    path = Path(path)
    rgb = mesh.colors if vertex_colors is None else vertex_colors
    rgb8 = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    fmt = "ascii" if ascii else "binary_little_endian"
    header = ["ply", f"format {fmt} 1.0"]
    header += [f"comment {c}" for c in comments]
    header += [
        f"element vertex {mesh.n_vertices}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii:
            lines = [f"{x!r} {y!r} {z!r} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), rgb8.tolist())]
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
        else:
            vdt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
            vert = np.empty(mesh.n_vertices, dtype=vdt)
            vert["x"], vert["y"], vert["z"] = mesh.vertices.T
            vert["r"], vert["g"], vert["b"] = rgb8.T
            fh.write(vert.tobytes())
            fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
            face = np.empty(mesh.n_triangles, dtype=fdt)
            face["n"] = 3
            face["i"] = mesh.triangles
            fh.write(face.tobytes())


def write_mesh(path, mesh, ascii=False):
    """PLY plus a sidecar CSV of per-vertex observation counts."""
    path = Path(path)
    counts_path = path.with_suffix(".counts.csv")
    write_ply(path, mesh, ascii=ascii, comments=[f"observation_counts {counts_path.name}"])
    lines = ["vertex_id,observation_count"] + [f"{i},{c}" for i, c in enumerate(mesh.observation_count.tolist())]
    counts_path.write_text("\n".join(lines) + "\n")


def read_ply(path):
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    fmt = next(l.split()[1] for l in header if l.startswith("format"))
    nv = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    nf = next(int(l.split()[2]) for l in header if l.startswith("element face"))
    comments = [l[len("comment "):] for l in header if l.startswith("comment ")]
    if fmt == "ascii":
        rows = data[end:].decode("ascii").split("\n")
        vrows = np.array([r.split() for r in rows[:nv]], dtype=float).reshape(nv, 6)
        frows = np.array([r.split() for r in rows[nv:nv + nf]], dtype=np.int64).reshape(nf, 4)
        verts, rgb, tris = vrows[:, :3], vrows[:, 3:], frows[:, 1:]
    else:
        vdt = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
        vert = np.frombuffer(data, dtype=vdt, count=nv, offset=end)
        fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
        face = np.frombuffer(data, dtype=fdt, count=nf, offset=end + nv * vdt.itemsize)
        verts = np.stack([vert["x"], vert["y"], vert["z"]], axis=1)
        rgb = np.stack([vert["r"], vert["g"], vert["b"]], axis=1).astype(float)
        tris = face["i"].astype(np.int64)
    mesh = TriangleMesh(verts, tris, rgb / 255.0)
    counts_ref = next((c.split(" ", 1)[1] for c in comments if c.startswith("observation_counts ")), None)
    if counts_ref:
        cpath = Path(path).with_name(counts_ref)
        if cpath.exists():
            rows = cpath.read_text().splitlines()[1:]
            mesh.observation_count = np.array([int(r.split(",")[1]) for r in rows], dtype=np.int64)
    return mesh


read_mesh = read_ply
