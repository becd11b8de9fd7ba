"""Marching-cubes case table.

The table is generated from face rules rather than typed in: on every cube
face the iso-crossings are paired so that inside corners are separated on
ambiguous faces, which depends only on that face's four samples. Adjacent
cubes therefore agree on every shared face and the extracted surface has no
cracks. Segments are chained into loops and fan-triangulated.

``python -m attention3d.mc_table`` regenerates ``data/mc_cases.json``.
"""

import json
from functools import lru_cache
from pathlib import Path

import numpy as np

CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64
)
EDGES = np.array(
    [[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4], [0, 4], [1, 5], [2, 6], [3, 7]], dtype=np.int64
)
DATA_FILE = Path(__file__).with_name("data") / "mc_cases.json"


def _face_cycles():
    """Corner cycles of the six faces, counter-clockwise seen from outside."""
    cycles = []
    for axis in range(3):
        for side in (0, 1):
            corners = [c for c in range(8) if CORNERS[c, axis] == side]
            centre = CORNERS[corners].mean(axis=0)
            u, v = [a for a in range(3) if a != axis]
            ang = [np.arctan2(CORNERS[c, v] - centre[v], CORNERS[c, u] - centre[u]) for c in corners]
            cyc = [corners[i] for i in np.argsort(ang)]
            p = CORNERS[cyc].astype(float)
            normal = np.cross(p[1] - p[0], p[2] - p[1])
            outward = np.zeros(3)
            outward[axis] = 1.0 if side else -1.0
            if normal @ outward < 0:
                cyc = cyc[::-1]
            cycles.append(cyc)
    return cycles


def _edge_index(a, b):
    for i, (p, q) in enumerate(EDGES):
        if {p, q} == {a, b}:
            return i
    raise KeyError((a, b))


def _edge_faces(e):
    a, b = CORNERS[EDGES[e, 0]], CORNERS[EDGES[e, 1]]
    return {(axis, int(a[axis])) for axis in range(3) if a[axis] == b[axis]}


def _on_face(edges):
    return bool(set.intersection(*(_edge_faces(e) for e in edges)))


def _triangulate(loop):
    """Triangulate a crossing loop so that no triangle and no interior
    diagonal lies in a cube face; such pieces would coincide with the
    neighbouring cube's and break the edge-manifold property."""
    n = len(loop)
    for r in range(n):  # plain fans first, they are what most cases need
        p = loop[r:] + loop[:r]
        tris = [[p[0], p[i], p[i + 1]] for i in range(1, n - 1)]
        diags = [(p[0], p[i]) for i in range(2, n - 1)]
        if not any(_on_face(t) for t in tris) and not any(_on_face(d) for d in diags):
            return tris
    out = _split(loop)
    if out is None:
        raise RuntimeError(f"no face-free triangulation for loop {loop}")
    return out


def _split(poly):
    if len(poly) == 3:
        return None if _on_face(poly) else [list(poly)]
    for k in range(1, len(poly) - 1):
        t = [poly[0], poly[k], poly[-1]]
        diags = [d for d in ((poly[0], poly[k]) if k >= 2 else None, (poly[k], poly[-1]) if k <= len(poly) - 3 else None) if d]
        if _on_face(t) or any(_on_face(d) for d in diags):
            continue
        left = _split(poly[:k + 1]) if k >= 2 else []
        right = _split(poly[k:]) if k <= len(poly) - 3 else []
        if left is not None and right is not None:
            return left + [t] + right
    return None


def build_case_table():
    """List of 256 entries, each a list of triangles given as cube-edge triples."""
    cycles = _face_cycles()
    table = []
    for case in range(256):
        inside = [(case >> c) & 1 == 1 for c in range(8)]
        nxt = {}
        for cyc in cycles:
            n = len(cyc)
            kinds = []  # per cycle edge i (cyc[i] -> cyc[i+1]): +1 in->out, -1 out->in, 0 none
            for i in range(n):
                a, b = inside[cyc[i]], inside[cyc[(i + 1) % n]]
                kinds.append(1 if a and not b else (-1 if b and not a else 0))
            for i in range(n):
                if kinds[i] != 1:
                    continue
                j = (i - 1) % n
                while kinds[j] != -1:
                    j = (j - 1) % n
                src = _edge_index(cyc[i], cyc[(i + 1) % n])
                dst = _edge_index(cyc[j], cyc[(j + 1) % n])
                nxt[src] = dst
        tris = []
        seen = set()
        for start in sorted(nxt):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            e = nxt[start]
            while e != start:
                loop.append(e)
                seen.add(e)
                e = nxt[e]
            tris += _triangulate(loop)
        table.append(tris)
    return _orient(table)


def _orient(table):
    # flip globally so normals point from inside (value > iso) towards outside
    tri = table[1][0]
    mid = (CORNERS[EDGES[:, 0]] + CORNERS[EDGES[:, 1]]) / 2.0
    p = mid[tri]
    normal = np.cross(p[1] - p[0], p[2] - p[0])
    if normal @ (p.mean(axis=0) - CORNERS[0]) < 0:
        table = [[[t[0], t[2], t[1]] for t in tris] for tris in table]
    return table


@lru_cache(maxsize=1)
def case_table():
    """``(tri_edges, n_tris)``: padded int array (256, max_tris, 3) and counts."""
    cases = json.loads(DATA_FILE.read_text())["cases"]
    width = max(len(c) for c in cases)
    out = np.full((256, width, 3), -1, dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for i, tris in enumerate(cases):
        counts[i] = len(tris)
        if tris:
            out[i, : len(tris)] = tris
    return out, counts


def main():
    DATA_FILE.parent.mkdir(exist_ok=True)
    payload = {
        "corner_offsets": CORNERS.tolist(),
        "edges": EDGES.tolist(),
        "face_rule": "inside corners separated on ambiguous faces",
        "cases": build_case_table(),
    }
    DATA_FILE.write_text(json.dumps(payload, indent=0) + "\n")


if __name__ == "__main__":
    main()
