"""Conforming 2D simplicial meshes with oriented faces and refinement.

Triangles are stored counterclockwise and normalized so that the refinement
edge (for newest-vertex bisection) is the edge between the first two vertices;
the third vertex is the newest vertex.  Faces are stored once, globally, with
vertex pairs sorted ascending; the face normal is the outward normal of the
adjacent cell with the lower index (the "plus" cell).  Meshes are immutable:
refinement returns a new mesh carrying a ``parent`` map into the old one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "BoundarySpec",
    "Face",
    "Mesh",
    "all_dirichlet",
    "boundary_from_segments",
    "initial_lshape",
    "initial_square",
    "refine",
    "save_mesh",
    "load_mesh",
]

_GEOM_TOL = 1e-14


@dataclass(frozen=True)
class BoundarySpec:
    """Total classification of boundary edges by their midpoints.

    ``classify`` maps an (n, 2) array of boundary-edge midpoints to a boolean
    array, True where the edge is Dirichlet (the rest is Neumann).
    """

    classify: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"


def all_dirichlet() -> BoundarySpec:
    return BoundarySpec(lambda pts: np.ones(len(pts), dtype=bool),
                        "dirichlet-all")


def boundary_from_segments(segments: Sequence[tuple], name: str = "segments",
                           tol: float = 1e-10) -> BoundarySpec:
    """Dirichlet where the midpoint lies on one of the given segments.

    Each segment is ((ax, ay), (bx, by)).
    """
    segs = [(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
            for a, b in segments]

    def classify(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(len(pts), dtype=bool)
        for a, b in segs:
            d = b - a
            ll = float(d @ d)
            t = (pts - a) @ d / ll
            off = np.abs((pts[:, 0] - a[0]) * d[1]
                         - (pts[:, 1] - a[1]) * d[0]) / np.sqrt(ll)
            out |= (off <= tol) & (t >= -tol) & (t <= 1.0 + tol)
        return out

    return BoundarySpec(classify, name)


@dataclass(frozen=True)
class Face:
    """One mesh face with fixed orientation (normal outward from plus_cell)."""

    vertices: tuple[int, int]
    plus_cell: int
    minus_cell: Optional[int]
    normal: np.ndarray
    diameter: float
    label: str  # 'I' | 'D' | 'N'


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _normalize_longest_edge(vertices: np.ndarray,
                            triangles: np.ndarray) -> np.ndarray:
    """Rotate each CCW triangle so its longest edge comes first.

    Ties are broken by the lowest local edge index (deterministic).  Local
    edge i is the edge opposite vertex i.
    """
    tris = np.asarray(triangles, dtype=int).copy()
    p = vertices[tris]  # (T, 3, 2)
    lengths = np.stack([
        np.linalg.norm(p[:, 2] - p[:, 1], axis=1),  # edge 0 = (v1, v2)
        np.linalg.norm(p[:, 0] - p[:, 2], axis=1),  # edge 1 = (v2, v0)
        np.linalg.norm(p[:, 1] - p[:, 0], axis=1),  # edge 2 = (v0, v1)
    ], axis=1)
    lmax = lengths.max(axis=1, keepdims=True)
    candidate = lengths >= lmax * (1.0 - 1e-12)
    pick = np.argmax(candidate, axis=1)  # first True = lowest index
    rot1 = pick == 0  # edge (v1, v2) first -> (v1, v2, v0)
    rot2 = pick == 1  # edge (v2, v0) first -> (v2, v0, v1)
    tris[rot1] = tris[rot1][:, [1, 2, 0]]
    tris[rot2] = tris[rot2][:, [2, 0, 1]]
    return tris


class Mesh:
    """Immutable conforming triangulation with oriented face data."""

    def __init__(self, vertices, triangles, boundary: BoundarySpec,
                 generation=None, parent=None, _normalized=False):
        self.vertices = np.array(vertices, dtype=float)
        triangles = np.array(triangles, dtype=int)
        if not _normalized:
            triangles = _normalize_longest_edge(self.vertices, triangles)
        self.triangles = triangles
        self.boundary_spec = boundary
        nt = len(self.triangles)
        self.generation = (np.zeros(nt, dtype=int) if generation is None
                           else np.array(generation, dtype=int))
        self.parent = (np.full(nt, -1, dtype=int) if parent is None
                       else np.array(parent, dtype=int))
        # refinement edge is the normalized first edge (local index 2,
        # i.e. the edge opposite the newest vertex v2)
        self.refinement_edge = np.full(nt, 2, dtype=int)

        p = self.vertices[self.triangles]
        cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        if np.any(cross <= _GEOM_TOL):
            raise ValueError("triangle with non-positive signed area")
        self.areas = 0.5 * cross
        edge_lens = np.stack([
            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
        ], axis=1)
        self.cell_h = edge_lens.max(axis=1)

        self._build_faces()
        for arr in (self.vertices, self.triangles, self.generation,
                    self.parent, self.refinement_edge, self.areas,
                    self.cell_h, self.face_vertices, self.face_cells,
                    self.face_normals, self.face_h):
            arr.setflags(write=False)
        self._faces_list: Optional[list[Face]] = None
        self._cell_faces: Optional[np.ndarray] = None

    # ------------------------------------------------------------------
    def _build_faces(self):
        registry: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
        for t, (a, b, c) in enumerate(self.triangles):
            for va, vb in ((b, c), (c, a), (a, b)):
                registry.setdefault(_edge_key(va, vb), []).append(
                    (t, int(va), int(vb)))
        keys = sorted(registry)
        nf = len(keys)
        self.face_vertices = np.array(keys, dtype=int).reshape(nf, 2)
        self.face_cells = np.empty((nf, 2), dtype=int)
        self.face_normals = np.empty((nf, 2))
        self.face_h = np.empty(nf)
        labels = np.empty(nf, dtype="<U1")
        boundary_rows = []
        for i, key in enumerate(keys):
            owners = registry[key]
            if len(owners) > 2:
                raise ValueError(f"edge {key} shared by {len(owners)} cells")
            owners.sort()
            t_plus, va, vb = owners[0]
            t_minus = owners[1][0] if len(owners) == 2 else -1
            self.face_cells[i] = (t_plus, t_minus)
            d = self.vertices[vb] - self.vertices[va]
            ln = float(np.hypot(d[0], d[1]))
            # interior lies left of va->vb in a CCW cell: outward = (dy, -dx)
            self.face_normals[i] = (d[1] / ln, -d[0] / ln)
            self.face_h[i] = ln
            if t_minus < 0:
                boundary_rows.append(i)
                labels[i] = "?"
            else:
                labels[i] = "I"
        if boundary_rows:
            rows = np.array(boundary_rows, dtype=int)
            mids = 0.5 * (self.vertices[self.face_vertices[rows, 0]]
                          + self.vertices[self.face_vertices[rows, 1]])
            dirichlet = np.asarray(self.boundary_spec.classify(mids),
                                   dtype=bool)
            labels[rows] = np.where(dirichlet, "D", "N")
        self.face_labels = labels

    # ------------------------------------------------------------------
    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_cells(self) -> int:
        return len(self.triangles)

    @property
    def num_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def interior_mask(self) -> np.ndarray:
        return self.face_labels == "I"

    @property
    def dirichlet_mask(self) -> np.ndarray:
        return self.face_labels == "D"

    @property
    def neumann_mask(self) -> np.ndarray:
        return self.face_labels == "N"

    @property
    def faces(self) -> list[Face]:
        if self._faces_list is None:
            self._faces_list = [
                Face(vertices=(int(a), int(b)),
                     plus_cell=int(cp),
                     minus_cell=(int(cm) if cm >= 0 else None),
                     normal=self.face_normals[i].copy(),
                     diameter=float(self.face_h[i]),
                     label=str(self.face_labels[i]))
                for i, ((a, b), (cp, cm)) in enumerate(
                    zip(self.face_vertices, self.face_cells))
            ]
        return self._faces_list

    @property
    def cell_faces(self) -> np.ndarray:
        """Global face indices of each cell, shape (T, 3), ascending."""
        if self._cell_faces is None:
            owners = self.face_cells.ravel()
            faces = np.repeat(np.arange(self.num_faces), 2)
            keep = owners >= 0
            order = np.argsort(owners[keep], kind="stable")
            cf = faces[keep][order].reshape(self.num_cells, 3)
            cf.setflags(write=False)
            self._cell_faces = cf
        return self._cell_faces

    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles (radians)."""
        p = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            cosang = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
            angles.append(np.arccos(cosang))
        return float(np.min(angles))

    def validate(self):
        """Audit structural invariants; raises ValueError on defect."""
        if np.any(self.areas <= 0):
            raise ValueError("non-positive triangle area")
        counts = self.face_cells[:, 1] >= 0
        # interior faces: two distinct cells; boundary: labeled D or N
        bad = counts & (self.face_cells[:, 0] == self.face_cells[:, 1])
        if np.any(bad):
            raise ValueError("face adjacent to the same cell twice")
        if np.any((~counts) & ~np.isin(self.face_labels, ("D", "N"))):
            raise ValueError("boundary face without D/N label")
        if np.any(counts & (self.face_labels != "I")):
            raise ValueError("interior face with boundary label")
        norms = np.linalg.norm(self.face_normals, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-13:
            raise ValueError("non-unit face normal")
        # outward from plus cell
        mids = 0.5 * (self.vertices[self.face_vertices[:, 0]]
                      + self.vertices[self.face_vertices[:, 1]])
        cplus = self.cell_centroids()[self.face_cells[:, 0]]
        if np.any(((mids - cplus) * self.face_normals).sum(axis=1) <= 0):
            raise ValueError("face normal not outward from plus cell")
        # conformity: vertices of each interior face are shared vertices of
        # both adjacent cells (no hanging nodes)
        for i in np.nonzero(counts)[0]:
            a, b = self.face_vertices[i]
            for cell in self.face_cells[i]:
                tri = set(self.triangles[cell])
                if a not in tri or b not in tri:
                    raise ValueError("hanging node at face %d" % i)


# ----------------------------------------------------------------------
def initial_lshape(boundary: BoundarySpec) -> Mesh:
    """The 6-triangle initial mesh of (-1,1)^2 minus [0,1)x(-1,0].

    Two triangles per quadrant square, with the diagonals emanating from the
    re-entrant corner at the origin; refinement edges are the hypotenuses.
    """
    vertices = np.array([
        [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0],
        [-1.0, 1.0], [-1.0, 0.0], [-1.0, -1.0], [0.0, -1.0],
    ])
    triangles = np.array([
        [0, 1, 2], [0, 2, 3],
        [0, 3, 4], [0, 4, 5],
        [0, 5, 6], [0, 6, 7],
    ])
    return Mesh(vertices, triangles, boundary)


def initial_square(boundary: BoundarySpec) -> Mesh:
    """Two-triangle initial mesh of the unit square (0,1)^2."""
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(vertices, triangles, boundary)


# ----------------------------------------------------------------------
def _refine_red(mesh: Mesh) -> Mesh:
    """Uniform refinement: each triangle into 4 congruent children."""
    tris = mesh.triangles
    keys = sorted({_edge_key(a, b)
                   for tri in tris
                   for a, b in ((tri[1], tri[2]), (tri[2], tri[0]),
                                (tri[0], tri[1]))})
    nv = mesh.num_vertices
    mid = {key: nv + i for i, key in enumerate(keys)}
    new_pts = 0.5 * (mesh.vertices[[k[0] for k in keys]]
                     + mesh.vertices[[k[1] for k in keys]])
    vertices = np.vstack([mesh.vertices, new_pts])
    out, gen, par = [], [], []
    for t, (a, b, c) in enumerate(tris):
        mab = mid[_edge_key(a, b)]
        mbc = mid[_edge_key(b, c)]
        mca = mid[_edge_key(c, a)]
        # all four children keep their longest edge (parallel to the
        # parent's refinement edge (a, b)) in front
        out.extend([(a, mab, mca), (mab, b, mbc),
                    (mca, mbc, c), (mbc, mca, mab)])
        gen.extend([mesh.generation[t] + 1] * 4)
        par.extend([t] * 4)
    return Mesh(vertices, np.array(out, dtype=int), mesh.boundary_spec,
                generation=np.array(gen), parent=np.array(par),
                _normalized=True)


def _refine_nvb(mesh: Mesh, marked: np.ndarray) -> Mesh:
    """Newest-vertex bisection of the marked cells with conforming closure."""
    tris = mesh.triangles
    nt = len(tris)
    adj: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(tris):
        for va, vb in ((b, c), (c, a), (a, b)):
            adj.setdefault(_edge_key(va, vb), []).append(t)

    def refkey(t: int) -> tuple[int, int]:
        return _edge_key(tris[t, 0], tris[t, 1])

    split = {refkey(int(t)) for t in marked}
    queue = deque()
    for key in sorted(split):
        queue.extend(adj[key])
    while queue:
        t = queue.popleft()
        a, b, c = tris[t]
        if any(_edge_key(x, y) in split
               for x, y in ((b, c), (c, a), (a, b))):
            rk = refkey(t)
            if rk not in split:
                split.add(rk)
                queue.extend(adj[rk])

    keys = sorted(split)
    nv = mesh.num_vertices
    mid = {key: nv + i for i, key in enumerate(keys)}
    new_pts = 0.5 * (mesh.vertices[[k[0] for k in keys]]
                     + mesh.vertices[[k[1] for k in keys]])
    vertices = np.vstack([mesh.vertices, new_pts]) if keys else mesh.vertices

    out, gen, par = [], [], []

    def emit(a: int, b: int, c: int, g: int, p: int):
        key = _edge_key(a, b)
        if key in mid:
            m = mid[key]
            emit(c, a, m, g + 1, p)
            emit(b, c, m, g + 1, p)
        else:
            out.append((a, b, c))
            gen.append(g)
            par.append(p)

    for t in range(nt):
        a, b, c = (int(v) for v in tris[t])
        emit(a, b, c, int(mesh.generation[t]), t)
    return Mesh(vertices, np.array(out, dtype=int), mesh.boundary_spec,
                generation=np.array(gen), parent=np.array(par),
                _normalized=True)


def refine(mesh: Mesh, marked) -> Mesh:
    """Refine the marked cells (newest-vertex bisection with closure).

    An empty marking returns the mesh unchanged; marking every cell performs
    uniform red refinement (4 congruent children per triangle).
    """
    marked = np.array(sorted({int(m) for m in marked}), dtype=int)
    if marked.size == 0:
        return mesh
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.num_cells):
        raise ValueError("marked set contains an invalid cell index")
    if marked.size == mesh.num_cells:
        return _refine_red(mesh)
    return _refine_nvb(mesh, marked)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Uniform red refinement of every cell."""
    return _refine_red(mesh)


# ----------------------------------------------------------------------
def save_mesh(mesh: Mesh, path, cell_data: Optional[np.ndarray] = None):
    """Plain-text export; optional per-cell scalar appended to cell lines."""
    lines = [f"vertices {mesh.num_vertices} / triangles {mesh.num_cells} "
             f"/ faces {mesh.num_faces}"]
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g}")
    for t, (a, b, c) in enumerate(mesh.triangles):
        row = f"{a} {b} {c}"
        if cell_data is not None:
            row += f" {cell_data[t]:.17g}"
        lines.append(row)
    for (a, b), label in zip(mesh.face_vertices, mesh.face_labels):
        lines.append(f"{a} {b} {label}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    """Load a mesh written by :func:`save_mesh`.

    The boundary classification is reconstructed from the stored face labels
    (Dirichlet segments), so the loaded mesh refines consistently.
    """
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].replace("/", " ").split()
    if head[0] != "vertices" or head[2] != "triangles" or head[4] != "faces":
        raise ValueError("not a mesh file: bad header")
    nv, nt, nf = int(head[1]), int(head[3]), int(head[5])
    vert_rows = lines[1:1 + nv]
    tri_rows = lines[1 + nv:1 + nv + nt]
    face_rows = lines[1 + nv + nt:1 + nv + nt + nf]
    vertices = np.array([[float(v) for v in r.split()[:2]]
                         for r in vert_rows])
    triangles = np.array([[int(v) for v in r.split()[:3]]
                          for r in tri_rows])
    segments = []
    for r in face_rows:
        parts = r.split()
        if parts[2] == "D":
            a, b = int(parts[0]), int(parts[1])
            segments.append((vertices[a], vertices[b]))
    boundary = (boundary_from_segments(segments, name="loaded")
                if segments else
                BoundarySpec(lambda pts: np.zeros(len(pts), dtype=bool),
                             "loaded"))
    return Mesh(vertices, triangles, boundary, _normalized=True)
