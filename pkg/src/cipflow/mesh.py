"""Conforming triangulations of polygonal 2D domains.

Meshes are immutable after construction.  Besides vertex/triangle arrays
they carry the full face (edge) connectivity needed by jump operators:
for every face we store the adjacent triangle on each side, a unit
normal and the face length.  For interior faces the stored normal points
from the left triangle to the right one; boundary faces have right
triangle index BOUNDARY (-1) and an outward normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY = -1


class MeshFormatError(ValueError):
    """Raised on malformed mesh files; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _signed_areas(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    a = vertices[triangles[:, 1]] - p0
    b = vertices[triangles[:, 2]] - p0
    return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


@dataclass(frozen=True)
class Mesh:
    """Triangulation with face connectivity and size metrics.

    Use :meth:`Mesh.build` to construct; it repairs orientation and
    derives all connectivity.  Attribute layout:

    - ``vertices``: (V, 2) float coordinates
    - ``triangles``: (Nt, 3) int vertex indices, counter-clockwise
    - ``face_vertices``: (E, 2) int vertex pairs
    - ``face_left`` / ``face_right``: (E,) triangle indices, right is
      ``BOUNDARY`` for boundary faces
    - ``face_normals``: (E, 2) unit normals (left -> right / outward)
    - ``face_lengths``: (E,)
    - ``boundary_vertex_flags``: (V,) bool
    """

    vertices: np.ndarray
    triangles: np.ndarray
    face_vertices: np.ndarray = field(repr=False)
    face_left: np.ndarray = field(repr=False)
    face_right: np.ndarray = field(repr=False)
    face_normals: np.ndarray = field(repr=False)
    face_lengths: np.ndarray = field(repr=False)
    boundary_vertex_flags: np.ndarray = field(repr=False)
    h_max: float
    h_min: float

    @staticmethod
    def build(vertices, triangles) -> "Mesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise ValueError("vertices must be (V, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must be (Nt, 3)")
        if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= len(vertices):
            raise ValueError("triangle vertex index out of range")

        # repair orientation: clockwise triangles get a vertex swap
        areas = _signed_areas(vertices, triangles)
        if np.any(areas == 0.0):
            raise ValueError("degenerate (zero-area) triangle")
        flip = areas < 0
        if np.any(flip):
            triangles = triangles.copy()
            triangles[flip, 1], triangles[flip, 2] = (
                triangles[flip, 2].copy(), triangles[flip, 1].copy())

        fv, fl, fr = _build_faces(triangles)
        normals, lengths = _face_geometry(vertices, triangles, fv, fl)

        bflags = np.zeros(len(vertices), dtype=bool)
        bfaces = fr == BOUNDARY
        bflags[fv[bfaces].ravel()] = True

        # triangle diameter = longest edge
        edges = vertices[triangles] - vertices[np.roll(triangles, -1, axis=1)]
        diam = np.linalg.norm(edges, axis=2).max(axis=1)

        for arr in (vertices, triangles, fv, fl, fr, normals, lengths, bflags):
            arr.setflags(write=False)
        return Mesh(vertices, triangles, fv, fl, fr, normals, lengths,
                    bflags, float(diam.max()), float(diam.min()))

    # -- basic queries ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def interior_face_mask(self) -> np.ndarray:
        return self.face_right != BOUNDARY

    @property
    def triangle_areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    @property
    def triangle_diameters(self) -> np.ndarray:
        edges = self.vertices[self.triangles] - self.vertices[
            np.roll(self.triangles, -1, axis=1)]
        return np.linalg.norm(edges, axis=2).max(axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def interior_vertex_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_vertex_flags)


def _build_faces(triangles):
    """Edge table from triangle connectivity.

    Returns (face_vertices, face_left, face_right); the left triangle is
    the one that traverses the edge in its stored (CCW) direction.
    """
    nt = len(triangles)
    # each triangle contributes directed edges (v0,v1), (v1,v2), (v2,v0)
    e0 = triangles[:, [0, 1]]
    e1 = triangles[:, [1, 2]]
    e2 = triangles[:, [2, 0]]
    directed = np.vstack([e0, e1, e2])                    # (3Nt, 2)
    owner = np.tile(np.arange(nt), 3)
    key = np.sort(directed, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key_s, directed_s, owner_s = key[order], directed[order], owner[order]

    fv_list, left_list, right_list = [], [], []
    i = 0
    n = len(key_s)
    while i < n:
        j = i + 1
        same = j < n and key_s[j, 0] == key_s[i, 0] and key_s[j, 1] == key_s[i, 1]
        if same:
            if j + 1 < n and key_s[j + 1, 0] == key_s[i, 0] and key_s[j + 1, 1] == key_s[i, 1]:
                raise ValueError("non-manifold edge shared by > 2 triangles")
            # the triangle traversing the edge forward is the left one
            fv_list.append(directed_s[i])
            left_list.append(owner_s[i])
            right_list.append(owner_s[j])
            i += 2
        else:
            fv_list.append(directed_s[i])
            left_list.append(owner_s[i])
            right_list.append(BOUNDARY)
            i += 1
    return (np.array(fv_list, dtype=np.int64),
            np.array(left_list, dtype=np.int64),
            np.array(right_list, dtype=np.int64))


def _face_geometry(vertices, triangles, fv, fl):
    """Unit normals (pointing out of the left triangle) and lengths."""
    p0 = vertices[fv[:, 0]]
    p1 = vertices[fv[:, 1]]
    t = p1 - p0
    lengths = np.linalg.norm(t, axis=1)
    if np.any(lengths == 0.0):
        raise ValueError("zero-length face")
    t = t / lengths[:, None]
    n = np.column_stack([t[:, 1], -t[:, 0]])
    # the left triangle traverses the edge CCW, so (t rotated by -90deg)
    # already points away from it; verify against the opposite vertex
    cent = vertices[triangles[fl]].mean(axis=1)
    outward = np.einsum("ij,ij->i", p0 + 0.5 * (p1 - p0) - cent, n) > 0
    n[~outward] *= -1.0
    return n, lengths


# -- generators ----------------------------------------------------------

def generate_unit_square_mesh(n: int) -> Mesh:
    """Structured mesh of [0,1]^2: (n+1)^2 vertices, 2 n^2 triangles.

    Every grid cell is split along the same diagonal (lower-left to
    upper-right) for reproducibility; h_max = sqrt(2)/n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    s = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(s, s, indexing="ij")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return i * (n + 1) + j

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    lower = np.column_stack([vid(ii, jj), vid(ii + 1, jj), vid(ii + 1, jj + 1)])
    upper = np.column_stack([vid(ii, jj), vid(ii + 1, jj + 1), vid(ii, jj + 1)])
    triangles = np.vstack([lower, upper])
    return Mesh.build(vertices, triangles)


def generate_polygonal_disc_mesh(n_boundary: int, n_refine: int) -> Mesh:
    """Triangulated regular polygon inscribed in the unit circle.

    Starts from a fan around the origin and applies ``n_refine`` uniform
    refinements; new boundary vertices are projected to radius 1 so the
    polygon tracks the disc.
    """
    if n_boundary < 6:
        raise ValueError("n_boundary must be >= 6")
    if n_refine < 0:
        raise ValueError("n_refine must be >= 0")
    theta = 2.0 * np.pi * np.arange(n_boundary) / n_boundary
    ring = np.column_stack([np.cos(theta), np.sin(theta)])
    vertices = np.vstack([[0.0, 0.0], ring])
    k = np.arange(n_boundary)
    triangles = np.column_stack(
        [np.zeros(n_boundary, dtype=int), 1 + k, 1 + (k + 1) % n_boundary])
    mesh = Mesh.build(vertices, triangles)
    for _ in range(n_refine):
        mesh = refine_uniform(mesh, boundary_projection=_project_unit_circle)
    return mesh


def _project_unit_circle(points):
    r = np.linalg.norm(points, axis=1, keepdims=True)
    return points / r


def refine_uniform(mesh: Mesh, boundary_projection=None) -> Mesh:
    """Red refinement: each triangle splits into 4 via edge midpoints.

    ``boundary_projection``, if given, maps new boundary-edge midpoints
    to the curved boundary (e.g. the unit circle).
    """
    nv = mesh.n_vertices
    fv = mesh.face_vertices
    mid = 0.5 * (mesh.vertices[fv[:, 0]] + mesh.vertices[fv[:, 1]])
    if boundary_projection is not None:
        bdry = ~mesh.interior_face_mask
        mid[bdry] = boundary_projection(mid[bdry])
    vertices = np.vstack([mesh.vertices, mid])

    # midpoint index per (sorted) edge pair
    edge_mid = {}
    for fid, (a, b) in enumerate(fv):
        edge_mid[(min(a, b), max(a, b))] = nv + fid

    tris = []
    for (a, b, c) in mesh.triangles:
        mab = edge_mid[(min(a, b), max(a, b))]
        mbc = edge_mid[(min(b, c), max(b, c))]
        mca = edge_mid[(min(c, a), max(c, a))]
        tris.extend([(a, mab, mca), (b, mbc, mab), (c, mca, mbc),
                     (mab, mbc, mca)])
    return Mesh.build(vertices, np.array(tris, dtype=np.int64))


# -- statistics ----------------------------------------------------------

def mesh_statistics(mesh: Mesh) -> dict:
    """Size metrics and connectivity counts (Euler check included)."""
    interior = int(np.count_nonzero(mesh.interior_face_mask))
    return {
        "h_max": mesh.h_max,
        "h_min": mesh.h_min,
        "ratio": mesh.h_max / mesh.h_min,
        "V": mesh.n_vertices,
        "E": mesh.n_faces,
        "Nt": mesh.n_triangles,
        "n_interior_faces": interior,
        "euler": mesh.n_vertices - mesh.n_faces + mesh.n_triangles,
    }


# -- ASCII I/O -----------------------------------------------------------

FORMAT_HEADER = "cipflow-mesh 1"


def write_mesh(mesh: Mesh, path) -> None:
    """Write the ASCII format: header, counts, vertices, triangles."""
    with open(path, "w") as fh:
        fh.write(FORMAT_HEADER + "\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path) -> Mesh:
    """Read the ASCII format; connectivity is rebuilt, not stored.

    Clockwise triangles are accepted and repaired by a vertex swap.
    """
    with open(path) as fh:
        raw = fh.readlines()
    # line numbers refer to the physical file, comments included
    lines = [(lno + 1, s.strip()) for lno, s in enumerate(raw)
             if s.strip() and not s.lstrip().startswith("#")]
    if not lines or lines[0][1] != FORMAT_HEADER:
        lno = lines[0][0] if lines else 1
        raise MeshFormatError(f"expected header {FORMAT_HEADER!r}", line=lno)
    if len(lines) < 2:
        raise MeshFormatError("missing count line", line=lines[0][0] + 1)
    lno, counts = lines[1]
    parts = counts.split()
    if len(parts) != 2:
        raise MeshFormatError("count line must be 'V Nt'", line=lno)
    try:
        nv, nt = int(parts[0]), int(parts[1])
    except ValueError:
        raise MeshFormatError("count line must be 'V Nt'", line=lno) from None
    if len(lines) != 2 + nv + nt:
        raise MeshFormatError(
            f"expected {2 + nv + nt} data lines, found {len(lines)}",
            line=lines[-1][0])

    vertices = np.empty((nv, 2))
    for i in range(nv):
        lno, s = lines[2 + i]
        parts = s.split()
        if len(parts) != 2:
            raise MeshFormatError("vertex line must be 'x y'", line=lno)
        try:
            vertices[i] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError("bad vertex coordinate", line=lno) from None

    triangles = np.empty((nt, 3), dtype=np.int64)
    for i in range(nt):
        lno, s = lines[2 + nv + i]
        parts = s.split()
        if len(parts) != 3:
            raise MeshFormatError("triangle line must be 'i j k'", line=lno)
        try:
            tri = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError("bad triangle index", line=lno) from None
        for idx in tri:
            if idx < 0 or idx >= nv:
                raise MeshFormatError(
                    f"triangle index {idx} out of range [0, {nv})", line=lno)
        triangles[i] = tri
        if _signed_areas(vertices, triangles[i:i + 1])[0] == 0.0:
            raise MeshFormatError("zero-area triangle", line=lno)
    return Mesh.build(vertices, triangles)
