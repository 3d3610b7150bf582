"""
Triangle Meshes

TriMesh storage, vertex normals, Laplacian smoothing, OBJ I/O, mesh
measurements and the primitive meshes used by tests and synthetic scenes.
"""
import logging
import os
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .errors import MeshError

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
ISOLATED_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with per-vertex unit normals."""
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if normals.shape != vertices.shape:
            raise MeshError(f"{len(normals)} normals for {len(vertices)} vertices")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face index out of range")
        for name, arr in (("vertices", vertices), ("faces", faces), ("normals", normals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_faces(cls, vertices: np.ndarray, faces: np.ndarray) -> "TriMesh":
        """Build a mesh and derive its vertex normals."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        mesh = cls(vertices, faces, np.tile(ISOLATED_NORMAL, (len(vertices), 1)))
        return compute_vertex_normals(mesh)[0]

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (length = 2 * area), counter-clockwise winding."""
    tri = vertices[faces]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def compute_vertex_normals(mesh: TriMesh) -> Tuple[TriMesh, int]:
    """
    Area-weighted vertex normals.

    Returns:
        (mesh with new normals, number of isolated vertices set to +z)
    """
    n_vertices = len(mesh.vertices)
    accum = np.zeros((n_vertices, 3))
    if len(mesh.faces):
        fn = face_normals(mesh.vertices, mesh.faces)
        for corner in range(3):
            for axis in range(3):
                accum[:, axis] += np.bincount(mesh.faces[:, corner], weights=fn[:, axis], minlength=n_vertices)
    length = np.linalg.norm(accum, axis=1)
    isolated = length <= 1e-300
    normals = np.where(isolated[:, None], ISOLATED_NORMAL, accum / np.where(isolated, 1.0, length)[:, None])
    n_isolated = int(isolated.sum())
    if n_isolated:
        logger.warning("%d vertices have no incident faces; normal set to +z", n_isolated)
    return TriMesh(mesh.vertices, mesh.faces, normals), n_isolated


def edges(faces: np.ndarray) -> np.ndarray:
    """(3F, 2) directed half-edges."""
    return np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])


def adjacency_matrix(mesh: TriMesh) -> sparse.csr_matrix:
    """Symmetric 0/1 vertex adjacency (1-ring)."""
    n = len(mesh.vertices)
    e = edges(mesh.faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    return adj


def laplacian_smooth(mesh: TriMesh, lam: float = 0.5, iters: int = 10) -> TriMesh:
    """
    Umbrella-operator smoothing: v <- v + lam * (centroid(1-ring) - v), per iteration.

    Connectivity is unchanged; normals are recomputed afterwards.
    """
    if not 0.0 <= lam <= 1.0:
        raise MeshError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0 or iters <= 0 or mesh.is_empty:
        return mesh
    adj = adjacency_matrix(mesh)
    degree = np.asarray(adj.sum(axis=1)).ravel()
    has_ring = degree > 0
    inv_degree = sparse.diags(np.where(has_ring, 1.0 / np.where(has_ring, degree, 1.0), 0.0))
    averaging = (inv_degree @ adj).tocsr()
    vertices = mesh.vertices.copy()
    for _ in range(iters):
        centroid = averaging @ vertices
        vertices[has_ring] += lam * (centroid[has_ring] - vertices[has_ring])
    return compute_vertex_normals(TriMesh(vertices, mesh.faces, mesh.normals))[0]


def surface_area(mesh: TriMesh) -> float:
    if mesh.is_empty:
        return 0.0
    return float(0.5 * np.linalg.norm(face_normals(mesh.vertices, mesh.faces), axis=1).sum())


def signed_volume(mesh: TriMesh) -> float:
    """Enclosed volume, sum of det(v0, v1, v2) / 6 (positive for outward winding)."""
    if mesh.is_empty:
        return 0.0
    tri = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def boundary_edge_count(mesh: TriMesh) -> int:
    """Undirected edges not shared by exactly two faces."""
    if mesh.is_empty:
        return 0
    e = np.sort(edges(mesh.faces), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int((counts != 2).sum())


def remove_degenerate_faces(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Drop faces with repeated indices or area <= 1e-12, then unreferenced vertices."""
    if len(faces) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    area = 0.5 * np.linalg.norm(face_normals(vertices, faces), axis=1)
    faces = faces[distinct & (area > DEGENERATE_AREA)]
    used, remap = np.unique(faces, return_inverse=True)
    return vertices[used], remap.reshape(-1, 3)


# ---------------------------------------------------------------------------
# OBJ files
# ---------------------------------------------------------------------------

def write_obj(path: str, mesh: TriMesh):
    """Write ASCII OBJ with `v`, `vn` and `f a//a b//b c//c` records."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces\n")
        for v in mesh.vertices:
            f.write("v {:.17g} {:.17g} {:.17g}\n".format(*v))
        for n in mesh.normals:
            f.write("vn {:.17g} {:.17g} {:.17g}\n".format(*n))
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")


def read_obj(path: str) -> TriMesh:
    """
    Read an OBJ mesh (triangles or polygons, fan-triangulated).

    Per-vertex normals are kept when the file has one `vn` per `v`;
    otherwise they are recomputed.
    """
    vertices, normals, faces = [], [], []
    with open(path, "r", encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(token.split("/")[0]) for token in parts[1:]]
                    idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except (ValueError, IndexError) as e:
                raise MeshError(f"{path}:{number}: malformed record: {raw.strip()!r}") from e
    vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(normals) == len(vertices) and len(vertices):
        n = np.array(normals, dtype=np.float64)
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return TriMesh(vertices, faces, n)
    return TriMesh.from_faces(vertices, faces)


# ---------------------------------------------------------------------------
# Primitive meshes
# ---------------------------------------------------------------------------

def icosphere(radius: float = 1.0, subdivisions: int = 3, center: Sequence[float] = (0.0, 0.0, 0.0)) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere, outward winding."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    vertices = np.array(verts, dtype=np.float64)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    faces = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        e = np.sort(edges(faces), axis=1)
        unique_edges, inverse = np.unique(e, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        mid = vertices[unique_edges[:, 0]] + vertices[unique_edges[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        offset = len(vertices)
        n_faces = len(faces)
        m01 = offset + inverse[:n_faces]
        m12 = offset + inverse[n_faces:2 * n_faces]
        m20 = offset + inverse[2 * n_faces:]
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        faces = np.concatenate([
            np.stack([a, m01, m20], axis=1),
            np.stack([b, m12, m01], axis=1),
            np.stack([c, m20, m12], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ])
        vertices = np.concatenate([vertices, mid])
    normals = vertices.copy()
    return TriMesh(vertices * radius + np.asarray(center, dtype=np.float64), faces, normals)


_BOX_CORNERS = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
# quads as corner indices into _BOX_CORNERS, counter-clockwise seen from outside
_BOX_QUADS = [
    ([0, 1, 3, 2], (-1, 0, 0)), ([4, 6, 7, 5], (1, 0, 0)),
    ([0, 4, 5, 1], (0, -1, 0)), ([2, 3, 7, 6], (0, 1, 0)),
    ([0, 2, 6, 4], (0, 0, -1)), ([1, 5, 7, 3], (0, 0, 1)),
]
# split every quad along the diagonal through its even-parity corners so all
# eight shared corners get equal area weight from their three faces
_EVEN_CORNERS = {0, 3, 5, 6}


def _quad_triangles(quad: list) -> list:
    if quad[0] not in _EVEN_CORNERS:
        quad = quad[1:] + quad[:1]
    return [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]


def box_mesh(center: Sequence[float] = (0.0, 0.0, 0.0), half_extent: Union[float, Sequence[float]] = 0.5,
             split_faces: bool = True) -> TriMesh:
    """
    Axis-aligned box (a cube for scalar half_extent).

    Args:
        split_faces: One set of 4 vertices per face with flat normals (exact for
            refraction); False shares the 8 corners with area-weighted normals
    """
    center = np.asarray(center, dtype=np.float64)
    corners = _BOX_CORNERS * half_extent + center
    if not split_faces:
        faces = [tri for quad, _ in _BOX_QUADS for tri in _quad_triangles(quad)]
        return TriMesh.from_faces(corners, np.array(faces))
    vertices, normals, faces = [], [], []
    for quad, normal in _BOX_QUADS:
        base = len(vertices)
        vertices.extend(corners[quad])
        normals.extend([normal] * 4)
        faces += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
    return TriMesh(np.array(vertices), np.array(faces), np.array(normals, dtype=np.float64))


def cylinder_mesh(center: Sequence[float] = (0.0, 0.0, 0.0), radius: float = 0.5, half_height: float = 0.5,
                  segments: int = 128) -> TriMesh:
    """Capped cylinder along +y; side and cap vertices are split so caps keep flat normals."""
    center = np.asarray(center, dtype=np.float64)
    angle = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(angle), np.zeros(segments), np.sin(angle)], axis=1)
    bottom = center + ring * radius - [0.0, half_height, 0.0]
    top = center + ring * radius + [0.0, half_height, 0.0]
    idx = np.arange(segments)
    nxt = (idx + 1) % segments
    # side: bottom ring 0..s-1, top ring s..2s-1
    side_faces = np.concatenate([np.stack([idx, segments + idx, segments + nxt], axis=1),
                                 np.stack([idx, segments + nxt, nxt], axis=1)])
    side_vertices = np.concatenate([bottom, top])
    side_normals = np.concatenate([ring, ring])
    # caps: center vertex + ring copy
    base = len(side_vertices)
    top_center = center + [0.0, half_height, 0.0]
    bottom_center = center - [0.0, half_height, 0.0]
    cap_vertices = np.concatenate([[top_center], top, [bottom_center], bottom])
    cap_normals = np.concatenate([np.tile([0.0, 1.0, 0.0], (segments + 1, 1)),
                                  np.tile([0.0, -1.0, 0.0], (segments + 1, 1))])
    top_faces = np.stack([np.full(segments, base), base + 1 + nxt, base + 1 + idx], axis=1)
    b0 = base + segments + 1
    bottom_faces = np.stack([np.full(segments, b0), b0 + 1 + idx, b0 + 1 + nxt], axis=1)
    vertices = np.concatenate([side_vertices, cap_vertices])
    normals = np.concatenate([side_normals, cap_normals])
    faces = np.concatenate([side_faces, top_faces, bottom_faces])
    return TriMesh(vertices, faces, normals)
