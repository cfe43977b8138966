"""Triangle meshes, beam-axis thickness projection, and mesh file IO.

Coordinates are millimetres. The X-ray beam travels along +Z, so the image
plane is XY and pixel ``(row, col)`` has its center at
``((col + 0.5) * pitch, (row + 0.5) * pitch)`` relative to the canvas origin.
"""

from __future__ import annotations

import struct
from collections import defaultdict, deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch


class GeometryError(ValueError):
    pass


class MeshParseError(ValueError):
    pass


def _edge_table(faces: np.ndarray):
    """Directed-edge bookkeeping for a triangle list."""
    directed = defaultdict(list)
    for fi, (a, b, c) in enumerate(faces):
        for u, w in ((a, b), (b, c), (c, a)):
            directed[(int(u), int(w))].append(fi)
    return directed


class Mesh:
    """Immutable triangle mesh with per-vertex adjacency."""

    def __init__(self, vertices, faces):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        self._vertices = v
        self._faces = f
        nbrs = [set() for _ in range(len(v))]
        for a, b, c in f:
            for u, w in ((a, b), (b, c), (c, a)):
                nbrs[u].add(int(w))
                nbrs[w].add(int(u))
        self._adjacency = tuple(frozenset(n) for n in nbrs)

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def faces(self) -> np.ndarray:
        return self._faces

    @property
    def adjacency(self):
        return self._adjacency

    def __len__(self):
        return len(self._vertices)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return np.array_equal(self.faces, other.faces) and np.array_equal(self.vertices, other.vertices)

    def __repr__(self):
        return f"Mesh(|V|={len(self.vertices)}, |F|={len(self.faces)})"

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self._faces)

    def translated(self, offset) -> "Mesh":
        return Mesh(self._vertices + np.asarray(offset, dtype=float), self._faces)

    def scaled(self, factors) -> "Mesh":
        return Mesh(self._vertices * np.asarray(factors, dtype=float), self._faces)

    def edges(self) -> np.ndarray:
        """Undirected edges as a sorted (E, 2) array."""
        e = {tuple(sorted((int(u), int(w)))) for u, w in _edge_table(self._faces)}
        return np.array(sorted(e), dtype=np.int64).reshape(-1, 2)

    def degree(self, i: int) -> int:
        return len(self._adjacency[i])

    def volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward winding)."""
        tri = self._vertices[self._faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def check_closed(self) -> None:
        """Raise GeometryError unless every edge joins exactly two oppositely wound faces."""
        directed = _edge_table(self._faces)
        for (u, w), fs in directed.items():
            if len(fs) > 1:
                raise GeometryError(f"inconsistent winding: edge ({u}, {w}) traversed {len(fs)} times in one direction")
            if (w, u) not in directed:
                raise GeometryError(f"open mesh: boundary edge ({u}, {w})")
        for a, b, c in self._faces:
            if len({a, b, c}) < 3:
                raise GeometryError(f"degenerate face ({a}, {b}, {c})")

    def is_watertight(self) -> bool:
        try:
            self.check_closed()
        except GeometryError:
            return False
        return True

    def oriented(self) -> "Mesh":
        """Return a copy with consistent outward winding, via flood fill over faces."""
        faces = [list(map(int, f)) for f in self._faces]
        undirected = defaultdict(list)
        for fi, (a, b, c) in enumerate(faces):
            for u, w in ((a, b), (b, c), (c, a)):
                undirected[frozenset((u, w))].append(fi)
        for key, fs in undirected.items():
            if len(fs) != 2:
                u, w = sorted(key)
                raise GeometryError(f"non-manifold edge ({u}, {w}) shared by {len(fs)} faces")
        seen = [False] * len(faces)
        for start in range(len(faces)):
            if seen[start]:
                continue
            seen[start] = True
            queue = deque([start])
            while queue:
                fi = queue.popleft()
                a, b, c = faces[fi]
                for u, w in ((a, b), (b, c), (c, a)):
                    for nj in undirected[frozenset((u, w))]:
                        if nj == fi:
                            continue
                        na, nb, nc = faces[nj]
                        same_dir = (u, w) in ((na, nb), (nb, nc), (nc, na))
                        if seen[nj]:
                            if same_dir:
                                raise GeometryError(f"non-orientable surface at edge ({u}, {w})")
                            continue
                        if same_dir:
                            faces[nj] = [na, nc, nb]
                        seen[nj] = True
                        queue.append(nj)
        out = Mesh(self._vertices, faces)
        if out.volume() < 0:
            out = Mesh(self._vertices, [[a, c, b] for a, b, c in faces])
        out.check_closed()
        return out


@dataclass
class DepthMap:
    grid: np.ndarray
    pixel_pitch: float = 1.0
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if not np.isfinite(g).all() or (g < 0).any():
            raise GeometryError("depth map entries must be finite and non-negative")
        self.grid = g


@dataclass(frozen=True)
class VertexPerturbation:
    deltas: np.ndarray

    @classmethod
    def between(cls, mesh_adv: Mesh, mesh_ori: Mesh) -> "VertexPerturbation":
        return cls(mesh_adv.vertices - mesh_ori.vertices)


# -- bundled shapes -------------------------------------------------------------


def cube_sphere(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Sphere with 26 vertices and 48 faces: the surface of a 3x3x3 lattice pushed onto a sphere."""
    pts = [
        (x, y, z)
        for x in (-1, 0, 1)
        for y in (-1, 0, 1)
        for z in (-1, 0, 1)
        if (x, y, z) != (0, 0, 0)
    ]
    index = {p: i for i, p in enumerate(pts)}
    faces = []
    for axis in range(3):
        for side in (-1, 1):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            for i in (-1, 0):
                for j in (-1, 0):
                    quad = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = side
                        p[u_ax] = i + du
                        p[v_ax] = j + dv
                        quad.append(index[tuple(p)])
                    a, b, c, d = quad
                    faces.append((a, b, c))
                    faces.append((a, c, d))
    v = np.array(pts, dtype=float)
    v = v / np.linalg.norm(v, axis=1, keepdims=True) * radius + np.asarray(center, dtype=float)
    return Mesh(v, faces).oriented()


def box(size=(20.0, 20.0, 6.0), origin=(0.0, 0.0, 0.0)) -> Mesh:
    sx, sy, sz = size
    ox, oy, oz = origin
    v = [(ox + x * sx, oy + y * sy, oz + z * sz) for z in (0, 1) for y in (0, 1) for x in (0, 1)]
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return Mesh(v, faces).oriented()


def bundled_sphere() -> Mesh:
    return load_mesh(Path(str(resources.files("xrayattack") / "data" / "sphere26.obj")))


# -- projection -----------------------------------------------------------------


class ProjectionTopology:
    """Precomputed edge structure of a closed mesh for thickness rasterization."""

    def __init__(self, faces):
        f = np.asarray(faces, dtype=np.int64)
        canon = {}
        face_edge = np.zeros((len(f), 3), dtype=np.int64)
        face_sign = np.zeros((len(f), 3), dtype=np.float64)
        for fi, tri in enumerate(f):
            for k in range(3):
                u, w = int(tri[k]), int(tri[(k + 1) % 3])
                key = (min(u, w), max(u, w))
                if key not in canon:
                    canon[key] = len(canon)
                face_edge[fi, k] = canon[key]
                face_sign[fi, k] = 1.0 if u < w else -1.0
        edges = np.array(sorted(canon, key=canon.get), dtype=np.int64)
        owners = defaultdict(list)
        for fi in range(len(f)):
            for k in range(3):
                owners[int(face_edge[fi, k])].append(fi)
        if any(len(o) != 2 for o in owners.values()):
            raise GeometryError("projection requires a closed mesh (every edge shared by two faces)")
        other = np.zeros((len(f), 3), dtype=np.int64)
        for fi in range(len(f)):
            for k in range(3):
                a, b = owners[int(face_edge[fi, k])]
                other[fi, k] = b if a == fi else a
        self.faces = torch.as_tensor(np.array(f))
        self.edges = torch.as_tensor(np.array(edges))
        self.face_edge = torch.as_tensor(np.array(face_edge))
        self.face_sign = torch.as_tensor(np.array(face_sign))
        self.neighbor = torch.as_tensor(np.array(other))


_TOPOLOGY_CACHE: dict[bytes, ProjectionTopology] = {}


def projection_topology(faces) -> ProjectionTopology:
    f = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
    key = f.tobytes()
    if key not in _TOPOLOGY_CACHE:
        _TOPOLOGY_CACHE[key] = ProjectionTopology(f)
    return _TOPOLOGY_CACHE[key]


def thickness_map(
    vertices: torch.Tensor,
    faces,
    canvas_size: tuple[int, int],
    pixel_pitch: float = 1.0,
    origin_mm=(0.0, 0.0),
    temperature: float = 1.0,
    area_eps: float = 1e-9,
) -> torch.Tensor:
    """Differentiable beam-axis thickness of a closed mesh on an (H, W) pixel grid.

    Every face whose XY projection covers a pixel contributes its interpolated
    Z value, with a + sign when it faces +Z (beam exit) and - when it faces -Z
    (beam entry). Interior edges use an exact top-left fill rule; silhouette
    edges get a linear soft ramp of width ``temperature`` pixels so that XY
    motion of the outline has a gradient.
    """
    topo = faces if isinstance(faces, ProjectionTopology) else projection_topology(faces)
    dtype = vertices.dtype
    H, W = canvas_size
    ys = (torch.arange(H, dtype=dtype) + 0.5) * pixel_pitch + float(origin_mm[1])
    xs = (torch.arange(W, dtype=dtype) + 0.5) * pixel_pitch + float(origin_mm[0])
    py = ys.view(1, H, 1)
    px = xs.view(1, 1, W)

    xy = vertices[:, :2]
    tri = xy[topo.faces]  # (F, 3, 2)
    z = vertices[:, 2][topo.faces]  # (F, 3)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    orient = torch.where(area2.abs() > area_eps, torch.sign(area2), torch.zeros_like(area2)).detach()

    # canonical edge functions, shared by both faces of an edge so coverage tiles exactly
    eu = xy[topo.edges[:, 0]]
    ew = xy[topo.edges[:, 1]]
    evec = ew - eu
    elen = evec.norm(dim=1).clamp_min(1e-12)
    E = evec[:, 0].view(-1, 1, 1) * (py - eu[:, 1].view(-1, 1, 1)) - evec[:, 1].view(-1, 1, 1) * (
        px - eu[:, 0].view(-1, 1, 1)
    )  # (E, H, W)

    sgn = topo.face_sign.to(dtype) * orient.view(-1, 1)  # (F, 3)
    D = sgn.view(-1, 3, 1, 1) * E[topo.face_edge]  # (F, 3, H, W), > 0 inside
    with torch.no_grad():
        dvec = sgn.unsqueeze(-1) * evec[topo.face_edge]  # CCW direction of each face edge
        top_left = (dvec[..., 1] < 0) | ((dvec[..., 1] == 0) & (dvec[..., 0] < 0))
        hard = (D > 0) | ((D == 0) & top_left.view(-1, 3, 1, 1))
        silhouette = orient[topo.neighbor] != orient.view(-1, 1)
    dist = D / (elen[topo.face_edge].view(-1, 3, 1, 1) * pixel_pitch)
    soft = torch.clamp(0.5 + dist / temperature, 0.0, 1.0)
    cov = torch.where(silhouette.view(-1, 3, 1, 1), soft, hard.to(dtype))
    coverage = cov.prod(dim=1)  # (F, H, W)

    denom = torch.where(orient != 0, area2.abs(), torch.ones_like(area2)).view(-1, 1, 1)
    opposite = z[:, [2, 0, 1]]  # vertex opposite edge k=(v_k, v_k+1)
    zi = (D * opposite.view(-1, 3, 1, 1)).sum(dim=1) / denom
    zlo = z.min(dim=1).values.view(-1, 1, 1)
    zhi = z.max(dim=1).values.view(-1, 1, 1)
    zi = torch.maximum(torch.minimum(zi, zhi), zlo)
    thick = (orient.view(-1, 1, 1) * coverage * zi).sum(dim=0)
    return thick.clamp_min(0.0)


def project_thickness(
    mesh: Mesh,
    pixel_pitch: float = 1.0,
    canvas_size: tuple[int, int] | None = None,
    origin: tuple[int, int] = (0, 0),
    temperature: float = 1.0,
) -> DepthMap:
    """Project a closed mesh to a DepthMap; ``origin`` is the canvas offset in pixels."""
    mesh.check_closed()
    v = mesh.vertices
    if canvas_size is None:
        hi = v[:, :2].max(axis=0)
        canvas_size = (int(np.ceil(hi[1] / pixel_pitch)) + 1, int(np.ceil(hi[0] / pixel_pitch)) + 1)
    H, W = canvas_size
    ox, oy = origin[1] * pixel_pitch, origin[0] * pixel_pitch
    lo = v[:, :2].min(axis=0)
    hi = v[:, :2].max(axis=0)
    if lo[0] < ox or lo[1] < oy or hi[0] > ox + W * pixel_pitch or hi[1] > oy + H * pixel_pitch:
        raise GeometryError("canvas does not contain the mesh XY footprint")
    with torch.no_grad():
        grid = thickness_map(
            torch.tensor(v), mesh.faces, (H, W), pixel_pitch, (ox, oy), temperature
        )
    return DepthMap(grid.numpy(), pixel_pitch, origin)


# -- perceptual loss -------------------------------------------------------------


def _directed_pairs(mesh: Mesh) -> np.ndarray:
    e = mesh.edges()
    return np.concatenate([e, e[:, ::-1]], axis=0)


def perceptual_loss(mesh_adv, mesh_ori: Mesh):
    """Mean over vertices of summed squared perturbation differences to each neighbor.

    ``mesh_adv`` may be a Mesh or a (V, 3) tensor of vertex positions sharing
    ``mesh_ori``'s topology; the tensor form keeps the autograd graph.
    """
    if isinstance(mesh_adv, Mesh):
        if not np.array_equal(mesh_adv.faces, mesh_ori.faces):
            raise GeometryError("perceptual_loss: meshes have different topology")
        delta = mesh_adv.vertices - mesh_ori.vertices
        pairs = _directed_pairs(mesh_ori)
        diff = delta[pairs[:, 0]] - delta[pairs[:, 1]]
        return float((diff**2).sum() / len(mesh_ori.vertices))
    v = mesh_adv
    if v.shape[-2] != len(mesh_ori.vertices):
        raise GeometryError("perceptual_loss: vertex count mismatch")
    delta = v - torch.tensor(np.array(mesh_ori.vertices), dtype=v.dtype)
    pairs = torch.as_tensor(_directed_pairs(mesh_ori))
    diff = delta[..., pairs[:, 0], :] - delta[..., pairs[:, 1], :]
    return (diff**2).sum(dim=(-1, -2)) / len(mesh_ori.vertices)


# -- OBJ subset ------------------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                if len(rest) != 3:
                    raise ValueError("expected 3 coordinates")
                verts.append([float(t) for t in rest])
            elif tag == "f":
                if len(rest) != 3:
                    raise ValueError("expected a triangle")
                idx = [int(t.split("/")[0]) for t in rest]
                if min(idx) < 1:
                    raise ValueError("face indices are 1-based")
                faces.append([i - 1 for i in idx])
            else:
                raise ValueError(f"unsupported record {tag!r}")
        except ValueError as exc:
            raise MeshParseError(f"{path}:{lineno}: {exc}") from None
    for lineno_face, f in enumerate(faces):
        if max(f) >= len(verts):
            raise MeshParseError(f"{path}: face {lineno_face + 1} references vertex {max(f) + 1} of {len(verts)}")
    return Mesh(verts, faces)


# -- binary STL ------------------------------------------------------------------

_STL_HEADER = b"xrayattack binary STL".ljust(80, b"\0")
_STL_FACET = np.dtype(
    [("normal", "<f4", 3), ("v0", "<f4", 3), ("v1", "<f4", 3), ("v2", "<f4", 3), ("attr", "<u2")]
)


def facet_normals(vertices, faces) -> np.ndarray:
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def export_stl(mesh: Mesh, path) -> None:
    """Write a watertight, consistently wound mesh as binary STL."""
    mesh = mesh.oriented()
    v32 = mesh.vertices.astype(np.float32)
    rec = np.zeros(len(mesh.faces), dtype=_STL_FACET)
    rec["normal"] = facet_normals(v32, mesh.faces).astype(np.float32)
    rec["v0"] = v32[mesh.faces[:, 0]]
    rec["v1"] = v32[mesh.faces[:, 1]]
    rec["v2"] = v32[mesh.faces[:, 2]]
    with open(path, "wb") as fh:
        fh.write(_STL_HEADER)
        fh.write(struct.pack("<I", len(rec)))
        fh.write(rec.tobytes())


def import_stl(path) -> Mesh:
    """Read binary STL, merging bitwise-identical vertices in first-seen order."""
    data = Path(path).read_bytes()
    if len(data) < 84:
        raise MeshParseError(f"{path}: truncated STL header")
    (count,) = struct.unpack("<I", data[80:84])
    if len(data) != 84 + count * _STL_FACET.itemsize:
        raise MeshParseError(f"{path}: expected {count} facets")
    rec = np.frombuffer(data, dtype=_STL_FACET, offset=84, count=count)
    corners = np.stack([rec["v0"], rec["v1"], rec["v2"]], axis=1).reshape(-1, 3)
    index, verts, faces = {}, [], []
    for i, p in enumerate(corners):
        key = p.tobytes()
        if key not in index:
            index[key] = len(verts)
            verts.append(p.astype(np.float64))
        if i % 3 == 2:
            faces.append([index[corners[j].tobytes()] for j in (i - 2, i - 1, i)])
    return Mesh(np.array(verts).reshape(-1, 3), faces)
