"""Triangle mesh type, OBJ/JSON loading, validation and normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateMesh, DimensionMismatch, FaceIndexError, ParseError

# OBJ floats are printed with 9 significant digits (round-trips through
# the parser to the same shortest-repr float in practice for our data).
_OBJ_FLOAT = "%.9g"


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise DimensionMismatch("Aabb corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError("Aabb lo must be <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface.

    Arrays are made read-only on construction; every operation on a mesh
    is a pure function, so instances are safe to share across threads.

    vertices: (V, 3) float64, meters
    faces: (F, 3) int64, indices into vertices
    blend_weights: optional (V, J) float64, rows non-negative, sum 1
    detail_vertices: optional (D,) int64, vertex ids of detail regions
    """

    vertices: np.ndarray
    faces: np.ndarray
    blend_weights: np.ndarray | None = None
    detail_vertices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ParseError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ParseError(f"faces must be (F, 3), got {faces.shape}")
        if not np.all(np.isfinite(verts)):
            raise ParseError("non-finite vertex coordinate")
        if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
            raise FaceIndexError(
                f"face index out of range (V={len(verts)}, "
                f"max index {faces.max() if faces.size else '-'})"
            )
        verts.flags.writeable = False
        faces.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        if self.blend_weights is not None:
            bw = np.ascontiguousarray(self.blend_weights, dtype=np.float64)
            if bw.ndim != 2 or bw.shape[0] != len(verts):
                raise DimensionMismatch(
                    f"blend_weights must be (V, J), got {bw.shape} for V={len(verts)}"
                )
            if np.any(bw < -1e-12):
                raise ParseError("negative blend weight")
            sums = bw.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                bad = int(np.argmax(np.abs(sums - 1.0)))
                raise ParseError(
                    f"blend weight row {bad} sums to {sums[bad]!r}, expected 1"
                )
            bw.flags.writeable = False
            object.__setattr__(self, "blend_weights", bw)
        if self.detail_vertices is not None:
            dv = np.unique(np.asarray(self.detail_vertices, dtype=np.int64))
            if dv.size and (dv.min() < 0 or dv.max() >= len(verts)):
                raise FaceIndexError("detail vertex index out of range")
            dv.flags.writeable = False
            object.__setattr__(self, "detail_vertices", dv)

    # -- derived geometry ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def aabb(self) -> Aabb:
        if self.n_vertices == 0:
            raise DegenerateMesh("empty mesh has no bounds")
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-face corner arrays, each (F, 3)."""
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        a, b, c = self.triangle_corners()
        n = np.cross(b - a, c - a)
        if normalized:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(ln, 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same topology and attributes with replaced vertex positions."""
        return TriangleMesh(
            vertices,
            self.faces,
            blend_weights=self.blend_weights,
            detail_vertices=self.detail_vertices,
            meta=dict(self.meta),
        )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def check_watertight(mesh: TriangleMesh) -> tuple[bool, list[tuple[int, int]]]:
    """True iff every edge is shared by exactly 2 consistently wound faces.

    Returns the verdict and the sorted list of offending (boundary or
    inconsistently wound) undirected edges. Inconsistent winding counts
    as non-watertight; it is never repaired here because flipped faces
    would silently corrupt signed distances downstream.
    """
    f = mesh.faces
    if len(f) == 0:
        return False, []
    # directed half-edges (a, b) for the three sides of every face
    ha = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    hb = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    v = mesh.n_vertices
    directed = ha.astype(np.int64) * v + hb
    lo = np.minimum(ha, hb)
    hi = np.maximum(ha, hb)
    undirected = lo.astype(np.int64) * v + hi

    dir_keys, dir_counts = np.unique(directed, return_counts=True)
    und_keys, und_counts = np.unique(undirected, return_counts=True)

    bad = set()
    # an undirected edge must appear exactly twice in total ...
    for key in und_keys[und_counts != 2]:
        bad.add((int(key // v), int(key % v)))
    # ... and each direction exactly once (two same-direction half-edges
    # mean two faces disagree on winding)
    for key in dir_keys[dir_counts != 1]:
        a, b = int(key // v), int(key % v)
        bad.add((min(a, b), max(a, b)))

    edges = sorted(bad)
    return len(edges) == 0, edges


def mesh_volume(mesh: TriangleMesh) -> float:
    """Signed volume by the divergence theorem (sum of origin tetrahedra).

    Exact for watertight meshes; negative when the winding is inverted.
    """
    a, b, c = mesh.triangle_corners()
    return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)


def normalize_to_unit_sphere(
    mesh: TriangleMesh,
) -> tuple[TriangleMesh, float, np.ndarray]:
    """Center the mesh at the origin and scale it into the unit sphere.

    Returns ``(mesh', scale, center)`` with ``v' = (v - center) * scale``
    and max vertex norm exactly 1 after the transform. The center is the
    AABB center, which makes a second application the identity.
    """
    box = mesh.aabb()
    center = box.center
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    if radius <= 0.0:
        raise DegenerateMesh("mesh has zero extent")
    scale = 1.0 / radius
    return mesh.with_vertices((mesh.vertices - center) * scale), scale, center


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _weights_sidecar(path: Path) -> Path:
    return path.with_suffix(".weights.json")


def load_mesh(path: str | Path) -> TriangleMesh:
    """Load an OBJ or mesh-JSON file.

    OBJ understands only ``v``/``f`` records; a ``<name>.weights.json``
    sidecar next to an OBJ supplies blend weights. JSON meshes carry
    weights inline.
    """
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    if path.suffix.lower() == ".obj":
        return _load_obj(path)
    if path.suffix.lower() == ".json":
        return _load_json(path)
    raise ParseError(f"unsupported mesh format: {path.suffix!r}")


def _load_obj(path: Path) -> TriangleMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in tokens[1:4]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad vertex: {exc}") from exc
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise ParseError(
                    f"{path}:{lineno}: only triangle faces are supported"
                )
            try:
                idx = [int(t.split("/")[0]) for t in tokens[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad face: {exc}") from exc
            if any(i == 0 for i in idx):
                raise ParseError(f"{path}:{lineno}: OBJ indices are 1-based")
            # negative indices are relative to the current vertex count
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
        # other record types (vn, vt, o, g, usemtl ...) are ignored
    weights = None
    sidecar = _weights_sidecar(path)
    if sidecar.exists():
        with open(sidecar) as fh:
            weights = json.load(fh)["blend_weights"]
    return TriangleMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        blend_weights=weights,
    )


def _load_json(path: Path) -> TriangleMesh:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if "vertices" not in data or "faces" not in data:
        raise ParseError(f"{path}: mesh JSON needs 'vertices' and 'faces'")
    return TriangleMesh(
        np.asarray(data["vertices"], dtype=np.float64).reshape(-1, 3),
        np.asarray(data["faces"], dtype=np.int64).reshape(-1, 3),
        blend_weights=data.get("blend_weights"),
        detail_vertices=data.get("detail_vertices"),
        meta=data.get("meta", {}),
    )


def save_mesh(mesh: TriangleMesh, path: str | Path) -> None:
    """Write OBJ (v/f only, 9 significant digits) or self-describing JSON."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        lines = []
        for v in mesh.vertices:
            lines.append(
                "v %s %s %s" % tuple(_OBJ_FLOAT % c for c in v)
            )
        for f in mesh.faces:
            lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
        path.write_text("\n".join(lines) + "\n")
        if mesh.blend_weights is not None:
            with open(_weights_sidecar(path), "w") as fh:
                json.dump({"blend_weights": mesh.blend_weights.tolist()}, fh)
    elif path.suffix.lower() == ".json":
        data: dict = {
            "vertices": mesh.vertices.tolist(),
            "faces": mesh.faces.tolist(),
        }
        if mesh.blend_weights is not None:
            data["blend_weights"] = mesh.blend_weights.tolist()
        if mesh.detail_vertices is not None:
            data["detail_vertices"] = mesh.detail_vertices.tolist()
        if mesh.meta:
            data["meta"] = mesh.meta
        with open(path, "w") as fh:
            json.dump(data, fh)
    else:
        raise ParseError(f"unsupported mesh format: {path.suffix!r}")
