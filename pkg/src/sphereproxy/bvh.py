"""Axis-aligned BVH over triangles and the triangle geometry kernels.

All queries are batched: traversal keeps a flat frontier of
(query, node) pairs and advances it with array ops instead of per-query
recursion. Results are independent of traversal order.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


# ---------------------------------------------------------------------------
# Triangle kernels
# ---------------------------------------------------------------------------


def point_triangle_distance(
    p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Exact distance from points to triangles, elementwise over rows.

    Closest-point classification into vertex/edge/interior regions
    (Ericson, Real-Time Collision Detection 5.1.5).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    q = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def settle(mask: np.ndarray, point: np.ndarray) -> None:
        m = mask & ~done
        q[m] = point[m]
        done[m] = True

    settle((d1 <= 0) & (d2 <= 0), a)
    settle((d3 >= 0) & (d4 <= d3), b)
    settle((d6 >= 0) & (d5 <= d6), c)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab)
        t_ac = d2 / (d2 - d6)
        settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        settle(
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
            b + t_bc[:, None] * (c - b),
        )
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        settle(~done, a + v[:, None] * ab + w[:, None] * ac)

    return np.linalg.norm(p - q, axis=1)


def _ray_triangle_terms(origins, dirs, a, b, c):
    """Moller-Trumbore determinant form, no divisions."""
    e1 = b - a
    e2 = c - a
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    tvec = origins - a
    u = np.einsum("ij,ij->i", tvec, pvec)
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", dirs, qvec)
    t = np.einsum("ij,ij->i", e2, qvec)
    return det, u, v, t, e1, e2


def ray_triangle_crossings(
    origins: np.ndarray,
    dirs: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    eps: float = 1e-9,
):
    """Classify ray/triangle pairs for parity counting, rowwise.

    Returns ``(surplus, grazing)`` where surplus is +1 for a strict
    back-face hit (ray exits through the triangle, assuming CCW outward
    winding), -1 for a strict front-face hit, 0 for a miss; grazing
    flags near-parallel rays and hits within ``eps`` of an edge, vertex
    or the ray origin, which callers must resolve by re-casting.
    """
    det, u, v, t, e1, e2 = _ray_triangle_terms(origins, dirs, a, b, c)
    absdet = np.abs(det)
    sgn = np.sign(det)
    uu = u * sgn
    vv = v * sgn
    tt = t * sgn

    margin = eps * absdet
    strict = (
        (uu > margin)
        & (vv > margin)
        & (uu + vv < absdet - margin)
        & (tt > margin)
    )
    loose = (
        (uu > -margin)
        & (vv > -margin)
        & (uu + vv < absdet + margin)
        & (tt > -margin)
    )
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    parallel = absdet <= 1e-12 * scale * np.linalg.norm(dirs, axis=1)
    grazing = (loose & ~strict) | parallel

    surplus = np.where(strict & ~grazing, -sgn.astype(np.int64), 0)
    return surplus, grazing


def triangles_intersect(
    a1: np.ndarray,
    b1: np.ndarray,
    c1: np.ndarray,
    a2: np.ndarray,
    b2: np.ndarray,
    c2: np.ndarray,
) -> np.ndarray:
    """Rowwise triangle/triangle overlap, touching included.

    Separating-axis test over the two face normals, the nine edge-edge
    cross products and the six in-plane edge normals (the latter settle
    coplanar pairs, where the edge crosses all degenerate).
    """

    def unit(x):
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return x / np.maximum(n, 1e-300)

    e1 = [unit(b1 - a1), unit(c1 - b1), unit(a1 - c1)]
    e2 = [unit(b2 - a2), unit(c2 - b2), unit(a2 - c2)]
    n1 = np.cross(e1[0], -e1[2])
    n2 = np.cross(e2[0], -e2[2])

    axes = [n1, n2]
    axes += [np.cross(u, v) for u in e1 for v in e2]
    axes += [np.cross(n1, u) for u in e1]
    axes += [np.cross(n2, v) for v in e2]
    ax = np.stack(axes, axis=1)  # (P, 17, 3)
    valid = np.einsum("pkj,pkj->pk", ax, ax) > 1e-16

    t1 = np.stack([a1, b1, c1], axis=1)  # (P, 3, 3)
    t2 = np.stack([a2, b2, c2], axis=1)
    proj1 = np.einsum("pvj,pkj->pkv", t1, ax)  # (P, 17, 3)
    proj2 = np.einsum("pvj,pkj->pkv", t2, ax)
    sep = (proj1.max(axis=2) < proj2.min(axis=2)) | (
        proj2.max(axis=2) < proj1.min(axis=2)
    )
    return ~np.any(sep & valid, axis=1)


# ---------------------------------------------------------------------------
# BVH construction
# ---------------------------------------------------------------------------


class Bvh:
    """Median-split BVH over triangle centroids.

    Flat array node storage; ``node_left < 0`` marks leaves, whose
    triangles live in ``tri_order[node_start : node_start + node_count]``.
    Every triangle belongs to exactly one leaf.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = 4):
        if len(faces) == 0:
            raise ValueError("BVH needs at least one triangle")
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.leaf_size = int(leaf_size)
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        self._corners = (a, b, c)
        self.tri_lo = np.minimum(np.minimum(a, b), c)
        self.tri_hi = np.maximum(np.maximum(a, b), c)
        self._centroids = (a + b + c) / 3.0

        lo, hi, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(faces), dtype=np.int64)

        def build(lo_i: int, hi_i: int) -> int:
            idx = len(lo)
            tris = order[lo_i:hi_i]
            lo.append(self.tri_lo[tris].min(axis=0))
            hi.append(self.tri_hi[tris].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(lo_i)
            count.append(hi_i - lo_i)
            n = hi_i - lo_i
            if n > self.leaf_size:
                cen = self._centroids[tris]
                spread = cen.max(axis=0) - cen.min(axis=0)
                axis = int(np.argmax(spread))
                if spread[axis] > 0.0:
                    mid = n // 2
                    part = np.argpartition(cen[:, axis], mid)
                    order[lo_i:hi_i] = tris[part]
                    left[idx] = build(lo_i, lo_i + mid)
                    right[idx] = build(lo_i + mid, hi_i)
            return idx

        import sys

        depth_guess = 2 * max(16, int(np.ceil(np.log2(len(faces) + 1)))) + 64
        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, depth_guess + 1000))
        try:
            build(0, len(faces))
        finally:
            sys.setrecursionlimit(old_limit)

        self.node_lo = np.asarray(lo)
        self.node_hi = np.asarray(hi)
        self.node_left = np.asarray(left, dtype=np.int64)
        self.node_right = np.asarray(right, dtype=np.int64)
        self.node_start = np.asarray(start, dtype=np.int64)
        self.node_count = np.asarray(count, dtype=np.int64)
        self.tri_order = order
        self._centroid_tree: cKDTree | None = None
        # leaf triangle table padded to the widest leaf, -1 marks no entry
        width = int(self.node_count[self.node_left < 0].max())
        table = np.full((len(lo), width), -1, dtype=np.int64)
        for i in np.nonzero(self.node_left < 0)[0]:
            s, n = self.node_start[i], self.node_count[i]
            table[i, :n] = self.tri_order[s : s + n]
        self._leaf_table = table

    @property
    def n_nodes(self) -> int:
        return len(self.node_lo)

    def centroid_tree(self) -> cKDTree:
        if self._centroid_tree is None:
            self._centroid_tree = cKDTree(self._centroids)
        return self._centroid_tree

    def corners_of(self, tris: np.ndarray):
        a, b, c = self._corners
        return a[tris], b[tris], c[tris]

    # -- queries ------------------------------------------------------------

    def closest_distances(self, points: np.ndarray) -> np.ndarray:
        """Exact min distance from each point to the triangle set."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        # tight upper bound: exact distance to the centroid-nearest triangle
        _, seed_tri = self.centroid_tree().query(points)
        a, b, c = self.corners_of(seed_tri)
        best = point_triangle_distance(points, a, b, c)

        pid = np.arange(n, dtype=np.int64)
        node = np.zeros(n, dtype=np.int64)
        keep = _aabb_dist(points, self.node_lo[node], self.node_hi[node]) < best
        pid, node = pid[keep], node[keep]

        while len(pid):
            is_leaf = self.node_left[node] < 0
            if np.any(is_leaf):
                lp, ln = pid[is_leaf], node[is_leaf]
                tris = self._leaf_table[ln]  # (L, W)
                rep_p = np.repeat(lp, tris.shape[1])
                flat = tris.ravel()
                ok = flat >= 0
                rep_p, flat = rep_p[ok], flat[ok]
                a, b, c = self.corners_of(flat)
                d = point_triangle_distance(points[rep_p], a, b, c)
                np.minimum.at(best, rep_p, d)
            pid, node = pid[~is_leaf], node[~is_leaf]
            if not len(pid):
                break
            child = np.concatenate([self.node_left[node], self.node_right[node]])
            pid = np.concatenate([pid, pid])
            lb = _aabb_dist(points[pid], self.node_lo[child], self.node_hi[child])
            keep = lb < best[pid]
            pid, node = pid[keep], child[keep]
        return best

    def ray_crossings(
        self, origins: np.ndarray, dirs: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per ray: (back hits - front hits) over t > 0, plus grazing flags."""
        origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = len(origins)
        surplus = np.zeros(n, dtype=np.int64)
        grazing = np.zeros(n, dtype=bool)

        rid = np.arange(n, dtype=np.int64)
        node = np.zeros(n, dtype=np.int64)
        keep = _ray_hits_aabb(
            origins, dirs, self.node_lo[node], self.node_hi[node]
        )
        rid, node = rid[keep], node[keep]

        while len(rid):
            is_leaf = self.node_left[node] < 0
            if np.any(is_leaf):
                lr, ln = rid[is_leaf], node[is_leaf]
                tris = self._leaf_table[ln]
                rep_r = np.repeat(lr, tris.shape[1])
                flat = tris.ravel()
                ok = flat >= 0
                rep_r, flat = rep_r[ok], flat[ok]
                a, b, c = self.corners_of(flat)
                s, g = ray_triangle_crossings(
                    origins[rep_r], dirs[rep_r], a, b, c
                )
                np.add.at(surplus, rep_r, s)
                np.logical_or.at(grazing, rep_r, g)
            rid, node = rid[~is_leaf], node[~is_leaf]
            if not len(rid):
                break
            child = np.concatenate([self.node_left[node], self.node_right[node]])
            rid = np.concatenate([rid, rid])
            keep = _ray_hits_aabb(
                origins[rid], dirs[rid], self.node_lo[child], self.node_hi[child]
            )
            rid, node = rid[keep], child[keep]
        return surplus, grazing

    def self_candidate_pairs(self) -> np.ndarray:
        """Triangle index pairs (i < j) whose AABBs overlap.

        A superset of every actually intersecting pair; pruning uses
        only exact closed-interval AABB tests.
        """
        na = np.array([0], dtype=np.int64)
        nb = np.array([0], dtype=np.int64)
        out: list[np.ndarray] = []
        left, right = self.node_left, self.node_right

        while len(na):
            both = (left[na] < 0) & (left[nb] < 0)
            if np.any(both):
                ta = self._leaf_table[na[both]]  # (P, W)
                tb = self._leaf_table[nb[both]]
                fa = np.repeat(ta, ta.shape[1], axis=1).ravel()  # (P*W*W,)
                fb = np.tile(tb, (1, tb.shape[1])).ravel()
                ok = (fa >= 0) & (fb >= 0)
                lo = np.minimum(fa[ok], fb[ok])
                hi = np.maximum(fa[ok], fb[ok])
                ok = lo < hi
                lo, hi = lo[ok], hi[ok]
                ok = np.all(
                    (self.tri_lo[lo] <= self.tri_hi[hi])
                    & (self.tri_lo[hi] <= self.tri_hi[lo]),
                    axis=1,
                )
                if np.any(ok):
                    out.append(np.stack([lo[ok], hi[ok]], axis=1))

            na, nb = na[~both], nb[~both]
            if not len(na):
                break
            same = na == nb
            da, db = na[~same], nb[~same]
            # expand whichever side of a mixed pair is internal (a first)
            ea = left[da] >= 0
            pa = np.concatenate(
                [
                    np.where(ea, left[da], da),
                    np.where(ea, right[da], da),
                    left[na[same]],
                    left[na[same]],
                    right[na[same]],
                ]
            )
            pb = np.concatenate(
                [
                    np.where(ea, db, left[db]),
                    np.where(ea, db, right[db]),
                    left[na[same]],
                    right[na[same]],
                    right[na[same]],
                ]
            )
            lo_n = np.minimum(pa, pb)
            hi_n = np.maximum(pa, pb)
            key = lo_n * self.n_nodes + hi_n
            _, uniq = np.unique(key, return_index=True)
            lo_n, hi_n = lo_n[uniq], hi_n[uniq]
            overlap = np.all(
                (self.node_lo[lo_n] <= self.node_hi[hi_n])
                & (self.node_lo[hi_n] <= self.node_hi[lo_n]),
                axis=1,
            )
            na, nb = lo_n[overlap], hi_n[overlap]

        if not out:
            return np.empty((0, 2), dtype=np.int64)
        pairs = np.concatenate(out, axis=0)
        key = pairs[:, 0] * len(self.faces) + pairs[:, 1]
        pairs = pairs[np.unique(key, return_index=True)[1]]
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]


def _aabb_dist(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return np.linalg.norm(gap, axis=1)


def _ray_hits_aabb(o, d, lo, hi) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    zero = d == 0.0
    if np.any(zero):
        inside = (o >= lo) & (o <= hi)
        t1 = np.where(zero, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(zero, np.where(inside, np.inf, -np.inf), t2)
    near = np.minimum(t1, t2).max(axis=1)
    far = np.maximum(t1, t2).min(axis=1)
    return far >= np.maximum(near, 0.0)
