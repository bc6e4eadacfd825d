"""Axis-aligned BVH over triangles for batched ray queries.

Rays are traversed in packets: every node visit runs a vectorized slab test
for the rays still active there, so the Python-level cost scales with the
node count rather than the ray count.
"""

from __future__ import annotations

import numpy as np

_LEAF_SIZE = 8


class TriangleBvh:
    """Median-split AABB tree over a triangle soup."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)]
        self.v0 = tri[:, 0]
        self.e1 = tri[:, 1] - tri[:, 0]
        self.e2 = tri[:, 2] - tri[:, 0]
        n = len(tri)

        lo = tri.min(axis=1)
        hi = tri.max(axis=1)
        centroids = tri.mean(axis=1)

        # Nodes as parallel lists; children as indices, leaves by (start, count)
        # into self.order.
        self.node_lo: list[np.ndarray] = []
        self.node_hi: list[np.ndarray] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.start: list[int] = []
        self.count: list[int] = []
        self.order = np.arange(n)

        def build(begin: int, end: int) -> int:
            node = len(self.node_lo)
            idx = self.order[begin:end]
            self.node_lo.append(lo[idx].min(axis=0))
            self.node_hi.append(hi[idx].max(axis=0))
            self.left.append(-1)
            self.right.append(-1)
            self.start.append(begin)
            self.count.append(end - begin)
            if end - begin > _LEAF_SIZE:
                cen = centroids[idx]
                axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
                mid = (begin + end) // 2
                part = np.argsort(cen[:, axis], kind="stable")
                self.order[begin:end] = idx[part]
                self.left[node] = build(begin, mid)
                self.right[node] = build(mid, end)
            return node

        build(0, n)
        self.node_lo = np.array(self.node_lo)
        self.node_hi = np.array(self.node_hi)

    def _slab(self, node: int, origins, inv_dirs, t_max):
        t1 = (self.node_lo[node] - origins) * inv_dirs
        t2 = (self.node_hi[node] - origins) * inv_dirs
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        return (tnear <= tfar) & (tfar >= 0.0) & (tnear <= t_max)

    def _tri_hits(self, tri_ids, origins, dirs, t_lo, t_hi):
        """Nearest hit parameter per ray against the given triangles (inf if none)."""
        best = np.full(len(origins), np.inf)
        for t in tri_ids:
            pvec = np.cross(dirs, self.e2[t])
            det = pvec @ self.e1[t]
            valid = np.abs(det) > 1e-300
            inv_det = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
            tvec = origins - self.v0[t]
            u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
            qvec = np.cross(tvec, self.e1[t])
            v = np.einsum("ij,ij->i", qvec, dirs) * inv_det
            t_hit = (qvec @ self.e2[t]) * inv_det
            hit = (
                valid
                & (u >= -1e-12)
                & (v >= -1e-12)
                & (u + v <= 1.0 + 1e-12)
                & (t_hit > t_lo)
                & (t_hit < t_hi)
            )
            best = np.where(hit & (t_hit < best), t_hit, best)
        return best

    def any_hit(self, origins: np.ndarray, dirs: np.ndarray, t_max: np.ndarray, t_min: float = 0.0) -> np.ndarray:
        """Boolean per ray: does anything block it within (t_min, t_max)?"""
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(origins),))
        with np.errstate(divide="ignore"):
            inv_dirs = 1.0 / dirs
        blocked = np.zeros(len(origins), dtype=bool)

        def visit(node: int, rays: np.ndarray) -> None:
            rays = rays[~blocked[rays]]
            if len(rays) == 0:
                return
            mask = self._slab(node, origins[rays], inv_dirs[rays], t_max[rays])
            rays = rays[mask]
            if len(rays) == 0:
                return
            if self.left[node] < 0:
                ids = self.order[self.start[node] : self.start[node] + self.count[node]]
                t_hit = self._tri_hits(ids, origins[rays], dirs[rays], t_min, t_max[rays])
                blocked[rays[np.isfinite(t_hit)]] = True
            else:
                visit(self.left[node], rays)
                visit(self.right[node], rays)

        visit(0, np.arange(len(origins)))
        return blocked

    def first_hit(self, origins: np.ndarray, dirs: np.ndarray, t_min: float = 0.0) -> np.ndarray:
        """Distance to the nearest intersection per ray, inf when nothing is hit."""
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        with np.errstate(divide="ignore"):
            inv_dirs = 1.0 / dirs
        best = np.full(len(origins), np.inf)

        def visit(node: int, rays: np.ndarray) -> None:
            mask = self._slab(node, origins[rays], inv_dirs[rays], best[rays])
            rays = rays[mask]
            if len(rays) == 0:
                return
            if self.left[node] < 0:
                ids = self.order[self.start[node] : self.start[node] + self.count[node]]
                t_hit = self._tri_hits(ids, origins[rays], dirs[rays], t_min, best[rays])
                np.minimum.at(best, rays, t_hit)
            else:
                visit(self.left[node], rays)
                visit(self.right[node], rays)

        visit(0, np.arange(len(origins)))
        return best
