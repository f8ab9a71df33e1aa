"""
Bounding-volume hierarchy over triangles for batched nearest-hit ray queries.
Results are identical to the brute-force scan in geometry.intersect_rays_triangles.
"""

import numpy as np

from sparse_view_recon.geometry import _moller_trumbore

LEAF_SIZE = 8


class BVH:
    def __init__(self, triangles: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.triangles = np.asarray(triangles, dtype=np.float64)
        self.leaf_size = leaf_size
        self._build()

    def _build(self):
        tris = self.triangles
        n = len(tris)
        lo_all = tris.min(axis=1)
        hi_all = tris.max(axis=1)
        centroids = tris.mean(axis=1)
        order = np.arange(n)

        box_min, box_max, left, right, start, count = [], [], [], [], [], []
        # (node id, begin, end) over the `order` permutation
        stack = [(0, 0, n)]
        box_min.append(None); box_max.append(None); left.append(-1); right.append(-1)
        start.append(0); count.append(0)
        while stack:
            node, begin, end = stack.pop()
            idx = order[begin:end]
            box_min[node] = lo_all[idx].min(axis=0)
            box_max[node] = hi_all[idx].max(axis=0)
            if end - begin <= self.leaf_size:
                start[node], count[node] = begin, end - begin
                continue
            extent = centroids[idx].max(axis=0) - centroids[idx].min(axis=0)
            axis = int(np.argmax(extent))
            mid = (end - begin) // 2
            # stable median split keeps the build deterministic
            local = np.argsort(centroids[idx, axis], kind="stable")
            order[begin:end] = idx[local]
            children = []
            for _ in range(2):
                box_min.append(None); box_max.append(None); left.append(-1); right.append(-1)
                start.append(0); count.append(0)
                children.append(len(box_min) - 1)
            left[node], right[node] = children
            stack.append((children[1], begin + mid, end))
            stack.append((children[0], begin, begin + mid))

        self.box_min = np.array(box_min)
        self.box_max = np.array(box_max)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)
        self.order = order

    def _slab(self, origins, inv_dirs, nodes):
        t0 = (self.box_min[nodes] - origins) * inv_dirs
        t1 = (self.box_max[nodes] - origins) * inv_dirs
        t_near = np.nanmax(np.minimum(t0, t1), axis=1)
        t_far = np.nanmin(np.maximum(t0, t1), axis=1)
        return t_near, t_far

    def intersect(self, origins: np.ndarray, directions: np.ndarray, eps: float = 1e-12):
        n_rays = len(origins)
        best_t = np.full(n_rays, np.inf)
        best_f = np.full(n_rays, -1, dtype=np.int64)
        if n_rays == 0:
            return best_t, best_f
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_dirs = 1.0 / directions
        ray_ids = np.arange(n_rays)
        node_ids = np.zeros(n_rays, dtype=np.int64)
        while len(ray_ids):
            with np.errstate(invalid="ignore"):
                t_near, t_far = self._slab(origins[ray_ids], inv_dirs[ray_ids], node_ids)
            # keep boxes that can still hold a hit at or before the current best (ties survive)
            alive = (t_far >= np.maximum(t_near, 0.0)) & (t_far > 0) & (t_near <= best_t[ray_ids])
            ray_ids, node_ids = ray_ids[alive], node_ids[alive]
            is_leaf = self.left[node_ids] < 0

            leaf_rays, leaf_nodes = ray_ids[is_leaf], node_ids[is_leaf]
            if len(leaf_rays):
                counts = self.count[leaf_nodes]
                rep_rays = np.repeat(leaf_rays, counts)
                offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                faces = self.order[np.repeat(self.start[leaf_nodes], counts) + offsets]
                tri = self.triangles[faces]
                t, hit = _moller_trumbore(origins[rep_rays], directions[rep_rays],
                                          tri[:, 0], tri[:, 1], tri[:, 2], eps)
                rep_rays, faces, t = rep_rays[hit], faces[hit], t[hit]
                if len(t):
                    # merge with current best: smallest distance, then lowest face index
                    cand_rays = np.concatenate([rep_rays, np.flatnonzero(best_f >= 0)])
                    cand_t = np.concatenate([t, best_t[best_f >= 0]])
                    cand_f = np.concatenate([faces, best_f[best_f >= 0]])
                    sel = np.lexsort((cand_f, cand_t, cand_rays))
                    cand_rays, cand_t, cand_f = cand_rays[sel], cand_t[sel], cand_f[sel]
                    first = np.ones(len(cand_rays), dtype=bool)
                    first[1:] = cand_rays[1:] != cand_rays[:-1]
                    best_t[cand_rays[first]] = cand_t[first]
                    best_f[cand_rays[first]] = cand_f[first]

            inner_rays, inner_nodes = ray_ids[~is_leaf], node_ids[~is_leaf]
            ray_ids = np.concatenate([inner_rays, inner_rays])
            node_ids = np.concatenate([self.left[inner_nodes], self.right[inner_nodes]])
        return best_t, best_f
