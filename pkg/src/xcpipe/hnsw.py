"""Layered small-world graph index for cosine similarity search.

Build: each inserted vector draws a top layer from a geometric
distribution (multiplier 1 / ln M), greedily descends through the upper
layers, then connects into every layer at or below its level using a
beam search of width `ef_construction` and the distance-based neighbor
selection heuristic.  Degree is capped at M per layer (2M at layer 0).

All vectors must be unit l2 norm; internal distance is the negated dot
product, so reported similarities are exact cosines.  Construction and
search are deterministic for a fixed seed and insertion order.  A
post-build repair pass guarantees every node is reachable from the
entry point at layer 0, which also makes a search with
ef_search >= size exhaustive (exact, ties broken by lower id).
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from .errors import DataError, InvalidParam


class HnswIndex:
    def __init__(self, dim: int, M: int = 16, ef_construction: int = 200,
                 seed: int = 0):
        if M < 2:
            raise InvalidParam("M must be >= 2")
        self.dim = dim
        self.M = M
        self.ef_construction = ef_construction
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._mult = 1.0 / math.log(M)
        self.vectors = np.zeros((0, dim))
        self.levels: list[int] = []
        self.layers: list[dict[int, list[int]]] = []
        self.entry = -1
        self.max_level = -1
        self.repaired_edges = 0
        self._visited = np.zeros(0, dtype=np.int64)
        self._stamp = 0

    def __len__(self):
        return len(self.levels)

    # -- construction ---------------------------------------------------

    def add_items(self, vectors: np.ndarray):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidParam("index vectors must be unit norm")
        start = len(self)
        self.vectors = np.vstack([self.vectors, vectors])
        self._visited = np.concatenate(
            [self._visited, np.zeros(vectors.shape[0], dtype=np.int64)])
        for i in range(start, start + vectors.shape[0]):
            self._insert(i)

    def _draw_level(self) -> int:
        u = 1.0 - self._rng.random()        # in (0, 1]
        return int(-math.log(u) * self._mult)

    def _cap(self, layer: int) -> int:
        return 2 * self.M if layer == 0 else self.M

    def _insert(self, i: int):
        level = self._draw_level()
        q = self.vectors[i]
        self.levels.append(level)

        if self.entry < 0:
            for _ in range(level + 1):
                self.layers.append({i: []})
            self.entry = i
            self.max_level = level
            return

        for layer in range(min(level, self.max_level) + 1):
            self.layers[layer][i] = []

        eps = [(-float(self.vectors[self.entry] @ q), self.entry)]
        for layer in range(self.max_level, level, -1):
            eps = self._search_layer(q, eps, 1, layer)

        for layer in range(min(level, self.max_level), -1, -1):
            cands = self._search_layer(q, eps, self.ef_construction, layer)
            selected = self._select_heuristic(q, cands, self.M)
            self.layers[layer][i] = [n for _, n in selected]
            for dist, n in selected:
                nbrs = self.layers[layer][n]
                nbrs.append(i)
                if len(nbrs) > self._cap(layer):
                    self._shrink(n, layer)
            eps = cands

        if level > self.max_level:
            for _ in range(self.max_level + 1, level + 1):
                self.layers.append({i: []})
            self.entry = i
            self.max_level = level

    def _shrink(self, node: int, layer: int):
        nbrs = self.layers[layer][node]
        ids = np.asarray(nbrs, dtype=np.int64)
        dists = -(self.vectors[ids] @ self.vectors[node])
        order = np.lexsort((ids, dists))
        cands = [(float(dists[j]), int(ids[j])) for j in order]
        selected = self._select_heuristic(
            self.vectors[node], cands, self._cap(layer))
        self.layers[layer][node] = [n for _, n in selected]

    def _select_heuristic(self, q, cands, m):
        """Keep candidates closer to q than to anything already kept;
        backfill with the nearest pruned ones.

        A candidate x is pruned iff some earlier-selected s satisfies
        d(x, s) <= d(x, q); each selection kills its dominated
        followers in one vectorized pass.
        """
        n = len(cands)
        if n <= m:
            return list(cands)
        ids = np.fromiter((e for _, e in cands), dtype=np.int64, count=n)
        dists = np.fromiter((d for d, _ in cands), dtype=np.float64, count=n)
        vecs = self.vectors[ids]
        alive = np.ones(n, dtype=bool)
        picked = np.zeros(n, dtype=bool)
        n_picked = 0
        for j in range(n):
            if not alive[j]:
                continue
            picked[j] = True
            n_picked += 1
            if n_picked == m:
                break
            dominated = -(vecs[j + 1:] @ vecs[j]) <= dists[j + 1:]
            alive[j + 1:] &= ~dominated
        out = [(float(dists[j]), int(ids[j]))
               for j in range(n) if picked[j]]
        if n_picked < m:
            for j in range(n):
                if len(out) == m:
                    break
                if not picked[j]:
                    out.append((float(dists[j]), int(ids[j])))
        return out

    # -- search ---------------------------------------------------------

    def _search_layer(self, q, entry_points, ef, layer):
        """Beam search; returns [(dist, id)] sorted by (dist, id)."""
        graph = self.layers[layer]
        self._stamp += 1
        stamp = self._stamp
        visited = self._visited
        cand: list[tuple[float, int]] = []
        result: list[tuple[float, int]] = []
        for dist, e in entry_points:
            if visited[e] == stamp:
                continue
            visited[e] = stamp
            heapq.heappush(cand, (dist, e))
            heapq.heappush(result, (-dist, e))
        while cand:
            dist_c, c = heapq.heappop(cand)
            if len(result) >= ef and dist_c > -result[0][0]:
                break
            nbrs = graph[c]
            if not nbrs:
                continue
            arr = np.asarray(nbrs, dtype=np.int64)
            mask = visited[arr] != stamp
            if not mask.any():
                continue
            fresh = arr[mask]
            visited[fresh] = stamp
            dists = -(self.vectors[fresh] @ q)
            if len(result) >= ef:
                # the eviction threshold only tightens, so candidates
                # at or beyond the current worst can be dropped up front
                keep = dists < -result[0][0]
                fresh = fresh[keep]
                dists = dists[keep]
            for n, dn in zip(fresh.tolist(), dists.tolist()):
                if len(result) < ef:
                    heapq.heappush(result, (-dn, n))
                    heapq.heappush(cand, (dn, n))
                elif dn < -result[0][0]:
                    heapq.heappushpop(result, (-dn, n))
                    heapq.heappush(cand, (dn, n))
        out = [(-nd, n) for nd, n in result]
        out.sort()
        return out

    def query(self, q: np.ndarray, k: int, ef_search: int):
        """Top-k (ids, cosines), cosine descending, ties to lower id.

        Exhaustive (hence exact) when ef_search >= len(self).
        """
        if k > len(self):
            raise InvalidParam(f"k={k} exceeds index size {len(self)}")
        q = np.asarray(q, dtype=np.float64)
        eps = [(-float(self.vectors[self.entry] @ q), self.entry)]
        for layer in range(self.max_level, 0, -1):
            eps = self._search_layer(q, eps, 1, layer)
        found = self._search_layer(q, eps, max(k, ef_search), 0)
        top = found[:k]
        ids = np.asarray([n for _, n in top], dtype=np.int64)
        cosines = np.asarray([-d for d, _ in top])
        return ids, cosines

    # -- connectivity ---------------------------------------------------

    def _reachable(self):
        seen = np.zeros(len(self), dtype=bool)
        seen[self.entry] = True
        frontier = [self.entry]
        graph = self.layers[0]
        while frontier:
            nxt = []
            for c in frontier:
                for n in graph[c]:
                    if not seen[n]:
                        seen[n] = True
                        nxt.append(n)
            frontier = nxt
        return seen

    def repair_connectivity(self, max_rounds=1000):
        """Attach any node unreachable from the entry point at layer 0
        to its nearest reachable neighbor.  Returns edges added."""
        if self.entry < 0:
            return 0
        added = 0
        for _ in range(max_rounds):
            seen = self._reachable()
            if seen.all():
                self.repaired_edges += added
                return added
            reached_ids = np.flatnonzero(seen)
            for u in np.flatnonzero(~seen):
                dots = self.vectors[reached_ids] @ self.vectors[u]
                r = int(reached_ids[int(np.argmax(dots))])
                nbrs = self.layers[0][r]
                nbrs.append(int(u))
                added += 1
                if len(nbrs) > self._cap(0):
                    ids = np.asarray(
                        [n for n in nbrs if n != u], dtype=np.int64)
                    d = -(self.vectors[ids] @ self.vectors[r])
                    worst = int(ids[int(np.lexsort((-ids, -d))[0])])
                    nbrs.remove(worst)
        raise DataError("connectivity repair did not converge")

    # -- serialization ----------------------------------------------------

    def save_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "vectors": self.vectors,
            "levels": np.asarray(self.levels, dtype=np.int64),
            "meta": np.asarray(
                [self.M, self.ef_construction, self.entry, self.max_level,
                 self.seed, self.repaired_edges], dtype=np.int64),
        }
        for j, graph in enumerate(self.layers):
            nodes = np.asarray(sorted(graph), dtype=np.int64)
            indptr = np.zeros(nodes.size + 1, dtype=np.int64)
            flat: list[int] = []
            for pos, node in enumerate(nodes):
                flat.extend(graph[int(node)])
                indptr[pos + 1] = len(flat)
            out[f"layer{j}_nodes"] = nodes
            out[f"layer{j}_indptr"] = indptr
            out[f"layer{j}_indices"] = np.asarray(flat, dtype=np.int64)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "HnswIndex":
        vectors = tensors["vectors"]
        meta = tensors["meta"]
        idx = cls(vectors.shape[1], M=int(meta[0]), ef_construction=int(meta[1]),
                  seed=int(meta[4]))
        idx.vectors = np.asarray(vectors, dtype=np.float64)
        idx.levels = [int(x) for x in tensors["levels"]]
        idx.entry = int(meta[2])
        idx.max_level = int(meta[3])
        idx.repaired_edges = int(meta[5])
        idx._visited = np.zeros(len(idx.levels), dtype=np.int64)
        j = 0
        while f"layer{j}_nodes" in tensors:
            nodes = tensors[f"layer{j}_nodes"]
            indptr = tensors[f"layer{j}_indptr"]
            flat = tensors[f"layer{j}_indices"]
            graph = {
                int(node): [int(x) for x in flat[indptr[pos]:indptr[pos + 1]]]
                for pos, node in enumerate(nodes)
            }
            idx.layers.append(graph)
            j += 1
        return idx


def build_hnsw(vectors: np.ndarray, M: int, ef_construction: int,
               seed: int) -> HnswIndex:
    """Build an index over unit vectors and repair layer-0 reachability."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if vectors.shape[0] < 1:
        raise InvalidParam("need at least one vector")
    idx = HnswIndex(vectors.shape[1], M=M, ef_construction=ef_construction,
                    seed=seed)
    idx.add_items(vectors)
    idx.repair_connectivity()
    return idx
