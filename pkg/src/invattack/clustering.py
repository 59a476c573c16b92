"""Spectral clustering of changed-pixel masks.

Changed pixels become nodes of an 8-connectivity unit-weight graph; clusters
come from k-means on the smallest Laplacian eigenvectors. Everything here is
deterministic: the eigensolver is cyclic Jacobi, eigenvector signs are
canonicalized, and k-means seeds farthest-first from the lowest-index node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, EmptyMask, InvalidParams

DEFAULT_MAX_CLUSTERS = 6

_JACOBI_SWEEP_CAP = 60
_KMEANS_ITER_CAP = 100


@dataclass
class PixelGraph:
    """Nodes are (row, col) of set mask cells in row-major order."""
    nodes: list[tuple[int, int]]
    weights: np.ndarray  # symmetric, zero diagonal, float64

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class ClusterAssignment:
    nodes: list[tuple[int, int]]
    cluster_id: np.ndarray  # int per node, ids in [0, num_clusters)
    num_clusters: int

    def members(self, cid: int) -> list[tuple[int, int]]:
        return [self.nodes[i] for i in np.flatnonzero(self.cluster_id == cid)]


def build_pixel_graph(mask: np.ndarray) -> PixelGraph:
    """Unit-weight 8-neighbor graph over the true cells of a boolean raster."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidParams(f"mask must be 2-D, got shape {mask.shape}")
    coords = np.argwhere(mask)
    if coords.shape[0] == 0:
        raise EmptyMask("mask has no set pixels")
    nodes = [(int(r), int(c)) for r, c in coords]
    n = len(nodes)
    w = np.zeros((n, n), dtype=np.float64)
    index = {rc: i for i, rc in enumerate(nodes)}
    for i, (r, c) in enumerate(nodes):
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                j = index.get((r + dr, c + dc))
                if j is not None:
                    w[i, j] = 1.0
    return PixelGraph(nodes, w)


def connected_components(g: PixelGraph) -> np.ndarray:
    """Component id per node via BFS over positive weights."""
    n = len(g)
    comp = np.full(n, -1, dtype=np.int64)
    cid = 0
    for start in range(n):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = cid
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(g.weights[i] > 0):
                if comp[j] < 0:
                    comp[j] = cid
                    stack.append(int(j))
        cid += 1
    return comp


def _jacobi_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalization of a symmetric matrix.

    Returns eigenvalues ascending and orthonormal eigenvectors as columns,
    with a deterministic sign convention.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.reshape(1), v
    scale = max(np.sqrt((a * a).sum()), 1e-300)
    tol = 1e-12 * scale
    # once every entry is below this, the off-diagonal norm is below tol/4
    skip = tol / (4.0 * n)
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(_JACOBI_SWEEP_CAP):
        off = np.sqrt(np.sum(a[off_mask] ** 2))
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceFailure(
            f"Jacobi did not reach tolerance in {_JACOBI_SWEEP_CAP} sweeps")
    vals = np.diag(a).copy()
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = v[:, order]
    # deterministic signs: largest-magnitude entry (lowest index on ties) >= 0
    for j in range(n):
        col = vecs[:, j]
        lead = int(np.argmax(np.abs(col) > np.abs(col).max() - 1e-12))
        if col[lead] < 0:
            vecs[:, j] = -col
    return vals, vecs


def laplacian(g: PixelGraph) -> np.ndarray:
    d = g.weights.sum(axis=1)
    return np.diag(d) - g.weights


def laplacian_spectrum(g: PixelGraph, m: int) -> tuple[np.ndarray, np.ndarray]:
    """m smallest eigenpairs of L = D - W, eigenvalues ascending."""
    if m < 1 or m > len(g):
        raise InvalidParams(f"m must be in [1, {len(g)}]")
    vals, vecs = _jacobi_eigh(laplacian(g))
    return vals[:m], vecs[:, :m]


def _farthest_first_seeds(points: np.ndarray, k: int) -> list[int]:
    """Seed indices: start at node 0, then repeatedly take the point farthest
    from the chosen set (lowest index on ties)."""
    seeds = [0]
    d = np.linalg.norm(points - points[0], axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d))
        seeds.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return seeds


def _kmeans(points: np.ndarray, k: int) -> np.ndarray:
    n = points.shape[0]
    centroids = points[_farthest_first_seeds(points, k)].copy()
    assign = np.full(n, -1, dtype=np.int64)
    for _it in range(_KMEANS_ITER_CAP):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        revived: set[int] = set()
        for cid in range(k):
            if not np.any(new_assign == cid):
                # revive an empty cluster with the worst-fit untouched point
                fit = d2[np.arange(n), new_assign].copy()
                for i in revived:
                    fit[i] = -np.inf
                worst = int(np.argmax(fit))
                new_assign[worst] = cid
                revived.add(worst)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for cid in range(k):
            centroids[cid] = points[assign == cid].mean(axis=0)
    return assign


def _relabel_by_first_occurrence(assign: np.ndarray) -> tuple[np.ndarray, int]:
    mapping: dict[int, int] = {}
    out = np.empty_like(assign)
    for i, a in enumerate(assign):
        if int(a) not in mapping:
            mapping[int(a)] = len(mapping)
        out[i] = mapping[int(a)]
    return out, len(mapping)


def _refine_to_components(assign: np.ndarray, comp: np.ndarray,
                          max_k: int) -> np.ndarray:
    """Guard: no cluster may span two components (when components fit max_k).

    Splits offending clusters along component boundaries, then merges the
    smallest resulting cells within a component if the total exceeds max_k.
    """
    cells: dict[tuple[int, int], list[int]] = {}
    for i, (a, c) in enumerate(zip(assign, comp)):
        cells.setdefault((int(a), int(c)), []).append(i)
    if len(cells) > max_k:
        # merge smallest cells into the largest cell of the same component
        by_comp: dict[int, list[tuple[int, int]]] = {}
        for key in cells:
            by_comp.setdefault(key[1], []).append(key)
        while len(cells) > max_k:
            victims = [k2 for k2, v in by_comp.items() if len(v) > 1]
            comp_id = min(victims)
            keys = sorted(by_comp[comp_id], key=lambda k2: (len(cells[k2]), k2))
            small, big = keys[0], keys[-1]
            cells[big] = sorted(cells[big] + cells.pop(small))
            by_comp[comp_id].remove(small)
    out = np.empty_like(assign)
    ordered = sorted(cells.values(), key=lambda ms: min(ms))
    for cid, members in enumerate(ordered):
        for i in members:
            out[i] = cid
    return out


def cluster(mask: np.ndarray, max_k: int = DEFAULT_MAX_CLUSTERS) -> ClusterAssignment:
    """Spectral clustering of a changed-pixel mask.

    k is the largest-eigengap position among the smallest eigenvalues, capped
    at max_k and at the connected-component count. The gaps between the zero
    eigenvalues vanish, so the eigengap position never falls below the
    component count and the cap makes disjoint regions their own clusters.
    With more components than max_k the spectrum below the cap is all noise
    and k is simply max_k.
    """
    if max_k < 1:
        raise InvalidParams("max_k must be >= 1")
    g = build_pixel_graph(mask)
    n = len(g)
    comp = connected_components(g)
    n_comp = int(comp.max()) + 1
    if n_comp >= max_k or n <= max_k:
        k = min(n_comp, max_k, n)
        vals, vecs = laplacian_spectrum(g, min(n, max_k))
    else:
        m = min(n, max_k + 1)
        vals, vecs = laplacian_spectrum(g, m)
        gaps = np.diff(vals[:m])
        k_gap = int(np.argmax(gaps)) + 1 if len(gaps) else 1
        k = min(k_gap, n_comp, max_k, n)
    embedding = vecs[:, :k]
    assign = _kmeans(embedding, k) if k > 1 else np.zeros(n, dtype=np.int64)
    if n_comp <= max_k:
        assign = _refine_to_components(assign, comp, max_k)
    assign, k_final = _relabel_by_first_occurrence(assign)
    return ClusterAssignment(nodes=g.nodes, cluster_id=assign,
                             num_clusters=k_final)
