"""Per-grid-cell K-means pseudo-labels, the heading-bin baseline labeler and
label-quality metrics."""
from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, LabelingError, ParameterError
from .geogrid import CellId, grid_cell

log = logging.getLogger(__name__)


class PlaceLabel(NamedTuple):
    e_i: int
    n_j: int
    h: int

    @property
    def cell(self) -> CellId:
        return CellId(self.e_i, self.n_j)


class KMeansResult(NamedTuple):
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    traces: list  # objective after every step, one list per restart


def _sse(X, a, C):
    diff = X - C[a]
    return float((diff * diff).sum())


def _sqdist(X, C):
    diff = X[:, None, :] - C[None, :, :]
    return (diff * diff).sum(axis=-1)


def _seed_plusplus(X, k, rng):
    """k-means++: each new seed is drawn with probability proportional to D^2."""
    n = len(X)
    idx = [int(rng.integers(n))]
    d = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        c = int(rng.choice(n, p=d / d.sum()))
        idx.append(c)
        d = np.minimum(d, ((X - X[c]) ** 2).sum(axis=1))
    return X[idx].copy()


def _means(X, a, k):
    C = np.zeros((k, X.shape[1]))
    np.add.at(C, a, X)
    return C / np.bincount(a, minlength=k)[:, None]


def _lloyd(X, C, max_iter, trace):
    k = len(C)
    a = None
    for _ in range(max_iter):
        D = _sqdist(X, C)
        new = D.argmin(axis=1)
        if a is not None:
            # keep the current cluster on exact ties
            keep = D[np.arange(len(X)), a] <= D[np.arange(len(X)), new]
            new = np.where(keep, a, new)
            if np.array_equal(new, a):
                break
        a = new
        trace.append(_sse(X, a, C))
        counts = np.bincount(a, minlength=k)
        while (counts == 0).any():
            # re-seed an empty cluster at the point farthest from its centroid
            empty = int(np.flatnonzero(counts == 0)[0])
            far = np.where(counts[a] > 1, ((X - C[a]) ** 2).sum(axis=1), -1.0)
            i = int(far.argmax())
            a[i] = empty
            C[empty] = X[i]
            counts = np.bincount(a, minlength=k)
        C = _means(X, a, k)
        trace.append(_sse(X, a, C))
    return a, C


def _hartigan(X, a, k, trace):
    """Single-point moves that strictly lower the objective, to a fixed point."""
    a = a.copy()
    n = np.bincount(a, minlength=k).astype(float)
    C = _means(X, a, k)
    while True:
        moved = False
        for i in range(len(X)):
            ci = a[i]
            if n[ci] <= 1:
                continue
            d = ((C - X[i]) ** 2).sum(axis=1)
            remove = n[ci] / (n[ci] - 1.0) * d[ci]
            add = n / (n + 1.0) * d
            add[ci] = np.inf
            j = int(add.argmin())
            if remove - add[j] > 1e-12 * max(remove, 1e-300):
                C[ci] = (C[ci] * n[ci] - X[i]) / (n[ci] - 1.0)
                C[j] = (C[j] * n[j] + X[i]) / (n[j] + 1.0)
                n[ci] -= 1.0
                n[j] += 1.0
                a[i] = j
                moved = True
        if not moved:
            break
        C = _means(X, a, k)
        trace.append(_sse(X, a, C))
    return a, _means(X, a, k)


def kmeans(points, K: int, restarts: int = 5, max_iter: int = 50, seed=0) -> KMeansResult:
    """Best-of-``restarts`` K-means with k-means++ seeding.

    Each restart runs Lloyd iterations until no assignment changes (or
    ``max_iter``), then a Hartigan single-point-move pass that can only lower
    the objective. ``K`` is capped at the number of distinct points.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise ContractError("kmeans expects a non-empty (N, d) array")
    if K < 1 or restarts < 1:
        raise ParameterError("K and restarts must be >= 1")
    k = min(K, len(np.unique(X, axis=0)))
    rng = np.random.default_rng(seed)
    best, traces = None, []
    for _ in range(restarts):
        trace: list[float] = []
        a, C = _lloyd(X, _seed_plusplus(X, k, rng), max_iter, trace)
        a, C = _hartigan(X, a, k, trace)
        obj = _sse(X, a, C)
        traces.append(trace)
        if best is None or obj < best[2]:
            best = (a, C, obj)
    return KMeansResult(best[0], best[1], best[2], traces)


# --- cluster state ------------------------------------------------------------

@dataclass
class CellClusters:
    ids: list[str]
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float

    @property
    def k_eff(self) -> int:
        return len(self.centroids)


@dataclass
class ClusterState:
    cells: dict[CellId, CellClusters] = field(default_factory=dict)
    epoch: int = 0

    def labels(self) -> dict[str, PlaceLabel]:
        out = {}
        for cell, cc in self.cells.items():
            for iid, h in zip(cc.ids, cc.assignments):
                out[iid] = PlaceLabel(cell[0], cell[1], int(h))
        return out

    def replace(self, other: "ClusterState", epoch: int | None = None) -> "ClusterState":
        """New state with ``other``'s cells overriding ours."""
        cells = dict(self.cells)
        cells.update(other.cells)
        return ClusterState(cells, self.epoch if epoch is None else epoch)


def _cell_seed(seed, cell):
    return [int(seed) & 0xFFFFFFFF, int(cell[0]) & 0xFFFFFFFF, int(cell[1]) & 0xFFFFFFFF]


def cluster_cells(cell_groups, K: int, seed: int = 0, restarts: int = 5, max_iter: int = 50,
                  epoch: int = 0, warnings: list | None = None) -> ClusterState:
    state = ClusterState(epoch=epoch)
    for cell in sorted(cell_groups):
        members = cell_groups[cell]
        if not members:
            msg = f"cell {tuple(cell)} has no images; skipped"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            continue
        ids = [m[0] for m in members]
        X = np.stack([np.asarray(m[1], dtype=np.float64) for m in members])
        res = kmeans(X, K, restarts, max_iter, seed=_cell_seed(seed, cell))
        state.cells[CellId(*cell)] = CellClusters(ids, res.assignments.astype(int), res.centroids, res.objective)
    return state


def assign_place_labels(cell_groups, K: int, seed: int = 0, restarts: int = 5,
                        max_iter: int = 50, warnings: list | None = None) -> dict[str, PlaceLabel]:
    """Cluster every cell independently; label = (e_i, n_j, cluster index)."""
    return cluster_cells(cell_groups, K, seed, restarts, max_iter, warnings=warnings).labels()


def group_by_cell(images, descriptors, M: float = 10.0) -> dict[CellId, list]:
    groups = defaultdict(list)
    for im, desc in zip(images, descriptors):
        groups[grid_cell(im.position, M)].append((im.id, desc))
    return dict(groups)


def heading_bin_labels(images, bins: int, M: float = 10.0) -> dict[str, PlaceLabel]:
    """Orientation labels: h = floor(heading / (360 / bins))."""
    if bins < 1:
        raise ParameterError("bins must be >= 1")
    width = 360.0 / bins
    out = {}
    for im in images:
        if im.heading is None or not math.isfinite(im.heading):
            raise LabelingError(f"image {im.id} has no heading")
        h = min(int(math.floor((im.heading % 360.0) / width)), bins - 1)
        c = grid_cell(im.position, M)
        out[im.id] = PlaceLabel(c[0], c[1], h)
    return out


def purity(labels, truth) -> float:
    """Share of images whose cluster's majority ground-truth group is their own.

    Clusters never span cells, so this is the size-weighted mean of the
    per-cell purities.
    """
    if set(labels) != set(truth):
        raise ContractError("labels and truth cover different image ids")
    if not labels:
        return float("nan")
    counts = defaultdict(Counter)
    for iid, lab in labels.items():
        counts[lab][truth[iid]] += 1
    return sum(max(c.values()) for c in counts.values()) / len(labels)


@dataclass
class ReassignmentReport:
    per_cell: dict
    moved: list
    total: int

    @property
    def fraction(self) -> float:
        return len(self.moved) / self.total if self.total else 0.0


def match_clusters(prev_a, next_a) -> dict[int, int]:
    """Maximum-overlap matching from previous to next cluster ids."""
    kp, kn = int(prev_a.max()) + 1, int(next_a.max()) + 1
    overlap = np.zeros((kp, kn), dtype=int)
    np.add.at(overlap, (prev_a, next_a), 1)
    rows, cols = linear_sum_assignment(-overlap)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def reassignment_diff(prev: ClusterState, nxt: ClusterState, cells=None) -> ReassignmentReport:
    """Fraction of images per cell whose cluster changed, after matching ids."""
    common = sorted(set(prev.cells) & set(nxt.cells)) if cells is None else sorted(cells)
    per_cell, moved, total = {}, [], 0
    for cell in common:
        p, n = prev.cells[cell], nxt.cells[cell]
        if set(p.ids) != set(n.ids):
            raise ContractError(f"cell {tuple(cell)}: image sets differ between states")
        order = {iid: i for i, iid in enumerate(n.ids)}
        na = n.assignments[[order[iid] for iid in p.ids]]
        mapping = match_clusters(p.assignments, na)
        cell_moved = [iid for iid, pa, nb in zip(p.ids, p.assignments, na) if mapping.get(int(pa), -1) != nb]
        per_cell[cell] = len(cell_moved) / len(p.ids)
        moved.extend(cell_moved)
        total += len(p.ids)
    return ReassignmentReport(per_cell, moved, total)


def circular_mean_deg(angles) -> float:
    r = np.deg2rad(np.asarray(angles, dtype=float))
    return float(np.mod(np.rad2deg(np.arctan2(np.sin(r).mean(), np.cos(r).mean())), 360.0))


def order_by_heading(labels, headings) -> dict[CellId, list[int]]:
    """Cluster ids of each cell sorted by the circular mean heading of members.

    Used only for analysis; falls back to id order when headings are missing.
    """
    members = defaultdict(lambda: defaultdict(list))
    for iid, lab in labels.items():
        members[lab.cell][lab.h].append(headings.get(iid) if headings else None)
    out = {}
    for cell, by_h in members.items():
        def key(h):
            hs = [x for x in by_h[h] if x is not None]
            return (circular_mean_deg(hs) if hs else float("inf"), h)
        out[cell] = sorted(by_h, key=key)
    return out
