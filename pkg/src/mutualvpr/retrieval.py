"""Exact descriptor search and Recall@K evaluation.

Descriptors are unit vectors, so ranking by Euclidean distance is the same
as ranking by descending cosine similarity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clusterer import order_by_heading
from .errors import ContractError, ParameterError
from .geogrid import DEFAULT_RADIUS

UNIT_TOL = 1e-6


@dataclass
class DescriptorDB:
    ids: list[str]
    positions: np.ndarray    # (N, 2) east, north
    descriptors: np.ndarray  # (N, d)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.ids), -1)
        if not len(self.ids) == len(self.positions) == len(self.descriptors):
            raise ContractError("ids, positions and descriptors differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("descriptor ids must be unique")
        if len(self.ids):
            dev = np.abs(np.linalg.norm(self.descriptors, axis=1) - 1.0).max()
            if dev > UNIT_TOL:
                raise ContractError(f"descriptors must be unit-norm (max deviation {dev:.2e})")
        self._rank = np.empty(len(self.ids), dtype=np.int64)
        self._rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_images(cls, images, descriptors):
        return cls([im.id for im in images], [tuple(im.position) for im in images], descriptors)

    def position_of(self) -> dict:
        return {i: tuple(p) for i, p in zip(self.ids, self.positions)}


def _distances(db: DescriptorDB, Q: np.ndarray) -> np.ndarray:
    diff = Q[:, None, :] - db.descriptors[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _ranked(db, dist_row, k):
    order = np.lexsort((db._rank, dist_row))[:k]
    return order


def knn(db: DescriptorDB, query, k: int) -> list[tuple[str, float]]:
    """Exact top-k by Euclidean distance; ties broken by ascending id."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    if len(db) == 0:
        raise ContractError("knn on an empty database")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != db.dim:
        raise ContractError(f"query dim {q.shape[1]} != db dim {db.dim}")
    d = _distances(db, q)[0]
    return [(db.ids[i], float(d[i])) for i in _ranked(db, d, k)]


@dataclass
class EvalReport:
    recall: dict[int, float]
    radius: float
    n_queries: int
    nearest: list = field(default_factory=list)     # per query: [(id, dist), ...]
    correct_at: list = field(default_factory=list)  # per query: first correct rank (1-based) or None
    no_positive: list = field(default_factory=list)  # query indices with no positive in the db
    tag: str = "standard"
    query_ids: list | None = None

    def table(self) -> str:
        lines = [f"# {self.tag} evaluation: {self.n_queries} queries, radius {self.radius:g} m"]
        lines.append(f"{'k':>6}  {'recall':>8}")
        lines += [f"{k:>6}  {100 * v:>7.2f}%" for k, v in sorted(self.recall.items())]
        if self.no_positive:
            lines.append(f"# {len(self.no_positive)} queries have no positive in the database")
        return "\n".join(lines) + "\n"

    def records(self) -> list[dict]:
        return [{"tag": self.tag, "k": k, "recall": v, "n_queries": self.n_queries, "radius": self.radius}
                for k, v in sorted(self.recall.items())]


def recall_at_k(db: DescriptorDB, query_desc, query_pos, ks=(1, 5, 10, 20), radius: float = DEFAULT_RADIUS,
                query_ids=None, tag: str = "standard", chunk: int = 256) -> EvalReport:
    """Query counts as correct at k iff one of its top-k results lies within ``radius`` m.

    Queries with no positive anywhere in the db count as incorrect and are
    listed in ``no_positive``.
    """
    ks = [int(k) for k in ks]
    if not ks or any(k < 1 for k in ks) or ks != sorted(ks):
        raise ParameterError("ks must be ascending positive integers")
    if not radius > 0:
        raise ParameterError("radius must be positive")
    if len(db) == 0:
        raise ContractError("evaluation against an empty database")
    Q = np.asarray(query_desc, dtype=np.float64).reshape(-1, db.dim)
    P = np.asarray(query_pos, dtype=np.float64).reshape(-1, 2)
    if len(Q) != len(P):
        raise ContractError("query descriptors and positions differ in length")
    kmax = min(ks[-1], len(db))
    nearest, first, no_pos = [], [], []
    for s in range(0, len(Q), chunk):
        D = _distances(db, Q[s:s + chunk])
        for r, drow in enumerate(D):
            qi = s + r
            geo = np.hypot(db.positions[:, 0] - P[qi, 0], db.positions[:, 1] - P[qi, 1]) <= radius
            if not geo.any():
                no_pos.append(qi)
            top = _ranked(db, drow, kmax)
            nearest.append([(db.ids[i], float(drow[i])) for i in top])
            hit = np.flatnonzero(geo[top])
            first.append(int(hit[0]) + 1 if hit.size else None)
    n = len(Q)
    recall = {k: (sum(1 for f in first if f is not None and f <= k) / n if n else 0.0) for k in ks}
    return EvalReport(recall, float(radius), n, nearest, first, no_pos, tag,
                      list(query_ids) if query_ids is not None else None)


def occlusion_eval(db, query_desc, query_pos, ks=(1, 5, 10, 20), radius=DEFAULT_RADIUS,
                   occluded=None, query_ids=None) -> EvalReport:
    """Recall@K over occluded queries; ``occluded`` optionally masks the set."""
    Q = np.asarray(query_desc, dtype=np.float64)
    P = np.asarray(query_pos, dtype=np.float64)
    if occluded is not None:
        mask = np.asarray(occluded, dtype=bool)
        Q, P = Q[mask], P[mask]
        if query_ids is not None:
            query_ids = [q for q, m in zip(query_ids, mask) if m]
    return recall_at_k(db, Q, P, ks, radius, query_ids, tag="occlusion")


@dataclass
class PairDistance:
    cell: tuple
    classes: tuple[int, int]
    min: float
    mean: float
    n_pairs: int


@dataclass
class InterclassReport:
    pairs: list[PairDistance]
    close_threshold: float
    close_hist: tuple[np.ndarray, np.ndarray]  # (counts, bin edges) for distances below threshold
    skipped_cells: list

    @property
    def mean_min(self) -> float:
        return float(np.mean([p.min for p in self.pairs])) if self.pairs else float("nan")

    @property
    def mean_mean(self) -> float:
        return float(np.mean([p.mean for p in self.pairs])) if self.pairs else float("nan")


def adjacent_pairs(order: list[int]) -> list[tuple[int, int]]:
    """Neighbours in a circular heading order (a single pair for two classes)."""
    if len(order) < 2:
        return []
    if len(order) == 2:
        return [(order[0], order[1])]
    return [(order[i], order[(i + 1) % len(order)]) for i in range(len(order))]


def interclass_distance_report(db: DescriptorDB, labels, headings=None, close_threshold: float = 0.8,
                               bins: int = 16) -> InterclassReport:
    """Min and mean descriptor distance between every pair of adjacent classes.

    Classes are ordered within a cell by the circular mean heading of their
    members (id order when ``headings`` is None).
    """
    missing = set(db.ids) - set(labels)
    if missing:
        raise ContractError(f"{len(missing)} db ids have no label")
    row = {iid: i for i, iid in enumerate(db.ids)}
    members: dict = {}
    for iid in db.ids:
        lab = labels[iid]
        members.setdefault(lab.cell, {}).setdefault(lab.h, []).append(row[iid])
    orders = order_by_heading({i: labels[i] for i in db.ids}, headings or {})
    pairs, close, skipped = [], [], []
    for cell in sorted(members):
        order = orders[cell]
        if len(order) < 2:
            skipped.append(tuple(cell))
            continue
        for a, b in adjacent_pairs(order):
            A = db.descriptors[members[cell][a]]
            B = db.descriptors[members[cell][b]]
            d = np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)).ravel()
            pairs.append(PairDistance(tuple(cell), (a, b), float(d.min()), float(d.mean()), d.size))
            close.append(d[d < close_threshold])
    close = np.concatenate(close) if close else np.zeros(0)
    hist = np.histogram(close, bins=bins, range=(0.0, close_threshold))
    return InterclassReport(pairs, close_threshold, hist, skipped)
