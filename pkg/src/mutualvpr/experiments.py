"""Desk-scale pipeline: synthetic world, training, retrieval evaluation.

One world per seed supplies three image sets: occluded training crops, clean
database crops rendered with fresh noise, and queries at random headings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clusterer import ClusterState, PlaceLabel, heading_bin_labels
from .config import RunConfig
from .encoder import encode_batch
from .geogrid import grid_cell
from .retrieval import DescriptorDB, EvalReport, interclass_distance_report, occlusion_eval, recall_at_k
from .synthworld import GeoImage, World, generate_world, hash_seed, render_crops, render_queries
from .trainer import TrainState, train


@dataclass
class SyntheticData:
    world: World
    train: list[GeoImage]
    database: list[GeoImage]
    queries: list[GeoImage]


def make_synthetic(cfg: RunConfig) -> SyntheticData:
    w = generate_world(cfg.num_cells, cfg.places_per_cell, cfg.A, cfg.d_in, cfg.seed,
                       tokens=cfg.tokens, cell_size=cfg.M)
    crops = dict(start_angles=cfg.start_angles, step=cfg.crop_step, fov=cfg.fov, noise_sigma=cfg.noise_sigma)
    train_set = render_crops(w, occlusion_prob=cfg.occlusion_prob, rho=cfg.rho, seed=hash_seed(cfg.seed, 1),
                             prefix="t", **crops)
    db = render_crops(w, occlusion_prob=0.0, seed=hash_seed(cfg.seed, 2), prefix="d", **crops)
    queries = render_queries(w, cfg.queries_per_place, cfg.fov, cfg.noise_sigma, cfg.query_rho,
                             seed=hash_seed(cfg.seed, 3), prefix="q")
    return SyntheticData(w, train_set, db, queries)


def embed(images, params) -> DescriptorDB:
    return DescriptorDB.from_images(images, encode_batch(images, params))


def evaluate(state: TrainState, data: SyntheticData, cfg: RunConfig) -> dict[str, EvalReport]:
    db = embed(data.database, state.params)
    q = encode_batch(data.queries, state.params)
    pos = [im.position for im in data.queries]
    ids = [im.id for im in data.queries]
    return {
        "standard": recall_at_k(db, q, pos, cfg.ks, cfg.radius, query_ids=ids),
        "occlusion": occlusion_eval(db, q, pos, cfg.ks, cfg.radius,
                                    occluded=[im.occluded for im in data.queries], query_ids=ids),
    }


def truth_labels(images, M: float = 10.0) -> dict[str, PlaceLabel]:
    """Ground-truth view groups as place labels (a common proxy across runs)."""
    return {im.id: PlaceLabel(*grid_cell(im.position, M), im.true_group) for im in images}


def adjacent_distance(state: TrainState, data: SyntheticData, cfg: RunConfig, bins: int = 3):
    """Adjacent-class descriptor distances on the database.

    Classes are fixed heading bins, so every model is measured on the same
    partition and only the descriptors differ between runs.
    """
    db = embed(data.database, state.params)
    return interclass_distance_report(db, heading_bin_labels(data.database, bins, cfg.M),
                                      {im.id: im.heading for im in data.database})


def majority_consistent(clusters: ClusterState, truth: dict) -> dict[str, bool]:
    """Per image: does its cluster's majority true group equal its own?

    Majority ties resolve to the smallest group index.
    """
    out = {}
    for cc in clusters.cells.values():
        a = np.asarray(cc.assignments)
        for h in np.unique(a):
            members = [i for i, x in zip(cc.ids, a) if x == h]
            groups = np.array([truth[i] for i in members])
            vals, counts = np.unique(groups, return_counts=True)
            major = vals[np.argmax(counts)]
            for i in members:
                out[i] = bool(truth[i] == major)
    return out


def corrected_images(state: TrainState) -> list[tuple[int, str]]:
    """Occluded images that start in a wrong-majority cluster and are later
    moved (per the epoch's reassignment report) into a consistent one.

    Returns ``(epoch, image id)`` pairs.
    """
    truth = {im.id: im.true_group for im in state.images}
    occluded = {im.id for im in state.images if im.occluded}
    start = majority_consistent(state.snapshots[0], truth)
    out = []
    for m, snap in zip(state.history, state.snapshots[1:]):
        now = majority_consistent(snap, truth)
        out += [(m.epoch, i) for i in m.moved if i in occluded and not start[i] and now[i]]
    return out


def run(cfg: RunConfig, data: SyntheticData | None = None):
    """Train on ``cfg`` and evaluate; returns ``(state, reports, data)``."""
    data = data or make_synthetic(cfg)
    state = train(data.train, cfg.train_config())
    return state, evaluate(state, data, cfg), data
