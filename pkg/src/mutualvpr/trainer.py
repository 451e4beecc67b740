"""Alternating descriptor learning and per-cell re-clustering.

Each epoch trains on one group of grid cells (groups cycle round-robin):

1. feature learning: class-balanced mini-batches, LMCL over the group's
   classes, Adam on the encoder (cosine-annealed) and classifier rows;
2. re-clustering: a random ``recluster_fraction`` of the group's cells is
   re-encoded with the current weights and re-clustered; the classifier rows
   of those cells are reset to the new centroids.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from .clusterer import (ClusterState, CellClusters, ReassignmentReport, cluster_cells, group_by_cell,
                        heading_bin_labels, purity, reassignment_diff)
from .encoder import Encoder, EncoderConfig, EncoderParams, encode_batch, init_encoder
from .errors import DatasetError, NumericError, ParameterError
from .geogrid import grid_cell
from .lmclhead import ClassifierWeights, lmcl_backward, lmcl_loss, remap_after_recluster
from .synthworld import hash_seed

log = logging.getLogger(__name__)

LABEL_MODES = ("adaptive", "heading")


@dataclass(frozen=True)
class TrainConfig:
    M: float = 10.0
    K: int = 3
    group_count: int = 8
    recluster_fraction: float = 0.2
    epochs: int = 10
    iterations_per_epoch: int = 200
    batch_size: int = 32
    lr_encoder: float = 1e-5
    lr_classifier: float = 1e-2
    gamma: float = 30.0
    margin: float = 0.4
    seed: int = 0
    d: int = 64
    dim: int = 32
    d_in: int = 32
    train_block: bool = False
    label_mode: str = "adaptive"
    heading_bins: int = 0  # 0 means "same as K"
    kmeans_restarts: int = 5
    kmeans_max_iter: int = 50

    def __post_init__(self):
        if not 0 <= self.recluster_fraction <= 1:
            raise ParameterError("recluster_fraction must be in [0, 1]")
        if self.group_count < 1 or self.K < 1 or self.batch_size < 1:
            raise ParameterError("group_count, K and batch_size must be >= 1")
        if not (self.lr_encoder > 0 and self.lr_classifier > 0 and self.M > 0):
            raise ParameterError("learning rates and M must be positive")
        if self.label_mode not in LABEL_MODES:
            raise ParameterError(f"label_mode must be one of {LABEL_MODES}")

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_in=self.d_in, dim=self.dim, out_dim=self.d, train_block=self.train_block)

    @property
    def bins(self) -> int:
        return self.heading_bins or self.K

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iterations_per_epoch

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    purity: float
    reassignment: float
    lr: float
    moved: list = field(default_factory=list)
    reclustered: list = field(default_factory=list)


@dataclass
class TrainState:
    params: EncoderParams
    classifier: ClassifierWeights
    clusters: ClusterState
    groups: list
    epoch: int = 0
    history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    images: list = field(default_factory=list)

    def labels(self):
        return self.clusters.labels()


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """lr_max * (1 + cos(pi * step / total)) / 2, clamped past the end."""
    if total_steps <= 0:
        return lr_max
    step = min(max(step, 0), total_steps)
    return lr_max * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def make_batches(group_labels, batch_size: int, seed):
    """Endless class-balanced batches: distinct classes, one image per class.

    ``group_labels`` maps image id -> label for the images of one group.
    Yields ``(image ids, labels)``.
    """
    by_class: dict = {}
    for iid in sorted(group_labels):
        by_class.setdefault(group_labels[iid], []).append(iid)
    classes = sorted(by_class)
    if not classes:
        return
    if batch_size > len(classes):
        log.warning("batch_size %d > %d active classes; shrinking batch", batch_size, len(classes))
        batch_size = len(classes)
    rng = np.random.default_rng(seed)
    while True:
        picked = rng.choice(len(classes), size=batch_size, replace=False)
        ids, labs = [], []
        for c in picked:
            members = by_class[classes[c]]
            ids.append(members[int(rng.integers(len(members)))])
            labs.append(classes[c])
        yield ids, labs


def _split_groups(cells, group_count, seed):
    cells = sorted(cells)
    perm = np.random.default_rng([seed, 99]).permutation(len(cells))
    return [sorted(cells[i] for i in part) for part in np.array_split(perm, group_count)]


def _state_from_labels(labels, ids, descs, epoch):
    """ClusterState view of fixed labels (centroids = member means)."""
    by_cell: dict = {}
    for iid, d in zip(ids, descs):
        lab = labels[iid]
        by_cell.setdefault(lab.cell, []).append((iid, lab.h, d))
    state = ClusterState(epoch=epoch)
    for cell, rows in sorted(by_cell.items()):
        a = np.array([r[1] for r in rows])
        X = np.stack([r[2] for r in rows])
        hs = sorted(set(a.tolist()))
        C = np.stack([X[a == h].mean(axis=0) for h in hs]) if hs else np.zeros((0, X.shape[1]))
        # heading bins may skip ids; keep raw h values as assignments
        obj = float(sum(((X[a == h] - C[i]) ** 2).sum() for i, h in enumerate(hs)))
        state.cells[cell] = CellClusters([r[0] for r in rows], a, C, obj)
    return state


def initialize(dataset, cfg: TrainConfig) -> TrainState:
    """Grid cells, initial descriptors, initial labels and classifier rows."""
    images = list(dataset)
    if not images:
        raise DatasetError("empty dataset")
    if len({im.id for im in images}) != len(images):
        raise DatasetError("duplicate image ids")
    cells = sorted({grid_cell(im.position, cfg.M) for im in images})
    group_count = cfg.group_count
    if group_count > len(cells):
        log.warning("group_count %d > %d cells; using %d groups", group_count, len(cells), len(cells))
        group_count = len(cells)
    groups = _split_groups(cells, group_count, cfg.seed)
    params = init_encoder(cfg.encoder_config, seed=cfg.seed)
    descs = encode_batch(images, params)
    ids = [im.id for im in images]
    if cfg.label_mode == "adaptive":
        clusters = cluster_cells(group_by_cell(images, descs, cfg.M), cfg.K, seed=hash_seed(cfg.seed, 0),
                                 restarts=cfg.kmeans_restarts, max_iter=cfg.kmeans_max_iter)
        if not clusters.cells:
            raise DatasetError("every grid cell is empty")
    else:
        clusters = _state_from_labels(heading_bin_labels(images, cfg.bins, cfg.M), ids, descs, 0)
    desc_of = dict(zip(ids, descs))
    classifier = ClassifierWeights.from_centroids(clusters.labels(), desc_of, cfg.gamma, cfg.margin)
    state = TrainState(params, classifier, clusters, groups, images=images)
    state.snapshots.append(clusters)
    return state


def _truth(images):
    return {im.id: im.true_group for im in images if im.true_group is not None}


def label_purity(state: TrainState) -> float:
    truth = _truth(state.images)
    if not truth:
        return float("nan")
    labels = state.labels()
    return purity({i: labels[i] for i in truth}, truth)


def _recluster(state, cfg, group, rng, epoch):
    n_sel = int(round(cfg.recluster_fraction * len(group)))
    if cfg.recluster_fraction > 0:
        n_sel = max(1, n_sel)
    if cfg.label_mode != "adaptive" or n_sel == 0 or not group:
        return ReassignmentReport({}, [], 0), []
    chosen = sorted(group[i] for i in rng.choice(len(group), size=min(n_sel, len(group)), replace=False))
    chosen_set = set(chosen)
    imgs = [im for im in state.images if grid_cell(im.position, cfg.M) in chosen_set]
    descs = encode_batch(imgs, state.params)
    new = cluster_cells(group_by_cell(imgs, descs, cfg.M), cfg.K, seed=hash_seed(cfg.seed, epoch + 1),
                        restarts=cfg.kmeans_restarts, max_iter=cfg.kmeans_max_iter, epoch=epoch + 1)
    report = reassignment_diff(state.clusters, new, cells=sorted(new.cells))
    old_labels = state.labels()
    new_labels = new.labels()
    state.classifier = remap_after_recluster(
        state.classifier, {i: old_labels[i] for i in new_labels}, new_labels,
        dict(zip([im.id for im in imgs], descs)))
    state.clusters = state.clusters.replace(new, epoch=epoch + 1)
    return report, chosen


def train_epoch(state: TrainState, cfg: TrainConfig) -> TrainState:
    epoch = state.epoch
    group = state.groups[epoch % len(state.groups)]
    group_set = set(group)
    labels = state.labels()
    group_labels = {i: lab for i, lab in labels.items() if lab.cell in group_set}
    tokens = {im.id: im.tokens for im in state.images}
    enc = Encoder(state.params.config.ln_eps)
    losses = []
    lr = cosine_lr(epoch * cfg.iterations_per_epoch, cfg.total_steps, cfg.lr_encoder)
    if group_labels:
        classes = sorted(set(group_labels.values()))
        local = {lab: i for i, lab in enumerate(classes)}
        rows = state.classifier.rows(classes)
        batches = make_batches(group_labels, cfg.batch_size, [cfg.seed, epoch, 1])
        for it in range(cfg.iterations_per_epoch):
            ids, labs = next(batches)
            x = np.stack([tokens[i] for i in ids])
            feats = enc.forward(x, state.params.params)
            targets = np.array([local[lab] for lab in labs])
            W = state.classifier.W[rows]
            loss = lmcl_loss(feats, targets, W, cfg.gamma, cfg.margin)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, iteration {it}")
            df, dW = lmcl_backward(feats, targets, W, cfg.gamma, cfg.margin)
            _, grads = enc.backward(df)
            state.params.accumulate({k: g for k, g in grads.items() if k in state.params.trainable})
            lr = cosine_lr(epoch * cfg.iterations_per_epoch + it, cfg.total_steps, cfg.lr_encoder)
            dc.adam_step(state.params, lr)
            p = state.params.params["gem.p"]
            p[...] = max(float(p), 1.0)
            state.classifier.adam_update(rows, dW, cfg.lr_classifier)
            losses.append(loss)
    rng = np.random.default_rng([cfg.seed, epoch, 2])
    report, chosen = _recluster(state, cfg, group, rng, epoch)
    state.epoch = epoch + 1
    state.snapshots.append(state.clusters)
    state.history.append(EpochMetrics(
        epoch=epoch + 1,
        loss=float(np.mean(losses)) if losses else float("nan"),
        purity=label_purity(state),
        reassignment=report.fraction,
        lr=lr,
        moved=list(report.moved),
        reclustered=[tuple(c) for c in chosen],
    ))
    return state


def train(dataset, cfg: TrainConfig, callback=None) -> TrainState:
    state = initialize(dataset, cfg)
    while state.epoch < cfg.epochs:
        train_epoch(state, cfg)
        if callback is not None:
            callback(state)
    return state


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
