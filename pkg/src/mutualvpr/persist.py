"""On-disk formats: checkpoints, descriptor databases, cluster snapshots, metrics.

All binary numeric payloads are little-endian; floats are IEEE-754 float64.

Checkpoint::

    b"MVPRCKPT" | u8 version | u32 section count
    per section: u16 name length | name (utf-8) | u64 payload length | payload

A payload is either text (``b"T"`` + utf-8) or an array (``b"A"`` + dtype
code ``b"f"`` float64 / ``b"i"`` int64 + u8 ndim + u64 dims + data).

Descriptor database::

    b"MVPRDB01" | u32 count | u32 d | u32 id_width
    per record: id (utf-8, NUL padded to id_width) | f64 east | f64 north | f64 x d
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .clusterer import CellClusters, ClusterState
from .encoder import EncoderConfig, EncoderParams
from .errors import ContractError
from .lmclhead import ClassifierWeights
from .clusterer import PlaceLabel
from .retrieval import DescriptorDB
from .trainer import EpochMetrics, TrainConfig, TrainState

CKPT_MAGIC = b"MVPRCKPT"
CKPT_VERSION = 1
DB_MAGIC = b"MVPRDB01"
METRIC_COLUMNS = ("epoch", "loss", "purity", "reassignment", "lr")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


# -- sections ---------------------------------------------------------------

def _pack_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        code, a = b"f", a.astype("<f8")
    elif a.dtype.kind in "iub":
        code, a = b"i", a.astype("<i8")
    else:
        raise ContractError(f"cannot store array of dtype {a.dtype}")
    head = b"A" + code + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def _unpack_array(buf: bytes) -> np.ndarray:
    code, ndim = buf[1:2], buf[2]
    shape = struct.unpack_from(f"<{ndim}Q", buf, 3)
    off = 3 + 8 * ndim
    dt = {b"f": "<f8", b"i": "<i8"}.get(code)
    if dt is None:
        raise FormatError(f"unknown array dtype code {code!r}")
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 8 * n:
        raise FormatError("array payload length does not match its shape")
    out = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape)
    return out.astype(np.float64 if code == b"f" else np.int64)


def write_sections(path, sections: dict) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(sections))]
    for name, value in sections.items():
        payload = (b"T" + value.encode("utf-8")) if isinstance(value, str) else _pack_array(value)
        key = name.encode("utf-8")
        chunks += [struct.pack("<H", len(key)), key, struct.pack("<Q", len(payload)), payload]
    Path(path).write_bytes(b"".join(chunks))


def read_sections(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<BI", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off, out = 13, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            (size,) = struct.unpack_from("<Q", buf, off)
            payload = buf[off + 8:off + 8 + size]
            if len(payload) != size:
                raise FormatError(f"{path}: truncated section {name!r}")
            off += 8 + size
            out[name] = payload[1:].decode("utf-8") if payload[:1] == b"T" else _unpack_array(payload)
    except struct.error:
        raise FormatError(f"{path}: truncated checkpoint") from None
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after last section")
    return out


# -- cluster state ----------------------------------------------------------

def cluster_state_to_json(state: ClusterState) -> dict:
    cells = []
    for cell in sorted(state.cells):
        cc = state.cells[cell]
        cells.append({"cell": [int(cell[0]), int(cell[1])], "ids": list(cc.ids),
                      "assignments": [int(a) for a in cc.assignments],
                      "centroids": np.asarray(cc.centroids, dtype=np.float64).tolist(),
                      "objective": float(cc.objective)})
    return {"epoch": int(state.epoch), "cells": cells}


def cluster_state_from_json(obj: dict) -> ClusterState:
    state = ClusterState(epoch=int(obj["epoch"]))
    for c in obj["cells"]:
        cent = np.array(c["centroids"], dtype=np.float64)
        state.cells[tuple(c["cell"])] = CellClusters(
            list(c["ids"]), np.array(c["assignments"], dtype=np.int64), cent, float(c["objective"]))
    return state


def write_snapshot(state: ClusterState, path) -> None:
    """JSON cluster snapshot; Python's float repr makes centroids round-trip exactly."""
    Path(path).write_text(json.dumps(cluster_state_to_json(state), indent=1) + "\n", encoding="utf-8")


def read_snapshot(path) -> ClusterState:
    return cluster_state_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def labels_from_json(obj: dict) -> dict:
    return cluster_state_from_json(obj).labels()


# -- metrics ----------------------------------------------------------------

def metrics_text(history) -> str:
    lines = ["\t".join(METRIC_COLUMNS)]
    for m in history:
        lines.append(f"{m.epoch}\t{m.loss!r}\t{m.purity!r}\t{m.reassignment!r}\t{m.lr!r}")
    return "\n".join(lines) + "\n"


def write_metrics(history, path) -> None:
    Path(path).write_text(metrics_text(history), encoding="utf-8")


def read_metrics(path) -> list[dict]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or tuple(rows[0].split("\t")) != METRIC_COLUMNS:
        raise FormatError(f"{path}: bad metrics header")
    out = []
    for r in rows[1:]:
        f = r.split("\t")
        out.append({"epoch": int(f[0]), **{k: float(v) for k, v in zip(METRIC_COLUMNS[1:], f[1:])}})
    return out


# -- checkpoint -------------------------------------------------------------

def dataset_fingerprint(images) -> str:
    h = hashlib.sha256()
    for im in sorted(images, key=lambda im: im.id):
        h.update(im.id.encode("utf-8") + b"\0")
        h.update(np.asarray(im.position, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(im.tokens, dtype="<f8").tobytes())
    return h.hexdigest()


def _label_key(lab) -> list:
    return [int(lab[0]), int(lab[1]), int(lab[2])]


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    p = state.params
    meta = {
        "epoch": state.epoch,
        "train_config": dataclasses.asdict(cfg),
        "encoder_config": dataclasses.asdict(p.config),
        "adam_t": p.t,
        "param_names": p.names(),
        "groups": [[list(c) for c in g] for g in state.groups],
        "history": [dataclasses.asdict(m) for m in state.history],
        "classifier": {"labels": [_label_key(l) for l in state.classifier.labels],
                       "gamma": state.classifier.gamma, "margin": state.classifier.margin},
        "clusters": cluster_state_to_json(state.clusters),
        "snapshots": [cluster_state_to_json(s) for s in state.snapshots],
        "dataset": dataset_fingerprint(state.images),
    }
    sections = {"meta": json.dumps(meta)}
    for name in p.names():
        sections[f"param/{name}"] = p.params[name]
        sections[f"adam_m/{name}"] = p.m[name]
        sections[f"adam_v/{name}"] = p.v[name]
    c = state.classifier
    sections.update({"cls/W": c.W, "cls/m": c.m, "cls/v": c.v, "cls/t": c.t})
    write_sections(path, sections)


def load_checkpoint(path, images=None):
    """Returns ``(TrainState, TrainConfig)``.

    ``images`` (the training set) must be given to resume training; it is
    checked against the fingerprint stored at save time.
    """
    s = read_sections(path)
    if "meta" not in s:
        raise FormatError(f"{path}: missing meta section")
    meta = json.loads(s["meta"])
    cfg = TrainConfig(**meta["train_config"])
    ecfg = EncoderConfig(**meta["encoder_config"])
    params = EncoderParams(ecfg, {n: s[f"param/{n}"] for n in meta["param_names"]})
    for n in meta["param_names"]:
        params.m[n] = s[f"adam_m/{n}"].copy()
        params.v[n] = s[f"adam_v/{n}"].copy()
    params.t = int(meta["adam_t"])
    cm = meta["classifier"]
    classifier = ClassifierWeights([PlaceLabel(*l) for l in cm["labels"]], s["cls/W"].copy(),
                                   cm["gamma"], cm["margin"], s["cls/m"].copy(), s["cls/v"].copy(),
                                   s["cls/t"].copy())
    if images is not None:
        images = list(images)
        if dataset_fingerprint(images) != meta["dataset"]:
            raise ContractError("dataset does not match the one the checkpoint was trained on")
    history = []
    for h in meta["history"]:
        h["reclustered"] = [tuple(c) for c in h["reclustered"]]
        history.append(EpochMetrics(**h))
    state = TrainState(
        params=params, classifier=classifier,
        clusters=cluster_state_from_json(meta["clusters"]),
        groups=[[tuple(c) for c in g] for g in meta["groups"]],
        epoch=int(meta["epoch"]), history=history,
        snapshots=[cluster_state_from_json(x) for x in meta["snapshots"]],
        images=images or [])
    return state, cfg


# -- descriptor database ----------------------------------------------------

def write_db(db: DescriptorDB, path, id_width: int | None = None) -> None:
    raw = [i.encode("utf-8") for i in db.ids]
    width = id_width or max([len(r) for r in raw] + [1])
    if any(len(r) > width for r in raw):
        raise ContractError(f"an id is longer than id_width={width}")
    if any(b"\0" in r for r in raw):
        raise ContractError("ids may not contain NUL bytes")
    rec = np.dtype([("id", f"S{width}"), ("pos", "<f8", (2,)), ("desc", "<f8", (db.dim,))])
    arr = np.zeros(len(db), dtype=rec)
    arr["id"] = raw
    arr["pos"] = db.positions
    arr["desc"] = db.descriptors
    Path(path).write_bytes(DB_MAGIC + struct.pack("<III", len(db), db.dim, width) + arr.tobytes())


def read_db(path) -> DescriptorDB:
    buf = Path(path).read_bytes()
    if buf[:8] != DB_MAGIC:
        raise FormatError(f"{path}: not a descriptor database (bad magic)")
    if len(buf) < 20:
        raise FormatError(f"{path}: truncated header")
    n, d, width = struct.unpack_from("<III", buf, 8)
    rec = np.dtype([("id", f"S{width}"), ("pos", "<f8", (2,)), ("desc", "<f8", (d,))])
    if len(buf) - 20 != n * rec.itemsize:
        raise FormatError(f"{path}: expected {n} records of {rec.itemsize} bytes")
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=20)
    ids = [b.decode("utf-8") for b in arr["id"]]
    return DescriptorDB(ids, arr["pos"].astype(np.float64), arr["desc"].reshape(n, d).astype(np.float64))
