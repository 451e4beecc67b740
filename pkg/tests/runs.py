"""Paired desk-scale training runs shared by the trend and acceptance tests.

Each (variant, seed) is trained once per test session. All variants of one
seed train on the same world and are evaluated on the same queries.
"""
import functools
import time

from mutualvpr.config import RunConfig
from mutualvpr.experiments import evaluate, make_synthetic
from mutualvpr.trainer import train

SEEDS = (0, 1, 2, 3, 4)
# desk-scale encoder rate: at the default 1e-5 a 2000-step run barely moves the weights
LR = 1e-3

VARIANTS = {
    "K1": dict(K=1),
    "K3": dict(K=3),
    "K6": dict(K=6),
    "heading": dict(K=3, label_mode="heading"),
    "static": dict(K=3, recluster_fraction=0.0),
}


def config(variant, seed, **kw) -> RunConfig:
    return RunConfig(seed=seed, lr_encoder=LR, **VARIANTS[variant], **kw)


@functools.cache
def data(seed):
    return make_synthetic(config("K3", seed))


@functools.cache
def run(variant, seed):
    """Returns ``(state, reports, data, cfg, seconds spent training)``."""
    cfg = config(variant, seed)
    d = data(seed)
    t0 = time.perf_counter()
    state = train(d.train, cfg.train_config())
    seconds = time.perf_counter() - t0
    return state, evaluate(state, d, cfg), d, cfg, seconds
