"""Mutual learning on a 40-place world, then retrieval with and without occlusion."""
import numpy as np

from mutualvpr.config import RunConfig
from mutualvpr.experiments import adjacent_distance, corrected_images, run

cfg = RunConfig(num_cells=40, epochs=6, iterations_per_epoch=100, group_count=4, batch_size=24,
                lr_encoder=1e-3, seed=1)
state, reports, data = run(cfg)

for m in state.history:
    print("epoch %d  loss %.3f  purity %.3f  reassigned %.3f  lr %.2e" % (m.epoch, m.loss, m.purity,
                                                                          m.reassignment, m.lr))
print(reports["standard"].table(), end="")
print(reports["occlusion"].table(), end="")

rep = adjacent_distance(state, data, cfg)
print("adjacent heading-bin classes: mean distance %.3f, mean minimum %.3f" % (rep.mean_mean, rep.mean_min))
fixed = corrected_images(state)
print(len(fixed), "occluded images moved into their true group", fixed[:3])
