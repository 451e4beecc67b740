"""Per-cell K-means labels against fixed heading bins."""
import numpy as np

from mutualvpr.clusterer import assign_place_labels, heading_bin_labels, kmeans, purity
from mutualvpr.encoder import encode_batch
from mutualvpr.geogrid import grid_cell
from mutualvpr.synthworld import generate_world, render_crops

# K-means on three blobs
r = np.random.default_rng(0)
X = np.vstack([c + 0.2 * r.standard_normal((6, 2)) for c in ([0, 0], [3, 0], [0, 3])])
res = kmeans(X, 3, restarts=5, seed=0)
print("assignments", res.assignments, "objective %.4f" % res.objective)
print("objective per Lloyd step, first restart:", np.round(res.traces[0], 4))

# clustering the raw token means of real crops recovers view groups well;
# heading bins cut across them because anchor headings start at random angles
world = generate_world(30, 1, 3, 32, seed=2)
imgs = render_crops(world, noise_sigma=0.05, occlusion_prob=0.3, seed=1)
feat = np.stack([im.tokens.mean(axis=0) for im in imgs])
feat /= np.linalg.norm(feat, axis=1, keepdims=True)
groups = {}
for im, f in zip(imgs, feat):
    groups.setdefault(grid_cell(im.position, 10.0), []).append((im.id, f))
truth = {im.id: im.true_group for im in imgs}
print("k-means purity   %.3f" % purity(assign_place_labels(groups, 3, seed=0), truth))
print("heading-bin purity %.3f" % purity(heading_bin_labels(imgs, 3), truth))
