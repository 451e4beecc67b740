"""A small synthetic world: places on a grid, panorama crops, occlusion."""
import numpy as np

from mutualvpr.geogrid import UtmPoint, grid_cell, is_positive
from mutualvpr.synthworld import OcclusionSpec, crop_schedule, generate_world, render_crops, render_view

# grid cells are floor(coordinate / M) on both axes
print(grid_cell(UtmPoint(553017.2, 4182004.9), 10.0))
print(is_positive(UtmPoint(0.0, 0.0), UtmPoint(15.0, 20.0)))   # exactly 25 m away counts

world = generate_world(num_cells=4, places_per_cell=1, A=3, D_in=32, seed=7)
p = world.places[0]
print("place 0 at", p.position, "anchor headings", np.round(p.anchor_headings, 1))

heads = crop_schedule([0, 30], 60)
print(len(heads), "crops per place:", heads)

# a view pointing straight at an anchor belongs to that anchor's group
k = 1
im = render_view(world, 0, p.anchor_headings[k], fov=60)
print("true group", im.true_group, "tokens", im.tokens.shape)

# neighbouring headings give nearly the same observation
a = render_view(world, 0, 100.0).tokens.ravel()
b = render_view(world, 0, 100.5).tokens.ravel()
print("cosine at 0.5 deg apart: %.6f" % (a @ b / np.linalg.norm(a) / np.linalg.norm(b)))

# occlusion overwrites a contiguous band of token rows with a shared occluder
occ = render_view(world, 0, 100.0, occlusion=OcclusionSpec(0.25, occluder=2, start=0))
print("rows replaced:", [t for t in range(world.tokens) if np.array_equal(occ.tokens[t], world.occluders[2])])

crops = render_crops(world, occlusion_prob=0.3, seed=1)
print(len(crops), "training crops,", sum(c.occluded for c in crops), "occluded")
