"""Visual place recognition with adaptive view-direction labels, at desk scale.

Descriptors come from a small adapter-tuned transformer encoder trained with
a large-margin cosine classifier. Class labels are (grid cell, cluster)
pairs, re-estimated during training by clustering the descriptors of each
cell, so view groupings follow what the encoder sees rather than compass
headings.
"""
from .clusterer import (ClusterState, PlaceLabel, assign_place_labels, heading_bin_labels, kmeans, purity,
                        reassignment_diff)
from .encoder import Encoder, EncoderConfig, encode, encode_batch, init_encoder
from .geogrid import CellId, UtmPoint, distance_m, grid_cell, is_positive
from .lmclhead import ClassifierWeights, lmcl_loss
from .retrieval import DescriptorDB, interclass_distance_report, knn, occlusion_eval, recall_at_k
from .synthworld import GeoImage, World, crop_schedule, generate_world, load_manifest, render_view, write_manifest
from .trainer import TrainConfig, train

__version__ = "0.1.0"
