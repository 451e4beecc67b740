"""The adapter encoder and its hand-written gradients."""
import numpy as np

from mutualvpr import diffcore as dc
from mutualvpr.encoder import AdapterBlock, Encoder, EncoderConfig, encode_batch, init_encoder
from mutualvpr.synthworld import generate_world, render_crops

cfg = EncoderConfig()
params = init_encoder(cfg, seed=0)
print("trainable:", sorted(params.trainable))

# the adapter output layer starts at zero, so the fresh block equals the plain block
z = np.random.default_rng(1).standard_normal((2, 8, cfg.dim))
print("adapter is a no-op at init:",
      np.array_equal(AdapterBlock().forward(z, params.params), AdapterBlock(adapter=False).forward(z, params.params)))

# finite-difference check on a small encoder with a live adapter
small = init_encoder(EncoderConfig(d_in=6, dim=8, out_dim=5), seed=3)
small.params["adapter.W2"][...] = 0.3 * np.random.default_rng(3).standard_normal(small["adapter.W2"].shape)
x = np.random.default_rng(4).standard_normal((2, 4, 6))
print("max relative fd error: %.2e" % dc.fd_check(Encoder(), dict(small.params), x))

world = generate_world(4, 1, 3, 32, seed=7)
imgs = render_crops(world)
D = encode_batch(imgs, params)
print("descriptors", D.shape, "norms in [%.12f, %.12f]" % tuple(np.linalg.norm(D, axis=1)[[0, -1]]))
