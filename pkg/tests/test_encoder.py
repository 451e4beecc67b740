import time

import numpy as np
import pytest

from mutualvpr import diffcore as dc
from mutualvpr.encoder import (ADAPTER_PARAMS, BLOCK_PARAMS, HEAD_PARAMS, AdapterBlock, Encoder, EncoderConfig,
                               encode, encode_batch, init_encoder)
from mutualvpr.errors import ContractError, NumericError

SMALL = EncoderConfig(d_in=6, dim=8, out_dim=5)


def randomized(config, seed):
    """Initial params with the zero-initialized adapter output made random."""
    p = init_encoder(config, seed)
    r = np.random.default_rng([seed, 1])
    p.params["adapter.W2"][...] = r.standard_normal(p["adapter.W2"].shape) * 0.3
    p.params["adapter.b2"][...] = r.standard_normal(p["adapter.b2"].shape) * 0.1
    return p


def block_params(p):
    return {k: p[k] for k in BLOCK_PARAMS + ADAPTER_PARAMS}


@pytest.mark.parametrize("seed", range(5))
def test_block_gradients(seed):
    p = randomized(SMALL, seed)
    z = np.random.default_rng(seed).standard_normal((4, SMALL.dim))
    assert dc.fd_check(AdapterBlock(), block_params(p), z, seed=seed) <= 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradients(seed):
    p = randomized(SMALL, seed)
    x = np.random.default_rng(seed).standard_normal((2, 4, SMALL.d_in))
    assert dc.fd_check(Encoder(), dict(p.params), x, seed=seed) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_zero_scale_is_plain_block(seed):
    p = randomized(EncoderConfig(), seed)
    p.params["adapter.s"][...] = 0.0
    z = np.random.default_rng(seed).standard_normal((3, 8, 32))
    with_adapter = AdapterBlock().forward(z, p.params)
    plain = AdapterBlock(adapter=False).forward(z, p.params)
    assert np.array_equal(with_adapter, plain)
    assert with_adapter.shape == z.shape


@pytest.mark.parametrize("T, D", [(1, 4), (8, 32), (5, 12)])
def test_block_shape(T, D):
    cfg = EncoderConfig(d_in=D, dim=D)
    p = init_encoder(cfg, 0)
    z = np.ones((T, D)) + np.arange(T * D).reshape(T, D) * 0.01
    assert AdapterBlock().forward(z, p.params).shape == (T, D)


def test_block_rejects_width():
    p = init_encoder(EncoderConfig(), 0)
    with pytest.raises(ContractError):
        AdapterBlock().forward(np.ones((8, 7)), p.params)


def test_encode_deterministic_and_unit():
    p = init_encoder(EncoderConfig(), 1)
    x = np.random.default_rng(0).standard_normal((8, 32))
    a, b = encode(x, p), encode(x.copy(), p)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) <= 1e-6
    assert a.shape == (64,)


def test_batch_equivalences():
    p = randomized(EncoderConfig(), 2)
    x = np.random.default_rng(1).standard_normal((10, 8, 32))
    out = encode_batch(list(x), p)
    assert np.array_equal(encode_batch([x[3]], p)[0], encode(x[3], p))
    perm = np.random.default_rng(2).permutation(10)
    assert np.array_equal(encode_batch(list(x[perm]), p), out[perm])
    # no cross-sample interaction: each row equals its own singleton encode
    for i in range(10):
        np.testing.assert_array_equal(out[i], encode(x[i], p))


def test_batch_of_64_under_a_second():
    p = init_encoder(EncoderConfig(), 0)
    x = list(np.random.default_rng(0).standard_normal((64, 8, 32)))
    t = time.perf_counter()
    encode_batch(x, p)
    assert time.perf_counter() - t < 1.0


def test_scaling_input_changes_descriptor():
    p = randomized(EncoderConfig(), 3)
    x = np.random.default_rng(3).standard_normal((8, 32))
    assert not np.allclose(encode(x, p), encode(3.0 * x, p))


def test_non_finite_input_raises():
    p = init_encoder(EncoderConfig(), 0)
    x = np.zeros((2, 8, 32))
    x[1, 0, 0] = np.nan
    with pytest.raises(NumericError, match="index 1"):
        encode_batch(list(x), p)


def test_trainable_sets():
    assert init_encoder(EncoderConfig(), 0).trainable == set(ADAPTER_PARAMS) | set(HEAD_PARAMS)
    full = init_encoder(EncoderConfig(train_block=True), 0)
    assert full.trainable == set(ADAPTER_PARAMS) | set(HEAD_PARAMS) | set(BLOCK_PARAMS)


def test_trained_zero_scale_equals_base_block(trained_k3):
    state = trained_k3[0]
    p = state.params
    x = np.stack([im.tokens for im in state.images[:50]])
    p0 = init_encoder(p.config, 0)
    for k in p.names():
        p0.params[k][...] = p[k]
    p0.params["adapter.s"][...] = 0.0
    a = Encoder().forward(x, p0.params)
    b = Encoder(adapter=False).forward(x, p0.params)
    assert np.array_equal(a, b)


def test_trained_views_close_in_angle_are_closer(trained_k3):
    from mutualvpr.synthworld import render_view
    state, data = trained_k3
    rng = np.random.default_rng(11)
    near, far = [], []
    for _ in range(100):
        pi = int(rng.integers(len(data.world.places)))
        h = float(rng.uniform(0, 360))
        imgs = [render_view(data.world, pi, (h + d) % 360, noise_sigma=0.0) for d in (0.0, 1.0, 180.0)]
        a, b, c = encode_batch(imgs, state.params)
        near.append(a @ b)
        far.append(a @ c)
    assert np.mean(np.array(near) > np.array(far)) == 1.0
