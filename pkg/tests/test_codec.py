import numpy as np
import pytest
import torch

from pairflow import synthdata
from pairflow.codec import LosslessCodec, TinyAutoencoder, train_tiny_autoencoder
from pairflow.errors import ShapeError, ValidationError


def test_zero_image_encodes_to_constant_normalized_latent(fitted_codec):
    z = fitted_codec.encode(np.zeros((32, 32, 3), dtype=np.float32))
    stats = fitted_codec.normalization_arrays()
    expect = (0.0 - stats["codec.mean"]) / stats["codec.std"]
    assert np.allclose(z.numpy(), expect[:, None, None], atol=1e-6)


def test_roundtrip_on_100_random_rasters(fitted_codec):
    rng = np.random.default_rng(0)
    for _ in range(100):
        img = rng.random((32, 32, 3)).astype(np.float32)
        back = fitted_codec.decode(fitted_codec.encode(img))
        err = (back.permute(1, 2, 0).numpy() - img)
        assert np.abs(err).max() <= 1e-6


def test_roundtrip_on_ones_and_render(fitted_codec):
    ones = np.ones((32, 32, 3), dtype=np.float32)
    back = fitted_codec.decode(fitted_codec.encode(ones)).permute(1, 2, 0).numpy()
    assert np.abs(back - 1.0).max() <= 1e-6
    rng = np.random.default_rng(3)
    img = synthdata.sample_t2i(rng, "2obj", 32).target
    back = fitted_codec.decode(fitted_codec.encode(img)).permute(1, 2, 0).numpy()
    assert np.abs(back - img).max() <= 1e-6


def test_encode_shape_for_64_input():
    codec = LosslessCodec(factor=4)
    z = codec.encode(np.zeros((64, 64, 3), dtype=np.float32))
    assert tuple(z.shape) == (48, 16, 16)


def test_indivisible_dims_raise():
    codec = LosslessCodec(factor=4)
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((30, 30, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        codec.decode(torch.zeros(47, 8, 8))


def test_blank_latent_equals_encode_of_zeros(fitted_codec):
    blank = fitted_codec.blank_latent(32)
    direct = fitted_codec.encode(np.zeros((32, 32, 3), dtype=np.float32))
    assert torch.equal(blank, direct)
    assert torch.equal(fitted_codec.blank_latent(32), blank)  # cached, stable
    assert blank.shape == direct.shape


def test_normalization_stats_validation():
    codec = LosslessCodec(factor=4)
    with pytest.raises(ShapeError):
        codec.set_normalization(np.zeros(3), np.ones(3))
    with pytest.raises(ValidationError):
        codec.set_normalization(np.zeros(48), np.zeros(48))


def test_batched_encode_decode(fitted_codec):
    rng = np.random.default_rng(1)
    batch = rng.random((5, 32, 32, 3)).astype(np.float32)
    z = fitted_codec.encode(batch)
    assert tuple(z.shape) == (5, 48, 8, 8)
    back = fitted_codec.decode(z).permute(0, 2, 3, 1).numpy()
    assert np.abs(back - batch).max() <= 1e-6


def test_tiny_autoencoder_interface_and_training():
    torch.manual_seed(0)
    model = TinyAutoencoder(width=8)
    rng = np.random.default_rng(0)
    imgs = np.stack([synthdata.sample_t2i(rng, "1obj", 32).target for _ in range(8)])
    z = model.encode(imgs[0])
    assert tuple(z.shape) == (4, 4, 4)  # f=8, C=4 on a 32px image
    out = model.decode(z)
    assert tuple(out.shape) == (3, 32, 32)
    losses = train_tiny_autoencoder(model, imgs, steps=30, batch_size=4, seed=0)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
