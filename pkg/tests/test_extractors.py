import numpy as np
import pytest

from fleetalign import autodiff as ad
from fleetalign.extractors import Decoder, MlpEncoder, VariationalEncoder
from conftest import numeric_grad, rel_error


def test_encoder_output_shape_and_rectified(rng):
    enc = MlpEncoder(24, 10, 10, rng)
    f = enc.features(rng.normal(size=(7, 24)))
    assert f.shape == (7, 10)
    assert np.all(f >= 0)


def test_encoder_rejects_wrong_width(rng):
    enc = MlpEncoder(24, rng=rng)
    with pytest.raises(ad.ShapeError):
        enc(np.zeros((3, 23)))


def test_variational_encoder_mean_inference_is_deterministic(rng):
    enc = VariationalEncoder(24, 10, 10, rng)
    x = rng.normal(size=(5, 24))
    mu, logvar, f = enc(x)
    assert f is mu
    np.testing.assert_array_equal(enc.features(x), enc.features(x))
    assert logvar.shape == (5, 10)


def test_variational_sample_is_mean_plus_scaled_noise(rng):
    enc = VariationalEncoder(24, 10, 10, rng)
    x = rng.normal(size=(5, 24))
    mu, logvar, f = enc(x, np.random.default_rng(3))
    eps = np.random.default_rng(3).standard_normal((5, 10))
    np.testing.assert_allclose(f.data, mu.data + np.exp(0.5 * logvar.data) * eps, atol=1e-12)


def test_decoder_reconstructs_input_width(rng):
    dec = Decoder(10, 10, 24, rng)
    assert dec(np.ones((4, 10))).shape == (4, 24)


def test_state_round_trip(rng):
    a = VariationalEncoder(24, 10, 10, np.random.default_rng(1))
    b = VariationalEncoder(24, 10, 10, np.random.default_rng(2))
    b.load_state(a.state())
    x = rng.normal(size=(3, 24))
    np.testing.assert_array_equal(a.features(x), b.features(x))


def test_state_rejects_shape_mismatch():
    a = MlpEncoder(24, 10, 10, np.random.default_rng(0))
    b = MlpEncoder(24, 12, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        b.load_state(a.state())


def test_autoencoder_gradient_matches_finite_differences(rng):
    enc = VariationalEncoder(6, 5, 3, np.random.default_rng(4))
    dec = Decoder(3, 5, 6, np.random.default_rng(5))
    x = rng.normal(size=(4, 6))

    def loss():
        mu, logvar, f = enc(x, np.random.default_rng(9))
        return ad.mean(ad.square(dec(f) - x))

    enc.zero_grad()
    dec.zero_grad()
    loss().backward()
    for p in enc.parameters() + dec.parameters():
        num = numeric_grad(lambda: loss().item(), p.data)
        assert rel_error(p.grad, num, floor=1.0) <= 1e-4


def test_zero_grad_clears_buffers(rng):
    enc = MlpEncoder(4, 3, 2, rng)
    ad.tsum(enc(rng.normal(size=(2, 4)))).backward()
    enc.zero_grad()
    assert all(np.all(p.grad == 0) for p in enc.parameters())
