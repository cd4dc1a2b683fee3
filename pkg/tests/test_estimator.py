import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from epicodec import EpiCodec

X = np.random.default_rng(0).random((3, 24, 12, 9)).astype(np.float32)
TINY = dict(levels=32, epochs=1, iterations=2, pretrain_steps=2, base_channels=4)


@pytest.fixture(scope="module")
def fitted():
    return EpiCodec(**TINY).fit(X)


def test_params_round_trip_through_clone():
    est = EpiCodec(beta=1e-7, levels=64)
    c = clone(est)
    assert c.get_params() == est.get_params()
    assert c.set_params(alpha=0.5).alpha == 0.5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        EpiCodec().transform(X)


def test_fitted_attributes(fitted):
    assert fitted.volume_shape_ == (24, 12, 9)
    assert fitted.latent_shape_ == (8, 4, 9)
    assert len(fitted.history_) == 4


def test_transform_and_inverse(fitted):
    z = fitted.transform(X)
    assert z.shape == (3, 8, 4, 9) and z.max() < 32
    rec = fitted.inverse_transform(z)
    assert rec.shape == X.shape
    assert rec.min() >= 0 and rec.max() <= 1


def test_bitstream_round_trip(fitted):
    streams = fitted.encode(X)
    assert len(streams) == 3 and all(s[:4] == b"EPIC" for s in streams)
    np.testing.assert_array_equal(fitted.decode(streams), fitted.inverse_transform(fitted.transform(X)))


def test_score_is_psnr(fitted):
    s = fitted.score(X)
    assert 0 < s < 99


def test_fit_is_deterministic():
    a = EpiCodec(**TINY).fit(X).transform(X)
    b = EpiCodec(**TINY).fit(X).transform(X)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("bad", [X[0], np.zeros((2, 20, 12, 9), np.float32)])
def test_invalid_input_rejected(bad):
    with pytest.raises(ValueError):
        EpiCodec(**TINY).fit(bad)


def test_geometry_must_match_fit(fitted):
    with pytest.raises(ValueError, match="fitted"):
        fitted.transform(np.zeros((1, 18, 12, 9), np.float32))
