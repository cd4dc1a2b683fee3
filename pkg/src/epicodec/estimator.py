"""scikit-learn style front end: EPI volumes in, latent indices or bitstreams out."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bitstream import decode_bitstream, encode_bitstream
from .epi import to_uint8
from .evaluation import psnr
from .networks import NetworkConfig
from .quantizer import QuantizerSpec
from .training import CodecModel, LossWeights, TrainConfig, train_loop


class EpiCodec(TransformerMixin, BaseEstimator):
    """Learned latent codec for EPI volumes shaped ``(n, width, rows, 3L)`` in [0, 1].

    ``fit`` trains encoder, generator and discriminator on the given volumes.
    ``transform`` returns hard quantization indices, ``inverse_transform``
    reconstructs volumes from them, and ``encode``/``decode`` go through the
    entropy-coded bitstream.
    """

    def __init__(self, levels=256, lo=-1.0, hi=1.0, window=9, alpha=1.0, beta=1e-6,
                 epochs=10, iterations=200, pretrain_steps=500, base_lr=1e-3, decay_rate=0.7,
                 disc_lr_scale=0.1, softness=1.0, rate_unit="code_bits", base_channels=32,
                 random_state=0):
        self.levels = levels
        self.lo = lo
        self.hi = hi
        self.window = window
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.iterations = iterations
        self.pretrain_steps = pretrain_steps
        self.base_lr = base_lr
        self.decay_rate = decay_rate
        self.disc_lr_scale = disc_lr_scale
        self.softness = softness
        self.rate_unit = rate_unit
        self.base_channels = base_channels
        self.random_state = random_state

    def _check_volumes(self, X, reset: bool) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
        if X.ndim != 4:
            raise ValueError(f"expected EPI volumes shaped (n, width, rows, channels), got {X.ndim}-d input")
        if X.shape[1] % 3 or X.shape[2] % 3:
            raise ValueError(f"EPI width and rows must be multiples of 3, got {X.shape[1:3]}")
        if reset:
            self.volume_shape_ = X.shape[1:]
        elif X.shape[1:] != self.volume_shape_:
            raise ValueError(f"volumes shaped {X.shape[1:]}, estimator was fitted on {self.volume_shape_}")
        return X

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return 0
        if isinstance(rs, (int, np.integer)):
            return int(rs)
        raise ValueError("random_state must be an int or None")

    def fit(self, X, y=None):
        X = self._check_volumes(X, reset=True)
        self.spec_ = QuantizerSpec(self.levels, self.lo, self.hi, None, self.window)
        cfg = TrainConfig(epochs=self.epochs, iterations=self.iterations, pretrain_steps=self.pretrain_steps,
                          base_lr=self.base_lr, decay_rate=self.decay_rate, disc_lr_scale=self.disc_lr_scale,
                          softness=self.softness, rate_unit=self.rate_unit, seed=self._seed())
        net = NetworkConfig(base_channels=self.base_channels)
        self.model_ = CodecModel(self.volume_shape_, self.spec_, net, seed=self._seed())
        _, self.history_ = train_loop(list(X), self.model_, cfg, LossWeights(self.alpha, self.beta))
        self.latent_shape_ = self.model_.latent_shape
        return self

    def transform(self, X):
        """Hard quantization indices, shaped ``(n,) + latent_shape_``."""
        check_is_fitted(self, "model_")
        X = self._check_volumes(X, reset=False)
        return self.model_.encode(X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        Z = np.asarray(Z)
        if Z.shape[1:] != self.latent_shape_:
            raise ValueError(f"indices shaped {Z.shape[1:]}, expected {self.latent_shape_}")
        return self.model_.decode(Z)

    def encode(self, X) -> list[bytes]:
        """One bitstream per volume."""
        return [encode_bitstream(z, self.spec_) for z in self.transform(X)]

    def decode(self, streams) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.inverse_transform(np.stack([decode_bitstream(s)[0] for s in streams]))

    def score(self, X, y=None) -> float:
        """Mean 8-bit PSNR (dB) of the reconstructions."""
        X = self._check_volumes(X, reset=False) if hasattr(self, "model_") else X
        rec = self.inverse_transform(self.transform(X))
        return float(np.mean([psnr(to_uint8(a), to_uint8(b)) for a, b in zip(X, rec)]))
