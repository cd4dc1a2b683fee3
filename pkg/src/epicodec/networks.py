"""Encoder, generator, (image, latent) discriminator and the frozen feature network.

All networks consume NHWC tensors whose two spatial axes are the EPI width
(``8K_pad``) and height (``N``); channels are the ``3L`` stacked RGB planes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import diffengine as de
from .diffengine import ShapeError, Tensor


@dataclass
class NetworkConfig:
    base_channels: int = 32
    disc_channels: int = 16
    feature_channels: int = 8
    feature_seed: int = 1234
    residual_blocks: int = 4
    first_kernel: int = 7
    kernel: int = 3
    leaky_slope: float = 0.2
    bn_momentum: float = 0.9
    bn_inference: str = "batch"

    def __post_init__(self):
        if self.bn_inference not in ("batch", "running"):
            raise ValueError(f"bn_inference must be 'batch' or 'running', got {self.bn_inference!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Named parameters, batch-norm buffers and child modules."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, dict[str, np.ndarray]] = {}
        self.children: dict[str, Module] = {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self.params.items():
            yield prefix + k, p
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, stats in self.buffers.items():
            for s, arr in stats.items():
                yield f"{prefix}{k}.{s}", arr
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.named_parameters()}
        out.update({f"buffer:{k}": v for k, v in self.named_buffers()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            if k not in arrays:
                raise KeyError(f"missing parameter {k}")
            if arrays[k].shape != p.shape:
                raise ShapeError("load", f"{k}: stored shape {arrays[k].shape} != {p.shape}")
            p.data = arrays[k].astype(p.dtype).copy()
        for k, buf in self.named_buffers():
            buf[...] = arrays[f"buffer:{k}"]

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = False


def _uniform(rng: np.random.Generator, shape, fan_in: float, dtype) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng, dtype, gain: float = 1.0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.params["w"] = Tensor(gain * _uniform(rng, (k, k, cin, cout), k * k * cin, dtype), requires_grad=True)
        self.params["b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return de.conv2d(x, self.params["w"], self.params["b"], self.stride, self.padding)


class TConv(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int, rng, dtype):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = k * k * cin / (stride * stride)
        self.params["w"] = Tensor(_uniform(rng, (k, k, cin, cout), fan_in, dtype), requires_grad=True)
        self.params["b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return de.transpose_conv2d(x, self.params["w"], self.params["b"], self.stride, self.padding)


class BatchNorm(Module):
    """Batch norm whose inference mode is either the running statistics or the
    statistics of the EPI being processed (what batchsize-1 training sees)."""

    def __init__(self, c: int, dtype, momentum: float = 0.9, inference: str = "batch"):
        super().__init__()
        self.momentum = momentum
        self.inference = inference
        self.params["gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.buffers["running"] = {"mean": np.zeros(c, dtype=dtype), "var": np.ones(c, dtype=dtype)}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        g, b = self.params["gamma"], self.params["beta"]
        if training:
            return de.batch_norm(x, g, b, self.buffers["running"], training=True, momentum=self.momentum)
        if self.inference == "batch":
            return de.batch_norm(x, g, b, None, training=True)
        return de.batch_norm(x, g, b, self.buffers["running"], training=False)


class ResidualBlock(Module):
    """conv, BN, ReLU, conv, BN, then elementwise sum with the input."""

    def __init__(self, c: int, k: int, rng, dtype, momentum: float, inference: str = "batch"):
        super().__init__()
        self.children["conv1"] = Conv(c, c, k, 1, k // 2, rng, dtype)
        self.children["bn1"] = BatchNorm(c, dtype, momentum, inference)
        self.children["conv2"] = Conv(c, c, k, 1, k // 2, rng, dtype)
        self.children["bn2"] = BatchNorm(c, dtype, momentum, inference)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = self.children
        h = de.relu(c["bn1"](c["conv1"](x), training))
        h = c["bn2"](c["conv2"](h), training)
        return de.add(x, h)


def latent_shape(volume_shape: Sequence[int]) -> tuple[int, int, int]:
    w, h, ch = volume_shape
    if w % 3 or h % 3:
        raise ShapeError("encoder", f"EPI spatial dims {w}x{h} must be divisible by 3 (pad upstream)")
    return (w // 3, h // 3, ch)


class Encoder(Module):
    """One stride-3 convolution, residual blocks, two stride-1 convolutions.

    Maps ``(B, 8K_pad, N, 3L)`` to ``(B, 8K_pad/3, N/3, 3L)``. The last
    convolution is squashed into ``out_range`` (the quantizer's range).
    """

    def __init__(self, channels: int, config: NetworkConfig, rng, dtype=np.float32,
                 out_range: tuple[float, float] = (-1.0, 1.0)):
        super().__init__()
        c, k = config.base_channels, config.kernel
        fk = config.first_kernel
        self.out_range = (float(out_range[0]), float(out_range[1]))
        self.children["head"] = Conv(channels, c, fk, 3, (fk - 3) // 2, rng, dtype)
        for i in range(config.residual_blocks):
            self.children[f"res{i}"] = ResidualBlock(c, k, rng, dtype, config.bn_momentum, config.bn_inference)
        self.children["tail1"] = Conv(c, c, k, 1, k // 2, rng, dtype)
        self.children["tail2"] = Conv(c, channels, k, 1, k // 2, rng, dtype)
        self.n_blocks = config.residual_blocks
        self.channels = channels

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[3] != self.channels:
            raise ShapeError("encoder", f"expected (B, W, H, {self.channels}), got {x.shape}")
        latent_shape(x.shape[1:])
        c = self.children
        h = de.relu(c["head"](x))
        for i in range(self.n_blocks):
            h = c[f"res{i}"](h, training)
        h = de.relu(c["tail1"](h))
        lo, hi = self.out_range
        return de.scale(de.sigmoid(c["tail2"](h)), hi - lo, lo)


class Generator(Module):
    """Mirror of the encoder ending in a stride-3 transposed convolution and a sigmoid."""

    def __init__(self, channels: int, config: NetworkConfig, rng, dtype=np.float32):
        super().__init__()
        c, k = config.base_channels, config.kernel
        fk = config.first_kernel
        self.children["head1"] = Conv(channels, c, k, 1, k // 2, rng, dtype)
        self.children["head2"] = Conv(c, c, k, 1, k // 2, rng, dtype)
        for i in range(config.residual_blocks):
            self.children[f"res{i}"] = ResidualBlock(c, k, rng, dtype, config.bn_momentum, config.bn_inference)
        self.children["up"] = TConv(c, c, fk, 3, (fk - 3) // 2, rng, dtype)
        self.children["out"] = Conv(c, channels, k, 1, k // 2, rng, dtype)
        self.n_blocks = config.residual_blocks
        self.channels = channels

    def __call__(self, z: Tensor, training: bool = False) -> Tensor:
        if z.data.ndim != 4 or z.shape[3] != self.channels:
            raise ShapeError("generator", f"expected (B, W/3, H/3, {self.channels}), got {z.shape}")
        c = self.children
        h = de.relu(c["head1"](z))
        h = de.relu(c["head2"](h))
        for i in range(self.n_blocks):
            h = c[f"res{i}"](h, training)
        h = de.relu(c["up"](h))
        return de.sigmoid(c["out"](h))


class Discriminator(Module):
    """Scores an (EPI, latent) pair.

    The latent is nearest-upsampled x3 to the image resolution and joined to
    the first image feature map; three stride-2 convolutions, a 1x1 fusion
    convolution, a global mean and a sigmoid follow.
    """

    def __init__(self, channels: int, config: NetworkConfig, rng, dtype=np.float32):
        super().__init__()
        c, k = config.disc_channels, config.kernel
        self.slope = config.leaky_slope
        self.children["img"] = Conv(channels, c, k, 1, k // 2, rng, dtype)
        self.children["down0"] = Conv(c + channels, c, k, 2, k // 2, rng, dtype)
        self.children["down1"] = Conv(c, 2 * c, k, 2, k // 2, rng, dtype)
        self.children["down2"] = Conv(2 * c, 2 * c, k, 2, k // 2, rng, dtype)
        self.children["fuse"] = Conv(2 * c, 1, 1, 1, 0, rng, dtype)
        # start at exactly 0.5 with no input gradient; an untrained D's arbitrary
        # input gradients otherwise swamp the distortion term
        self.children["fuse"].params["w"].data[...] = 0
        self.channels = channels

    def __call__(self, x: Tensor, z: Tensor) -> Tensor:
        if x.data.ndim != 4 or z.data.ndim != 4:
            raise ShapeError("discriminator", "inputs must be rank-4")
        b, w, h, _ = x.shape
        if z.shape != (b, w // 3, h // 3, self.channels) or w % 3 or h % 3:
            raise ShapeError("discriminator", f"latent {z.shape} does not match image {x.shape}")
        c = self.children
        f = de.leaky_relu(c["img"](x), self.slope)
        f = de.concat_channels([f, de.upsample_nearest(z, 3)])
        for name in ("down0", "down1", "down2"):
            f = de.leaky_relu(c[name](f), self.slope)
        logits = de.reduce_mean(c["fuse"](f), axis=(1, 2, 3))
        return de.sigmoid(logits)


class FeatureNet(Module):
    """Frozen convolutional feature extractor for the perceptual distortion term.

    Randomly initialized from ``seed`` unless ``weights`` (a list of
    ``(kernel, bias)`` pairs) is supplied, e.g. pretrained filters.
    """

    def __init__(self, channels: int, config: NetworkConfig, dtype=np.float32,
                 weights: Sequence[tuple[np.ndarray, np.ndarray]] | None = None, depth: int = 3):
        super().__init__()
        rng = np.random.default_rng(config.feature_seed)
        fc, k = config.feature_channels, config.kernel
        cin = channels
        for i in range(depth):
            conv = Conv(cin, fc, k, 1, k // 2, rng, dtype)
            if weights is not None:
                w, bias = weights[i]
                conv.params["w"].data = np.asarray(w, dtype=dtype)
                conv.params["b"].data = np.asarray(bias, dtype=dtype)
            self.children[f"conv{i}"] = conv
            cin = fc
        self.depth = depth
        self.freeze()

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i in range(self.depth):
            h = self.children[f"conv{i}"](h)
            if i < self.depth - 1:
                h = de.relu(h)
        return h
