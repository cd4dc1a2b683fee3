"""Losses and the alternating D -> G -> E optimization."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffengine as de
from .diffengine import AdamState, NonFiniteError, Tensor, adam_step
from .diffengine import checkpoint as ckpt
from .epi import to_uint8
from .networks import Discriminator, Encoder, FeatureNet, Generator, Module, NetworkConfig, latent_shape
from .quantizer import QuantizerSpec, dequantize, hard_quantize, rate_loss, soft_quantize

METRIC_FIELDS = ("step", "epoch", "lr", "d_loss", "g_loss", "e_loss", "distortion", "rate", "rate_nats")
RATE_UNITS = ("code_bits", "nats")
CHECKPOINT_FORMAT = 1


class TrainingAborted(NonFiniteError):
    """A non-finite loss stopped training; ``last_checkpoint`` is the last good state on disk."""

    def __init__(self, step: int, cause: NonFiniteError, last_checkpoint: Path | None):
        ref = str(last_checkpoint) if last_checkpoint else "none written"
        NonFiniteError.__init__(self, cause.name, f"training aborted at step {step} ({cause}); last good checkpoint: {ref}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 10
    iterations: int = 200
    batchsize: int = 1
    base_lr: float = 1e-4
    decay_rate: float = 0.95
    disc_lr_scale: float = 0.1
    pretrain_steps: int = 500
    seed: int = 0
    softness: float = 1.0
    non_saturating: bool = False
    rate_unit: str = "code_bits"
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.rate_unit not in RATE_UNITS:
            raise ValueError(f"rate_unit must be one of {RATE_UNITS}, got {self.rate_unit!r}")
        if self.batchsize < 1:
            raise ValueError("batchsize must be >= 1")
        if self.epochs < 0 or self.iterations < 0 or self.pretrain_steps < 0:
            raise ValueError("epochs, iterations and pretrain_steps must be >= 0")

    @property
    def steps_per_epoch(self) -> int:
        return self.iterations // self.batchsize

    def rate_scale(self, latent_shape: Sequence[int]) -> float:
        """Factor taking per-symbol nats to the rate term used in the encoder loss.

        ``code_bits`` measures the rate as the information content of one EPI's
        whole latent code in bits, the same unit the bitstream is accounted in.
        """
        if self.rate_unit == "nats":
            return 1.0
        return float(np.prod(latent_shape)) / math.log(2.0)


class CodecModel:
    """Encoder, generator, discriminator and feature network for one EPI geometry."""

    def __init__(self, volume_shape: Sequence[int], spec: QuantizerSpec,
                 net: NetworkConfig | None = None, seed: int = 0, dtype=np.float32,
                 features: FeatureNet | None | bool = True):
        self.volume_shape = tuple(int(s) for s in volume_shape)
        self.latent_shape = latent_shape(self.volume_shape)
        self.spec = spec
        self.net = net or NetworkConfig()
        self.dtype = np.dtype(dtype)
        channels = self.volume_shape[2]
        rng = np.random.default_rng([seed, 0])
        self.encoder = Encoder(channels, self.net, rng, self.dtype, (spec.lo, spec.hi))
        self.generator = Generator(channels, self.net, rng, self.dtype)
        self.discriminator = Discriminator(channels, self.net, rng, self.dtype)
        if features is True:
            features = FeatureNet(channels, self.net, self.dtype)
        self.features: FeatureNet | None = features or None

    def modules(self) -> dict[str, Module]:
        return {"E": self.encoder, "G": self.generator, "D": self.discriminator}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for tag, mod in self.modules().items():
            out.update({f"{tag}/{k}": v for k, v in mod.state_arrays().items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for tag, mod in self.modules().items():
            pre = f"{tag}/"
            mod.load_arrays({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})

    def batch(self, volumes) -> Tensor:
        x = np.asarray(volumes, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.volume_shape:
            raise de.ShapeError("model", f"EPI batch {x.shape[1:]} != model geometry {self.volume_shape}")
        return Tensor(x)

    def encode(self, volumes) -> np.ndarray:
        """Hard quantization indices of the inference-mode encoder output.

        EPIs go through one at a time so per-EPI batch-norm statistics never
        mix volumes.
        """
        x = self.batch(volumes)
        z = [self.encoder(Tensor(x.data[i : i + 1]), training=False).data for i in range(len(x.data))]
        return hard_quantize(np.concatenate(z), self.spec)

    def decode(self, indices) -> np.ndarray:
        z = dequantize(indices, self.spec).astype(self.dtype)
        if z.ndim == 3:
            z = z[None]
        out = [self.generator(Tensor(z[i : i + 1]), training=False).data for i in range(len(z))]
        return np.concatenate(out)

    def reconstruct(self, volumes) -> np.ndarray:
        return self.decode(self.encode(volumes))


# -- losses --

def mse(x: Tensor, y: Tensor) -> Tensor:
    return de.reduce_mean(de.square(de.sub(x, y)))


def distortion_loss(x: Tensor, x_hat: Tensor, features: FeatureNet | None = None) -> Tensor:
    """Pixel MSE plus feature-space MSE, each averaged over its element count."""
    if x.shape != x_hat.shape:
        raise de.ShapeError("distortion_loss", f"{x.shape} != {x_hat.shape}")
    d = mse(x, x_hat)
    if features is not None:
        d = de.add(d, mse(features(x), features(x_hat)))
    return d


def gan_value(d_real: Tensor, d_fake: Tensor, non_saturating: bool = False) -> tuple[Tensor, Tensor]:
    """Discriminator loss and the generator-side adversarial term.

    ``d_loss = -[log D(x, z) + log(1 - D(x_hat, z_hat))]`` and
    ``g_adv = log(1 - D(x_hat, z_hat))`` (or ``-log D(x_hat, z_hat)`` when
    ``non_saturating``), batch-averaged, logs clamped at 1e-12.
    """
    one_minus_fake = de.scale(d_fake, -1.0, 1.0)
    d_loss = de.scale(de.add(de.reduce_mean(de.log(d_real)), de.reduce_mean(de.log(one_minus_fake))), -1.0)
    if non_saturating:
        g_adv = de.scale(de.reduce_mean(de.log(d_fake)), -1.0)
    else:
        g_adv = de.reduce_mean(de.log(one_minus_fake))
    return d_loss, g_adv


def _grads(loss: Tensor, model: CodecModel, target: Module) -> dict[str, np.ndarray]:
    for mod in model.modules().values():
        de.zero_grad(p for _, p in mod.named_parameters())
    params = target.parameters()
    grads = de.backward(loss, params)
    return grads


def _check_finite(name: str, t: Tensor) -> float:
    v = float(t.data)
    if not math.isfinite(v):
        raise NonFiniteError(name, "non-finite loss")
    return v


@dataclass
class Optimizers:
    disc: AdamState
    gen: AdamState
    enc: AdamState

    @classmethod
    def create(cls, cfg: TrainConfig) -> "Optimizers":
        return cls(AdamState(cfg.base_lr * cfg.disc_lr_scale, cfg.decay_rate),
                   AdamState(cfg.base_lr, cfg.decay_rate), AdamState(cfg.base_lr, cfg.decay_rate))

    def items(self):
        return (("disc", self.disc), ("gen", self.gen), ("enc", self.enc))

    def set_epoch(self, epoch: int) -> None:
        for _, s in self.items():
            s.set_epoch(epoch)


def train_step(model: CodecModel, x_batch, opt: Optimizers, weights: LossWeights,
               soft_spec: QuantizerSpec, non_saturating: bool = False,
               update_discriminator: bool = True, rate_scale: float = 1.0) -> dict[str, float]:
    """One D, then G, then E update on a minibatch."""
    E, G, D, phi = model.encoder, model.generator, model.discriminator, model.features
    x = model.batch(x_batch)

    z = E(x, training=True)
    z_tilde = soft_quantize(z, soft_spec).detach()
    x_hat = G(z_tilde, training=True)

    d_loss, _ = gan_value(D(x, z.detach()), D(x_hat.detach(), z_tilde), non_saturating)
    d_val = _check_finite("d_loss", d_loss)
    if update_discriminator:
        adam_step(D.parameters(), _grads(d_loss, model, D), opt.disc)

    _, g_adv = gan_value(D(x, z.detach()), D(x_hat, z_tilde), non_saturating)
    g_dist = distortion_loss(x, x_hat, phi)
    g_loss = de.add(g_adv, g_dist)
    g_val = _check_finite("g_loss", g_loss)
    adam_step(G.parameters(), _grads(g_loss, model, G), opt.gen)

    z_soft = soft_quantize(z, soft_spec)
    x_rec = G(z_soft, training=True)
    _, v_gan = gan_value(D(x, z.detach()), D(x_rec, z_soft), non_saturating)
    dist = distortion_loss(x, x_rec, phi)
    rate_nats = rate_loss(z, soft_spec)
    rate = de.scale(rate_nats, rate_scale)
    e_loss = de.add(v_gan, de.add(de.scale(dist, weights.alpha), de.scale(rate, weights.beta)))
    e_val = _check_finite("e_loss", e_loss)
    adam_step(E.parameters(), _grads(e_loss, model, E), opt.enc)

    return {"lr": opt.enc.lr, "d_loss": d_val, "g_loss": g_val, "e_loss": e_val,
            "distortion": float(dist.data), "rate_nats": float(rate_nats.data), "rate": float(rate.data),
            "v_gan": float(v_gan.data), "g_distortion": float(g_dist.data)}


def pretrain_step(model: CodecModel, x_batch, opt: Optimizers, soft_spec: QuantizerSpec,
                  rate_scale: float = 1.0) -> dict[str, float]:
    """Joint E/G warm-up on the distortion term alone."""
    E, G = model.encoder, model.generator
    x = model.batch(x_batch)
    z = E(x, training=True)
    dist = distortion_loss(x, G(soft_quantize(z, soft_spec), training=True), model.features)
    val = _check_finite("distortion", dist)
    rate = float(rate_loss(Tensor(z.data), soft_spec).data)
    grads_g = _grads(dist, model, G)
    grads_e = {k: p.grad if p.grad is not None else np.zeros_like(p.data)
               for k, p in E.parameters().items()}
    adam_step(G.parameters(), grads_g, opt.gen)
    adam_step(E.parameters(), grads_e, opt.enc)
    return {"lr": opt.enc.lr, "d_loss": float("nan"), "g_loss": float("nan"), "e_loss": val,
            "distortion": val, "rate": rate * rate_scale, "rate_nats": rate}


# -- loop, checkpoints, metrics --

def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    model: CodecModel
    opt: Optimizers
    rng: np.random.Generator
    step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, state: TrainState, provenance: dict | None = None) -> None:
    arrays = dict(state.model.state_arrays())
    adam = {}
    for name, s in state.opt.items():
        blobs, scalars = ckpt.adam_to_blobs(f"adam/{name}", s)
        arrays.update(blobs)
        adam[name] = scalars
    # carried-over metadata first, so a resumed state never writes stale counters
    meta = dict(state.meta)
    if provenance:
        meta.update(provenance)
    meta.update({"format": CHECKPOINT_FORMAT, "step": state.step, "adam": adam,
                 "rng": state.rng.bit_generator.state, "volume_shape": list(state.model.volume_shape)})
    ckpt.save(path, arrays, meta)


def load_checkpoint(path, model: CodecModel) -> TrainState:
    arrays, meta = ckpt.load(path)
    if tuple(meta.get("volume_shape", ())) != model.volume_shape:
        raise ckpt.CheckpointError(f"checkpoint geometry {meta.get('volume_shape')} != {model.volume_shape}")
    model.load_arrays(arrays)
    opt = Optimizers(*(ckpt.adam_from_blobs(f"adam/{n}", arrays, meta["adam"][n], model.dtype)
                       for n in ("disc", "gen", "enc")))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(model, opt, rng, int(meta["step"]), meta)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics(path, rows, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]


def validate_dataset(volumes) -> np.ndarray:
    arrs = [np.asarray(getattr(v, "data", v)) for v in volumes]
    if not arrs:
        raise ValueError("training dataset is empty")
    shape = arrs[0].shape
    for i, a in enumerate(arrs):
        if a.shape != shape:
            raise ValueError(f"EPI {i} has shape {a.shape}, expected {shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"EPI {i} contains non-finite values")
    return np.stack(arrs)


def init_state(model: CodecModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model, Optimizers.create(cfg), np.random.default_rng([cfg.seed, 1]))


def train_loop(volumes, model: CodecModel, cfg: TrainConfig, weights: LossWeights,
               out_dir=None, state: TrainState | None = None, max_steps: int | None = None,
               provenance: dict | None = None) -> tuple[TrainState, list[dict]]:
    """Warm-up, then ``epochs * iterations / batchsize`` alternating steps.

    Learning rates decay once per epoch. Metrics rows are returned and, when
    ``out_dir`` is set, appended to ``metrics.csv`` next to ``checkpoint.ckpt``.
    Passing the ``state`` loaded from a checkpoint resumes where it stopped;
    ``max_steps`` stops early (after checkpointing) at that global step.
    """
    data = validate_dataset(volumes)
    if data.shape[1:] != model.volume_shape:
        raise ValueError(f"dataset EPIs {data.shape[1:]} do not match model geometry {model.volume_shape}")
    soft_spec = model.spec.with_softness(cfg.softness)
    rate_scale = cfg.rate_scale(model.latent_shape)
    resumed = state is not None
    state = state or init_state(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt" if out else None
    metrics_path = out / "metrics.csv" if out else None
    if out is not None and not resumed:
        write_metrics(metrics_path, [])

    rows: list[dict] = []
    pending: list[dict] = []
    total = cfg.pretrain_steps + cfg.epochs * cfg.steps_per_epoch
    stop = total if max_steps is None else min(total, max_steps)

    def flush():
        if metrics_path is not None and pending:
            write_metrics(metrics_path, pending, append=True)
        pending.clear()

    last_good = [ckpt_path if resumed and ckpt_path is not None and ckpt_path.exists() else None]

    def checkpoint():
        flush()
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, state, provenance)
            last_good[0] = ckpt_path

    n = len(data)
    k = cfg.batchsize
    while state.step < stop:
        s = state.step
        idx = state.rng.choice(n, size=k, replace=k > n)
        batch = data[idx]
        try:
            if s < cfg.pretrain_steps:
                epoch = -1
                state.opt.set_epoch(0)
                m = pretrain_step(model, batch, state.opt, soft_spec, rate_scale)
            else:
                epoch = (s - cfg.pretrain_steps) // cfg.steps_per_epoch
                state.opt.set_epoch(epoch)
                m = train_step(model, batch, state.opt, weights, soft_spec, cfg.non_saturating,
                               rate_scale=rate_scale)
        except NonFiniteError as exc:
            flush()
            raise TrainingAborted(s, exc, last_good[0]) from exc
        row = {"step": s, "epoch": epoch, **m}
        rows.append(row)
        pending.append(row)
        state.step += 1
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            checkpoint()
    checkpoint()
    return state, rows


def reconstruction_psnr(model: CodecModel, volumes) -> float:
    """Mean PSNR (dB, 8-bit) of inference-mode hard-quantized reconstructions."""
    from .evaluation import psnr

    data = validate_dataset(volumes)
    vals = []
    for x in data:
        rec = model.reconstruct(x)[0]
        vals.append(psnr(to_uint8(x), to_uint8(rec)))
    return float(np.mean(vals))
