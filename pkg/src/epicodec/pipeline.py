"""Pipeline stages behind the CLI.

Each stage reads its inputs from, and writes its outputs under, the
experiment's output directory::

    frames/      synth-data   raw frames + manifest.json
    epi/         build-epi    .epiv containers
    train/       train        checkpoint.ckpt + metrics.csv
    bitstreams/  encode       one .epic per (window, strip) + reference.eprf
    decoded/     decode       spliced frames + manifest.json
    eval/        evaluate     rd.csv + summary.json
    bd/          bdstats      bd.csv + bd.txt

Every stage also writes ``provenance.json`` carrying the config hash, seed and
format version. Encode and decode refuse checkpoints or bitstreams produced
under a different model configuration.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .bitstream import BitstreamError, decode_bitstream, encode_bitstream
from .config import ConfigError, ExperimentConfig
from .diffengine.checkpoint import CheckpointError
from .epi import (EpiVolume, MultiViewFrameSet, StripGeometry, build_volumes, even_views,
                  odd_views, reassemble_all, splice_views)
from .evaluation import RDCurve, RDPoint, bd_rows, format_bd_table, psnr, rate_account, read_rd_csv, \
    ssim, write_bd_csv, write_rd_csv
from .mvio import LosslessReference, read_manifest, read_volumes, write_frames, write_volumes
from .synthetic import make_synthetic_dataset
from .training import CodecModel, load_checkpoint, train_loop

FORMAT_VERSION = 1


class StageError(RuntimeError):
    """A stage's inputs are missing or unusable."""


class HashMismatchError(StageError):
    """A checkpoint or bitstream was produced under a different configuration."""


def provenance(cfg: ExperimentConfig, stage: str) -> dict:
    return {"stage": stage, "config_hash": cfg.hash(), "model_hash": cfg.model_hash(),
            "seed": cfg.seed, "format_version": FORMAT_VERSION, "epicodec_version": __version__}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _stage_dir(cfg: ExperimentConfig, name: str) -> Path:
    d = Path(cfg.output_dir) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; {hint}")
    return path


# -- frames and EPIs --

def synth_data(cfg: ExperimentConfig) -> Path:
    """Render the synthetic scene and write it as raw frames; returns the manifest path."""
    if cfg.dataset.manifest is not None:
        raise ConfigError("dataset.manifest", "synth-data renders the synthetic scene; unset the manifest")
    try:
        scene = make_synthetic_dataset(cfg.dataset.synthetic)
    except ValueError as exc:
        raise ConfigError("dataset.synthetic", str(exc)) from exc
    frames = MultiViewFrameSet(scene.frames, list(scene.view_order), cfg.epi.strip_width)
    out = _stage_dir(cfg, "frames")
    path = write_frames(frames, out, cfg.evaluation.fps)
    _write_json(out / "provenance.json", provenance(cfg, "synth-data"))
    return path


def load_frames(cfg: ExperimentConfig) -> MultiViewFrameSet:
    """The source frames: an external manifest if configured, else the synth-data output."""
    if cfg.dataset.manifest is not None:
        path = _require(Path(cfg.dataset.manifest), "check dataset.manifest")
    else:
        path = _require(Path(cfg.output_dir) / "frames" / "manifest.json", "run synth-data first")
    frames = read_manifest(path)
    if frames.strip_width != cfg.epi.strip_width:
        frames = MultiViewFrameSet(frames.frames, list(frames.view_order), cfg.epi.strip_width)
    return frames


def windowed(frames: MultiViewFrameSet, L: int) -> MultiViewFrameSet:
    """Frames trimmed to whole temporal windows (what the EPI path can represent)."""
    t = (frames.T // L) * L
    if t == 0:
        raise StageError(f"{frames.T} frames do not fill one window of L={L}")
    return MultiViewFrameSet(frames.frames[:, :t], list(frames.view_order), frames.strip_width)


def build_epi(cfg: ExperimentConfig) -> Path:
    """Cut the source frames into EPI containers; returns the stage directory."""
    frames = load_frames(cfg)
    volumes = build_volumes(windowed(frames, cfg.epi.L), cfg.epi.L)
    out = _stage_dir(cfg, "epi")
    for stale in out.glob("*.epiv"):
        stale.unlink()
    write_volumes(volumes, out)
    g = volumes[0].geometry
    _write_json(out / "provenance.json", {**provenance(cfg, "build-epi"), "count": len(volumes),
                                          "volume_shape": list(g.volume_shape)})
    return out


def load_volumes(cfg: ExperimentConfig) -> list[EpiVolume]:
    d = _require(Path(cfg.output_dir) / "epi", "run build-epi first")
    return read_volumes(d)


# -- model --

def make_model(cfg: ExperimentConfig, volume_shape) -> CodecModel:
    return CodecModel(volume_shape, cfg.quantizer_spec(), cfg.network, seed=cfg.seed)


def _checkpoint_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "train" / "checkpoint.ckpt"


def train(cfg: ExperimentConfig, resume: bool = False, max_steps: int | None = None) -> Path:
    """Train on the EPI containers; ``resume`` continues from the stage's checkpoint."""
    volumes = load_volumes(cfg)
    model = make_model(cfg, volumes[0].data.shape)
    out = _stage_dir(cfg, "train")
    prov = provenance(cfg, "train")
    state = None
    if resume:
        state = load_trained(cfg, model)
    train_loop(volumes, model, cfg.train_config(), cfg.loss, out_dir=out, state=state,
               max_steps=max_steps, provenance=prov)
    _write_json(out / "provenance.json", prov)
    return out / "checkpoint.ckpt"


def load_trained(cfg: ExperimentConfig, model: CodecModel):
    path = _require(_checkpoint_path(cfg), "run train first")
    try:
        state = load_checkpoint(path, model)
    except CheckpointError as exc:
        raise HashMismatchError(f"{path}: {exc}") from exc
    found = state.meta.get("model_hash")
    if found != cfg.model_hash():
        raise HashMismatchError(f"{path} was trained under model hash {found}, config has {cfg.model_hash()}")
    return state


# -- coding --

def _geometry_dict(g: StripGeometry) -> dict:
    return {"K": g.K, "M": g.M, "N": g.N, "L": g.L, "view_order": list(g.view_order),
            "strip_width": g.strip_width}


def encode(cfg: ExperimentConfig) -> Path:
    """Code every EPI's latent plus the even reference views; returns the manifest path."""
    volumes = load_volumes(cfg)
    model = make_model(cfg, volumes[0].data.shape)
    load_trained(cfg, model)
    spec = cfg.quantizer_spec()
    out = _stage_dir(cfg, "bitstreams")
    for stale in out.glob("*.epic"):
        stale.unlink()
    files = []
    for vol in volumes:
        idx = model.encode(vol.data)[0]
        name = f"w{vol.t:04d}_s{vol.j:04d}.epic"
        buf = encode_bitstream(idx, spec)
        (out / name).write_bytes(buf)
        files.append({"file": name, "t": vol.t, "j": vol.j, "bytes": len(buf)})
    g = volumes[0].geometry
    frames = windowed(load_frames(cfg), cfg.epi.L)
    ref = LosslessReference()
    ref_buf = ref.encode(frames)
    (out / "reference.eprf").write_bytes(ref_buf)
    manifest = {**provenance(cfg, "encode"), "checkpoint_sha256": _sha256(_checkpoint_path(cfg)),
                "geometry": _geometry_dict(g), "frames": frames.T, "quantizer": spec.to_dict(),
                "bitstreams": files, "latent_bytes": sum(f["bytes"] for f in files),
                "reference": {"file": "reference.eprf", "codec": ref.name, "bits": ref.bits(ref_buf)}}
    path = out / "manifest.json"
    _write_json(path, manifest)
    return path


def _read_bitstream_manifest(cfg: ExperimentConfig) -> tuple[Path, dict]:
    d = Path(cfg.output_dir) / "bitstreams"
    path = _require(d / "manifest.json", "run encode first")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise HashMismatchError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    if manifest.get("model_hash") != cfg.model_hash():
        raise HashMismatchError(f"{path}: bitstreams carry model hash {manifest.get('model_hash')}, "
                                f"config has {cfg.model_hash()}")
    return d, manifest


def _same_quantizer(header, spec) -> bool:
    # the header stores the real-valued fields as float32
    f32 = np.float32
    return (header.levels == spec.levels and header.window == spec.window
            and all(f32(a) == f32(b) for a, b in ((header.lo, spec.lo), (header.hi, spec.hi),
                                                  (header.sigma, spec.sigma))))


def decode(cfg: ExperimentConfig) -> Path:
    """Reconstruct frames from the bitstreams and splice in the reference views."""
    d, manifest = _read_bitstream_manifest(cfg)
    ckpt_path = _require(_checkpoint_path(cfg), "run train first")
    if _sha256(ckpt_path) != manifest["checkpoint_sha256"]:
        raise HashMismatchError(f"{ckpt_path} is not the checkpoint the bitstreams were encoded with")
    gd = manifest["geometry"]
    g = StripGeometry(gd["K"], gd["M"], gd["N"], gd["L"], tuple(gd["view_order"]), gd["strip_width"])
    model = make_model(cfg, g.volume_shape)
    load_trained(cfg, model)
    volumes = []
    for entry in manifest["bitstreams"]:
        try:
            idx, header = decode_bitstream(_require(d / entry["file"], "bitstream missing").read_bytes())
        except BitstreamError as exc:
            raise type(exc)(f"{entry['file']}: {exc}") from exc
        if not _same_quantizer(header, model.spec):
            raise HashMismatchError(f"{entry['file']}: quantizer {header.spec()} != configured {model.spec}")
        data = model.decode(idx)[0]
        volumes.append(EpiVolume(data, entry["j"], entry["t"], g))
    recon = reassemble_all(volumes)
    reference = LosslessReference().decode((d / manifest["reference"]["file"]).read_bytes())
    spliced = splice_views(recon, reference)
    out = _stage_dir(cfg, "decoded")
    path = write_frames(spliced, out, cfg.evaluation.fps)
    _write_json(out / "provenance.json", {**provenance(cfg, "decode"),
                                          "checkpoint_sha256": manifest["checkpoint_sha256"]})
    return path


# -- evaluation --

def measure(cfg: ExperimentConfig, label: str) -> tuple[RDPoint, dict]:
    """RD point of the decoded output against the source frames."""
    _, manifest = _read_bitstream_manifest(cfg)
    original = windowed(load_frames(cfg), cfg.epi.L)
    decoded = read_manifest(_require(Path(cfg.output_dir) / "decoded" / "manifest.json", "run decode first"))
    if decoded.frames.shape != original.frames.shape:
        raise StageError(f"decoded frames {decoded.frames.shape} != source {original.frames.shape}")
    odd = odd_views(original.K)
    target = odd or even_views(original.K)
    pixels = len(target) * original.T * original.N * original.M
    ref_bits = manifest["reference"]["bits"] if cfg.evaluation.count_reference_bits else 0
    rate = rate_account([f["bytes"] for f in manifest["bitstreams"]], pixels, original.T,
                        cfg.evaluation.fps, ref_bits)
    a, b = original.frames, decoded.frames
    point = RDPoint(label, rate["bpp"], rate["kbps"], psnr(a, b), ssim(a, b))
    summary = {"label": label, "beta": cfg.loss.beta, "rate": rate,
               "latent_bits": 8 * manifest["latent_bytes"], "reference_bits": manifest["reference"]["bits"],
               "reference_bits_counted": cfg.evaluation.count_reference_bits,
               "psnr_db": point.psnr_db, "ssim": point.ssim,
               "psnr_odd_views_db": psnr(a[odd], b[odd]) if odd else None,
               "psnr_per_view_db": [psnr(a[v], b[v]) for v in range(original.K)]}
    return point, summary


def _label(beta: float) -> str:
    return f"beta={beta:g}"


def evaluate(cfg: ExperimentConfig) -> Path:
    """Write ``rd.csv`` for the decoded output, or for the full β sweep when configured."""
    out = _stage_dir(cfg, "eval")
    if cfg.evaluation.sweep:
        curve, summaries = sweep_rd(cfg)
    else:
        point, summary = measure(cfg, _label(cfg.loss.beta))
        curve, summaries = RDCurve([point]), [summary]
    path = out / "rd.csv"
    write_rd_csv(path, curve)
    _write_json(out / "summary.json", {**provenance(cfg, "evaluate"), "points": summaries})
    _write_json(out / "provenance.json", provenance(cfg, "evaluate"))
    return path


def sweep_rd(cfg: ExperimentConfig, operating_points=None, strict: bool = True) -> tuple[RDCurve, list[dict]]:
    """Train, code and measure one operating point per β, each in its own directory.

    Frames and EPIs are shared with the parent output directory. With
    ``strict`` the measured rates must increase strictly as β decreases.
    """
    betas = sorted(operating_points or cfg.operating_points, reverse=True)
    load_volumes(cfg)
    points, summaries = [], []
    for beta in betas:
        sub = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, beta=beta),
                                  output_dir=str(Path(cfg.output_dir) / "sweep" / _label(beta)),
                                  evaluation=dataclasses.replace(cfg.evaluation, sweep=False))
        if cfg.dataset.manifest is None:
            sub = dataclasses.replace(sub, dataset=dataclasses.replace(
                cfg.dataset, manifest=str(Path(cfg.output_dir) / "frames" / "manifest.json")))
        epi_dir = Path(sub.output_dir) / "epi"
        epi_dir.mkdir(parents=True, exist_ok=True)
        for f in (Path(cfg.output_dir) / "epi").glob("*.epiv"):
            (epi_dir / f.name).write_bytes(f.read_bytes())
        train(sub)
        encode(sub)
        decode(sub)
        point, summary = measure(sub, _label(beta))
        points.append(point)
        summaries.append(summary)
    rates = [p.rate_bpp for p in points]
    if strict and any(x >= y for x, y in zip(rates, rates[1:])):
        raise StageError(f"rates {rates} do not increase strictly as beta decreases over {betas}")
    return RDCurve(points), summaries


def bdstats(cfg: ExperimentConfig) -> Path:
    """Compare the configured anchor and test RD curves; returns the CSV path."""
    if cfg.bd.anchor is None:
        raise ConfigError("bd.anchor", "path to the anchor RD CSV is required")
    if cfg.bd.test is None:
        raise ConfigError("bd.test", "path to the test RD CSV is required")
    a = read_rd_csv(_require(Path(cfg.bd.anchor), "check bd.anchor"))
    b = read_rd_csv(_require(Path(cfg.bd.test), "check bd.test"))
    rows = bd_rows(a, b)
    out = _stage_dir(cfg, "bd")
    path = out / "bd.csv"
    write_bd_csv(path, rows)
    (out / "bd.txt").write_text(format_bd_table(rows) + "\n")
    _write_json(out / "provenance.json", provenance(cfg, "bdstats"))
    return path


STAGES = {"synth-data": synth_data, "build-epi": build_epi, "train": train, "encode": encode,
          "decode": decode, "evaluate": evaluate, "bdstats": bdstats}
