"""Experiment configuration: YAML loading, validation, and hashing.

One structured document drives every command. Defaults follow the reference
training recipe (T=1000 with linear 1e-4..0.02 betas, lr 1e-4, batch 32,
positive-class weight 5, three autoencoder levels at 128 base channels,
n=5 inference samples). Environment variables override only the output
directory (MEDSEGLATDIFF_OUTPUT_DIR) and device (MEDSEGLATDIFF_DEVICE).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import REAL_LAYOUTS, TARGET_POLICIES, SyntheticSpec
from .diffusion import VARIANCE_MODES
from .vqvae import AutoencoderConfig

OUTPUT_DIR_ENV = "MEDSEGLATDIFF_OUTPUT_DIR"
DEVICE_ENV = "MEDSEGLATDIFF_DEVICE"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"            # synthetic | isic2018 | cvc_clinic | lidc_slices
    root: str | None = None            # real layouts only
    resolution: int = 256
    split_seed: int = 0
    target_policy: str = "majority"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance_mode: str = "standard"
    denoiser_base_channels: int = 128
    denoiser_levels: int = 3
    clip_x0: bool = True
    space: str = "latent"              # latent | pixel


@dataclass
class TrainingConfig:
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 20
    vae_epochs: int | None = None       # falls back to epochs
    diffusion_epochs: int | None = None
    seed: int = 0
    checkpoint_every: int = 1
    device: str = "cpu"


@dataclass
class InferenceConfig:
    n: int = 5
    five_fold: bool = False
    fold_checkpoints: list[str] = field(default_factory=list)
    output_dir: str = "outputs"
    save_samples: bool = False
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    image_vae: AutoencoderConfig = field(
        default_factory=lambda: AutoencoderConfig(mode="image_mse"))
    mask_vae: AutoencoderConfig = field(
        default_factory=lambda: AutoencoderConfig(mode="mask_wce"))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> None:
        ds, diff = self.dataset, self.diffusion
        if ds.kind != "synthetic" and ds.kind not in REAL_LAYOUTS:
            raise ConfigError(f"dataset.kind must be synthetic or one of {REAL_LAYOUTS}")
        if ds.kind != "synthetic" and not ds.root:
            raise ConfigError("dataset.root is required for real layouts")
        if ds.target_policy not in TARGET_POLICIES:
            raise ConfigError(f"dataset.target_policy must be one of {TARGET_POLICIES}")
        if ds.kind == "synthetic" and ds.synthetic.resolution != ds.resolution:
            raise ConfigError("dataset.resolution must match dataset.synthetic.resolution")
        if diff.space not in ("latent", "pixel"):
            raise ConfigError("diffusion.space must be latent or pixel")
        if diff.variance_mode not in VARIANCE_MODES:
            raise ConfigError(f"diffusion.variance_mode must be one of {VARIANCE_MODES}")
        if diff.T < 1:
            raise ConfigError("diffusion.T must be >= 1")
        if not (0.0 < diff.beta_start <= diff.beta_end < 1.0):
            raise ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1")
        if self.inference.n < 1:
            raise ConfigError("inference.n must be >= 1")
        if self.image_vae.mode != "image_mse":
            raise ConfigError("image_vae.mode must be image_mse")
        if self.mask_vae.mode not in ("mask_mse", "mask_wce"):
            raise ConfigError("mask_vae.mode must be mask_mse or mask_wce")
        for name, vae in (("image_vae", self.image_vae), ("mask_vae", self.mask_vae)):
            if diff.space == "latent" and ds.resolution % vae.f:
                raise ConfigError(
                    f"resolution {ds.resolution} not divisible by {name} factor {vae.f}")
        latent_res = ds.resolution // (self.mask_vae.f if diff.space == "latent" else 1)
        if latent_res % 2**diff.denoiser_levels:
            raise ConfigError(
                f"latent resolution {latent_res} not divisible by "
                f"2^denoiser_levels ({2**diff.denoiser_levels})")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    fixed = dict(data)
    for key in ("blob_count_range", "blob_radius_range"):
        if key in fixed and isinstance(fixed[key], list):
            fixed[key] = tuple(fixed[key])
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse, validate, and apply environment overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return config_from_dict(raw, source=str(path))


def config_from_dict(raw: dict, source: str = "<dict>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    known = {"dataset", "image_vae", "mask_vae", "diffusion", "training", "inference"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")

    ds_raw = dict(raw.get("dataset", {}))
    syn_raw = ds_raw.pop("synthetic", {})
    dataset = _build(DatasetConfig, ds_raw, "dataset")
    if syn_raw:
        if "resolution" not in syn_raw:
            syn_raw = {**syn_raw, "resolution": dataset.resolution}
        dataset.synthetic = _build(SyntheticSpec, syn_raw, "dataset.synthetic")
    else:
        dataset.synthetic.resolution = dataset.resolution

    cfg = ExperimentConfig(
        dataset=dataset,
        image_vae=_build(AutoencoderConfig, {"mode": "image_mse", **raw.get("image_vae", {})},
                         "image_vae"),
        mask_vae=_build(AutoencoderConfig, {"mode": "mask_wce", **raw.get("mask_vae", {})},
                        "mask_vae"),
        diffusion=_build(DiffusionConfig, raw.get("diffusion", {}), "diffusion"),
        training=_build(TrainingConfig, raw.get("training", {}), "training"),
        inference=_build(InferenceConfig, raw.get("inference", {}), "inference"),
    )
    if OUTPUT_DIR_ENV in os.environ:
        cfg.inference.output_dir = os.environ[OUTPUT_DIR_ENV]
    if DEVICE_ENV in os.environ:
        cfg.training.device = os.environ[DEVICE_ENV]
    cfg.validate()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable sha256 over the canonical JSON form of the config.

    The output directory and device are environment plumbing (and the only
    fields the environment may override), so they are excluded: the same
    experiment run elsewhere keeps the same hash.
    """
    doc = dataclasses.asdict(cfg)
    doc["inference"].pop("output_dir")
    doc["training"].pop("device")
    blob = json.dumps(doc, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
