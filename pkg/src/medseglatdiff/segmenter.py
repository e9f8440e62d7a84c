"""Conditional diffusion segmentation in latent (or pixel) space.

The denoiser is trained on channel concatenations of a noisy mask latent and
the clean image latent. At inference, n independently seeded reverse chains
produce n latent masks per image; decoding and averaging them yields a
confidence map whose 0.5 threshold (ties to foreground) is the consensus
mask. Pixel-space operation is the same machinery with identity codecs
(f = 1), diffusing directly on mask pixels conditioned on image pixels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig, DenoiserUNet
from .diffusion import DiffusionState, predict_x0, reverse_step, sample_noisy
from .quantize import quantize
from .schedule import NoiseSchedule, schedule_from_spec
from .vae_training import TrainingDiverged, _epoch_seed, _seed_torch
from .vqvae import VQAutoencoder, binarize_decoded, decode, encode


# ---------------------------------------------------------------------------
# Codecs: the boundary between pixel grids and diffusion-space latents
# ---------------------------------------------------------------------------

class VQImageCodec:
    """Frozen image autoencoder; encode returns the quantized latent."""

    def __init__(self, model: VQAutoencoder):
        model.eval()
        self.model = model
        self.f = model.config.f
        self.latent_channels = model.config.latent_channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        z = encode(image, self.model)
        return quantize(z, self.model.codebook, f=self.f).quantized


class VQMaskCodec(VQImageCodec):
    """Frozen mask autoencoder; decoding re-quantizes before the decoder."""

    def decode_mask(self, latent: np.ndarray) -> np.ndarray:
        code = quantize(latent, self.model.codebook, f=self.f)
        decoded = decode(code.quantized, self.model)
        return binarize_decoded(decoded, self.model.config.mode)


class IdentityImageCodec:
    """f = 1 pixel-space passthrough for the image conditioning channels."""

    def __init__(self, channels: int = 1):
        self.f = 1
        self.latent_channels = channels

    def encode(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[..., None]
        return image


class IdentityMaskCodec:
    """f = 1 passthrough treating the binary mask itself as the latent."""

    def __init__(self):
        self.f = 1
        self.latent_channels = 1

    def encode(self, mask: np.ndarray) -> np.ndarray:
        return np.asarray(mask, dtype=np.float64)[..., None]

    def decode_mask(self, latent: np.ndarray) -> np.ndarray:
        return (np.asarray(latent)[..., 0] >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass
class ConditionedLatent:
    """Noisy mask channels concatenated ahead of clean image channels."""

    noisy_mask: np.ndarray   # h x w x c_S
    image_cond: np.ndarray   # h x w x c_X, never noised
    combined: np.ndarray     # h x w x (c_S + c_X)


def condition_concat(noisy_mask: np.ndarray, image_cond: np.ndarray) -> ConditionedLatent:
    """Concatenate along channels, mask channels first."""
    noisy_mask = np.asarray(noisy_mask, dtype=np.float64)
    image_cond = np.asarray(image_cond, dtype=np.float64)
    if noisy_mask.shape[:2] != image_cond.shape[:2]:
        raise ValueError(
            f"spatial dims differ: {noisy_mask.shape[:2]} vs {image_cond.shape[:2]}"
        )
    combined = np.concatenate([noisy_mask, image_cond], axis=2)
    return ConditionedLatent(noisy_mask=noisy_mask, image_cond=image_cond, combined=combined)


# ---------------------------------------------------------------------------
# Latent normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentStats:
    """Global scale and observed value range of the training mask latents.

    Mask latents are divided by ``sigma`` before diffusion so the
    unit-variance noise assumption holds; ``lo``/``hi`` bound the scaled
    clean latents and drive the optional predicted-clean-state clipping
    during sampling.
    """

    sigma: float
    lo: float
    hi: float

    def scale(self, z):
        return np.asarray(z, dtype=np.float64) / self.sigma

    def unscale(self, z):
        return np.asarray(z, dtype=np.float64) * self.sigma

    def clip_range(self, margin: float = 0.1) -> tuple[float, float]:
        span = self.hi - self.lo
        return (self.lo - margin * span, self.hi + margin * span)


def fit_latent_stats(latents) -> LatentStats:
    stacked = np.stack([np.asarray(z, dtype=np.float64) for z in latents])
    sigma = float(stacked.std())
    if sigma < 1e-8:
        sigma = 1.0
    scaled = stacked / sigma
    return LatentStats(sigma=sigma, lo=float(scaled.min()), hi=float(scaled.max()))


# ---------------------------------------------------------------------------
# Model bundle and sampling
# ---------------------------------------------------------------------------

@dataclass
class SegmenterModel:
    image_codec: object
    mask_codec: object
    denoiser: DenoiserUNet
    schedule: NoiseSchedule
    latent_stats: LatentStats
    variance_mode: str = "standard"
    clip_x0: bool = True


def _denoise_np(denoiser: DenoiserUNet, combined: np.ndarray, t: int) -> np.ndarray:
    param = next(denoiser.parameters(), None)
    device = param.device if param is not None else torch.device("cpu")
    x = torch.from_numpy(combined.astype(np.float32)).permute(2, 0, 1)[None].to(device)
    with torch.no_grad():
        eps = denoiser(x, torch.tensor([t], device=device))
    return eps[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)


def sample_mask_latent(image_latent: np.ndarray, model: SegmenterModel,
                       rng: np.random.Generator) -> np.ndarray:
    """Run the conditioned reverse chain from pure noise to a mask latent.

    Starts at a standard-normal latent, iterates the reverse step from T
    down to 1 with the denoiser conditioned on the image latent, and returns
    the terminal latent unscaled back to codec space. When clipping is on,
    the predicted clean state is clamped to the observed training range
    (plus a 10% margin) each step, which keeps undertrained models from
    diverging.
    """
    image_latent = np.asarray(image_latent, dtype=np.float64)
    if not np.all(np.isfinite(image_latent)):
        raise ValueError("non-finite image latent")
    schedule = model.schedule
    shape = image_latent.shape[:2] + (model.mask_codec.latent_channels,)
    state = DiffusionState(value=rng.standard_normal(shape), t=schedule.T)
    lo, hi = model.latent_stats.clip_range()
    for t in range(schedule.T, 0, -1):
        eps_hat = _denoise_np(model.denoiser, condition_concat(state.value, image_latent).combined, t)
        g = schedule.gamma(t)
        if model.clip_x0 and g < 1.0:
            x0 = np.clip(predict_x0(state, eps_hat, schedule), lo, hi)
            eps_hat = (state.value - math.sqrt(g) * x0) / math.sqrt(1.0 - g)
        state = reverse_step(state, eps_hat, schedule, rng,
                             variance_mode=model.variance_mode, deterministic_last=True)
        if not np.all(np.isfinite(state.value)):
            raise FloatingPointError(f"non-finite latent at reverse step t={t}")
    return model.latent_stats.unscale(state.value)


def decode_mask(latent: np.ndarray, mask_codec) -> np.ndarray:
    """Map a sampled latent to a strictly binary H x W mask."""
    mask = np.asarray(mask_codec.decode_mask(np.asarray(latent, dtype=np.float64)))
    return mask.astype(np.uint8)


@dataclass
class EnsembleResult:
    """n decoded masks, their mean confidence map, and the consensus mask."""

    masks: np.ndarray        # (n, H, W) binary
    confidence: np.ndarray   # (H, W) in [0, 1], multiples of 1/n
    consensus: np.ndarray    # (H, W) binary, confidence >= 0.5
    n: int


def aggregate_masks(masks) -> EnsembleResult:
    """Average binary masks into a confidence map; threshold at >= 0.5."""
    stack = np.stack([np.asarray(m, dtype=np.uint8) for m in masks])
    if stack.ndim != 3:
        raise ValueError("expected a list of 2-d binary masks")
    confidence = stack.mean(axis=0, dtype=np.float64)
    consensus = (confidence >= 0.5).astype(np.uint8)
    return EnsembleResult(masks=stack, confidence=confidence, consensus=consensus,
                          n=stack.shape[0])


def ensemble_segment(image: np.ndarray, n: int, model: SegmenterModel,
                     rng: np.random.Generator, sampler=None) -> EnsembleResult:
    """Encode once, draw n independent latent samples, decode and aggregate.

    ``sampler`` defaults to :func:`sample_mask_latent`; each draw gets its
    own child generator, so a fixed seed reproduces the ensemble exactly.
    """
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    z_x = model.image_codec.encode(image)
    if sampler is None:
        def sampler(z, child):
            return sample_mask_latent(z, model, child)
    masks = []
    for child in rng.spawn(n):
        masks.append(decode_mask(sampler(z_x, child), model.mask_codec))
    return aggregate_masks(masks)


def pixel_space_segment(image: np.ndarray, n: int, model: SegmenterModel,
                        rng: np.random.Generator) -> EnsembleResult:
    """Ensemble segmentation with f = 1 codecs, diffusing on raw mask pixels."""
    if model.image_codec.f != 1 or model.mask_codec.f != 1:
        raise ValueError("pixel-space segmentation requires f = 1 codecs")
    return ensemble_segment(image, n, model, rng)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class DiffusionTrainSettings:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 1
    device: str = "cpu"


def training_step(sample, image_codec, mask_codec, denoiser: DenoiserUNet,
                  schedule: NoiseSchedule, latent_stats: LatentStats,
                  optimizer, rng: np.random.Generator) -> float:
    """One stochastic gradient step on a single (image, mask) pair.

    Draws a uniform step index and Gaussian noise, noises the scaled mask
    latent, and regresses the denoiser output against the drawn noise. The
    codecs are frozen; only the denoiser updates.
    """
    image, mask = sample
    z_x = image_codec.encode(image)
    z0 = latent_stats.scale(mask_codec.encode(mask))
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(z0.shape)
    state = sample_noisy(z0, t, schedule, eps)
    combined = condition_concat(state.value, z_x).combined

    x = torch.from_numpy(combined.astype(np.float32)).permute(2, 0, 1)[None]
    target = torch.from_numpy(eps.astype(np.float32)).permute(2, 0, 1)[None]
    pred = denoiser(x, torch.tensor([t]))
    loss = F.mse_loss(pred, target)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite diffusion loss at t={t}")
    if loss.requires_grad:  # frozen stubs produce no gradient path
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.item())


def train_denoiser(
    pairs,
    image_codec,
    mask_codec,
    schedule: NoiseSchedule,
    denoiser_config: DenoiserConfig | None = None,
    settings: DiffusionTrainSettings = DiffusionTrainSettings(),
    out_dir=None,
    resume_from=None,
    config_hash: str | None = None,
) -> tuple[DenoiserUNet, LatentStats, list[dict]]:
    """Fit the conditional denoiser on frozen codecs.

    ``pairs`` is a list of (image, training mask) grids; a pair's mask may
    also be a list of annotator masks, in which case one annotator is drawn
    per sample with each epoch's seeded generator. All latents are
    precomputed once; the latent scale is fit from the training mask latents.
    Per-epoch reseeding makes checkpointed resumption bit-identical to an
    uninterrupted run.
    """
    if not pairs:
        raise ValueError("no training pairs")
    z_xs = [image_codec.encode(img) for img, _ in pairs]
    mask_lists = [masks if isinstance(masks, (list, tuple)) else [masks]
                  for _, masks in pairs]
    variant_counts = [len(m) for m in mask_lists]
    z_variants = [[mask_codec.encode(m) for m in masks] for masks in mask_lists]
    z_ss = [v[0] for v in z_variants]

    start_epoch = 0
    if resume_from is not None:
        denoiser, payload = load_diffusion_checkpoint(resume_from)
        latent_stats = payload["latent_stats"]
        optimizer = torch.optim.AdamW(denoiser.parameters(), lr=settings.lr,
                                      weight_decay=settings.weight_decay)
        if payload.get("optimizer_state"):
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"] + 1
    else:
        latent_stats = fit_latent_stats([z for variants in z_variants for z in variants])
        if denoiser_config is None:
            denoiser_config = DenoiserConfig(
                in_channels=mask_codec.latent_channels + image_codec.latent_channels,
                out_channels=mask_codec.latent_channels,
            )
        _seed_torch(np.random.SeedSequence([settings.seed, 0xD1FF]))
        denoiser = DenoiserUNet(denoiser_config)
        optimizer = torch.optim.AdamW(denoiser.parameters(), lr=settings.lr,
                                      weight_decay=settings.weight_decay)

    device = torch.device(settings.device)
    # (N, A, c, h, w) with missing annotator slots repeating the first variant
    max_variants = max(variant_counts)
    padded = [[latent_stats.scale(v[min(a, len(v) - 1)]) for a in range(max_variants)]
              for v in z_variants]
    z0_variants = torch.from_numpy(np.stack(padded).astype(np.float32)).permute(0, 1, 4, 2, 3).to(device)
    counts = np.asarray(variant_counts)
    zx = torch.from_numpy(np.stack(z_xs).astype(np.float32)).permute(0, 3, 1, 2).to(device)
    gammas = torch.from_numpy(np.concatenate([[1.0], schedule.gammas]).astype(np.float32)).to(device)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    denoiser.to(device)
    denoiser.train()
    n = z0_variants.shape[0]
    log: list[dict] = []
    for epoch in range(start_epoch, settings.epochs):
        seq = _epoch_seed(settings.seed, epoch)
        rng = np.random.default_rng(seq)
        _seed_torch(seq.spawn(1)[0])
        annot = rng.integers(0, counts) if max_variants > 1 else np.zeros(n, dtype=np.int64)
        z0 = z0_variants[np.arange(n), annot]
        perm = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, settings.batch_size):
            idx = perm[start:start + settings.batch_size]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = torch.from_numpy(
                rng.standard_normal((len(idx),) + tuple(z0.shape[1:])).astype(np.float32)).to(device)
            t_t = torch.from_numpy(t).to(device)
            g = gammas[t_t][:, None, None, None]
            z_t = torch.sqrt(g) * z0[idx] + torch.sqrt(1.0 - g) * eps
            pred = denoiser(torch.cat([z_t, zx[idx]], dim=1), t_t)
            loss = F.mse_loss(pred, eps)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite diffusion loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.item())
            batches += 1
        row = {"epoch": epoch, "loss": total / batches}
        log.append(row)
        if out_dir is not None:
            _append_diffusion_log(out_dir / "loss_log.csv", row, config_hash)
            if (epoch + 1) % settings.checkpoint_every == 0 or epoch == settings.epochs - 1:
                save_diffusion_checkpoint(out_dir / "checkpoint.pt", denoiser, optimizer,
                                          schedule, latent_stats, epoch, settings.seed)
    denoiser.to("cpu")
    denoiser.eval()
    return denoiser, latent_stats, log


def _append_diffusion_log(csv_path: Path, row: dict, config_hash: str | None) -> None:
    new_file = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        if new_file and config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(("epoch", "loss"))
        writer.writerow([row["epoch"], f"{row['loss']:.8f}"])


def save_diffusion_checkpoint(path, denoiser: DenoiserUNet, optimizer,
                              schedule: NoiseSchedule, latent_stats: LatentStats,
                              epoch: int, seed: int) -> None:
    save_checkpoint(path, "diffusion", {
        "denoiser_config": asdict(denoiser.config),
        "state_dict": denoiser.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "schedule_spec": schedule.spec(),
        "latent_stats": latent_stats,
        "epoch": epoch,
        "seed": seed,
    })


def load_diffusion_checkpoint(path) -> tuple[DenoiserUNet, dict]:
    payload = load_checkpoint(path, expected_kind="diffusion")
    denoiser = DenoiserUNet(DenoiserConfig(**payload["denoiser_config"]))
    denoiser.load_state_dict(payload["state_dict"])
    denoiser.eval()
    payload["schedule"] = schedule_from_spec(payload["schedule_spec"])
    return denoiser, payload
