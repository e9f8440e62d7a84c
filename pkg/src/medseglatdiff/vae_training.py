"""Training loop for the vector-quantized autoencoders.

Single-writer stochastic training with AdamW, per-epoch reseeding (so a run
resumed from a checkpoint continues bit-identically to an uninterrupted
one), dead-codebook-entry reseeding, divergence detection, and an
append-only loss CSV.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoints import load_checkpoint, save_checkpoint
from .vqvae import AutoencoderConfig, VQAutoencoder, to_network_domain, vq_losses

LOSS_CSV_COLUMNS = ("epoch", "rec", "codebook", "commit", "total", "codebook_usage_fraction")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimizerSettings:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 1
    device: str = "cpu"


def _epoch_seed(seed: int, epoch: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch])


def _seed_torch(seq: np.random.SeedSequence) -> None:
    torch.manual_seed(int(seq.generate_state(1, dtype=np.uint64)[0] >> 1))


def _batch_tensor(grids: np.ndarray, idx: np.ndarray, mode: str) -> torch.Tensor:
    batch = to_network_domain(grids[idx].astype(np.float32), mode)
    if batch.ndim == 3:
        batch = batch[..., None]
    return torch.from_numpy(batch).permute(0, 3, 1, 2)


def _append_loss_rows(csv_path: Path, rows: list[dict], config_hash: str | None) -> None:
    new_file = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        if new_file and config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(LOSS_CSV_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"]] + [f"{row[k]:.8f}" for k in LOSS_CSV_COLUMNS[1:]])


def save_vae_checkpoint(path, model: VQAutoencoder, optimizer, epoch: int, seed: int) -> None:
    save_checkpoint(path, "vqvae", {
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "codebook_entries": model.codebook.entries.detach().clone(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "seed": seed,
    })


def load_vae_checkpoint(path) -> tuple[VQAutoencoder, dict]:
    payload = load_checkpoint(path, expected_kind="vqvae")
    model = VQAutoencoder(AutoencoderConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


def train_autoencoder(
    grids: np.ndarray,
    config: AutoencoderConfig,
    settings: OptimizerSettings,
    out_dir=None,
    resume_from=None,
    config_hash: str | None = None,
    epoch_callback=None,
) -> tuple[VQAutoencoder, list[dict]]:
    """Fit an autoencoder on an in-memory stack of grids.

    ``grids`` is (N, H, W) for masks or (N, H, W, C) for images, in data
    domain ([0, 1] images, {0, 1} masks). Mask modes also accept an
    (N, A, H, W) stack of A annotator masks per sample, from which one
    annotator is drawn per sample with the epoch's seeded generator.
    Returns the trained model and the per-epoch loss log; when ``out_dir``
    is given, also writes loss_log.csv and periodic checkpoints there.
    ``epoch_callback(model, epoch)`` runs after each epoch (e.g. to render
    sample reconstructions).
    """
    grids = np.asarray(grids)
    if grids.shape[0] < 1:
        raise ValueError("dataset is empty")
    if grids.ndim == 3 and config.mode == "image_mse" and config.in_channels != 1:
        raise ValueError("image config expects channelled grids")
    annotator_variants = grids.ndim == 4 and config.mode != "image_mse"
    if config.mode != "image_mse":
        vals = np.unique(grids)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("mask training data must be binary")

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    if resume_from is not None:
        model, payload = load_vae_checkpoint(resume_from)
        start_epoch = payload["epoch"] + 1
        optimizer = torch.optim.AdamW(model.parameters(), lr=settings.lr,
                                      weight_decay=settings.weight_decay)
        if payload.get("optimizer_state"):
            optimizer.load_state_dict(payload["optimizer_state"])
    else:
        _seed_torch(np.random.SeedSequence([settings.seed, 0xA11CE]))
        model = VQAutoencoder(config)
        optimizer = torch.optim.AdamW(model.parameters(), lr=settings.lr,
                                      weight_decay=settings.weight_decay)

    device = torch.device(settings.device)
    model.to(device)
    model.train()
    n = grids.shape[0]
    log: list[dict] = []
    for epoch in range(start_epoch, settings.epochs):
        seq = _epoch_seed(settings.seed, epoch)
        rng = np.random.default_rng(seq)
        _seed_torch(seq.spawn(1)[0])
        if annotator_variants:
            picks = rng.integers(0, grids.shape[1], size=n)
            epoch_grids = grids[np.arange(n), picks]
        else:
            epoch_grids = grids
        perm = rng.permutation(n)
        usage = np.zeros(config.codebook_size, dtype=np.int64)
        sums = {"rec": 0.0, "codebook": 0.0, "commit": 0.0, "total": 0.0}
        batches = 0
        last_z = None
        for start in range(0, n, settings.batch_size):
            idx = perm[start:start + settings.batch_size]
            x = _batch_tensor(epoch_grids, idx, config.mode).to(device)
            recon, z, z_q, indices = model(x)
            try:
                losses = vq_losses(x, z, z_q, recon, config)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batches}: {exc}") from exc
            if not torch.isfinite(losses.total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batches}: "
                    f"rec={losses.rec.item()} codebook={losses.codebook.item()} "
                    f"commit={losses.commit.item()}"
                )
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            usage += np.bincount(indices.reshape(-1).cpu().numpy(), minlength=config.codebook_size)
            for key in sums:
                sums[key] += float(getattr(losses, key).item())
            batches += 1
            last_z = z.detach()

        _reseed_dead_entries(model, usage, last_z, rng)
        row = {k: v / batches for k, v in sums.items()}
        row["epoch"] = epoch
        row["codebook_usage_fraction"] = float((usage > 0).mean())
        log.append(row)

        if epoch_callback is not None:
            epoch_callback(model, epoch)
        if out_dir is not None:
            _append_loss_rows(out_dir / "loss_log.csv", [row], config_hash)
            if (epoch + 1) % settings.checkpoint_every == 0 or epoch == settings.epochs - 1:
                save_vae_checkpoint(out_dir / "checkpoint.pt", model, optimizer, epoch, settings.seed)
    model.to("cpu")
    model.eval()
    return model, log


def _reseed_dead_entries(model: VQAutoencoder, usage: np.ndarray, last_z, rng) -> None:
    """Replace entries unused for a whole epoch with random encoder outputs."""
    dead = np.flatnonzero(usage == 0)
    if dead.size == 0 or last_z is None:
        return
    flat = last_z.permute(0, 2, 3, 1).reshape(-1, model.config.latent_channels)
    picks = rng.integers(0, flat.shape[0], size=dead.size)
    with torch.no_grad():
        model.codebook.entries[dead] = flat[picks]
