"""Command implementations binding data, models, and outputs together.

Each command validates its inputs up front, runs deterministically given the
config plus seed, and stamps the config hash into every artifact it writes.
Workspace layout under the output directory:

    dataset/    images/, masks/, manifest.jsonl
    image_vae/  checkpoint.pt, loss_log.csv, recon_epoch*.png
    mask_vae/   checkpoint.pt, loss_log.csv, recon_epoch*.png
    diffusion/  checkpoint.pt, loss_log.csv
    segment/    consensus/, confidence/, samples/, results.csv
    sweep/      dice_vs_n.csv, dice_vs_n.png
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import outputs
from .config import ExperimentConfig, config_hash
from .data import (AnnotatedSample, generate_synthetic, load_manifest_dataset,
                   load_real_dataset, materialize_dataset, split_patientwise,
                   training_target)
from .denoiser import DenoiserConfig, DenoiserUNet
from .diffusion import DiffusionState, reverse_step
from .metrics import MetricsReport, dice, evaluate_masks, iou, write_metrics_csv
from .schedule import build_schedule
from .segmenter import (DiffusionTrainSettings, IdentityImageCodec, IdentityMaskCodec,
                        SegmenterModel, VQImageCodec, VQMaskCodec, aggregate_masks,
                        condition_concat, ensemble_segment, load_diffusion_checkpoint,
                        train_denoiser)
from .vae_training import OptimizerSettings, load_vae_checkpoint, train_autoencoder
from .vqvae import AutoencoderConfig, reconstruct_mask, encode, decode


class MissingCheckpoint(FileNotFoundError):
    pass


class EvaluationError(RuntimeError):
    pass


def _dirs(out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    return {name: out / name for name in
            ("dataset", "image_vae", "mask_vae", "diffusion", "segment", "sweep")}


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def cmd_generate_synthetic(cfg: ExperimentConfig, out_dir) -> Path:
    """Materialize the configured synthetic dataset with patient-wise splits."""
    if cfg.dataset.kind != "synthetic":
        raise ValueError("generate-synthetic needs dataset.kind = synthetic")
    samples = generate_synthetic(cfg.dataset.synthetic)
    split_patientwise(samples, seed=cfg.dataset.split_seed)
    return materialize_dataset(samples, _dirs(out_dir)["dataset"])


def load_experiment_dataset(cfg: ExperimentConfig, out_dir) -> list[AnnotatedSample]:
    if cfg.dataset.kind == "synthetic":
        manifest = _dirs(out_dir)["dataset"] / "manifest.jsonl"
        if not manifest.is_file():
            raise FileNotFoundError(
                f"{manifest} not found; run generate-synthetic first")
        return load_manifest_dataset(manifest)
    samples = load_real_dataset(cfg.dataset.root, cfg.dataset.kind, cfg.dataset.resolution)
    if all(s.split is None for s in samples):
        for i, s in enumerate(samples):
            if not s.patient_id:
                s.patient_id = f"pt{i:05d}"
        split_patientwise(samples, seed=cfg.dataset.split_seed)
    return samples


def _by_split(samples: list[AnnotatedSample], split: str) -> list[AnnotatedSample]:
    subset = [s for s in samples if s.split == split]
    if not subset:
        raise ValueError(f"no samples in split {split!r}")
    return subset


def _target_masks(samples, cfg: ExperimentConfig) -> list:
    """One training target per sample.

    Majority/first collapse here; random_annotator hands the full annotator
    stack to the training loops, which draw one per sample each epoch.
    """
    if cfg.dataset.target_policy == "random_annotator":
        return [list(s.masks) for s in samples]
    return [training_target(s, cfg.dataset.target_policy) for s in samples]


def _stack_targets(targets: list) -> np.ndarray:
    if targets and isinstance(targets[0], list):
        a_max = max(len(m) for m in targets)
        return np.stack([
            np.stack([m[min(a, len(m) - 1)] for a in range(a_max)]) for m in targets
        ]).astype(np.uint8)
    return np.stack(targets).astype(np.uint8)


# ---------------------------------------------------------------------------
# Training commands
# ---------------------------------------------------------------------------

def _vae_settings(cfg: ExperimentConfig) -> OptimizerSettings:
    t = cfg.training
    return OptimizerSettings(lr=t.lr, weight_decay=t.weight_decay, batch_size=t.batch_size,
                             epochs=t.vae_epochs or t.epochs, seed=t.seed,
                             checkpoint_every=t.checkpoint_every, device=t.device)


def _save_recon_strip(model, grids, path: Path) -> None:
    """Input/reconstruction pairs for the first few grids, as one image row."""
    was_training = model.training
    model.eval()
    panels = []
    for grid in grids[:4]:
        if model.config.mode == "image_mse":
            z = encode(grid, model)
            recon = decode(z, model)
            panels += [grid[..., 0], recon[..., 0]]
        else:
            panels += [grid.astype(np.float64), reconstruct_mask(grid, model).astype(np.float64)]
    strip = np.concatenate(panels, axis=1)
    Image.fromarray(np.round(np.clip(strip, 0, 1) * 255).astype(np.uint8)).save(path)
    if was_training:
        model.train()


def cmd_train_vae(cfg: ExperimentConfig, which: str, out_dir, resume: bool = False) -> Path:
    """Train the image or mask autoencoder; writes checkpoint + loss CSV."""
    if which not in ("image", "mask"):
        raise ValueError("which must be image or mask")
    samples = load_experiment_dataset(cfg, out_dir)
    train_samples = _by_split(samples, "train")
    vae_cfg: AutoencoderConfig = cfg.image_vae if which == "image" else cfg.mask_vae
    if which == "image":
        grids = np.stack([s.image for s in train_samples])
        if grids.shape[-1] != vae_cfg.in_channels:
            raise ValueError(f"image_vae.in_channels={vae_cfg.in_channels} but data has "
                             f"{grids.shape[-1]} channels")
    else:
        grids = _stack_targets(_target_masks(train_samples, cfg))

    vae_dir = _dirs(out_dir)[f"{which}_vae"]
    vae_dir.mkdir(parents=True, exist_ok=True)
    resume_from = vae_dir / "checkpoint.pt" if resume else None
    if resume_from is not None and not resume_from.is_file():
        raise MissingCheckpoint(f"cannot resume: {resume_from} does not exist")

    display = grids[:, 0] if (which == "mask" and grids.ndim == 4) else grids

    def epoch_callback(model, epoch):
        _save_recon_strip(model, display, vae_dir / f"recon_epoch{epoch:03d}.png")

    train_autoencoder(grids, vae_cfg, _vae_settings(cfg), out_dir=vae_dir,
                      resume_from=resume_from, config_hash=config_hash(cfg),
                      epoch_callback=epoch_callback)
    return vae_dir / "checkpoint.pt"


def _load_codecs(cfg: ExperimentConfig, out_dir):
    dirs = _dirs(out_dir)
    if cfg.diffusion.space == "pixel":
        return (IdentityImageCodec(channels=cfg.image_vae.in_channels), IdentityMaskCodec())
    for which in ("image", "mask"):
        ckpt = dirs[f"{which}_vae"] / "checkpoint.pt"
        if not ckpt.is_file():
            raise MissingCheckpoint(
                f"{which} autoencoder checkpoint {ckpt} not found; run train-vae --target {which}")
    image_model, _ = load_vae_checkpoint(dirs["image_vae"] / "checkpoint.pt")
    mask_model, _ = load_vae_checkpoint(dirs["mask_vae"] / "checkpoint.pt")
    return VQImageCodec(image_model), VQMaskCodec(mask_model)


def cmd_train_diffusion(cfg: ExperimentConfig, out_dir, resume: bool = False) -> Path:
    """Train the conditional denoiser on frozen codecs."""
    image_codec, mask_codec = _load_codecs(cfg, out_dir)
    samples = load_experiment_dataset(cfg, out_dir)
    train_samples = _by_split(samples, "train")
    pairs = list(zip([s.image for s in train_samples], _target_masks(train_samples, cfg)))

    t = cfg.training
    schedule = build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
    denoiser_cfg = DenoiserConfig(
        in_channels=mask_codec.latent_channels + image_codec.latent_channels,
        out_channels=mask_codec.latent_channels,
        base_channels=cfg.diffusion.denoiser_base_channels,
        levels=cfg.diffusion.denoiser_levels,
    )
    settings = DiffusionTrainSettings(lr=t.lr, weight_decay=t.weight_decay,
                                      batch_size=t.batch_size,
                                      epochs=t.diffusion_epochs or t.epochs, seed=t.seed,
                                      checkpoint_every=t.checkpoint_every, device=t.device)
    diff_dir = _dirs(out_dir)["diffusion"]
    resume_from = diff_dir / "checkpoint.pt" if resume else None
    if resume_from is not None and not resume_from.is_file():
        raise MissingCheckpoint(f"cannot resume: {resume_from} does not exist")
    train_denoiser(pairs, image_codec, mask_codec, schedule, denoiser_cfg, settings,
                   out_dir=diff_dir, resume_from=resume_from, config_hash=config_hash(cfg))
    return diff_dir / "checkpoint.pt"


def load_segmenter(cfg: ExperimentConfig, out_dir, checkpoint=None) -> SegmenterModel:
    """Assemble the full inference bundle from checkpoints."""
    image_codec, mask_codec = _load_codecs(cfg, out_dir)
    ckpt_path = Path(checkpoint) if checkpoint else _dirs(out_dir)["diffusion"] / "checkpoint.pt"
    if not ckpt_path.is_file():
        raise MissingCheckpoint(f"diffusion checkpoint {ckpt_path} not found; run train-diffusion")
    denoiser, payload = load_diffusion_checkpoint(ckpt_path)
    return SegmenterModel(image_codec=image_codec, mask_codec=mask_codec, denoiser=denoiser,
                          schedule=payload["schedule"], latent_stats=payload["latent_stats"],
                          variance_mode=cfg.diffusion.variance_mode,
                          clip_x0=cfg.diffusion.clip_x0)


# ---------------------------------------------------------------------------
# Inference commands
# ---------------------------------------------------------------------------

def _load_input_image(path, cfg: ExperimentConfig) -> np.ndarray:
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = img[..., None]
    res = cfg.dataset.resolution
    if img.shape[0] != res or img.shape[1] != res:
        raise ValueError(f"{path}: resolution {img.shape[1]}x{img.shape[0]} does not match "
                         f"training config ({res}x{res})")
    return img


def _segment_items(cfg, out_dir, split, image_paths):
    """(sample_id, image, ground truth or None) triples to segment."""
    if image_paths:
        return [(Path(p).stem, _load_input_image(p, cfg), None) for p in image_paths]
    samples = _by_split(load_experiment_dataset(cfg, out_dir), split)
    # evaluation truth is the annotator majority, which is deterministic
    return [(s.sample_id, s.image, training_target(s, "majority")) for s in samples]


def cmd_segment(cfg: ExperimentConfig, out_dir, split: str = "test", image_paths=None,
                n: int | None = None, seed: int | None = None,
                five_fold: bool | None = None, save_samples: bool | None = None) -> Path:
    """Segment images into consensus masks, confidence maps, and a results CSV."""
    n = cfg.inference.n if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = cfg.inference.seed if seed is None else seed
    five_fold = cfg.inference.five_fold if five_fold is None else five_fold
    save_samples = cfg.inference.save_samples if save_samples is None else save_samples
    chash = config_hash(cfg)

    if five_fold:
        folds = cfg.inference.fold_checkpoints
        if not folds:
            raise ValueError("five-fold inference needs inference.fold_checkpoints")
        models = [load_segmenter(cfg, out_dir, ck) for ck in folds]
    else:
        models = [load_segmenter(cfg, out_dir)]

    seg_dir = _dirs(out_dir)["segment"]
    for sub in ("consensus", "confidence", "samples"):
        (seg_dir / sub).mkdir(parents=True, exist_ok=True)

    rows = []
    for i, (sid, image, truth) in enumerate(_segment_items(cfg, out_dir, split, image_paths)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        fold_confidences = []
        result = None
        for model, child in zip(models, rng.spawn(len(models))):
            result = ensemble_segment(image, n, model, child)
            fold_confidences.append(result.confidence)
        confidence = np.mean(fold_confidences, axis=0)
        consensus = (confidence >= 0.5).astype(np.uint8)

        outputs.save_binary_mask(seg_dir / "consensus" / f"{sid}.png", consensus, chash)
        outputs.save_confidence(seg_dir / "confidence" / f"{sid}.png",
                                seg_dir / "confidence" / f"{sid}.npz", confidence, chash)
        if save_samples and len(models) == 1:
            for k, mask in enumerate(result.masks):
                outputs.save_binary_mask(seg_dir / "samples" / f"{sid}_{k}.png", mask, chash)
        if truth is not None:
            rows.append([sid, n, seed, f"{dice(consensus, truth):.6f}", f"{iou(consensus, truth):.6f}"])
        else:
            rows.append([sid, n, seed, "", ""])

    outputs.write_csv(seg_dir / "results.csv", ("sample_id", "n", "seed", "dice", "iou"),
                      rows, config_hash=chash, append=True)
    return seg_dir / "results.csv"


def cmd_sweep_samples(cfg: ExperimentConfig, out_dir, n_list, seed: int | None = None) -> Path:
    """Mean Dice/IoU as the ensemble grows, reusing cached prefix draws.

    All max(n_list) masks per image are drawn once; the row for each n
    aggregates exactly the first n of them, so the curve is internally
    consistent and the n=1 row matches single-sample segmentation.
    """
    n_list = [int(v) for v in n_list]
    if not n_list or any(v < 1 for v in n_list):
        raise ValueError("n_list must be a non-empty list of positive integers")
    seed = cfg.inference.seed if seed is None else seed
    chash = config_hash(cfg)
    model = load_segmenter(cfg, out_dir)
    items = _segment_items(cfg, out_dir, "test", None)

    max_n = max(n_list)
    cached = []
    for i, (sid, image, truth) in enumerate(items):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        child = rng.spawn(1)[0]  # same derivation as single-fold cmd_segment
        result = ensemble_segment(image, max_n, model, child)
        cached.append((result.masks, truth))

    rows = []
    for n in n_list:
        dices, ious = [], []
        for masks, truth in cached:
            agg = aggregate_masks(masks[:n])
            dices.append(dice(agg.consensus, truth))
            ious.append(iou(agg.consensus, truth))
        rows.append([n, f"{np.mean(dices):.6f}", f"{np.mean(ious):.6f}"])

    sweep_dir = _dirs(out_dir)["sweep"]
    sweep_dir.mkdir(parents=True, exist_ok=True)
    csv_path = sweep_dir / "dice_vs_n.csv"
    outputs.write_csv(csv_path, ("n", "mean_dice", "mean_iou"), rows, config_hash=chash)
    _plot_sweep(rows, sweep_dir / "dice_vs_n.png")
    return csv_path


def _plot_sweep(rows, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = [int(r[0]) for r in rows]
    dices = [float(r[1]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ns, dices, marker="o")
    ax.set_xlabel("ensemble samples n")
    ax.set_ylabel("mean Dice")
    ax.set_xticks(ns)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_evaluate(predictions_dir, ground_truth_dir, out_csv,
                 chash: str | None = None) -> MetricsReport:
    """Score prediction masks against ground-truth masks matched by filename."""
    pred_dir, gt_dir = Path(predictions_dir), Path(ground_truth_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise EvaluationError(f"{d} is not a directory")
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise EvaluationError("unmatched files: " + ", ".join(unmatched))
    if not preds:
        raise EvaluationError("no mask files to evaluate")
    stems = sorted(preds)
    report = evaluate_masks(
        stems,
        [outputs.load_binary_mask(preds[s]) for s in stems],
        [outputs.load_binary_mask(gts[s]) for s in stems],
    )
    write_metrics_csv(report, out_csv, config_hash=chash)
    return report


# ---------------------------------------------------------------------------
# Paired studies and timing
# ---------------------------------------------------------------------------

def compare_wce_mse(cfg: ExperimentConfig, out_dir) -> dict[str, float]:
    """Seed-matched WCE-vs-MSE mask autoencoder round-trip comparison.

    Trains one mask autoencoder per reconstruction loss on the train split,
    scores round-trip Dice on the test split, and writes vae_comparison.csv.
    """
    samples = load_experiment_dataset(cfg, out_dir)
    train_masks = _stack_targets(_target_masks(_by_split(samples, "train"), cfg))
    test_masks = [training_target(s, "majority") for s in _by_split(samples, "test")]

    results = {}
    for mode in ("mask_wce", "mask_mse"):
        vae_cfg = AutoencoderConfig(
            levels=cfg.mask_vae.levels, base_channels=cfg.mask_vae.base_channels,
            latent_channels=cfg.mask_vae.latent_channels, mode=mode,
            codebook_size=cfg.mask_vae.codebook_size, pos_weight=cfg.mask_vae.pos_weight,
            commitment_beta=cfg.mask_vae.commitment_beta,
        )
        model, _ = train_autoencoder(train_masks, vae_cfg, _vae_settings(cfg))
        results[mode] = float(np.mean([dice(reconstruct_mask(m, model), m)
                                       for m in test_masks]))
    outputs.write_csv(Path(out_dir) / "vae_comparison.csv", ("mode", "roundtrip_dice"),
                      [[mode, f"{score:.6f}"] for mode, score in results.items()],
                      config_hash=config_hash(cfg))
    return results


def measure_reverse_step_seconds(denoiser: DenoiserUNet, schedule, spatial: int,
                                 c_mask: int, c_cond: int, steps: int = 100,
                                 seed: int = 0) -> float:
    """Median wall-clock of one conditioned reverse step (denoise + update)."""
    rng = np.random.default_rng(seed)
    cond = rng.standard_normal((spatial, spatial, c_cond))
    base = rng.standard_normal((spatial, spatial, c_mask))
    from .segmenter import _denoise_np
    timings = []
    for i in range(steps):
        t = schedule.T - (i % schedule.T)
        state = DiffusionState(value=base, t=t)
        start = time.perf_counter()
        eps = _denoise_np(denoiser, condition_concat(state.value, cond).combined, t)
        reverse_step(state, eps, schedule, rng, deterministic_last=False)
        timings.append(time.perf_counter() - start)
    return float(np.median(timings))
