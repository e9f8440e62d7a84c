"""Synthetic dataset generation, real-dataset loaders, and split logic.

Every sample is an image plus one or more annotator masks. Generators and
loaders are pure functions of their inputs and seed: calling them twice
yields bit-identical results. Datasets are materialized to a single on-disk
layout (images/, masks/, manifest.jsonl) so downstream consumers see one
interface regardless of origin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test")
TARGET_POLICIES = ("majority", "random_annotator", "first")
REAL_LAYOUTS = ("isic2018", "cvc_clinic", "lidc_slices")

TINY_FOREGROUND_FRACTION = 0.005  # tiny_mode cap on foreground area per mask


@dataclass
class AnnotatedSample:
    """One image with its annotator masks and identity/split metadata."""

    image: np.ndarray               # H x W x C float in [0, 1]
    masks: list[np.ndarray]         # >= 1 binary H x W grids
    sample_id: str
    patient_id: str | None = None
    split: str | None = None

    def validate(self) -> None:
        if self.image.ndim != 3:
            raise ValueError(f"{self.sample_id}: image must be H x W x C, got {self.image.shape}")
        if not self.masks:
            raise ValueError(f"{self.sample_id}: no masks")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"{self.sample_id}: image values outside [0, 1]")
        for i, m in enumerate(self.masks):
            if m.shape != self.image.shape[:2]:
                raise ValueError(f"{self.sample_id}: mask {i} shape {m.shape} != image {self.image.shape[:2]}")
            vals = np.unique(m)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"{self.sample_id}: mask {i} not binary")
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"{self.sample_id}: bad split {self.split!r}")


@dataclass
class SyntheticSpec:
    """Recipe for a seeded synthetic blob dataset."""

    count: int = 32
    resolution: int = 64
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (5.0, 14.0)
    tiny_mode: bool = False
    noise_level: float = 0.03
    annotator_count: int = 1
    annotator_jitter: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.resolution < 8:
            raise ValueError("resolution must be >= 8")
        lo, hi = self.blob_radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad blob_radius_range {self.blob_radius_range}")
        if hi >= self.resolution / 2:
            raise ValueError(
                f"blob radius {hi} does not fit a {self.resolution}x{self.resolution} image"
            )
        nlo, nhi = self.blob_count_range
        if nlo < 1 or nhi < nlo:
            raise ValueError(f"bad blob_count_range {self.blob_count_range}")
        if self.annotator_count < 1:
            raise ValueError("annotator_count must be >= 1")
        if self.annotator_jitter < 0:
            raise ValueError("annotator_jitter must be >= 0")


def _disk(radius: int) -> np.ndarray:
    y, x = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    return (x * x + y * y) <= radius * radius


def _blob_support(res: int, cx, cy, ra, rb, theta, rng, polygonal: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    support = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    if polygonal:
        # Cut the ellipse with random chords; the intersection stays convex
        # and bounded, which gives straight-edged blobs.
        for _ in range(int(rng.integers(2, 5))):
            phi = rng.uniform(0.0, 2.0 * np.pi)
            offset = rng.uniform(0.45, 0.95) * max(ra, rb)
            support &= (dx * np.cos(phi) + dy * np.sin(phi)) <= offset
    return support


def _smooth_background(res: int, rng) -> np.ndarray:
    coarse = rng.uniform(0.1, 0.45, size=(5, 5))
    return np.asarray(ndimage.zoom(coarse, res / 5.0, order=1, grid_mode=True, mode="nearest"))


def _shrink_until(mask: np.ndarray, budget: int) -> np.ndarray:
    out = mask
    while out.sum() > budget:
        out = ndimage.binary_erosion(out, structure=_disk(1))
    return out.astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec) -> list[AnnotatedSample]:
    """Generate seeded blob images with exact-support ground-truth masks.

    Images are smooth backgrounds with brighter textured elliptical or
    polygonal blobs plus additive Gaussian noise. Each annotator mask is a
    seeded morphological perturbation (dilation or erosion of radius up to
    ``annotator_jitter``) of the blob support; jitter 0 reproduces it
    exactly. In tiny mode, every mask's foreground is capped at 0.5% of the
    pixels.
    """
    spec.validate()
    res = spec.resolution
    budget = int(TINY_FOREGROUND_FRACTION * res * res)
    master = np.random.default_rng(spec.seed)
    streams = master.spawn(spec.count)
    samples = []
    for i, rng in enumerate(streams):
        n_blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
        gt = np.zeros((res, res), dtype=bool)
        for attempt in range(64):
            gt[:] = False
            for _ in range(n_blobs):
                rlo, rhi = spec.blob_radius_range
                if spec.tiny_mode:
                    # keep each blob comfortably inside the area budget
                    rhi = min(rhi, max(rlo, np.sqrt(0.5 * budget / (np.pi * n_blobs))))
                ra = rng.uniform(rlo, rhi)
                rb = rng.uniform(rlo, rhi)
                margin = max(ra, rb) + 1
                cx = rng.uniform(margin, res - margin)
                cy = rng.uniform(margin, res - margin)
                theta = rng.uniform(0.0, np.pi)
                gt |= _blob_support(res, cx, cy, ra, rb, theta, rng, polygonal=bool(rng.random() < 0.3))
            if not spec.tiny_mode or gt.sum() <= 0.8 * budget or attempt == 63:
                break
        if spec.tiny_mode and gt.sum() > 0.8 * budget:
            gt = _shrink_until(gt, int(0.8 * budget)).astype(bool)

        image = _smooth_background(res, rng)
        fg_level = rng.uniform(0.6, 0.9)
        image[gt] = fg_level + 0.08 * rng.standard_normal(int(gt.sum()))
        image += spec.noise_level * rng.standard_normal((res, res))
        image = np.clip(image, 0.0, 1.0)[..., None]

        masks = []
        for _ in range(spec.annotator_count):
            radius = int(rng.integers(0, spec.annotator_jitter + 1))
            if radius == 0:
                m = gt.copy()
            elif rng.random() < 0.5:
                m = ndimage.binary_dilation(gt, structure=_disk(radius))
            else:
                m = ndimage.binary_erosion(gt, structure=_disk(radius))
            if spec.tiny_mode:
                m = _shrink_until(m, budget).astype(bool)
            masks.append(m.astype(np.uint8))

        samples.append(AnnotatedSample(
            image=image.astype(np.float64),
            masks=masks,
            sample_id=f"syn{i:04d}",
            patient_id=f"pt{i:04d}",
        ))
    return samples


def split_patientwise(samples: list[AnnotatedSample], ratios=(8, 1, 1), seed: int = 0) -> dict[str, str]:
    """Shuffle patients (not samples) and partition them by ratio.

    Every split receives at least one patient; all samples of a patient land
    in the same split. Returns the patient -> split assignment and stamps it
    onto the samples.
    """
    for s in samples:
        if not s.patient_id:
            raise ValueError(f"{s.sample_id}: patient_id required for patient-wise split")
    patients = list(dict.fromkeys(s.patient_id for s in samples))
    if len(patients) < len(SPLITS):
        raise ValueError(f"need >= {len(SPLITS)} patients, got {len(patients)}")

    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    total = float(sum(ratios))
    n = len(order)
    n_val = max(1, round(n * ratios[1] / total))
    n_test = max(1, round(n * ratios[2] / total))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = 1, max(1, (n - 1) // 2), n - 1 - max(1, (n - 1) // 2)

    assignment = {}
    for idx, pid in enumerate(order):
        if idx < n_train:
            assignment[pid] = "train"
        elif idx < n_train + n_val:
            assignment[pid] = "val"
        else:
            assignment[pid] = "test"
    for s in samples:
        s.split = assignment[s.patient_id]
    return assignment


def training_target(sample: AnnotatedSample, policy: str = "majority",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Collapse a sample's annotator masks to one binary training mask.

    majority votes pixelwise (exact half counts as foreground);
    random_annotator picks one mask with the supplied generator; first
    returns masks[0].
    """
    if policy not in TARGET_POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if not sample.masks:
        raise ValueError(f"{sample.sample_id}: empty mask list")
    if policy == "first" or len(sample.masks) == 1:
        return sample.masks[0]
    if policy == "random_annotator":
        if rng is None:
            raise ValueError("random_annotator policy needs a random generator")
        return sample.masks[int(rng.integers(len(sample.masks)))]
    votes = np.sum(np.stack(sample.masks), axis=0)
    return (2 * votes >= len(sample.masks)).astype(np.uint8)


# ---------------------------------------------------------------------------
# On-disk layout: materialization, manifest, real-dataset loaders
# ---------------------------------------------------------------------------

def _save_image_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def _save_mask_png(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255)).save(path)


def _load_image_png(path: Path) -> np.ndarray:
    img = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = img[..., None]
    return img


def _load_mask_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def materialize_dataset(samples: list[AnnotatedSample], out_dir) -> Path:
    """Write images/, masks/ and manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for s in samples:
            s.validate()
            image_rel = f"images/{s.sample_id}.png"
            _save_image_png(out_dir / image_rel, s.image)
            mask_rels = []
            for k, m in enumerate(s.masks):
                rel = f"masks/{s.sample_id}_annot{k}.png"
                _save_mask_png(out_dir / rel, m)
                mask_rels.append(rel)
            fh.write(json.dumps({
                "sample_id": s.sample_id,
                "patient_id": s.patient_id,
                "split": s.split,
                "image": image_rel,
                "masks": mask_rels,
            }, sort_keys=True) + "\n")
    return manifest_path


def load_manifest_dataset(manifest_path) -> list[AnnotatedSample]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            samples.append(AnnotatedSample(
                image=_load_image_png(root / rec["image"]),
                masks=[_load_mask_png(root / rel) for rel in rec["masks"]],
                sample_id=rec["sample_id"],
                patient_id=rec.get("patient_id"),
                split=rec.get("split"),
            ))
    return samples


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    squeeze = arr.ndim == 3 and arr.shape[2] == 1
    pil = Image.fromarray(arr[..., 0] if squeeze else arr)
    out = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    if out.ndim == 2:
        out = out[..., None]
    return out


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255))
    out = np.asarray(pil.resize((size, size), Image.NEAREST))
    return (out >= 128).astype(np.uint8)


def _collect_images(images_dir: Path) -> list[Path]:
    exts = (".png", ".jpg", ".jpeg", ".bmp")
    return sorted(p for p in images_dir.iterdir() if p.suffix.lower() in exts)


def load_real_dataset(root, layout: str, target_resolution: int) -> list[AnnotatedSample]:
    """Load a pre-extracted per-slice dataset and resize it.

    Expected layouts under ``root`` (optionally nested in train/ val/ test/
    subdirectories, in which case the split is taken from the directory):

    - isic2018:    images/<stem>.{png,jpg}, masks/<stem>_segmentation.png
    - cvc_clinic:  images/<stem>.{png,jpg}, masks/<stem>.png
    - lidc_slices: images/<patient>_<slice>.png,
                   masks/<patient>_<slice>_annot{0..3}.png (four annotators);
                   the patient id is the stem's prefix before the first "_"

    Images are resized bilinearly; masks are thresholded at 128/255,
    resized with nearest-neighbor interpolation, and re-binarized.
    """
    if layout not in REAL_LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; supported: {REAL_LAYOUTS}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")

    split_dirs = [(s, root / s) for s in SPLITS if (root / s).is_dir()]
    if not split_dirs:
        split_dirs = [(None, root)]

    samples = []
    for split, base in split_dirs:
        images_dir = base / "images"
        masks_dir = base / "masks"
        if not images_dir.is_dir():
            raise FileNotFoundError(f"missing {images_dir}")
        for img_path in _collect_images(images_dir):
            stem = img_path.stem
            if layout == "isic2018":
                mask_paths = [masks_dir / f"{stem}_segmentation.png"]
                patient = None
            elif layout == "cvc_clinic":
                mask_paths = [masks_dir / f"{stem}.png"]
                patient = None
            else:
                mask_paths = [masks_dir / f"{stem}_annot{k}.png" for k in range(4)]
                patient = stem.split("_")[0]
            missing = [p for p in mask_paths if not p.is_file()]
            if missing:
                raise FileNotFoundError(f"missing mask(s) for {img_path.name}: "
                                        + ", ".join(p.name for p in missing))
            image = _resize_image(_load_image_png(img_path), target_resolution)
            masks = [_resize_mask(_load_mask_png(p), target_resolution) for p in mask_paths]
            sample = AnnotatedSample(image=image, masks=masks, sample_id=stem,
                                     patient_id=patient, split=split)
            sample.validate()
            samples.append(sample)
    return samples
