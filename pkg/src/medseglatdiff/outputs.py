"""Output artifact writers: mask images, confidence maps, CSVs.

Every artifact embeds the experiment's config hash (PNG text chunk, npz
field, or leading CSV comment) and is written deterministically so reruns
with identical config and seed produce bit-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def _png_info(config_hash: str | None) -> PngInfo | None:
    if not config_hash:
        return None
    info = PngInfo()
    info.add_text("config_hash", config_hash)
    return info


def save_binary_mask(path, mask: np.ndarray, config_hash: str | None = None) -> None:
    """1-bit-per-pixel PNG."""
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).convert("1")
    img.save(Path(path), pnginfo=_png_info(config_hash))


def load_binary_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_confidence(path_png, path_npz, confidence: np.ndarray,
                    config_hash: str | None = None) -> None:
    """8-bit grayscale preview plus a lossless float sidecar."""
    conf = np.asarray(confidence, dtype=np.float64)
    eight_bit = np.round(conf * 255.0).astype(np.uint8)
    Image.fromarray(eight_bit).save(Path(path_png), pnginfo=_png_info(config_hash))
    np.savez(Path(path_npz), confidence=conf,
             config_hash=np.str_(config_hash or ""))


def load_confidence(path_npz) -> np.ndarray:
    with np.load(path_npz) as data:
        return data["confidence"]


def write_csv(path, header, rows, config_hash: str | None = None, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        if new_file and config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(header)
        writer.writerows(rows)


def read_csv_rows(path) -> list[dict]:
    """Read a CSV written by write_csv, skipping the hash comment."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader)
