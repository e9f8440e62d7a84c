"""Shared toy-scale pipeline fixture.

Training the 64x64 latent pipeline dominates suite runtime, so it happens
once per session; the acceptance criteria and toy-quality tests all read
from the same workspace.
"""

import pytest

from medseglatdiff import config_from_dict
from medseglatdiff import experiments as ex

E2E_DOC = {
    "dataset": {"kind": "synthetic", "resolution": 64, "split_seed": 0,
                "synthetic": {"count": 64, "blob_count_range": [1, 2],
                              "blob_radius_range": [7.0, 15.0], "noise_level": 0.02,
                              "seed": 11}},
    "image_vae": {"levels": 2, "base_channels": 16, "latent_channels": 3,
                  "codebook_size": 128},
    "mask_vae": {"mode": "mask_wce", "levels": 2, "base_channels": 16,
                 "latent_channels": 3, "codebook_size": 128, "pos_weight": 5},
    "diffusion": {"T": 250, "beta_start": 8e-4, "beta_end": 0.08,
                  "denoiser_base_channels": 32, "denoiser_levels": 2},
    "training": {"lr": 2e-3, "batch_size": 16, "epochs": 40,
                 "diffusion_epochs": 150, "seed": 0},
    "inference": {"n": 5, "seed": 7},
}


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """Generate data, train both autoencoders and the denoiser, sweep, segment."""
    out = tmp_path_factory.mktemp("e2e")
    doc = {**E2E_DOC, "inference": {**E2E_DOC["inference"], "output_dir": str(out)}}
    cfg = config_from_dict(doc)
    ex.cmd_generate_synthetic(cfg, out)
    ex.cmd_train_vae(cfg, "image", out)
    ex.cmd_train_vae(cfg, "mask", out)
    ex.cmd_train_diffusion(cfg, out)
    ex.cmd_sweep_samples(cfg, out, [1, 2, 3, 4, 5])
    ex.cmd_segment(cfg, out, save_samples=True)
    return cfg, out
