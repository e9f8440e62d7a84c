import dataclasses

import pytest
import yaml

from medseglatdiff import config_from_dict, config_hash, load_config
from medseglatdiff.config import ConfigError


def test_defaults_mirror_reference_recipe():
    cfg = config_from_dict({})
    assert cfg.diffusion.T == 1000
    assert cfg.diffusion.beta_start == 1e-4
    assert cfg.diffusion.beta_end == 0.02
    assert cfg.training.lr == 1e-4
    assert cfg.training.batch_size == 32
    assert cfg.training.optimizer == "adamw"
    assert cfg.mask_vae.pos_weight == 5.0
    assert cfg.mask_vae.levels == 3
    assert cfg.mask_vae.base_channels == 128
    assert cfg.image_vae.mode == "image_mse"
    assert cfg.inference.n == 5
    assert cfg.dataset.resolution == 256


def test_yaml_round_trip(tmp_path):
    doc = {
        "dataset": {"kind": "synthetic", "resolution": 32,
                    "synthetic": {"count": 4, "blob_radius_range": [3.0, 6.0], "seed": 2}},
        "mask_vae": {"mode": "mask_wce", "levels": 2, "base_channels": 16,
                     "latent_channels": 2, "codebook_size": 32, "pos_weight": 50},
        "diffusion": {"T": 16, "beta_start": 0.01, "beta_end": 0.2,
                      "denoiser_levels": 2, "denoiser_base_channels": 16},
        "training": {"epochs": 3, "seed": 9},
        "inference": {"n": 3},
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    cfg = load_config(path)
    assert cfg.dataset.synthetic.count == 4
    assert cfg.dataset.synthetic.resolution == 32  # inherited
    assert cfg.mask_vae.pos_weight == 50
    assert cfg.diffusion.T == 16
    assert cfg.training.seed == 9
    assert cfg.inference.n == 3


def test_unknown_keys_fail_fast():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"dataset": {"kindd": "synthetic"}})
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"datasets": {}})


@pytest.mark.parametrize("patch,match", [
    ({"dataset": {"resolution": 100, "synthetic": {"resolution": 100}}}, "divisible"),
    ({"diffusion": {"T": 0}}, "T"),
    ({"diffusion": {"beta_start": 0.5, "beta_end": 0.1}}, "beta"),
    ({"diffusion": {"space": "frequency"}}, "space"),
    ({"inference": {"n": 0}}, "n must"),
    ({"dataset": {"kind": "isic2018"}}, "root"),
    ({"mask_vae": {"mode": "image_mse"}}, "mask_vae"),
])
def test_validation_messages(patch, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(patch)


def test_missing_file_and_env_overrides(tmp_path, monkeypatch):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    path = tmp_path / "cfg.yaml"
    path.write_text("inference: {output_dir: from_file}\n")
    monkeypatch.setenv("MEDSEGLATDIFF_OUTPUT_DIR", "from_env")
    monkeypatch.setenv("MEDSEGLATDIFF_DEVICE", "cpu")
    cfg = load_config(path)
    assert cfg.inference.output_dir == "from_env"
    assert cfg.training.device == "cpu"


def test_config_hash_tracks_content():
    a = config_from_dict({})
    b = config_from_dict({})
    assert config_hash(a) == config_hash(b)
    c = config_from_dict({"training": {"seed": 1}})
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 16
    # hashing never mutates the config
    assert dataclasses.asdict(a) == dataclasses.asdict(b)
