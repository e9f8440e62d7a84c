"""Latent-diffusion segmentation with vector-quantized autoencoders.

Two frozen VQ autoencoders compress images and masks into a discrete-latent
space; a conditional denoiser diffuses mask latents given the image latent;
sampling n reverse chains per image yields an ensemble of masks, a pixelwise
confidence map, and a 0.5-thresholded consensus mask.
"""

from .schedule import NoiseSchedule, build_schedule, schedule_from_alphas, schedule_from_spec
from .diffusion import (DiffusionState, diffusion_loss, forward_step, predict_x0,
                        reverse_step, sample_noisy)
from .quantize import Codebook, LatentCode, quantize
from .vqvae import (AutoencoderConfig, VQAutoencoder, binarize_decoded, decode, encode,
                    reconstruct_mask, vq_losses, wce_loss)
from .vae_training import OptimizerSettings, TrainingDiverged, train_autoencoder
from .denoiser import DenoiserConfig, DenoiserUNet, sinusoidal_time_embedding
from .segmenter import (ConditionedLatent, DiffusionTrainSettings, EnsembleResult,
                        IdentityImageCodec, IdentityMaskCodec, LatentStats, SegmenterModel,
                        VQImageCodec, VQMaskCodec, aggregate_masks, condition_concat,
                        decode_mask, ensemble_segment, fit_latent_stats, pixel_space_segment,
                        sample_mask_latent, train_denoiser, training_step)
from .data import (AnnotatedSample, SyntheticSpec, generate_synthetic, load_manifest_dataset,
                   load_real_dataset, materialize_dataset, split_patientwise, training_target)
from .metrics import MetricsReport, dice, evaluate_masks, iou, psnr, ssim, write_metrics_csv
from .config import ExperimentConfig, config_from_dict, config_hash, load_config

__version__ = "0.1.0"
