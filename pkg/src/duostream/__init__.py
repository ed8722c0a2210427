"""Dual-stream segmentation: a shared encoder trained jointly on
synthesized mask supervision and denoising reconstruction of
diffusion-noised images."""

from .core import (DatasetManifest, ImageBuffer, ManifestRecord, MaskBuffer,
                   RngState, clip_to_unit, load_image, load_mask,
                   read_manifest, save_image, save_mask, write_manifest)
from .errors import (ConfigError, DuostreamError, LoadError, ManifestError,
                     NumericError, ShapeError, StepRangeError, SynthesisError)
from .experiments import (AdaptationConfig, AdaptationResult,
                          photometric_shift, run_adaptation_smoke)
from .losses import (LossWeights, PerceptualExtractor, bce_loss, dice_loss,
                     mse_loss, perceptual_loss, rec_loss, seg_loss, ssim_loss,
                     total_loss)
from .metrics import EvalReport, dice_score, evaluate_dataset, iou_score
from .model import (DualStreamNet, FeaturePyramid, ModelConfig, build_model,
                    expected_param_count, image_batch, init_weights,
                    mask_batch, tensor_to_images, tensor_to_masks)
from .schedule import (NoiseSchedule, diffuse_closed, diffuse_step,
                       make_cosine_schedule, make_linear_schedule,
                       make_schedule, moments_at, write_schedule_csv)
from .synthgen import (AugmentPolicy, DonorPair, SynthSpec, augment,
                       composite_sample, ellipse_mask, extract_objects,
                       generate_dataset, generate_toy_dataset,
                       procedural_toy_scene)
from .trainer import (Checkpoint, DiffusionConfig, TrainConfig, TrainResult,
                      TrainState, fine_tune, grad_check, load_checkpoint,
                      save_checkpoint, train)

__version__ = "0.1.0"
