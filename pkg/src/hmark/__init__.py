"""Multi-bit watermarking through a diffusion model's bottleneck features.

Train a secret-to-residual encoder against a frozen denoiser, embed
watermarks via the final reverse step, detect them in pixel space, and
verify that the mark survives downstream finetuning (sampled images from
the finetuned model still trip the detector).
"""

from .bch import BCHParams, GaloisField, bch_build, bch_decode, bch_encode, gf_build
from .codec import DetectionResult, PixelDecoder, SecretEncoder, detect, embed, encode_secret
from .diffusion import (
    NoiseSchedule,
    denoise_step_with_injection,
    forward_diffuse,
    make_schedule,
    sample,
)
from .distortions import DistortionSpec, apply_distortion, sample_distortion
from .finetune import FinetuneConfig, finetune
from .lora import LoRAConfig, attach_lora
from .losses import LossWeights, loss_image, loss_perceptual, loss_secret, loss_wm, total_loss
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    bit_accuracy,
    classification_metrics,
    evaluate_run,
    fidelity_metrics,
    frechet_feature_distance,
    roc_auc,
    ssim,
)
from .pipeline import ExperimentConfig, run_all, run_stage, sweep
from .radioactivity import mean_shift_check, radioactivity_probe, upblocks_jvp
from .train_codec import TrainConfig, train_codec
from .unet import UNetConfig, UNetModel, unet_split_forward

__version__ = "0.1.0"
