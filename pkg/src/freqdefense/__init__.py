"""Test-time adversarial defense for pre-trained classifiers.

No training data, no retraining: an adversarial detector adapted
source-free to the unlabeled test mix scores every input, and its soft
clean-probability drives a per-sample Fourier low-pass correction before
the unmodified model classifies the result.
"""

from .attacks import AdversarialSet, AttackConfig, bim, build_mixed_attack_set, fgsm, filter_fooling, pgd, run_attack
from .correction import CorrectionConfig, CorrectionResult, best_radius, contamination_score, correct, correct_batch, label_change_rate
from .detector import (
    AdaptationConfig,
    DetectionHead,
    TargetDetector,
    TrainConfig,
    adapt_target_detector,
    assign_pseudo_labels,
    canonicalize_logits,
    detect,
    diversity_loss,
    entropy_loss,
    generate_detector_dataset,
    train_arbitrary_classifier,
    train_source_head,
)
from .errors import CapabilityError, ConfigError, DataError, DefenseError, InputError, StateError, TrainingError
from .models import ClassifierHandle, LinearClassifier, SeededDropout, SmallConvNet, parameter_checksum
from .perceptual import SsimConfig, disc_score, ssim
from .pipeline import (
    BenchRecord,
    DefenseReport,
    EvalSet,
    bench_runtime,
    build_eval_set,
    defend,
    emit_report,
    evaluate,
    random_radius_accuracy,
    random_radius_baseline,
)
from .spectral import fft2, identity_radius, ifft2, low_pass, radial_mask, split

__version__ = "0.1.0"
