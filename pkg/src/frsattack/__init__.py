"""Joint adversarial attacks on a two-stage face recognition pipeline."""

__version__ = "0.1.0"

from .core import (
    AdversarialNoise,
    AttackConfig,
    ConfigError,
    CorruptionError,
    FormatError,
    NumericError,
    apply_noise,
    load_array,
    load_image,
    save_array,
    save_image,
)
from .detector import TinyPNet, active_windows, detect, grid_dims, probability_map, train_detector
from .engine import AttackJob, AttackRun, generate, generate_batch, pgd_step
from .evaluate import (
    attack_success,
    evaluate_identity,
    evaluate_runs,
    mean_detection_probability,
    render_report,
    vanilla_baseline,
)
from .losses import (
    LossBreakdown,
    det_loss_detectable,
    det_loss_evasive,
    evasion_loss,
    imper_loss,
    total_loss,
)
from .masks import PatchMask, eyeglass_mask, random_patch
from .matcher import (
    FaceEmbedder,
    Gallery,
    build_gallery,
    calibrate_threshold,
    crop_face,
    distance,
    embed,
    train_matcher,
    verify,
)
from .synth import (
    Dataset,
    IdentitySpec,
    export_dataset,
    generate_identity,
    load_dataset,
    make_dataset,
    render,
)
