"""Anchor-based differentiable Gaussian splatting with second-order feature
augmentation and a selective gradient loss."""

from .anchors import (
    Anchor,
    AnchorField,
    AugmentedFeatures,
    SecondOrderBasis,
    augment_anchor,
    compute_feature_covariance,
    covariance_to_correlation,
    principal_covariations,
    refresh_basis,
    voxelize_points,
)
from .autodiff import Tensor
from .heads import (
    GaussianPrimitive,
    MLPLayer,
    MLPParams,
    ViewContext,
    mlp_forward,
    predict_gaussians,
)
from .losses import (
    GradientMaps,
    LossReport,
    LossWeights,
    psnr,
    selective_gradient_loss,
    sobel_gradients,
    ssim,
    total_loss,
)
from .numerics import EigenPairs, SymMatrix, finite_difference_gradient, sym_eigendecomposition
from .renderer import Camera, Splat2D, build_covariance_3d, project_gaussian, render
from .sceneio import (
    Checkpoint,
    Scene,
    SceneSpec,
    generate_synthetic_scene,
    load_checkpoint,
    read_image,
    save_checkpoint,
    write_image,
)
from .training import (
    MetricsRow,
    TrainConfig,
    TrainResult,
    adam_step,
    dimension_sweep,
    evaluate,
    run_ablation,
    train,
)

__version__ = "0.1.0"
