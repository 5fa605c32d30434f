"""BCD-Net low-dose CT reconstruction: learned convolutional-autoencoder
denoising alternated with statistically weighted MBIR."""

from .denoiser import AutoencoderParams, TrainConfig, denoise
from .errors import FormatError, ValidationError
from .evaluation import PhantomSpec, generate_phantom, random_phantom_spec, rmse_hu
from .mbir import MbirProblem, SolverConfig, apgm_solve, build_majorizer
from .physics import Geometry, Projector, parallel_geometry, simulate_measurements
from .pipeline import (
    BcdNetModel,
    TrainingSet,
    check_convergence_preconditions,
    init_image,
    reconstruct,
    train_bcdnet,
    zero_denoiser_model,
)

__version__ = "0.1.0"

__all__ = [
    "AutoencoderParams", "TrainConfig", "denoise", "FormatError", "ValidationError",
    "PhantomSpec", "generate_phantom", "random_phantom_spec", "rmse_hu",
    "MbirProblem", "SolverConfig", "apgm_solve", "build_majorizer", "Geometry",
    "Projector", "parallel_geometry", "simulate_measurements", "BcdNetModel",
    "TrainingSet", "check_convergence_preconditions", "init_image", "reconstruct",
    "train_bcdnet", "zero_denoiser_model",
]
