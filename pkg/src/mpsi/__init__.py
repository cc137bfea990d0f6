"""Multi-prompt style interpolation in embedding space."""
from .blend_field import BlendField, from_user_masks, uniform_field, weights
from .embedding_store import LatentGrid, PromptSet, load_bank, save_bank
from .errors import MPSIError
from .numerics import Rng
from .prompt_mixer import MixerParams, TrainConfig, init_mixer, mix, train_mixer
from .solver import RunResult, SolverConfig, run
from .style_loss import LossCoeffs, build_pyramid, dir_loss, dir_loss_grad, directions

__version__ = "0.1.0"

__all__ = [
    "BlendField", "from_user_masks", "uniform_field", "weights",
    "LatentGrid", "PromptSet", "load_bank", "save_bank",
    "MPSIError", "Rng",
    "MixerParams", "TrainConfig", "init_mixer", "mix", "train_mixer",
    "RunResult", "SolverConfig", "run",
    "LossCoeffs", "build_pyramid", "dir_loss", "dir_loss_grad", "directions",
]
