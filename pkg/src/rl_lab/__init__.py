"""First-order policy optimisation through differentiable simulation."""
from .diffsim import Bouncer1D, EnvParams, EnvState, NonFiniteState, Slider1D, make_env
from .estimators import PPO, SHAC, SHACASAM
from .nets import CriticNet, ParamVector, PolicyNet
from .optim import AdamState, AsamConfig, asam_perturb, asam_update
from .ppo import PpoConfig
from .robust import NoiseSpec, SweepGrid, inject_noise
from .shac import ShacConfig

__version__ = "0.1.0"
