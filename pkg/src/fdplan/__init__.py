"""Diffusion-policy trajectory planning for a bar-carrying leader pair with
sliding-mode formation followers."""

from .config import RunConfig
from .controllers import FormationGains, MPPIConfig, PACConfig, formation_command, mppi_command, pac_command
from .data import compute_metrics, evaluate_policy, generate_dataset, render_svg, train, window_samples
from .diffusion import NoiseSchedule, add_noise, cosine_beta_schedule, denoise_step, epsilon_loss
from .graphs import DirectedGraph, Framework, is_infinitesimally_rigid, rigidity_function, rigidity_matrix
from .network import NetworkConfig, NoisePredictor, build_model, load_checkpoint, save_checkpoint
from .policy import Normalizer, PolicyConfig, build_observation, run_episode, sample_plan
from .records import EpisodeRecord, read_dataset, write_dataset
from .world import Environment, MidpointState, sample_environment, step_midpoint

__all__ = [
    "RunConfig",
    "FormationGains",
    "MPPIConfig",
    "PACConfig",
    "formation_command",
    "mppi_command",
    "pac_command",
    "compute_metrics",
    "evaluate_policy",
    "generate_dataset",
    "render_svg",
    "train",
    "window_samples",
    "NoiseSchedule",
    "add_noise",
    "cosine_beta_schedule",
    "denoise_step",
    "epsilon_loss",
    "DirectedGraph",
    "Framework",
    "is_infinitesimally_rigid",
    "rigidity_function",
    "rigidity_matrix",
    "NetworkConfig",
    "NoisePredictor",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "Normalizer",
    "PolicyConfig",
    "build_observation",
    "run_episode",
    "sample_plan",
    "EpisodeRecord",
    "read_dataset",
    "write_dataset",
    "Environment",
    "MidpointState",
    "sample_environment",
    "step_midpoint",
]

__version__ = "0.1.0"
