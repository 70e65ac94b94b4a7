"""Conditional denoising diffusion models for simulation-based inference."""

from .schedule import NoiseSchedule, make_schedule, snr, loss_weight
from .net import DenoiserNetwork, OptimizerState, DivergenceError, adamw_apply, lr_at
from .diffusion import (GuidanceConfig, PosteriorSamples, forward_sample,
                        forward_posterior, cfg_combine, reverse_step,
                        training_loss, sample_posterior)
from .simulators import TaskDefinition, get_task, sample_prior, task_names
from .metrics import (C2stResult, MmdResult, EcdfBand, c2st, mmd, sbc_ranks,
                      ecdf_band, band_half_width)
from .pipeline import (TrainingConfig, Standardizer, Dataset, TrainingReport,
                       Checkpoint, default_config, generate_dataset,
                       fit_standardizer, train, evaluate, calibrate,
                       save_checkpoint, load_checkpoint, sample_at)

__version__ = "0.1.0"
