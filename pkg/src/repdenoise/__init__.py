"""Repetition-based self-supervised denoising for multicoil MRI.

Multicoil noise simulation, GRAPPA reconstruction, analytic and Monte-Carlo
noise-level maps, a noise-adaptive complex CDLNet with hand-written gradients,
and supervised / MC-SURE / Rep2Rep training.
"""
from .cdlnet import CdlnetParams, IstaConfig, cdlnet_backward, cdlnet_forward, init_params, ista_denoise, soft_threshold
from .coils import SensitivityMaps, coil_combine, make_synthetic_sensitivities
from .errors import *  # noqa: F401,F403
from .grappa import GrappaKernel, grappa_calibrate, grappa_image_operator, grappa_interpolate
from .inference import InferenceStrategy, PostprocConfig, dither, infer, sharpen
from .lattice import ComplexLattice, PixelwiseOperator, RepetitionStack, conv2_circular, dft2_channelwise, \
    idft2_channelwise, pixelwise_apply
from .metrics import nrmse, nrv, psnr, ssim
from .noise import (
    CoilCovariance,
    CovGenParams,
    NoiseLevelMap,
    covariance_probe,
    draw_noise,
    empirical_noise_level,
    estimate_cov_noise_scan,
    estimate_cov_wavelet,
    noise_level_fully_sampled,
    noise_level_grappa,
    noise_level_grappa_acs,
    synthesize_covariance,
    whitening_transform,
)
from .pipeline import whitened_reconstruct
from .sampling import SamplingScheme, apply_sampling
from .training import LossKind, TrainConfig, adam_step, loss_mc_sure, loss_mse, loss_rep2rep, mc_divergence, train

__version__ = "0.1.0"
