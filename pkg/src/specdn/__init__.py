"""Deep-learning denoising of low-count 2D spectra, reproduced at desk scale."""

from .analysis import (Mdc, MdcFitResult, extract_mdc, fit_mdc_lorentzian, gaussian_smooth,
                       second_derivative, trace_dispersion)
from .losses import LossSpec, combined_loss, mae_loss, ms_ssim, mse_loss
from .nn import (ConvLayer, Network, conv2d, init_network, load_network, network_forward,
                 network_gradients, prelu, receptive_field, save_network)
from .noise import (NoiseConfig, TrainingPair, apply_detector_psf, make_training_pair,
                    sample_log_weighted_count, sample_poisson_counts)
from .spectrum import (AxisInfo, ProbabilityMap, Spectrum, load_spectrum,
                       normalize_to_probability, save_spectrum, spectrum_roundtrip)
from .synth import BandSpec, SynthConfig, fermi_weight, synth_spectrum
from .train import (AdamState, TrainConfig, TrainReport, adam_step, augment_pair, evaluate,
                    learning_rate, normalize_pair, train_model)

__version__ = "0.1.0"

__all__ = [
    "adam_step", "AdamState", "apply_detector_psf", "augment_pair", "AxisInfo", "BandSpec",
    "combined_loss", "conv2d", "ConvLayer", "evaluate", "extract_mdc", "fermi_weight",
    "fit_mdc_lorentzian", "gaussian_smooth", "init_network", "learning_rate", "load_network",
    "load_spectrum", "LossSpec", "mae_loss", "make_training_pair", "Mdc", "MdcFitResult",
    "ms_ssim", "mse_loss", "Network", "network_forward", "network_gradients", "NoiseConfig",
    "normalize_pair", "normalize_to_probability", "prelu", "ProbabilityMap", "receptive_field",
    "sample_log_weighted_count", "sample_poisson_counts", "save_network", "save_spectrum",
    "second_derivative", "Spectrum", "spectrum_roundtrip", "synth_spectrum", "SynthConfig",
    "trace_dispersion", "train_model", "TrainConfig", "TrainingPair", "TrainReport",
]
