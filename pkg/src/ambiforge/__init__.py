"""Linear and neural Ambisonic encoding for wearable microphone arrays.

Modules
-------
sphere     real spherical harmonics, grids, radial terms
stft       STFT analysis/synthesis and WAV I/O
atf        array transfer functions (synthetic rigid-sphere head proxy, import, file format)
linenc     regularized least-squares linear encoder
roomsim    image-source shoebox rooms and dataset generation
gradkit    small reverse-mode autodiff, GRU, Adam, checkpoints
ambinet    neural encoder and residual combination
objective  training loss and evaluation metrics
training   training loop
cli        the ``ambiforge`` command
"""
from .sphere import SphericalGrid, eval_real_sh, uniform_grid
from .stft import Spectrogram, StftConfig, analyze, synthesize
from .atf import ATFSet, synth_head_array_atf, synth_sphere_atf
from .linenc import EncoderMatrix, apply_encoder, design_linear_encoder
from .ambinet import AmbiNet, AmbiNetConfig, ResidualEncoder

__version__ = "0.1.0"

__all__ = [
    "SphericalGrid",
    "eval_real_sh",
    "uniform_grid",
    "Spectrogram",
    "StftConfig",
    "analyze",
    "synthesize",
    "ATFSet",
    "synth_head_array_atf",
    "synth_sphere_atf",
    "EncoderMatrix",
    "apply_encoder",
    "design_linear_encoder",
    "AmbiNet",
    "AmbiNetConfig",
    "ResidualEncoder",
]
