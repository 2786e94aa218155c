"""Diffusion-based audio super-resolution to 48 kHz, in numpy."""

from .dsp import AudioClip, read_wav, write_wav
from .edm import Denoiser, Preconditioner, build_schedule, euler_sample
from .model import ModelConfig, build_model

__version__ = "0.1.0"

__all__ = ["AudioClip", "read_wav", "write_wav", "Denoiser", "Preconditioner",
           "build_schedule", "euler_sample", "ModelConfig", "build_model"]
