"""Context-aware pedestrian motion generation with a conditional motion diffusion model."""
from .diffusion import LossWeights, SampleSpec, build_schedule
from .model import Denoiser, DenoiserConfig, GenerationContext
from .motion import Motion, ModelMotion, decode_model_space, encode_model_space
from .pipeline import MotionGenerator, MotionScaler, stitch_long_horizon
from .rng import Stream

__all__ = [
    "Denoiser", "DenoiserConfig", "GenerationContext", "LossWeights", "Motion", "ModelMotion",
    "MotionGenerator", "MotionScaler", "SampleSpec", "Stream", "build_schedule",
    "decode_model_space", "encode_model_space", "stitch_long_horizon",
]
