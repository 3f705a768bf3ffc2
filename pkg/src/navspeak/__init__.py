"""Landmark-guided navigation instruction generation on a synthetic gridworld."""
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, DataError, NavSpeakError, NumericError
from .estimators import InstructionSpeaker, LandmarkSelector
from .generator import GenerationRequest, Generator
from .landmarks import select_landmarks
from .world import generate_world, sample_trajectory, synthesize_instruction

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GenerationRequest", "Generator", "InstructionSpeaker", "LandmarkSelector",
    "NavSpeakError", "NumericError", "RunConfig", "dump_config", "generate_world", "load_config",
    "sample_trajectory", "select_landmarks", "synthesize_instruction",
]
