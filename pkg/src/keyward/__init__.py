"""Key-protected classification for collaborative learning, with GAN reconstruction attacks."""

from .keys import ClassKey, generate_delta_key, generate_key, generate_orthonormal_keys
from .model import KeyProtectedClassifier, VanillaClassifier, build_key_protected, build_vanilla, predict
from .protocol import FrameworkConfig, Participant, run_training

__version__ = "0.1.0"
