"""Multi-channel encoder neural machine translation, written against numpy."""

from .corpus import Vocabulary, build_vocab
from .encoder import SYSTEMS, ChannelConfig
from .inference import beam_search, greedy_decode
from .model import Model, ModelConfig

__version__ = "0.1.0"

__all__ = ["SYSTEMS", "ChannelConfig", "Model", "ModelConfig", "Vocabulary", "beam_search", "build_vocab",
           "greedy_decode"]
