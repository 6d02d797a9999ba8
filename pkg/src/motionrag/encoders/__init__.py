from .action import ActionEncoder, ActionEncoderConfig, KeypointSequence
from .base import BackwardError, Encoder
from .checkpoint import CheckpointError, checksum, load_tensors, save_tensors
from .text import CONTEXT_CAP, TextEncoder, TextEncoderConfig, TokenizedText, Vocabulary
from .video import FrameFeatureSequence, ObjectEncoder, ObjectEncoderConfig

__all__ = [
    "ActionEncoder", "ActionEncoderConfig", "KeypointSequence",
    "BackwardError", "Encoder",
    "CheckpointError", "checksum", "load_tensors", "save_tensors",
    "CONTEXT_CAP", "TextEncoder", "TextEncoderConfig", "TokenizedText", "Vocabulary",
    "FrameFeatureSequence", "ObjectEncoder", "ObjectEncoderConfig",
]
