"""capvit: a desk-scale single-transformer image captioner.

One transformer consumes an image-patch prefix plus caption tokens and is
trained with a text-only autoregressive loss. Prefix-LM attention (images
bidirectional, text causal), sigmoid-gated attention outputs, multimodal
rotary positions, exact per-sample masking over packed sequences, and
native-aspect-ratio tokenization; plus generation, patch readout, feature
extraction, and attention-sink diagnostics.
"""

__version__ = "0.1.0"

from .imaging import ImageSample, PatchGrid
from .model import ModelConfig, ModelParameters
from .packing import PackedSequence, TokenKind
from .text import ByteTokenizer
from .training import TrainConfig

__all__ = [
    "ImageSample", "PatchGrid", "ModelConfig", "ModelParameters",
    "PackedSequence", "TokenKind", "ByteTokenizer", "TrainConfig",
    "__version__",
]
