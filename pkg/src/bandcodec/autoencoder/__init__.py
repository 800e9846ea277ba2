from .layers import Conv1d, ConvTranspose1d, MissingCacheError, Module, Snake
from .losses import mel_l1, multiscale_mel_loss
from .model import (
    VARIANTS,
    Codec,
    ConfigError,
    DecoderBlock,
    EncoderBlock,
    InvertedBottleneck,
    LatentTensor,
    ModelConfig,
    MRFBlock,
    ParameterSet,
    decode_latent,
    encode,
)
from .train import Adam, LossReport, NumericalError, forward_backward, train, train_step
from .checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
