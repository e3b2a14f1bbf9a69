"""The frozen toy language model: vocabulary, transformer, decoding, training."""

from npi.lm.model import ContextError, FrozenModelError, LMConfig, TransformerLM, load_lm, lm_forward, save_lm
from npi.lm.sampling import SamplerConfig, generate, generate_batch
from npi.lm.train import DataError, LMTrainConfig, fine_tune, perplexity, pretrain, token_nll
from npi.lm.vocab import Vocabulary

__all__ = [
    "ContextError",
    "DataError",
    "FrozenModelError",
    "LMConfig",
    "LMTrainConfig",
    "SamplerConfig",
    "TransformerLM",
    "Vocabulary",
    "fine_tune",
    "generate",
    "generate_batch",
    "lm_forward",
    "load_lm",
    "save_lm",
    "perplexity",
    "pretrain",
    "token_nll",
]
