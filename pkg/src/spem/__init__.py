"""SPEM channel attention on a small numpy autograd stack."""

from .attention import ReweightVariant, SEAttention, SPEMAttention, excitation, recalibrate, reweight, spem_forward
from .autograd import Tensor, no_grad
from .backbone import AttentionConfig, NetworkConfig, build, param_count
from .pooling import (AdaptiveMix, FixedMix, GAP, MixCoefficient, global_avg_pool, global_max_pool,
                      global_min_pool, mix_lambda, mix_pool)

__all__ = ["AdaptiveMix", "AttentionConfig", "FixedMix", "GAP", "MixCoefficient", "NetworkConfig", "ReweightVariant",
           "SEAttention", "SPEMAttention", "Tensor", "build", "excitation", "global_avg_pool", "global_max_pool",
           "global_min_pool", "mix_lambda", "mix_pool", "no_grad", "param_count", "recalibrate", "reweight",
           "spem_forward"]
__version__ = "0.1.0"
