"""Bridge-attention CNNs on a self-contained tape-autodiff tensor core."""

from .tensor import (BatchSizeError, RunningStats, ShapeError, Tape, Tensor,
                     apply_attention, backward, batchnorm, conv2d,
                     cross_entropy, enable_malloc_reuse, global_avg_pool,
                     matmul, maxpool2d, no_grad, relu, sigmoid, sum_all, tape)
from .attention import BridgeAttention, BridgeSourceConfig, ConfigError, SqueezeExcite

__version__ = "0.1.0"
