"""Desk-scale cacheable-conditioning diffusion demo.

Static class-embedding-conditioned reference branches, a block-masked joint
attention rule, and a lossless reference KV cache, with verification,
training, and benchmarking harnesses around them.
"""

import os as _os

# Single-threaded BLAS unless the caller says otherwise: the work units here
# are small matrices where thread fan-out costs more than it saves, and the
# benchmark suite needs stable timings. Export the variables to override.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import numkernel
from .denoiser import (
    DenoiserParams,
    ModelConfig,
    PseudoVae,
    ReferenceItem,
    SemiAttentionMask,
    build_semi_attention_mask,
    init_params,
    param_count,
)
from .refcache import ReferenceKVCache, cached_attention, concat_kv, precompute_cache
from .sampler import (
    NoiseSchedule,
    PersonCondition,
    SamplerConfig,
    cfg_combine,
    ddim_step,
    sample,
)

__all__ = [
    "numkernel",
    "DenoiserParams",
    "ModelConfig",
    "PseudoVae",
    "ReferenceItem",
    "SemiAttentionMask",
    "build_semi_attention_mask",
    "init_params",
    "param_count",
    "ReferenceKVCache",
    "cached_attention",
    "concat_kv",
    "precompute_cache",
    "NoiseSchedule",
    "PersonCondition",
    "SamplerConfig",
    "cfg_combine",
    "ddim_step",
    "sample",
]

__version__ = "0.1.0"
