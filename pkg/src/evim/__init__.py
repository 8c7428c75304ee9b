"""Hidden-state-mixer state-space token mixers and an efficient vision
backbone family, with a finite-difference-validated gradient engine and a
benchmark harness for the cost model."""

from .backbone import ModelConfig, count_flops, count_params, init_model, model_forward, preset
from .mixer import (
    MixerConfig,
    MixerParams,
    discretize,
    flops_of_mixer,
    hsm_ssd_layer,
    init_mixer_params,
    ncssd,
    ncssd_layer,
    ssd_causal,
    ssd_causal_scan,
)
from .ops import ContractError

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "MixerConfig",
    "MixerParams",
    "ModelConfig",
    "count_flops",
    "count_params",
    "discretize",
    "flops_of_mixer",
    "hsm_ssd_layer",
    "init_mixer_params",
    "init_model",
    "model_forward",
    "ncssd",
    "ncssd_layer",
    "preset",
    "ssd_causal",
    "ssd_causal_scan",
    "__version__",
]
