"""Compact vision transformer backbone in numpy, with numba kernels.

Set ``LVT_BACKEND=numpy`` to bypass the compiled kernels and
``LVT_DETERMINISTIC=1`` to pin execution to a single thread.
"""

from lvt._backend import apply_env_threading, get_backend, set_backend, use_backend
from lvt.backbone import (
    Model,
    ModelConfig,
    StageSpec,
    build_model,
    count_params,
    estimate_flops,
    forward_classify,
    forward_features,
    load_model,
    save_weights,
)
from lvt.csa import CsaParams, csa_backward, csa_forward
from lvt.rasa import AsaParams, RasaConfig, asa_forward, rasa_backward, rasa_forward
from lvt.tensor import ConvSpec, NonFiniteError, ShapeError, count_macs
from lvt.weights import WeightFormatError, WeightStore

__version__ = "0.1.0"

apply_env_threading()

__all__ = [
    "AsaParams",
    "ConvSpec",
    "CsaParams",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "RasaConfig",
    "ShapeError",
    "StageSpec",
    "WeightFormatError",
    "WeightStore",
    "asa_forward",
    "build_model",
    "count_macs",
    "count_params",
    "csa_backward",
    "csa_forward",
    "estimate_flops",
    "forward_classify",
    "forward_features",
    "get_backend",
    "load_model",
    "rasa_backward",
    "rasa_forward",
    "save_weights",
    "set_backend",
    "use_backend",
]
