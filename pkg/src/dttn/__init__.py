"""Deep tree tensor network classifier built from Hadamard-product blocks, in NumPy."""

from .aim import AIM, aim_cost, branch_matrices, structured_tensor
from .config import DataConfig, RunConfig, TrainConfig, load_config, parse_config
from .errors import (
    CapacityError,
    ConfigurationError,
    DimensionError,
    DttnError,
    FormatError,
    NumericError,
    StateError,
)
from .model import (
    PRESETS,
    DttnModel,
    ModelConfig,
    build,
    count_flops_analytic,
    count_params_analytic,
    enumerate_params,
    predict,
    preset,
)

__version__ = "0.1.0"
