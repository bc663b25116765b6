"""Single-shot, audio-driven talking-head radiance fields on a numpy autodiff core."""
from .config import Config, load_config, parse_config
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = ["Config", "load_config", "parse_config", "ConfigError", "ContractError", "DimensionError",
           "FormatError", "Parameter", "Tensor", "backward", "no_grad"]
