"""Class-guided image-to-image diffusion for predicting cell images from a reference stain.

Subpackages: ``tensor`` (autodiff core with a compiled backend), ``profiling``
(features and evaluation metrics). Modules: ``schedule``, ``network``,
``diffusion``, ``synthdata``, ``config``, ``cli``.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DimensionError, GI2IError, InputError, NumericError

__all__ = [
    "__version__",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "GI2IError",
    "InputError",
    "NumericError",
]
